//! Binary run archives of sampled trajectories, plus PNG export.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::{LatentCodec, Trajectory};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArchive {
    pub config_hash: String,
    pub trajectories: Vec<Trajectory>,
}

/// Writes trajectories; per-step states are dropped unless `keep_steps`.
pub fn write_archive(path: &Path, config_hash: &str, trajectories: &[Trajectory], keep_steps: bool) -> Result<()> {
    let trajectories = trajectories
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if !keep_steps {
                t.steps.clear();
            }
            t
        })
        .collect();
    let archive = RunArchive {
        config_hash: config_hash.to_string(),
        trajectories,
    };
    bincode::serialize_into(BufWriter::new(File::create(path)?), &archive)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<RunArchive> {
    Ok(bincode::deserialize_from(BufReader::new(File::open(path)?))?)
}

/// Decodes every final sample and writes `<dir>/<index:04>.png`.
pub fn save_final_images(dir: &Path, trajectories: &[Trajectory], codec: &dyn LatentCodec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let dev = Device::Cpu;
    trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let image = codec.decode_image(&tr.final_tensor(&dev)?)?;
            let path = dir.join(format!("{i:04}.png"));
            image.save_png(&path)?;
            Ok(path)
        })
        .collect()
}
