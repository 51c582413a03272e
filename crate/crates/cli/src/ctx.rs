use std::path::{Path, PathBuf};

use creative_core::backends::{BackendRegistry, BackendSet};
use creative_core::config::{prepare_output_dir, RunConfig};
use creative_core::data::{DatasetName, FULL_STYLE_LABELS, MEDIUMS_REFERENCE};
use creative_core::ddpo::toy::TOY_STYLE_LABELS;
use creative_core::{Error, Result};
use serde::Serialize;

use crate::GlobalArgs;

/// Written next to every artifact so it can be traced back to its config.
pub const RUN_FILE: &str = "run.json";

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    config_hash: &'a str,
    version: &'a str,
}

/// Resolved configuration shared by every subcommand.
pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(g: &GlobalArgs) -> Result<Self> {
        let mut overrides = g.overrides.clone();
        if let Some(s) = g.seed {
            overrides.extend([format!("seed={s}"), format!("ddpo.seed={s}"), format!("can.seed={s}")]);
        }
        let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
        let hash = cfg.hash()?;
        Ok(Self {
            cfg,
            hash,
            out: g.out.clone(),
        })
    }

    /// Relative paths are taken relative to the output root.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    /// Creates `out/<sub>` atomically with the config snapshot and run info.
    pub fn prepare(&self, sub: &str, command: &str) -> Result<PathBuf> {
        let dir = self.out.join(sub);
        prepare_output_dir(&dir, &self.cfg)?;
        let info = RunInfo {
            command,
            config_hash: &self.hash,
            version: env!("CARGO_PKG_VERSION"),
        };
        write_json(&dir.join(RUN_FILE), &info)?;
        Ok(dir)
    }

    pub fn backends(&self) -> Result<BackendSet> {
        BackendRegistry::with_defaults().build_set(&self.cfg.backend)
    }

    /// `--root`, else `data.root`.
    pub fn dataset_root(&self, arg: Option<&Path>) -> Result<PathBuf> {
        arg.or(self.cfg.data.root.as_deref())
            .map(|p| self.path(p))
            .ok_or_else(|| Error::Config("no dataset root: pass --root or set data.root".into()))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Built-in label set of a dataset name.
pub fn default_labels(dataset: DatasetName) -> Vec<String> {
    match dataset {
        DatasetName::Full => FULL_STYLE_LABELS.iter().map(|s| s.to_string()).collect(),
        DatasetName::Mediums => MEDIUMS_REFERENCE.iter().map(|r| r.0.to_string()).collect(),
        DatasetName::Toy => TOY_STYLE_LABELS.iter().map(|s| s.to_string()).collect(),
    }
}

/// The single file in `dir` named `<prefix>*.safetensors`.
pub fn find_weights(dir: &Path, prefix: &str) -> Result<PathBuf> {
    let mut hits = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with(prefix) && name.ends_with(".safetensors") {
            hits.push(p);
        }
    }
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => Err(Error::invalid(format!("no {prefix}*.safetensors in {}", dir.display()))),
        n => Err(Error::invalid(format!("{n} {prefix}*.safetensors files in {}", dir.display()))),
    }
}
