//! CSV tables and small raster plots for an evaluation comparison group.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::scores::finish;
use super::{
    box_stats, check_pairing, possibility_space, score_eval_set, similarity_matrix, EmbeddingMode, EvalSet,
    ImageScorer, ModelScores, ScoreTable, SpaceOptions, SpacePoint,
};
use crate::backends::ImageEmbedder;
use crate::Result;

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub space: SpaceOptions,
    /// Skip the t-SNE projection, which dominates the runtime.
    pub skip_space: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            space: SpaceOptions::default(),
            skip_space: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub table: ScoreTable,
    pub files: Vec<PathBuf>,
}

fn colour(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}

/// One box per model: whiskers at min/max, box from q1 to q3, median bar.
pub fn render_box_plot(scores: &[ModelScores], metric: &str) -> Option<RgbImage> {
    let series: Vec<(usize, Vec<f64>)> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.metrics.iter().find(|m| m.metric == metric).map(|m| (i, m.values.clone())))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    if series.is_empty() {
        return None;
    }
    let lo = series.iter().flat_map(|(_, v)| v).copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().flat_map(|(_, v)| v).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let (slot, height, pad) = (60i64, 300i64, 20i64);
    let mut img = RgbImage::from_pixel((slot * series.len() as i64) as u32, height as u32, Rgb([255, 255, 255]));
    let ymap = |v: f64| pad + ((hi - v) / span * (height - 2 * pad) as f64).round() as i64;
    for (k, (i, v)) in series.iter().enumerate() {
        let b = box_stats(v).expect("nonempty");
        let c = colour(*i);
        let (x0, xm, x1) = (k as i64 * slot + 12, k as i64 * slot + slot / 2, (k as i64 + 1) * slot - 12);
        fill_rect(&mut img, xm, ymap(b.max), xm, ymap(b.min), Rgb([60, 60, 60]));
        fill_rect(&mut img, x0 + 8, ymap(b.max), x1 - 8, ymap(b.max), Rgb([60, 60, 60]));
        fill_rect(&mut img, x0 + 8, ymap(b.min), x1 - 8, ymap(b.min), Rgb([60, 60, 60]));
        fill_rect(&mut img, x0, ymap(b.q3), x1, ymap(b.q1), c);
        fill_rect(&mut img, x0, ymap(b.median) - 1, x1, ymap(b.median) + 1, Rgb([0, 0, 0]));
    }
    Some(img)
}

/// Scatter of the projected points, coloured by model in `models` order.
pub fn render_scatter(points: &[SpacePoint], models: &[String], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if points.is_empty() {
        return img;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let pad = 10.0;
    let inner = size as f64 - 2.0 * pad;
    let sx = inner / (x1 - x0).max(1e-9);
    let sy = inner / (y1 - y0).max(1e-9);
    for p in points {
        let m = models.iter().position(|m| m == &p.model).unwrap_or(0);
        let px = (pad + (p.x - x0) * sx).round() as i64;
        let py = (pad + (y1 - p.y) * sy).round() as i64;
        fill_rect(&mut img, px - 2, py - 2, px + 2, py + 2, colour(m));
    }
    img
}

fn write(path: PathBuf, contents: String, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(&path, contents)?;
    files.push(path);
    Ok(())
}

/// Scores, box plots, both similarity matrices and the possibility space for
/// a paired group of sets, written under `out_dir`.
pub fn write_report(
    out_dir: &Path,
    sets: &[EvalSet],
    scorers: &[&dyn ImageScorer],
    embedder: &dyn ImageEmbedder,
    opts: &ReportOptions,
) -> Result<ReportSummary> {
    check_pairing(sets.iter().map(|s| &s.manifest))?;
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let scores = sets
        .iter()
        .map(|s| score_eval_set(s, scorers))
        .collect::<Result<Vec<_>>>()?;
    let table = ScoreTable::from_scores(&scores)?;
    write(out_dir.join("scores.csv"), table.to_display_csv()?, &mut files)?;
    write(out_dir.join("scores_long.csv"), table.to_long_csv()?, &mut files)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "metric", "min", "q1", "median", "q3", "max"])?;
    for s in &scores {
        for m in &s.metrics {
            if let Some(b) = box_stats(&m.values) {
                w.write_record([
                    s.model.clone(),
                    m.metric.clone(),
                    b.min.to_string(),
                    b.q1.to_string(),
                    b.median.to_string(),
                    b.q3.to_string(),
                    b.max.to_string(),
                ])?;
            }
        }
    }
    write(out_dir.join("box_quartiles.csv"), finish(w)?, &mut files)?;
    for metric in &table.metrics {
        if let Some(img) = render_box_plot(&scores, metric) {
            let p = out_dir.join(format!("box_{metric}.png"));
            img.save(&p)?;
            files.push(p);
        }
    }

    if sets.len() >= 2 {
        for (mode, name) in [(EmbeddingMode::Content, "content"), (EmbeddingMode::Style, "style")] {
            let m = similarity_matrix(sets, embedder, mode)?;
            write(out_dir.join(format!("similarity_{name}.csv")), m.to_csv()?, &mut files)?;
        }
        if !opts.skip_space {
            let pts = possibility_space(sets, embedder, &opts.space)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for p in &pts {
                w.serialize(p)?;
            }
            write(out_dir.join("space.csv"), finish(w)?, &mut files)?;
            let models: Vec<String> = sets.iter().map(|s| s.model().to_string()).collect();
            let p = out_dir.join("space.png");
            render_scatter(&pts, &models, 400).save(&p)?;
            files.push(p);
        }
    }
    Ok(ReportSummary { table, files })
}
