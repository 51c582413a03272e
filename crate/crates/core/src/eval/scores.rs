//! Per-image metrics and their summary table.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::EvalSet;
use crate::backends::{AestheticScorer, ImageRewardScorer};
use crate::reward::Moments;
use crate::{Error, Image, Result};

pub trait ImageScorer {
    fn metric(&self) -> &str;
    fn score(&self, prompt: &str, image: &Image) -> Result<f64>;
}

pub struct AestheticMetric(pub Arc<dyn AestheticScorer>);

impl ImageScorer for AestheticMetric {
    fn metric(&self) -> &str {
        "aesthetic"
    }

    fn score(&self, _prompt: &str, image: &Image) -> Result<f64> {
        self.0.aesthetic_score(image)
    }
}

pub struct ImageRewardMetric(pub Arc<dyn ImageRewardScorer>);

impl ImageScorer for ImageRewardMetric {
    fn metric(&self) -> &str {
        "image_reward"
    }

    fn score(&self, prompt: &str, image: &Image) -> Result<f64> {
        self.0.image_reward_score(prompt, image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub metric: String,
    /// Successful scores in index order.
    pub values: Vec<f64>,
    /// Missing images plus scorer errors.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub metrics: Vec<MetricScores>,
}

pub fn score_eval_set(set: &EvalSet, scorers: &[&dyn ImageScorer]) -> Result<ModelScores> {
    let metrics = scorers
        .iter()
        .map(|s| {
            let mut values = Vec::with_capacity(set.len());
            let mut failures = 0;
            for (it, img) in set.manifest.items.iter().zip(&set.images) {
                let Some(img) = img else {
                    failures += 1;
                    continue;
                };
                match s.score(&it.prompt, img) {
                    Ok(v) if v.is_finite() => values.push(v),
                    Ok(v) => {
                        log::warn!("{}: non-finite {} score {v} at {}", set.model(), s.metric(), it.i);
                        failures += 1;
                    }
                    Err(e) => {
                        log::warn!("{}: {} failed at {}: {e}", set.model(), s.metric(), it.i);
                        failures += 1;
                    }
                }
            }
            MetricScores {
                metric: s.metric().to_string(),
                values,
                failures,
            }
        })
        .collect();
    Ok(ModelScores {
        model: set.model().to_string(),
        metrics,
    })
}

/// Mean and population standard deviation of one metric for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCell {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub failures: usize,
}

impl ScoreCell {
    pub fn from_values(values: &[f64], failures: usize) -> Self {
        let mut m = Moments::default();
        for &v in values {
            m.push(v);
        }
        Self {
            mean: if values.is_empty() { f64::NAN } else { m.mean },
            std: if values.is_empty() { f64::NAN } else { m.std() },
            n: values.len(),
            failures,
        }
    }
}

impl fmt::Display for ScoreCell {
    /// `mean ( std )`, two decimals unless a precision is given.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$} ( {:.p$} )", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub metrics: Vec<String>,
    pub rows: Vec<(String, Vec<ScoreCell>)>,
}

impl ScoreTable {
    pub fn from_scores(scores: &[ModelScores]) -> Result<Self> {
        let metrics: Vec<String> = scores
            .first()
            .map(|s| s.metrics.iter().map(|m| m.metric.clone()).collect())
            .unwrap_or_default();
        let mut rows = Vec::with_capacity(scores.len());
        for s in scores {
            let names: Vec<&str> = s.metrics.iter().map(|m| m.metric.as_str()).collect();
            if names != metrics.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::invalid(format!("{} was scored with different metrics", s.model)));
            }
            rows.push((
                s.model.clone(),
                s.metrics.iter().map(|m| ScoreCell::from_values(&m.values, m.failures)).collect(),
            ));
        }
        Ok(Self { metrics, rows })
    }

    pub fn cell(&self, model: &str, metric: &str) -> Option<&ScoreCell> {
        let j = self.metrics.iter().position(|m| m == metric)?;
        self.rows.iter().find(|(m, _)| m == model).map(|(_, c)| &c[j])
    }

    /// Display table: `model,<metric>...` with `mean ( std )` cells.
    pub fn to_display_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header)?;
        for (model, cells) in &self.rows {
            let mut rec = vec![model.clone()];
            rec.extend(cells.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        finish(w)
    }

    /// Long numeric table: `model,metric,mean,std,n,failures`.
    pub fn to_long_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "metric", "mean", "std", "n", "failures"])?;
        for (model, cells) in &self.rows {
            for (metric, c) in self.metrics.iter().zip(cells) {
                w.write_record([
                    model.clone(),
                    metric.clone(),
                    c.mean.to_string(),
                    c.std.to_string(),
                    c.n.to_string(),
                    c.failures.to_string(),
                ])?;
            }
        }
        finish(w)
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}
