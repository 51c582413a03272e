//! Caption-keyword subset selection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{default_workers, parallel_map, CaptionCache, DatasetName, LabeledImageSet};
use crate::backends::Captioner;
use crate::{Error, Image, Result};

pub const DEFAULT_KEYWORDS: [&str; 3] = ["painting", "drawing", "art"];

/// Published selection: (class, image count, keyword-match percentage).
pub const MEDIUMS_REFERENCE: [(&str, usize, f64); 10] = [
    ("expressionism", 6054, 91.56),
    ("post-impressionism", 5832, 89.25),
    ("fauvism", 841, 96.08),
    ("abstract-expressionism", 2518, 89.95),
    ("na-ve-art-primitivism", 2148, 93.39),
    ("cubism", 2027, 91.61),
    ("synthetic-cubism", 197, 89.85),
    ("analytical-cubism", 105, 91.43),
    ("new-realism", 280, 96.07),
    ("action-painting", 93, 93.55),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetOptions {
    pub keywords: Vec<String>,
    pub top_n: usize,
    /// Extra attempts per image after a captioner failure.
    pub retries: usize,
    pub workers: usize,
}

impl Default for SubsetOptions {
    fn default() -> Self {
        Self {
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            top_n: 10,
            retries: 2,
            workers: default_workers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    pub style_class: String,
    pub quantity: usize,
    pub percentage: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    /// Ranked by percentage, best first.
    pub rows: Vec<SubsetRow>,
}

impl SubsetReport {
    pub fn selected(&self) -> Vec<String> {
        self.rows.iter().filter(|r| r.selected).map(|r| r.style_class.clone()).collect()
    }

    pub fn row(&self, class: &str) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.style_class == class)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=100.0).contains(&r.percentage) {
                return Err(Error::invalid(format!("{}: percentage {} outside [0, 100]", r.style_class, r.percentage)));
            }
        }
        Ok(())
    }

    /// `style_class,quantity,percentage,selected` with percentages to two decimals.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["style_class", "quantity", "percentage", "selected"])?;
        for r in &self.rows {
            w.write_record([
                r.style_class.clone(),
                r.quantity.to_string(),
                format!("{:.2}", r.percentage),
                r.selected.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv_string()?)?)
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(s.as_bytes());
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<SubsetRow>, _>>()?;
        let report = Self { rows };
        report.validate()?;
        Ok(report)
    }
}

pub fn reference_mediums_report() -> SubsetReport {
    SubsetReport {
        rows: MEDIUMS_REFERENCE
            .iter()
            .map(|&(c, q, p)| SubsetRow {
                style_class: c.to_string(),
                quantity: q,
                percentage: p,
                selected: true,
            })
            .collect(),
    }
}

/// True when any lowercase whitespace token of `caption` starts with a
/// keyword, so "paintings" matches "painting". Surrounding punctuation is
/// stripped from tokens first.
pub fn keyword_match(caption: &str, keywords: &[String]) -> bool {
    caption.split_whitespace().any(|tok| {
        let tok = tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        keywords.iter().any(|k| tok.starts_with(&k.to_lowercase()))
    })
}

fn caption_with_retry(captioner: &dyn Captioner, path: &Path, retries: usize) -> Result<String> {
    let image = Image::load(path)?;
    let mut last = None;
    for attempt in 0..=retries {
        match captioner.caption(&image) {
            Ok(c) => return Ok(c),
            Err(e) => {
                log::warn!("caption attempt {} for {} failed: {e}", attempt + 1, path.display());
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Captions every image (through `cache`), ranks classes by the fraction of
/// captions matching a keyword and keeps every image of the `top_n` best.
pub fn build_mediums_subset(
    dataset: &LabeledImageSet,
    captioner: &dyn Captioner,
    cache: &mut CaptionCache,
    opts: &SubsetOptions,
) -> Result<(LabeledImageSet, SubsetReport)> {
    if opts.top_n == 0 || opts.top_n > dataset.label_set.len() {
        return Err(Error::invalid(format!(
            "top_n {} outside 1..={}",
            opts.top_n,
            dataset.label_set.len()
        )));
    }
    if opts.keywords.is_empty() {
        return Err(Error::invalid("no keywords"));
    }
    let missing: Vec<_> = dataset
        .records
        .iter()
        .filter(|r| r.caption.is_none() && cache.get(&r.hash).is_none())
        .collect();
    let fresh = parallel_map(&missing, opts.workers, |r| caption_with_retry(captioner, &r.path, opts.retries));
    for (r, c) in missing.iter().zip(fresh) {
        cache.insert(&r.hash, &c?)?;
    }

    let mut captioned = dataset.clone();
    for r in &mut captioned.records {
        if r.caption.is_none() {
            r.caption = cache.get(&r.hash).map(str::to_string);
        }
    }

    let mut rows: Vec<SubsetRow> = captioned
        .label_set
        .iter()
        .map(|label| {
            let caps: Vec<&str> = captioned
                .records
                .iter()
                .filter(|r| &r.label == label)
                .map(|r| r.caption.as_deref().expect("captioned"))
                .collect();
            let hits = caps.iter().filter(|c| keyword_match(c, &opts.keywords)).count();
            SubsetRow {
                style_class: label.clone(),
                quantity: caps.len(),
                percentage: if caps.is_empty() { 0.0 } else { 100.0 * hits as f64 / caps.len() as f64 },
                selected: false,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.percentage
            .total_cmp(&a.percentage)
            .then(b.quantity.cmp(&a.quantity))
            .then(a.style_class.cmp(&b.style_class))
    });
    for r in rows.iter_mut().take(opts.top_n) {
        r.selected = true;
    }
    let report = SubsetReport { rows };

    let keep = report.selected();
    let label_set: Vec<String> = captioned.label_set.iter().filter(|l| keep.contains(l)).cloned().collect();
    let records = captioned.records.into_iter().filter(|r| keep.contains(&r.label)).collect();
    let name = if label_set.len() == DatasetName::Mediums.n_styles() {
        DatasetName::Mediums
    } else {
        DatasetName::Toy
    };
    let subset = LabeledImageSet::new(name, label_set, records)?;
    Ok((subset, report))
}
