//! Dataset ingestion, label sets, the caption-driven mediums subset and
//! k-means over image embeddings.

mod cache;
mod kmeans;
mod mediums;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Image, Result};

pub use cache::{CaptionCache, EmbeddingCache, CACHE_DIR_ENV};
pub use kmeans::{fit_clusters, kmeans, KMeansConfig, KMeansFit};
pub use mediums::{
    build_mediums_subset, keyword_match, reference_mediums_report, SubsetOptions, SubsetReport, SubsetRow,
    DEFAULT_KEYWORDS, MEDIUMS_REFERENCE,
};

/// The 27 style classes of the full art dataset.
pub const FULL_STYLE_LABELS: [&str; 27] = [
    "contemporary-realism",
    "art-nouveau-modern",
    "abstract-expressionism",
    "northern-renaissance",
    "mannerism-late-renaissance",
    "early-renaissance",
    "realism",
    "action-painting",
    "color-field-painting",
    "pop-art",
    "new-realism",
    "pointillism",
    "expressionism",
    "analytical-cubism",
    "symbolism",
    "fauvism",
    "minimalism",
    "cubism",
    "romanticism",
    "ukiyo-e",
    "high-renaissance",
    "synthetic-cubism",
    "baroque",
    "post-impressionism",
    "impressionism",
    "rococo",
    "na-ve-art-primitivism",
];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Full,
    Mediums,
    Toy,
}

impl DatasetName {
    pub fn n_styles(self) -> usize {
        match self {
            DatasetName::Full => 27,
            DatasetName::Mediums => 10,
            DatasetName::Toy => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetName::Full => "full",
            DatasetName::Mediums => "mediums",
            DatasetName::Toy => "toy",
        }
    }

    /// Required label-set size, if the name pins one.
    fn required_labels(self) -> Option<usize> {
        match self {
            DatasetName::Toy => None,
            other => Some(other.n_styles()),
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "mediums" | "med" => Ok(Self::Mediums),
            "toy" => Ok(Self::Toy),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

impl std::fmt::Display for DatasetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub label: String,
    /// Hex sha256 of the file bytes; keys the caption and embedding caches.
    pub hash: String,
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImageSet {
    pub name: DatasetName,
    pub label_set: Vec<String>,
    pub records: Vec<ImageRecord>,
    /// Files that looked like images but could not be decoded.
    pub skipped: usize,
}

impl LabeledImageSet {
    pub fn new(name: DatasetName, label_set: Vec<String>, records: Vec<ImageRecord>) -> Result<Self> {
        let set = Self {
            name,
            label_set,
            records,
            skipped: 0,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_set.is_empty() {
            return Err(Error::Dataset("empty label set".into()));
        }
        let mut seen = BTreeSet::new();
        for l in &self.label_set {
            if l.trim().is_empty() {
                return Err(Error::Dataset("labels must be nonempty".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if let Some(n) = self.name.required_labels() {
            if self.label_set.len() != n {
                return Err(Error::Dataset(format!(
                    "{} dataset needs {n} labels, found {}",
                    self.name,
                    self.label_set.len()
                )));
            }
        }
        for r in &self.records {
            if !self.label_set.contains(&r.label) {
                return Err(Error::Dataset(format!("record label `{}` not in the label set", r.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Label indices aligned with `records`.
    pub fn label_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| self.label_index(&r.label).expect("validated label"))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<(String, usize)> {
        self.label_set
            .iter()
            .map(|l| (l.clone(), self.records.iter().filter(|r| &r.label == l).count()))
            .collect()
    }

    /// Digest over record order, labels and file hashes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.label_set {
            h.update(l.as_bytes());
            h.update([0]);
        }
        for r in &self.records {
            h.update(r.label.as_bytes());
            h.update([0]);
            h.update(r.hash.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Loads, resizes and stacks every image as `(N, 3, dim, dim)` in `[-1, 1]`.
    pub fn to_tensor(&self, dim: usize, device: &Device) -> Result<(Tensor, Vec<usize>)> {
        let images = self
            .records
            .iter()
            .map(|r| Image::load(&r.path)?.resize(dim, dim)?.to_signed_chw(device))
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::Dataset("no images to stack".into()));
        }
        Ok((Tensor::stack(&images, 0)?, self.label_indices()))
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Enumerates `root/<label>/<image>` in sorted path order. Files whose
/// header cannot be decoded are skipped and counted.
pub fn load_dataset(root: &Path, name: DatasetName) -> Result<LabeledImageSet> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut labels = BTreeSet::new();
    let mut records = Vec::new();
    let mut skipped = 0;
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let label = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non-UTF-8 label directory {}", dir.display())))?
            .to_string();
        let mut any = false;
        for path in sorted_entries(&dir)? {
            if !is_image_file(&path) {
                continue;
            }
            if image::image_dimensions(&path).is_err() {
                log::warn!("skipping unreadable image {}", path.display());
                skipped += 1;
                continue;
            }
            records.push(ImageRecord {
                hash: file_hash(&path)?,
                path,
                label: label.clone(),
                caption: None,
            });
            any = true;
        }
        if any {
            labels.insert(label);
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("no readable images under {}", root.display())));
    }
    let mut set = LabeledImageSet::new(name, labels.into_iter().collect(), records)?;
    set.skipped = skipped;
    Ok(set)
}

/// Runs `f` over `items` on a bounded pool of scoped threads, preserving order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub(crate) fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// `root/<label>/<i>.png` with solid colours per label.
    pub fn write_tree(root: &Path, labels: &[(&str, usize, [f32; 3])]) {
        for (label, n, rgb) in labels {
            let dir = root.join(label);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..*n {
                let img = Image::from_fn(8, 8, |y, x, c| (rgb[c] + 0.01 * ((x + y + i) % 3) as f32).min(1.0)).unwrap();
                img.save_png(&dir.join(format!("{i}.png"))).unwrap();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::write_tree;
    use super::*;

    #[test]
    fn two_labels_three_images() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("b", 3, [0.9, 0.1, 0.1]), ("a", 3, [0.1, 0.1, 0.9])]);
        std::fs::write(dir.path().join("a/notes.txt"), "x").unwrap();
        std::fs::write(dir.path().join("a/broken.png"), "not a png").unwrap();
        let set = load_dataset(dir.path(), DatasetName::Toy).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.label_set, vec!["a", "b"]);
        assert_eq!(set.skipped, 1);
        assert_eq!(set.label_indices(), vec![0, 0, 0, 1, 1, 1]);
        let again = load_dataset(dir.path(), DatasetName::Toy).unwrap();
        assert_eq!(set, again);
        assert_eq!(set.content_hash(), again.content_hash());
        let (x, y) = set.to_tensor(4, &Device::Cpu).unwrap();
        assert_eq!(x.dims(), &[6, 3, 4, 4]);
        assert_eq!(y.len(), 6);
    }

    #[test]
    fn missing_and_empty_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join("nope"), DatasetName::Toy), Err(Error::Dataset(_))));
        assert!(matches!(load_dataset(dir.path(), DatasetName::Toy), Err(Error::Dataset(_))));
    }

    #[test]
    fn named_sets_check_their_label_count() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &[("a", 1, [0.5; 3]), ("b", 1, [0.2; 3])]);
        assert!(load_dataset(dir.path(), DatasetName::Full).is_err());
        let full: Vec<String> = FULL_STYLE_LABELS.iter().map(|s| s.to_string()).collect();
        assert!(LabeledImageSet::new(DatasetName::Full, full, vec![]).is_ok());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(parallel_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
