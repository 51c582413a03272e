//! Append-only JSON-lines caches keyed by image hash.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::Result;

/// Environment variable naming the directory for caption and embedding caches.
pub const CACHE_DIR_ENV: &str = "CREATIVE_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    hash: String,
    caption: String,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    hash: String,
    embedding: Vec<f64>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Captions as `{"hash","caption"}` lines. Without a path the cache lives in memory only.
#[derive(Debug, Default)]
pub struct CaptionCache {
    path: Option<PathBuf>,
    entries: HashMap<String, String>,
}

impl CaptionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let entries = read_lines::<CaptionLine>(path)?
            .into_iter()
            .map(|l| (l.hash, l.caption))
            .collect();
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    /// `$CREATIVE_CACHE_DIR/captions.jsonl`, or an in-memory cache when unset.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Self::open(&Path::new(&dir).join("captions.jsonl")),
            None => Ok(Self::in_memory()),
        }
    }

    pub fn get(&self, hash: &str) -> Option<&str> {
        self.entries.get(hash).map(String::as_str)
    }

    pub fn insert(&mut self, hash: &str, caption: &str) -> Result<()> {
        if self.entries.get(hash).map(String::as_str) == Some(caption) {
            return Ok(());
        }
        if let Some(p) = &self.path {
            append_line(
                p,
                &CaptionLine {
                    hash: hash.to_string(),
                    caption: caption.to_string(),
                },
            )?;
        }
        self.entries.insert(hash.to_string(), caption.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Embeddings as `{"hash","embedding"}` lines, one file per backend.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let entries = read_lines::<EmbeddingLine>(path)?
            .into_iter()
            .map(|l| (l.hash, l.embedding))
            .collect();
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn from_env(backend: &str) -> Result<Self> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) => Self::open(&Path::new(&dir).join(format!("embeddings-{backend}.jsonl"))),
            None => Ok(Self::in_memory()),
        }
    }

    pub fn get(&self, hash: &str) -> Option<&[f64]> {
        self.entries.get(hash).map(Vec::as_slice)
    }

    pub fn insert(&mut self, hash: &str, embedding: &[f64]) -> Result<()> {
        if self.entries.contains_key(hash) {
            return Ok(());
        }
        if let Some(p) = &self.path {
            append_line(
                p,
                &EmbeddingLine {
                    hash: hash.to_string(),
                    embedding: embedding.to_vec(),
                },
            )?;
        }
        self.entries.insert(hash.to_string(), embedding.to_vec());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c/captions.jsonl");
        let mut c = CaptionCache::open(&p).unwrap();
        c.insert("ab", "a painting").unwrap();
        c.insert("ab", "a painting").unwrap();
        c.insert("cd", "a photo").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        let first = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert_eq!(first, r#"{"hash":"ab","caption":"a painting"}"#);
        let c = CaptionCache::open(&p).unwrap();
        assert_eq!(c.get("ab"), Some("a painting"));
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn embedding_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let mut c = EmbeddingCache::open(&p).unwrap();
        c.insert("h", &[1.0, -0.5]).unwrap();
        assert_eq!(EmbeddingCache::open(&p).unwrap().get("h"), Some(&[1.0, -0.5][..]));
    }
}
