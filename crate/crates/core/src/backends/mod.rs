//! Adapter layer over pretrained scoring and embedding models.
//!
//! Every other module talks to scorers through the role traits defined here
//! ([`SimilarityScorer`], [`ImageEmbedder`], [`Captioner`], [`AestheticScorer`],
//! [`ImageRewardScorer`]) and never names a concrete model. Backends are
//! constructed by name through a [`BackendRegistry`]; `"mock:<seed>"` selects
//! the deterministic [`MockBackend`].

mod mock;
mod registry;

use serde::{Deserialize, Serialize};

pub use mock::{MockBackend, DEFAULT_CAPTION_WORDS};
pub use registry::{BackendConfig, BackendFactory, BackendRegistry, BackendSet};

use crate::{Error, Image, Result};

/// Default embedding width, matching the CLIP ViT-L/14 image space.
pub const DEFAULT_EMBED_DIM: usize = 768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empty embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding entry".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(cosine(&self.0, &other.0))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Similarity,
    Embedder,
    Captioner,
    Aesthetic,
    ImageReward,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub embed_dim: usize,
    pub deterministic: bool,
    pub kind: BackendKind,
    /// Native scale of [`SimilarityScorer::similarity`], recorded in run metadata.
    pub similarity_scale: String,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("backend name must be nonempty"));
        }
        if matches!(self.kind, BackendKind::Embedder | BackendKind::Mock) && self.embed_dim == 0 {
            return Err(Error::invalid("embedder backends need embed_dim > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(pub f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub trait SimilarityScorer: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn similarity(&self, text: &str, image: &Image) -> Result<SimilarityScore>;
}

/// Image embedder with two auxiliary channels used by the evaluation
/// harness: a content vector and a style vector.
pub trait ImageEmbedder: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector>;
    fn embed_content(&self, image: &Image) -> Result<EmbeddingVector>;
    fn embed_style(&self, image: &Image) -> Result<EmbeddingVector>;

    fn embed_dim(&self) -> usize {
        self.descriptor().embed_dim
    }
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &Image) -> Result<String>;
}

pub trait AestheticScorer: Send + Sync {
    fn aesthetic_score(&self, image: &Image) -> Result<f64>;
}

pub trait ImageRewardScorer: Send + Sync {
    fn image_reward_score(&self, text: &str, image: &Image) -> Result<f64>;
}

/// A constructed backend. Each role accessor returns the backend as that
/// role's trait object, or [`Error::BackendUnavailable`] when the backend does
/// not provide it.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn as_similarity(self: std::sync::Arc<Self>) -> Result<std::sync::Arc<dyn SimilarityScorer>> {
        Err(unsupported(self.descriptor(), "similarity"))
    }
    fn as_embedder(self: std::sync::Arc<Self>) -> Result<std::sync::Arc<dyn ImageEmbedder>> {
        Err(unsupported(self.descriptor(), "embedder"))
    }
    fn as_captioner(self: std::sync::Arc<Self>) -> Result<std::sync::Arc<dyn Captioner>> {
        Err(unsupported(self.descriptor(), "captioner"))
    }
    fn as_aesthetic(self: std::sync::Arc<Self>) -> Result<std::sync::Arc<dyn AestheticScorer>> {
        Err(unsupported(self.descriptor(), "aesthetic"))
    }
    fn as_image_reward(self: std::sync::Arc<Self>) -> Result<std::sync::Arc<dyn ImageRewardScorer>> {
        Err(unsupported(self.descriptor(), "image_reward"))
    }
}

fn unsupported(desc: &BackendDescriptor, role: &str) -> Error {
    Error::BackendUnavailable(format!("backend `{}` does not provide the {role} role", desc.name))
}
