use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{cluster_labels, ClassifierKind, StyleClassifier, StyleDistribution, EPS_DIST};
use crate::backends::ImageEmbedder;
use crate::{Error, Image, Result};

/// k centers in embedding space. Serialized as
/// `{"k", "dim", "seed", "inertia", "centers"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    #[serde(rename = "dim")]
    pub embed_dim: usize,
    #[serde(rename = "seed")]
    pub fit_seed: u64,
    pub inertia: f64,
    pub centers: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn new(centers: Vec<Vec<f64>>, fit_seed: u64, inertia: f64) -> Result<Self> {
        let model = Self {
            k: centers.len(),
            embed_dim: centers.first().map_or(0, Vec::len),
            fit_seed,
            inertia,
            centers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.centers.len() != self.k {
            return Err(Error::invalid(format!(
                "cluster model needs k >= 2 matching centers (k = {}, centers = {})",
                self.k,
                self.centers.len()
            )));
        }
        for c in &self.centers {
            if c.len() != self.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.embed_dim,
                    got: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cluster center".into()));
            }
        }
        if !(self.inertia >= 0.0) {
            return Err(Error::invalid("inertia must be nonnegative"));
        }
        Ok(())
    }

    pub fn distances(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.embed_dim,
                got: point.len(),
            });
        }
        Ok(self
            .centers
            .iter()
            .map(|c| c.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
    }
}

/// Softmax over inverse Euclidean distances to the centers, each distance
/// floored at [`EPS_DIST`].
pub fn kmeans_distribution(embedding: &[f64], clusters: &ClusterModel, tau: f64) -> Result<StyleDistribution> {
    let inv: Vec<f64> = clusters
        .distances(embedding)?
        .into_iter()
        .map(|d| 1.0 / d.max(EPS_DIST))
        .collect();
    StyleDistribution::from_scores(&inv, cluster_labels(clusters.k), tau)
}

pub struct KMeansClassifier {
    clusters: ClusterModel,
    embedder: Arc<dyn ImageEmbedder>,
    labels: Vec<String>,
    temperature: f64,
}

impl KMeansClassifier {
    pub fn new(clusters: ClusterModel, embedder: Arc<dyn ImageEmbedder>) -> Result<Self> {
        clusters.validate()?;
        if embedder.embed_dim() != clusters.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: clusters.embed_dim,
                got: embedder.embed_dim(),
            });
        }
        Ok(Self {
            labels: cluster_labels(clusters.k),
            clusters,
            embedder,
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }
}

impl StyleClassifier for KMeansClassifier {
    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Kmeans
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn classify(&self, image: &Image) -> Result<StyleDistribution> {
        let e = self.embedder.embed_image(image)?;
        kmeans_distribution(e.values(), &self.clusters, self.temperature)
    }
}
