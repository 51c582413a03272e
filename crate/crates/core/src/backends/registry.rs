use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    AestheticScorer, Backend, Captioner, ImageEmbedder, ImageRewardScorer, MockBackend, SimilarityScorer,
    DEFAULT_EMBED_DIM,
};
use crate::{Error, Result};

/// Builds a backend from the argument part of a `scheme:args` selector.
pub type BackendFactory = Arc<dyn Fn(&str) -> Result<Arc<dyn Backend>> + Send + Sync>;

/// Name-keyed backend constructors.
///
/// Built-in schemes:
/// - `mock:<seed>[:<dim>]`: the deterministic mock (dim defaults to 768);
/// - `external:<checkpoint>`: a placeholder for pretrained models. No runtime
///   for those is linked into this build, so construction fails with
///   [`Error::BackendUnavailable`]; register a factory to provide one.
#[derive(Clone)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("mock", Arc::new(parse_mock));
        r.register(
            "external",
            Arc::new(|arg: &str| {
                Err(Error::BackendUnavailable(format!(
                    "no pretrained-model runtime is linked for checkpoint `{arg}`"
                )))
            }),
        );
        r
    }

    pub fn register(&mut self, scheme: impl Into<String>, factory: BackendFactory) {
        self.factories.insert(scheme.into(), factory);
    }

    pub fn schemes(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn resolve(&self, selector: &str) -> Result<Arc<dyn Backend>> {
        let (scheme, arg) = selector.split_once(':').unwrap_or((selector, ""));
        let factory = self
            .factories
            .get(scheme)
            .ok_or_else(|| Error::Config(format!("unknown backend scheme `{scheme}` in `{selector}`")))?;
        let backend = factory(arg)?;
        backend.descriptor().validate()?;
        Ok(backend)
    }

    pub fn build_set(&self, config: &BackendConfig) -> Result<BackendSet> {
        Ok(BackendSet {
            similarity: self.resolve(&config.similarity)?.as_similarity()?,
            embedder: self.resolve(&config.embedder)?.as_embedder()?,
            captioner: self.resolve(&config.captioner)?.as_captioner()?,
            aesthetic: self.resolve(&config.aesthetic)?.as_aesthetic()?,
            image_reward: self.resolve(&config.image_reward)?.as_image_reward()?,
        })
    }
}

fn parse_mock(arg: &str) -> Result<Arc<dyn Backend>> {
    let mut parts = arg.split(':');
    let seed = match parts.next() {
        Some("") | None => 0,
        Some(s) => s
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("mock seed `{s}` is not an integer")))?,
    };
    let dim = match parts.next() {
        None => DEFAULT_EMBED_DIM,
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("mock dim `{s}` is not an integer")))?,
    };
    Ok(Arc::new(MockBackend::new(seed, dim)?))
}

/// Selectors for each backend role (`backend.*` config keys).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub similarity: String,
    pub embedder: String,
    pub captioner: String,
    pub aesthetic: String,
    pub image_reward: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let m = "mock:0".to_string();
        Self {
            similarity: m.clone(),
            embedder: m.clone(),
            captioner: m.clone(),
            aesthetic: m.clone(),
            image_reward: m,
        }
    }
}

#[derive(Clone)]
pub struct BackendSet {
    pub similarity: Arc<dyn SimilarityScorer>,
    pub embedder: Arc<dyn ImageEmbedder>,
    pub captioner: Arc<dyn Captioner>,
    pub aesthetic: Arc<dyn AestheticScorer>,
    pub image_reward: Arc<dyn ImageRewardScorer>,
}

impl BackendSet {
    pub fn mock(seed: u64, dim: usize) -> Result<Self> {
        let m = Arc::new(MockBackend::new(seed, dim)?);
        Ok(Self {
            similarity: m.clone(),
            embedder: m.clone(),
            captioner: m.clone(),
            aesthetic: m.clone(),
            image_reward: m,
        })
    }
}
