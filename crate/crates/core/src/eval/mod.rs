//! Paired-seed evaluation sets, scoring, similarity matrices and the
//! possibility-space projection.

mod report;
mod scores;
mod similarity;
mod space;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::can::Generator;
use crate::diffusion::{sample_batch, LatentCodec, NoisePredictor, NoiseSchedule, SampleRequest, SamplerConfig};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Image, Result};

pub use report::{render_box_plot, render_scatter, write_report, ReportOptions, ReportSummary};
pub use scores::{
    box_stats, score_eval_set, AestheticMetric, BoxStats, ImageRewardMetric, ImageScorer, MetricScores, ModelScores,
    ScoreCell, ScoreTable,
};
pub use similarity::{similarity_from_embeddings, similarity_matrix, EmbeddingMode, SimilarityMatrix};
pub use space::{pca, possibility_space, possibility_space_from_embeddings, silhouette, tsne, Pca, SpaceOptions, SpacePoint};

pub const DEFAULT_EVAL_SIZE: usize = 100;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Anything that turns a (prompt, seed) pair into an image.
pub trait EvalModel {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str, seed: u64) -> Result<Image>;
}

/// A diffusion policy sampled with DDIM and decoded through a codec.
pub struct DiffusionModel {
    pub name: String,
    pub policy: Box<dyn NoisePredictor>,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub codec: Arc<dyn LatentCodec>,
    pub context_of: Box<dyn Fn(&str) -> Vec<f64>>,
}

impl EvalModel for DiffusionModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Image> {
        let req = SampleRequest {
            prompt: prompt.to_string(),
            context: (self.context_of)(prompt),
            seed,
        };
        let tr = sample_batch(self.policy.as_ref(), &self.schedule, &self.sampler, &[req])?;
        self.codec.decode_image(&tr[0].final_tensor(self.policy.device())?)
    }
}

/// Unconditional CAN generator; the prompt is ignored.
pub struct CanModel {
    pub name: String,
    pub generator: Generator,
}

impl EvalModel for CanModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, _prompt: &str, seed: u64) -> Result<Image> {
        let z = self.generator.sample_noise(1, &mut seeded(seed))?;
        Image::from_signed_chw(&self.generator.forward(&z, false)?.get(0)?)
    }
}

/// Closure-backed model, mostly for tests and mock pipelines.
pub struct FnModel<F> {
    pub name: String,
    pub f: F,
}

impl<F: Fn(&str, u64) -> Result<Image>> EvalModel for FnModel<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Image> {
        (self.f)(prompt, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub i: usize,
    pub prompt: String,
    pub seed: u64,
    /// Image file relative to the set directory; `None` when sampling failed.
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub model: String,
    pub base_seed: u64,
    pub items: Vec<ManifestItem>,
}

impl EvalManifest {
    pub fn validate(&self) -> Result<()> {
        for (k, it) in self.items.iter().enumerate() {
            if it.i != k {
                return Err(Error::invalid(format!("manifest item {k} carries index {}", it.i)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub manifest: EvalManifest,
    /// Aligned with `manifest.items`; `None` marks a failed sample.
    pub images: Vec<Option<Image>>,
}

impl EvalSet {
    pub fn model(&self) -> &str {
        &self.manifest.model
    }

    pub fn len(&self) -> usize {
        self.manifest.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.items.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.images.iter().filter(|i| i.is_none()).count()
    }

    /// Writes `NNNN.png` files and the manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (it, img) in self.manifest.items.iter().zip(&self.images) {
            if let (Some(file), Some(img)) = (&it.file, img) {
                img.save_png(&dir.join(file))?;
            }
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: EvalManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        manifest.validate()?;
        let images = manifest
            .items
            .iter()
            .map(|it| it.file.as_ref().map(|f| Image::load(&dir.join(f))).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }
}

/// The shared (prompt, seed) sequence: prompts cycle, seeds derive from `base_seed` and the index.
pub fn eval_pairs(prompts: &[String], base_seed: u64, n: usize) -> Result<Vec<(String, u64)>> {
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one prompt"));
    }
    Ok((0..n)
        .map(|i| (prompts[i % prompts.len()].clone(), derive_seed(base_seed, &[i as u64])))
        .collect())
}

/// Samples `n` images. Failures are recorded per index and do not stop the run.
pub fn generate_eval_set(model: &dyn EvalModel, prompts: &[String], base_seed: u64, n: usize) -> Result<EvalSet> {
    let mut items = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for (i, (prompt, seed)) in eval_pairs(prompts, base_seed, n)?.into_iter().enumerate() {
        let (file, error, image) = match model.generate(&prompt, seed) {
            Ok(img) => (Some(format!("{i:04}.png")), None, Some(img)),
            Err(e) => {
                log::warn!("{}: sample {i} failed: {e}", model.name());
                (None, Some(e.to_string()), None)
            }
        };
        items.push(ManifestItem {
            i,
            prompt,
            seed,
            file,
            error,
        });
        images.push(image);
    }
    Ok(EvalSet {
        manifest: EvalManifest {
            model: model.name().to_string(),
            base_seed,
            items,
        },
        images,
    })
}

/// Every manifest must carry the same (prompt, seed) at every index.
pub fn check_pairing<'a>(manifests: impl IntoIterator<Item = &'a EvalManifest>) -> Result<()> {
    let mut it = manifests.into_iter();
    let Some(first) = it.next() else {
        return Ok(());
    };
    for m in it {
        if m.items.len() != first.items.len() {
            return Err(Error::PairingMismatch(format!(
                "{} has {} items, {} has {}",
                first.model,
                first.items.len(),
                m.model,
                m.items.len()
            )));
        }
        for (a, b) in first.items.iter().zip(&m.items) {
            if a.prompt != b.prompt || a.seed != b.seed {
                return Err(Error::PairingMismatch(format!(
                    "index {}: {} has ({:?}, {}), {} has ({:?}, {})",
                    a.i, first.model, a.prompt, a.seed, m.model, b.prompt, b.seed
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Image whose pixels depend on (prompt, seed, model tag).
    pub fn toy_model(name: &str, tag: f32) -> FnModel<impl Fn(&str, u64) -> Result<Image>> {
        FnModel {
            name: name.to_string(),
            f: move |prompt: &str, seed: u64| {
                let p = prompt.len() as f32;
                Image::from_fn(8, 8, |y, x, c| {
                    ((seed % 97) as f32 / 97.0 + tag * (x as f32 / 8.0) + p * 0.01 * (y + c) as f32) % 1.0
                })
            },
        }
    }

    pub fn prompts() -> Vec<String> {
        vec!["painting".into(), "drawing".into(), "art".into()]
    }

    #[test]
    fn same_base_seed_pairs_every_index() {
        let a = generate_eval_set(&toy_model("a", 0.1), &prompts(), 7, 10).unwrap();
        let b = generate_eval_set(&toy_model("b", 0.7), &prompts(), 7, 10).unwrap();
        check_pairing([&a.manifest, &b.manifest]).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.manifest.items[4].prompt, "drawing");
        let c = generate_eval_set(&toy_model("c", 0.1), &prompts(), 8, 10).unwrap();
        assert!(matches!(check_pairing([&a.manifest, &c.manifest]), Err(Error::PairingMismatch(_))));
        let short = generate_eval_set(&toy_model("d", 0.1), &prompts(), 7, 9).unwrap();
        assert!(check_pairing([&a.manifest, &short.manifest]).is_err());
    }

    #[test]
    fn failures_are_recorded_and_run_continues() {
        let m = FnModel {
            name: "flaky".into(),
            f: |_: &str, seed: u64| {
                if seed % 2 == 0 {
                    Err(Error::BackendUnavailable("boom".into()))
                } else {
                    Ok(Image::zeros(4, 4))
                }
            },
        };
        let set = generate_eval_set(&m, &prompts(), 0, 20).unwrap();
        assert_eq!(set.len(), 20);
        assert!(set.failures() > 0 && set.failures() < 20);
        for (it, img) in set.manifest.items.iter().zip(&set.images) {
            assert_eq!(it.file.is_some(), img.is_some());
            assert_eq!(it.error.is_some(), img.is_none());
        }
    }

    #[test]
    fn save_load_round_trip_and_byte_identical_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let model = toy_model("m", 0.3);
        let a = generate_eval_set(&model, &prompts(), 7, 5).unwrap();
        a.save(&dir.path().join("a")).unwrap();
        generate_eval_set(&model, &prompts(), 7, 5).unwrap().save(&dir.path().join("b")).unwrap();
        let ma = std::fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let back = EvalSet::load(&dir.path().join("a")).unwrap();
        assert_eq!(back.manifest, a.manifest);
        let json: serde_json::Value = serde_json::from_slice(&ma).unwrap();
        assert_eq!(json["items"][0]["file"], "0000.png");
        assert!(json["items"][0].get("error").is_none());
    }
}
