//! Deterministic offline backend: a seeded random projection of downsampled
//! pixel statistics. Text and images share one projection space, so mock
//! similarity is a plain cosine.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::{
    cosine, AestheticScorer, Backend, BackendDescriptor, BackendKind, Captioner, EmbeddingVector,
    ImageEmbedder, ImageRewardScorer, SimilarityScore, SimilarityScorer,
};
use crate::rng::{normal_vec, seeded, stable_hash};
use crate::{Error, Image, Result};

pub const DEFAULT_CAPTION_WORDS: &[&str] = &["painting", "drawing", "photograph", "illustration"];
const CAPTION_SUBJECTS: &[&str] = &["a landscape", "a person", "abstract shapes", "a city street", "flowers"];

const GRID: usize = 4;
const CONTENT_FEATURES: usize = GRID * GRID * 3;
const STYLE_FEATURES: usize = 12;
const FEATURES: usize = CONTENT_FEATURES + STYLE_FEATURES + 1;

/// Row-major `rows x cols` projection.
#[derive(Debug, Clone)]
struct Projection {
    cols: usize,
    weights: Vec<f64>,
}

impl Projection {
    fn seeded(rng: &mut impl Rng, rows: usize, cols: usize) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let weights = normal_vec(rng, rows * cols).into_iter().map(|w| w * scale).collect();
        Self { cols, weights }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    descriptor: BackendDescriptor,
    seed: u64,
    joint: Projection,
    content: Projection,
    style: Projection,
    aesthetic_direction: Vec<f64>,
    reward_direction: Vec<f64>,
    caption_words: Vec<String>,
    pinned_text: BTreeMap<String, EmbeddingVector>,
}

impl MockBackend {
    pub fn new(seed: u64, embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::invalid("mock embed_dim must be positive"));
        }
        let mut rng = seeded(seed);
        let joint = Projection::seeded(&mut rng, embed_dim, FEATURES);
        let content = Projection::seeded(&mut rng, embed_dim, CONTENT_FEATURES + 1);
        let style = Projection::seeded(&mut rng, embed_dim, STYLE_FEATURES + 1);
        let aesthetic_direction = unit(normal_vec(&mut rng, embed_dim));
        let reward_direction = unit(normal_vec(&mut rng, embed_dim));
        Ok(Self {
            descriptor: BackendDescriptor {
                name: format!("mock:{seed}"),
                embed_dim,
                deterministic: true,
                kind: BackendKind::Mock,
                similarity_scale: "cosine".into(),
            },
            seed,
            joint,
            content,
            style,
            aesthetic_direction,
            reward_direction,
            caption_words: DEFAULT_CAPTION_WORDS.iter().map(|s| s.to_string()).collect(),
            pinned_text: BTreeMap::new(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Restricts mock captions to the given medium words.
    pub fn with_caption_words<I, S>(mut self, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(|w| w.into().to_lowercase()).collect();
        if words.is_empty() || words.iter().any(|w| w.is_empty()) {
            return Err(Error::invalid("caption word list must be nonempty"));
        }
        self.caption_words = words;
        Ok(self)
    }

    /// Forces the text-side embedding of `text`, bypassing the text featurizer.
    pub fn with_pinned_text(mut self, text: impl Into<String>, embedding: EmbeddingVector) -> Result<Self> {
        if embedding.dim() != self.descriptor.embed_dim {
            return Err(Error::DimensionMismatch {
                expected: self.descriptor.embed_dim,
                got: embedding.dim(),
            });
        }
        self.pinned_text.insert(text.into(), embedding);
        Ok(self)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(e) = self.pinned_text.get(text) {
            return Ok(e.clone());
        }
        // Text lands in the same feature space as images: a hash-seeded
        // pseudo-featurization pushed through the shared projection.
        let mut rng = seeded(stable_hash(text.as_bytes()) ^ self.seed.rotate_left(17));
        let mut f: Vec<f64> = (0..FEATURES - 1).map(|_| rng.random::<f64>()).collect();
        f.push(1.0);
        EmbeddingVector::new(self.joint.apply(&f))
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Block means on a 4x4 grid per channel.
fn content_features(image: &Image) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(CONTENT_FEATURES);
    for by in 0..GRID {
        let (y0, y1) = block_range(by, h);
        for bx in 0..GRID {
            let (x0, x1) = block_range(bx, w);
            for c in 0..3 {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += f64::from(image.get(y, x, c));
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

fn block_range(b: usize, n: usize) -> (usize, usize) {
    let start = (b * n / GRID).min(n - 1);
    let end = ((b + 1) * n / GRID).max(start + 1);
    (start, end)
}

/// Per-channel mean, standard deviation and horizontal/vertical gradient energy.
fn style_features(image: &Image) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(STYLE_FEATURES);
    for c in 0..3 {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(image.get(y, x, c));
                sum += v;
                sq += v * v;
                if x + 1 < w {
                    dx += (f64::from(image.get(y, x + 1, c)) - v).abs();
                }
                if y + 1 < h {
                    dy += (f64::from(image.get(y + 1, x, c)) - v).abs();
                }
            }
        }
        let mean = sum / n;
        out.push(mean);
        out.push((sq / n - mean * mean).max(0.0).sqrt());
        out.push(dx / n);
        out.push(dy / n);
    }
    out
}

fn with_bias(mut v: Vec<f64>) -> Vec<f64> {
    v.push(1.0);
    v
}

impl ImageEmbedder for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let mut f = content_features(image);
        f.extend(style_features(image));
        EmbeddingVector::new(self.joint.apply(&with_bias(f)))
    }

    fn embed_content(&self, image: &Image) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.content.apply(&with_bias(content_features(image))))
    }

    fn embed_style(&self, image: &Image) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.style.apply(&with_bias(style_features(image))))
    }
}

impl SimilarityScorer for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn similarity(&self, text: &str, image: &Image) -> Result<SimilarityScore> {
        let t = self.embed_text(text)?;
        let e = self.embed_image(image)?;
        Ok(SimilarityScore(t.cosine(&e)?))
    }
}

impl Captioner for MockBackend {
    fn caption(&self, image: &Image) -> Result<String> {
        let e = self.embed_image(image)?;
        let bytes: Vec<u8> = e.values().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
        let h = stable_hash(&bytes);
        let word = &self.caption_words[(h % self.caption_words.len() as u64) as usize];
        let subject = CAPTION_SUBJECTS[((h >> 32) % CAPTION_SUBJECTS.len() as u64) as usize];
        Ok(format!("a {word} of {subject}"))
    }
}

impl AestheticScorer for MockBackend {
    fn aesthetic_score(&self, image: &Image) -> Result<f64> {
        let e = self.embed_image(image)?;
        Ok(5.0 + 2.0 * cosine(e.values(), &self.aesthetic_direction).tanh())
    }
}

impl ImageRewardScorer for MockBackend {
    fn image_reward_score(&self, text: &str, image: &Image) -> Result<f64> {
        let t = self.embed_text(text)?;
        let e = self.embed_image(image)?;
        Ok(2.0 * t.cosine(&e)? + 0.5 * cosine(e.values(), &self.reward_direction))
    }
}

impl Backend for MockBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }
    fn as_similarity(self: Arc<Self>) -> Result<Arc<dyn SimilarityScorer>> {
        Ok(self)
    }
    fn as_embedder(self: Arc<Self>) -> Result<Arc<dyn ImageEmbedder>> {
        Ok(self)
    }
    fn as_captioner(self: Arc<Self>) -> Result<Arc<dyn Captioner>> {
        Ok(self)
    }
    fn as_aesthetic(self: Arc<Self>) -> Result<Arc<dyn AestheticScorer>> {
        Ok(self)
    }
    fn as_image_reward(self: Arc<Self>) -> Result<Arc<dyn ImageRewardScorer>> {
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |y, x, _| ((y + x) % 2) as f32).unwrap()
    }

    fn gradient(n: usize) -> Image {
        Image::from_fn(n, n, |y, x, c| (y as f32 / n as f32) * (c as f32 + 1.0) / 3.0 + x as f32 * 0.01).unwrap()
    }

    #[test]
    fn embedding_is_deterministic_and_has_declared_dim() {
        let m = MockBackend::new(3, 32).unwrap();
        let img = gradient(8);
        let a = m.embed_image(&img).unwrap();
        let b = m.embed_image(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 32);
        let m2 = MockBackend::new(3, 32).unwrap();
        assert_eq!(m2.embed_image(&img).unwrap(), a);
    }

    #[test]
    fn zero_image_maps_to_projection_of_bias_feature() {
        let m = MockBackend::new(0, DEFAULT_EMBED_DIM_FOR_TEST).unwrap();
        let e = m.embed_image(&Image::zeros(8, 8)).unwrap();
        assert!(e.norm() > 0.0);
        assert!((e.cosine(&e).unwrap() - 1.0).abs() < 1e-12);
    }

    const DEFAULT_EMBED_DIM_FOR_TEST: usize = super::super::DEFAULT_EMBED_DIM;

    #[test]
    fn structurally_different_images_regression() {
        let m = MockBackend::new(0, DEFAULT_EMBED_DIM_FOR_TEST).unwrap();
        let a = m.embed_image(&checker(8)).unwrap();
        let b = m.embed_image(&gradient(8)).unwrap();
        let c = a.cosine(&b).unwrap();
        assert!(c < 1.0);
        // Frozen from a single run of the mock (seed 0, d = 768).
        assert!((c - MOCK_SEED0_CHECKER_VS_GRADIENT).abs() < 1e-12, "cosine = {c:.17}");
    }

    const MOCK_SEED0_CHECKER_VS_GRADIENT: f64 = 0.730_325_123_755_586_7;

    #[test]
    fn pinned_text_controls_similarity() {
        let m = MockBackend::new(1, 16).unwrap();
        let img = gradient(8);
        let e = m.embed_image(&img).unwrap();
        let mut ortho: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
        let dot: f64 = ortho.iter().zip(e.values()).map(|(a, b)| a * b).sum();
        let nn = e.norm() * e.norm();
        for (o, v) in ortho.iter_mut().zip(e.values()) {
            *o -= dot / nn * v;
        }
        let m = m
            .with_pinned_text("same", e.clone())
            .unwrap()
            .with_pinned_text("ortho", EmbeddingVector::new(ortho).unwrap())
            .unwrap();
        assert!((m.similarity("same", &img).unwrap().value() - 1.0).abs() < 1e-12);
        assert!(m.similarity("ortho", &img).unwrap().value().abs() < 1e-12);
    }

    #[test]
    fn empty_text_is_rejected() {
        let m = MockBackend::new(1, 8).unwrap();
        assert!(matches!(m.similarity("  ", &checker(4)), Err(Error::EmptyText)));
    }

    #[test]
    fn captions_are_deterministic_and_use_word_list() {
        let m = MockBackend::new(2, 8).unwrap().with_caption_words(["painting"]).unwrap();
        let img = gradient(8);
        let c = m.caption(&img).unwrap();
        assert_eq!(c, m.caption(&img).unwrap());
        assert!(c.contains("painting"));
        assert_eq!(c, c.to_lowercase());
    }

    #[test]
    fn aesthetic_regression_and_determinism() {
        let m = MockBackend::new(0, DEFAULT_EMBED_DIM_FOR_TEST).unwrap();
        let img = gradient(8);
        let s = m.aesthetic_score(&img).unwrap();
        assert_eq!(s, m.aesthetic_score(&img).unwrap());
        assert!((3.0..=7.0).contains(&s));
        assert!((s - MOCK_SEED0_AESTHETIC_GRADIENT).abs() < 1e-12, "aesthetic = {s:.17}");
        let r = m.image_reward_score("painting", &img).unwrap();
        assert!(r.is_finite());
        assert_eq!(r, m.image_reward_score("painting", &img).unwrap());
    }

    const MOCK_SEED0_AESTHETIC_GRADIENT: f64 = 5.048_818_142_002_28;

    #[test]
    fn tiny_images_are_featurized() {
        let m = MockBackend::new(0, 8).unwrap();
        let e = m.embed_image(&Image::zeros(1, 3)).unwrap();
        assert_eq!(e.dim(), 8);
    }
}
