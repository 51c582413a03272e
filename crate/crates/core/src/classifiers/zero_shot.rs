use std::sync::Arc;

use super::{validate_labels, ClassifierKind, StyleClassifier, StyleDistribution};
use crate::backends::SimilarityScorer;
use crate::{Image, Result};

/// Softmax over the similarity of the image to each label's text.
/// Labels are used verbatim as the query text.
pub struct ZeroShotClassifier {
    labels: Vec<String>,
    scorer: Arc<dyn SimilarityScorer>,
    temperature: f64,
}

impl ZeroShotClassifier {
    pub fn new(labels: Vec<String>, scorer: Arc<dyn SimilarityScorer>) -> Result<Self> {
        validate_labels(&labels)?;
        Ok(Self {
            labels,
            scorer,
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    pub fn scores(&self, image: &Image) -> Result<Vec<f64>> {
        self.labels
            .iter()
            .map(|l| self.scorer.similarity(l, image).map(|s| s.value()))
            .collect()
    }
}

/// Zero-shot distribution from precomputed per-label similarity scores.
pub fn zero_shot_distribution(scores: &[f64], labels: Vec<String>, tau: f64) -> Result<StyleDistribution> {
    validate_labels(&labels)?;
    StyleDistribution::from_scores(scores, labels, tau)
}

impl StyleClassifier for ZeroShotClassifier {
    fn kind(&self) -> ClassifierKind {
        ClassifierKind::ZeroShot
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn classify(&self, image: &Image) -> Result<StyleDistribution> {
        let scores = self.scores(image)?;
        StyleDistribution::from_scores(&scores, self.labels.clone(), self.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EmbeddingVector, ImageEmbedder, MockBackend};
    use crate::data::FULL_STYLE_LABELS;
    use crate::Error;

    fn image() -> Image {
        Image::from_fn(8, 8, |y, x, c| ((y * 3 + x + c) % 5) as f32 / 4.0).unwrap()
    }

    /// Unit vector with cosine `c` to `e` inside the span of `e` and `u`.
    fn at_cosine(e: &[f64], u: &[f64], c: f64) -> EmbeddingVector {
        let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
        let mut perp: Vec<f64> = u.iter().zip(e).map(|(a, b)| a - dot / (ne * ne) * b).collect();
        let np = perp.iter().map(|v| v * v).sum::<f64>().sqrt();
        perp.iter_mut().for_each(|v| *v /= np);
        let s = (1.0 - c * c).sqrt();
        EmbeddingVector::new(e.iter().zip(&perp).map(|(a, p)| c * a / ne + s * p).collect()).unwrap()
    }

    #[test]
    fn equal_similarities_give_uniform() {
        let img = image();
        let m = MockBackend::new(0, 16).unwrap();
        let e = m.embed_image(&img).unwrap();
        let m = m.with_pinned_text("a", e.clone()).unwrap().with_pinned_text("b", e.clone()).unwrap().with_pinned_text("c", e).unwrap();
        let clf = ZeroShotClassifier::new(vec!["a".into(), "b".into(), "c".into()], Arc::new(m)).unwrap();
        for p in clf.classify(&img).unwrap().probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forced_similarities_ln2_and_zero() {
        let img = image();
        let m = MockBackend::new(0, 16).unwrap();
        let e = m.embed_image(&img).unwrap();
        let u: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let m = m
            .with_pinned_text("x", at_cosine(e.values(), &u, 2f64.ln()))
            .unwrap()
            .with_pinned_text("y", at_cosine(e.values(), &u, 0.0))
            .unwrap();
        let clf = ZeroShotClassifier::new(vec!["x".into(), "y".into()], Arc::new(m)).unwrap();
        let d = clf.classify(&img).unwrap();
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((d.probs()[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn full_label_set_has_27_classes() {
        let labels: Vec<String> = FULL_STYLE_LABELS.iter().map(|s| s.to_string()).collect();
        let clf = ZeroShotClassifier::new(labels.clone(), Arc::new(MockBackend::new(0, 32).unwrap())).unwrap();
        let d = clf.classify(&image()).unwrap();
        assert_eq!(d.n_classes(), 27);
        assert_eq!(d.labels(), labels.as_slice());
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let r = ZeroShotClassifier::new(vec!["a".into(), "a".into()], Arc::new(MockBackend::new(0, 8).unwrap()));
        assert!(matches!(r, Err(Error::DuplicateLabel(_))));
    }
}
