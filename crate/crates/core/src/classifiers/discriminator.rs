use std::sync::Arc;

use super::{validate_labels, ClassifierKind, StyleClassifier, StyleDistribution};
use crate::rng::{normal_vec, seeded};
use crate::{Error, Image, Result};

/// Anything that maps an image to per-style logits: the CAN discriminator's
/// classification head, or a small frozen head in toy setups.
pub trait StyleHead: Send + Sync {
    /// Square input resolution the head was built for.
    fn image_dim(&self) -> usize;
    fn n_styles(&self) -> usize;
    fn style_logits(&self, image: &Image) -> Result<Vec<f64>>;
}

pub struct DiscriminatorClassifier {
    head: Arc<dyn StyleHead>,
    labels: Vec<String>,
    temperature: f64,
}

impl DiscriminatorClassifier {
    pub fn new(head: Arc<dyn StyleHead>, labels: Vec<String>) -> Result<Self> {
        validate_labels(&labels)?;
        if labels.len() != head.n_styles() {
            return Err(Error::DimensionMismatch {
                expected: head.n_styles(),
                got: labels.len(),
            });
        }
        Ok(Self {
            head,
            labels,
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, tau: f64) -> Self {
        self.temperature = tau;
        self
    }

    /// Raw logits alongside the resulting distribution.
    pub fn classify_with_logits(&self, image: &Image) -> Result<(Vec<f64>, StyleDistribution)> {
        let dim = self.head.image_dim();
        if image.height() != dim || image.width() != dim {
            return Err(Error::ResolutionMismatch {
                expected: dim,
                height: image.height(),
                width: image.width(),
            });
        }
        let logits = self.head.style_logits(image)?;
        let dist = StyleDistribution::from_scores(&logits, self.labels.clone(), self.temperature)?;
        Ok((logits, dist))
    }
}

impl StyleClassifier for DiscriminatorClassifier {
    fn kind(&self) -> ClassifierKind {
        ClassifierKind::Discriminator
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn classify(&self, image: &Image) -> Result<StyleDistribution> {
        Ok(self.classify_with_logits(image)?.1)
    }
}

/// Linear head on raw HWC pixels: `logits = W p + b`.
#[derive(Debug, Clone)]
pub struct LinearStyleHead {
    image_dim: usize,
    n_styles: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearStyleHead {
    pub fn new(image_dim: usize, n_styles: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let inputs = image_dim * image_dim * 3;
        if weights.len() != n_styles * inputs || bias.len() != n_styles {
            return Err(Error::Shape(format!(
                "linear head {n_styles}x{inputs} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            image_dim,
            n_styles,
            weights,
            bias,
        })
    }

    pub fn zeros(image_dim: usize, n_styles: usize) -> Self {
        Self {
            image_dim,
            n_styles,
            weights: vec![0.0; n_styles * image_dim * image_dim * 3],
            bias: vec![0.0; n_styles],
        }
    }

    pub fn random(image_dim: usize, n_styles: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let inputs = image_dim * image_dim * 3;
        let scale = 1.0 / (inputs as f64).sqrt();
        Self {
            image_dim,
            n_styles,
            weights: normal_vec(&mut rng, n_styles * inputs).into_iter().map(|w| w * scale).collect(),
            bias: normal_vec(&mut rng, n_styles).into_iter().map(|b| b * 0.1).collect(),
        }
    }

    /// Two-class head scoring left-half versus right-half brightness, scaled
    /// by `sharpness`. Used as the frozen toy style classifier.
    pub fn left_right(image_dim: usize, sharpness: f64) -> Self {
        let n = image_dim * image_dim;
        let mut w0 = Vec::with_capacity(n * 3);
        for _y in 0..image_dim {
            for x in 0..image_dim {
                let sign = if x < image_dim / 2 { 1.0 } else { -1.0 };
                for _c in 0..3 {
                    w0.push(sign * sharpness / (n as f64 * 1.5));
                }
            }
        }
        let w1: Vec<f64> = w0.iter().map(|w| -w).collect();
        let mut weights = w0;
        weights.extend(w1);
        Self {
            image_dim,
            n_styles: 2,
            weights,
            bias: vec![0.0; 2],
        }
    }
}

impl StyleHead for LinearStyleHead {
    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn n_styles(&self) -> usize {
        self.n_styles
    }

    fn style_logits(&self, image: &Image) -> Result<Vec<f64>> {
        let px = image.pixels();
        Ok(self
            .weights
            .chunks_exact(px.len())
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(px).map(|(w, p)| w * f64::from(*p)).sum::<f64>())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::softmax;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("style{i}")).collect()
    }

    fn image(n: usize) -> Image {
        Image::from_fn(n, n, |y, x, c| ((x * 7 + y * 3 + c) % 11) as f32 / 10.0).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let clf = DiscriminatorClassifier::new(Arc::new(LinearStyleHead::zeros(8, 5)), labels(5)).unwrap();
        for p in clf.classify(&image(8)).unwrap().probs() {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_logits_are_uniform() {
        let head = LinearStyleHead::new(2, 3, vec![0.0; 36], vec![1.0; 3]).unwrap();
        let clf = DiscriminatorClassifier::new(Arc::new(head), labels(3)).unwrap();
        for p in clf.classify(&image(2)).unwrap().probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_head_matches_independent_softmax_of_logits() {
        let clf = DiscriminatorClassifier::new(Arc::new(LinearStyleHead::random(8, 4, 3)), labels(4)).unwrap();
        let (logits, dist) = clf.classify_with_logits(&image(8)).unwrap();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (p, l) in dist.probs().iter().zip(&logits) {
            assert!((p - (l - max).exp() / z).abs() < 1e-12);
        }
        assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(softmax(&logits, 1.0), dist.probs());
    }

    #[test]
    fn resolution_mismatch() {
        let clf = DiscriminatorClassifier::new(Arc::new(LinearStyleHead::zeros(8, 2)), labels(2)).unwrap();
        assert!(matches!(
            clf.classify(&image(4)),
            Err(Error::ResolutionMismatch { expected: 8, .. })
        ));
    }

    #[test]
    fn left_right_head_separates_halves() {
        let clf = DiscriminatorClassifier::new(Arc::new(LinearStyleHead::left_right(8, 6.0)), labels(2)).unwrap();
        let left = Image::from_fn(8, 8, |_, x, _| if x < 4 { 1.0 } else { 0.0 }).unwrap();
        let flat = Image::from_fn(8, 8, |_, _, _| 0.5).unwrap();
        assert_eq!(clf.classify(&left).unwrap().argmax(), 0);
        for p in clf.classify(&flat).unwrap().probs() {
            assert!((p - 0.5).abs() < 1e-12);
        }
    }
}
