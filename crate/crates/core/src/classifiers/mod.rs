//! Style classifiers `C: image -> distribution over N styles` and the
//! style-ambiguity functional.
//!
//! Three interchangeable strategies implement [`StyleClassifier`]:
//! the CAN discriminator's style head, zero-shot text/image similarity over a
//! label set, and softmax over inverse distances to k-means centers. They are
//! constructed by name through [`ClassifierRegistry`].

mod discriminator;
mod kmeans;
mod registry;
mod zero_shot;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use discriminator::{DiscriminatorClassifier, LinearStyleHead, StyleHead};
pub use kmeans::{kmeans_distribution, ClusterModel, KMeansClassifier};
pub use registry::{ClassifierContext, ClassifierFactory, ClassifierRegistry};
pub use zero_shot::{zero_shot_distribution, ZeroShotClassifier};

use crate::{Error, Image, Result};

/// Probability floor applied before every logarithm.
pub const EPS_PROB: f64 = 1e-12;
/// Distance floor applied before inversion in the k-means classifier.
pub const EPS_DIST: f64 = 1e-6;
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDistribution {
    probs: Vec<f64>,
    labels: Vec<String>,
}

impl StyleDistribution {
    pub fn new(probs: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!("need at least 2 classes, got {}", probs.len())));
        }
        if probs.len() != labels.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("entries must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self { probs, labels })
    }

    pub fn uniform(labels: Vec<String>) -> Result<Self> {
        let n = labels.len();
        Self::new(vec![1.0 / n as f64; n], labels)
    }

    /// Softmax of `scores` at temperature `tau`.
    pub fn from_scores(scores: &[f64], labels: Vec<String>, tau: f64) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("classifier score".into()));
        }
        Self::new(softmax(scores, tau), labels)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// Synthetic labels `cluster_0 .. cluster_{k-1}`.
pub fn cluster_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("cluster_{i}")).collect()
}

/// Numerically stable softmax with temperature `tau` (1.0 = plain softmax).
pub fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy of the prediction against the uniform target,
/// `-(1/N) sum_i log c_i`. Its minimum, `ln N`, is attained exactly at the
/// uniform distribution.
///
/// The reverse orientation, `-sum_i c_i log(1/N)`, equals `ln N` for every
/// distribution and carries no signal.
pub fn style_ambiguity(dist: &StyleDistribution) -> f64 {
    let n = dist.n_classes() as f64;
    -dist.probs.iter().map(|p| p.max(EPS_PROB).ln()).sum::<f64>() / n
}

/// Style ambiguity evaluated directly on logits: `logsumexp(z) - mean(z)`.
pub fn style_ambiguity_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits.iter().sum::<f64>() / logits.len() as f64
}

/// Gradient of [`style_ambiguity_from_logits`]: `softmax(z)_j - 1/N`.
pub fn style_ambiguity_logit_grad(logits: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    softmax(logits, 1.0).into_iter().map(|p| p - 1.0 / n).collect()
}

/// Cross-entropy against the true label: `-log c_label`.
pub fn style_classification_loss(dist: &StyleDistribution, label_index: usize) -> Result<f64> {
    let p = dist.probs.get(label_index).ok_or(Error::LabelOutOfRange {
        index: label_index,
        n_classes: dist.n_classes(),
    })?;
    Ok(-p.max(EPS_PROB).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Discriminator,
    #[serde(alias = "clip")]
    ZeroShot,
    Kmeans,
    None,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Discriminator => "discriminator",
            ClassifierKind::ZeroShot => "zero_shot",
            ClassifierKind::Kmeans => "kmeans",
            ClassifierKind::None => "none",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminator" | "disc" => Ok(ClassifierKind::Discriminator),
            "zero_shot" | "clip" => Ok(ClassifierKind::ZeroShot),
            "kmeans" => Ok(ClassifierKind::Kmeans),
            "none" => Ok(ClassifierKind::None),
            other => Err(Error::Config(format!("unknown classifier kind `{other}`"))),
        }
    }
}

pub trait StyleClassifier: Send + Sync {
    fn kind(&self) -> ClassifierKind;
    fn labels(&self) -> &[String];
    fn classify(&self, image: &Image) -> Result<StyleDistribution>;
}

pub(crate) fn validate_labels(labels: &[String]) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 labels, got {}", labels.len())));
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if l.trim().is_empty() {
            return Err(Error::invalid("labels must be nonempty"));
        }
        if !seen.insert(l.as_str()) {
            return Err(Error::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// Reads a newline-delimited label set, skipping blank lines.
pub fn read_label_set(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let labels: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    validate_labels(&labels)?;
    Ok(labels)
}

pub fn write_label_set(path: &Path, labels: &[String]) -> Result<()> {
    validate_labels(labels)?;
    let mut text = labels.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        for p in softmax(&[3.5; 7], 1.0) {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_of_ln2_and_zero() {
        let p = softmax(&[2f64.ln(), 0.0], 1.0);
        // exp(ln 2) / (exp(ln 2) + exp(0)) = 2/3
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ambiguity_values() {
        let u10 = StyleDistribution::uniform(labels(10)).unwrap();
        assert!((style_ambiguity(&u10) - 10f64.ln()).abs() < 1e-9);
        let u2 = StyleDistribution::uniform(labels(2)).unwrap();
        assert!((style_ambiguity(&u2) - 0.693_147_180_559_945_3).abs() < 1e-12);
        let d = StyleDistribution::new(vec![0.9, 0.1], labels(2)).unwrap();
        // -(ln 0.9 + ln 0.1) / 2
        assert!((style_ambiguity(&d) - 1.203_972_804_325_936).abs() < 1e-6);
    }

    #[test]
    fn classification_loss_values() {
        let onehot = StyleDistribution::new(vec![0.0, 1.0, 0.0], labels(3)).unwrap();
        assert_eq!(style_classification_loss(&onehot, 1).unwrap(), 0.0);
        let u27 = StyleDistribution::uniform(labels(27)).unwrap();
        assert!((style_classification_loss(&u27, 4).unwrap() - 27f64.ln()).abs() < 1e-12);
        assert!((27f64.ln() - 3.2958).abs() < 1e-4);
        let d = StyleDistribution::new(vec![0.25, 0.75], labels(2)).unwrap();
        assert!((style_classification_loss(&d, 1).unwrap() - 0.287_682_072_451_780_9).abs() < 1e-12);
        assert!(matches!(
            style_classification_loss(&d, 2),
            Err(Error::LabelOutOfRange { index: 2, n_classes: 2 })
        ));
    }

    #[test]
    fn degenerate_one_hot_is_bounded_by_clamp() {
        let d = StyleDistribution::new(vec![1.0, 0.0], labels(2)).unwrap();
        let v = style_ambiguity(&d);
        assert!(v.is_finite());
        assert!((v - 0.5 * -(EPS_PROB.ln())).abs() < 1e-9);
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(StyleDistribution::new(vec![1.0], labels(1)).is_err());
        assert!(StyleDistribution::new(vec![0.6, 0.6], labels(2)).is_err());
        assert!(StyleDistribution::new(vec![1.1, -0.1], labels(2)).is_err());
        assert!(StyleDistribution::new(vec![0.5, 0.5], labels(3)).is_err());
    }

    #[test]
    fn label_validation() {
        assert!(matches!(
            validate_labels(&["a".into(), "b".into(), "a".into()]),
            Err(Error::DuplicateLabel(l)) if l == "a"
        ));
        assert!(validate_labels(&["a".into()]).is_err());
        assert!(validate_labels(&["a".into(), " ".into()]).is_err());
    }

    #[test]
    fn label_set_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        let l = vec!["ukiyo-e".to_string(), "cubism".to_string()];
        write_label_set(&p, &l).unwrap();
        assert_eq!(read_label_set(&p).unwrap(), l);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let g = style_ambiguity_logit_grad(&z);
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fd = (style_ambiguity_from_logits(&zp) - style_ambiguity_from_logits(&zm)) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-4 * g[j].abs().max(1e-3), "j={j} fd={fd} g={}", g[j]);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(scores in proptest::collection::vec(-50.0f64..50.0, 2..30)) {
            let d = StyleDistribution::from_scores(&scores, labels(scores.len()), 1.0).unwrap();
            prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ambiguity_is_at_least_ln_n(scores in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
            let d = StyleDistribution::from_scores(&scores, labels(scores.len()), 1.0).unwrap();
            prop_assert!(style_ambiguity(&d) >= (scores.len() as f64).ln() - 1e-12);
        }

        #[test]
        fn logits_route_agrees_with_distribution_route(scores in proptest::collection::vec(-5.0f64..5.0, 2..12)) {
            let d = StyleDistribution::from_scores(&scores, labels(scores.len()), 1.0).unwrap();
            prop_assert!((style_ambiguity(&d) - style_ambiguity_from_logits(&scores)).abs() < 1e-9);
        }
    }
}
