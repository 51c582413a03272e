//! Cross-model similarity of paired images.

use serde::{Deserialize, Serialize};

use super::{check_pairing, EvalSet};
use crate::backends::{cosine, ImageEmbedder};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Content,
    Style,
}

impl std::str::FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "style" => Ok(Self::Style),
            _ => Err(Error::Config(format!("unknown similarity mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub models: Vec<String>,
    pub mode: EmbeddingMode,
    /// Mean cosine similarity of index-paired embeddings.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        Some(self.values[i][j])
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (m, row) in self.models.iter().zip(&self.values) {
            let mut rec = vec![m.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        super::scores::finish(w)
    }
}

/// `embeddings[m][i]` is model `m`'s embedding of item `i`, or `None` if the
/// item failed. Index pairs with a missing side are left out of the mean.
pub fn similarity_from_embeddings(
    models: Vec<String>,
    embeddings: &[Vec<Option<Vec<f64>>>],
    mode: EmbeddingMode,
) -> Result<SimilarityMatrix> {
    if models.len() != embeddings.len() {
        return Err(Error::invalid("one embedding list per model required"));
    }
    let n = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != n) {
        return Err(Error::PairingMismatch("embedding lists differ in length".into()));
    }
    let dim = embeddings.iter().flatten().flatten().map(Vec::len).next().unwrap_or(0);
    if let Some(bad) = embeddings.iter().flatten().flatten().find(|e| e.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let k = models.len();
    let mut values = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..n {
                if let (Some(x), Some(y)) = (&embeddings[a][i], &embeddings[b][i]) {
                    sum += cosine(x, y);
                    count += 1;
                }
            }
            let v = if count == 0 { f64::NAN } else { sum / count as f64 };
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    Ok(SimilarityMatrix { models, mode, values })
}

pub fn similarity_matrix(sets: &[EvalSet], embedder: &dyn ImageEmbedder, mode: EmbeddingMode) -> Result<SimilarityMatrix> {
    check_pairing(sets.iter().map(|s| &s.manifest))?;
    let embeddings = sets
        .iter()
        .map(|s| {
            s.images
                .iter()
                .map(|img| {
                    img.as_ref()
                        .map(|img| {
                            let e = match mode {
                                EmbeddingMode::Content => embedder.embed_content(img)?,
                                EmbeddingMode::Style => embedder.embed_style(img)?,
                            };
                            Ok(e.into_inner())
                        })
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    similarity_from_embeddings(sets.iter().map(|s| s.model().to_string()).collect(), &embeddings, mode)
}

#[cfg(test)]
mod tests {
    use super::super::generate_eval_set;
    use super::super::tests::{prompts, toy_model};
    use super::*;
    use crate::backends::MockBackend;
    use crate::rng::{normal_vec, seeded};

    fn wrap(v: Vec<Vec<f64>>) -> Vec<Option<Vec<f64>>> {
        v.into_iter().map(Some).collect()
    }

    #[test]
    fn orthogonal_sets_have_zero_off_diagonal() {
        let a = wrap(vec![vec![1.0, 0.0]; 5]);
        let b = wrap(vec![vec![0.0, 2.0]; 5]);
        let m = similarity_from_embeddings(vec!["a".into(), "b".into()], &[a, b], EmbeddingMode::Style).unwrap();
        assert_eq!(m.values, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn matches_brute_force_average() {
        let mut rng = seeded(11);
        let sets: Vec<Vec<Vec<f64>>> = (0..3).map(|_| (0..7).map(|_| normal_vec(&mut rng, 4)).collect()).collect();
        let m = similarity_from_embeddings(
            vec!["x".into(), "y".into(), "z".into()],
            &sets.iter().cloned().map(wrap).collect::<Vec<_>>(),
            EmbeddingMode::Content,
        )
        .unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for i in 0..7 {
                    let (x, y) = (&sets[a][i], &sets[b][i]);
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                    s += dot / (nx * ny);
                }
                assert!((m.values[a][b] - s / 7.0).abs() < 1e-9);
                assert_eq!(m.values[a][b], m.values[b][a]);
            }
            assert!((m.values[a][a] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_sets_give_all_ones_and_pairing_is_enforced() {
        let backend = MockBackend::new(0, 32).unwrap();
        let a = generate_eval_set(&toy_model("a", 0.3), &prompts(), 1, 6).unwrap();
        let mut a2 = generate_eval_set(&toy_model("a", 0.3), &prompts(), 1, 6).unwrap();
        a2.manifest.model = "a-again".into();
        for mode in [EmbeddingMode::Content, EmbeddingMode::Style] {
            let m = similarity_matrix(&[a.clone(), a2.clone()], &backend, mode).unwrap();
            for row in &m.values {
                for v in row {
                    assert!((v - 1.0).abs() < 1e-9);
                }
            }
        }
        let other = generate_eval_set(&toy_model("b", 0.3), &prompts(), 2, 6).unwrap();
        assert!(matches!(
            similarity_matrix(&[a, other], &backend, EmbeddingMode::Content),
            Err(Error::PairingMismatch(_))
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let a = wrap(vec![vec![1.0, 0.0]]);
        let b = wrap(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            similarity_from_embeddings(vec!["a".into(), "b".into()], &[a, b], EmbeddingMode::Style),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
