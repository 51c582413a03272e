//! PCA followed by exact t-SNE, for the 2-D "possibility space" plots.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_pairing, EvalSet};
use crate::backends::ImageEmbedder;
use crate::rng::{normal_vec, seeded};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceOptions {
    /// Intermediate PCA dimension, capped by the data rank.
    pub pca_dim: usize,
    /// Capped at `(n - 1) / 3`.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
    /// Scale of the seeded noise added to embeddings so repeated points stay separable.
    pub jitter: f64,
}

impl Default for SpaceOptions {
    fn default() -> Self {
        Self {
            pca_dim: 50,
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
            jitter: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacePoint {
    pub model: String,
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first. Each axis is signed so
    /// that its largest-magnitude coordinate is positive.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub projected: Vec<Vec<f64>>,
}

/// Projects onto at most `dim` principal axes with nonzero variance.
pub fn pca(data: &[Vec<f64>], dim: usize) -> Result<Pca> {
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = data[0].len();
    if let Some(bad) = data.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = smax * 1e-10 * (n.max(d) as f64);
    let mut components = Vec::new();
    let mut explained_variance = Vec::new();
    for &k in order.iter().filter(|&&k| svd.singular_values[k] > tol).take(dim) {
        let mut axis: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(axis);
        explained_variance.push(svd.singular_values[k].powi(2) / n as f64);
    }
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().zip(x.row(i).iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_variance,
        projected,
    })
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`, found by bisection on the precision.
fn conditional_p(d: &[Vec<f64>], perplexity: f64) -> Vec<Vec<f64>> {
    let n = d.len();
    let target = perplexity.ln();
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[i][j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            let mut wsum = 0.0;
            for j in 0..n {
                if j != i {
                    // shift by the smallest distance for numerical range
                    let w = (-(d[i][j] - dmin) * beta).exp();
                    p[i][j] = w;
                    sum += w;
                    wsum += w * (d[i][j] - dmin);
                }
            }
            let h = sum.ln() + beta * wsum / sum;
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = p[i].iter().sum();
        p[i].iter_mut().for_each(|v| *v /= sum);
    }
    p
}

/// Exact (O(n²) per iteration) t-SNE to two dimensions.
pub fn tsne(data: &[Vec<f64>], opts: &SpaceOptions) -> Result<Vec<[f64; 2]>> {
    let n = data.len();
    if n < 4 {
        return Err(Error::invalid(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let perplexity = opts.perplexity.min((n - 1) as f64 / 3.0);
    let cond = conditional_p(&sq_dists(data), perplexity);
    let mut p = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            p[i][j] = ((cond[i][j] + cond[j][i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    let mut rng = seeded(opts.seed ^ 0x7473_6e65);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let z = normal_vec(&mut rng, 2);
            [1e-4 * z[0], 1e-4 * z[1]]
        })
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![vec![0.0; n]; n];
    for iter in 0..opts.iterations {
        let exag = if iter < opts.exaggeration_iters { opts.early_exaggeration } else { 1.0 };
        let momentum = if iter < opts.exaggeration_iters { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i][j] = q;
                num[j][i] = q;
                zsum += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i][j] / zsum).max(1e-12);
                let m = (exag * p[i][j] - q) * num[i][j];
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for c in 0..2 {
                gains[i][c] = if (g[c] > 0.0) != (update[i][c] > 0.0) {
                    gains[i][c] + 0.2
                } else {
                    (gains[i][c] * 0.8).max(0.01)
                };
                update[i][c] = momentum * update[i][c] - opts.learning_rate * gains[i][c] * g[c];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let cx = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        y.iter_mut().for_each(|p| {
            p[0] -= cx;
            p[1] -= cy;
        });
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE embedding".into()));
    }
    Ok(y)
}

/// Mean silhouette coefficient of 2-D points under integer labels.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = points.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue; // singleton clusters score 0
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Jitter, PCA and t-SNE over all sets' embeddings; points are tagged by model and index.
pub fn possibility_space_from_embeddings(
    tagged: &[(String, Vec<Vec<f64>>)],
    opts: &SpaceOptions,
) -> Result<Vec<SpacePoint>> {
    if tagged.len() < 2 {
        return Err(Error::invalid("possibility space needs at least two sets"));
    }
    let mut rng = seeded(opts.seed);
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (model, embs) in tagged {
        for (i, e) in embs.iter().enumerate() {
            let z = normal_vec(&mut rng, e.len());
            rows.push(e.iter().zip(z).map(|(v, z)| v + opts.jitter * z).collect::<Vec<f64>>());
            tags.push((model.clone(), i));
        }
    }
    let reduced = pca(&rows, opts.pca_dim)?;
    let y = tsne(&reduced.projected, opts)?;
    Ok(tags
        .into_iter()
        .zip(y)
        .map(|((model, index), p)| SpacePoint {
            model,
            index,
            x: p[0],
            y: p[1],
        })
        .collect())
}

pub fn possibility_space(sets: &[EvalSet], embedder: &dyn ImageEmbedder, opts: &SpaceOptions) -> Result<Vec<SpacePoint>> {
    check_pairing(sets.iter().map(|s| &s.manifest))?;
    let tagged = sets
        .iter()
        .map(|s| {
            let embs = s
                .images
                .iter()
                .flatten()
                .map(|img| Ok(embedder.embed_image(img)?.into_inner()))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.model().to_string(), embs))
        })
        .collect::<Result<Vec<_>>>()?;
    possibility_space_from_embeddings(&tagged, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(center: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| normal_vec(&mut rng, 6).into_iter().map(|z| center + 0.1 * z).collect())
            .collect()
    }

    fn fast() -> SpaceOptions {
        SpaceOptions {
            iterations: 400,
            ..Default::default()
        }
    }

    #[test]
    fn pca_on_axis_aligned_data() {
        let data: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 - 4.0, 3.0]).collect();
        let p = pca(&data, 5).unwrap();
        assert_eq!(p.components.len(), 1, "rank caps the dimension");
        assert!((p.components[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(p.components[0][1].abs() < 1e-12);
        assert!((p.explained_variance[0] - 60.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn separated_clouds_keep_their_identity() {
        let tagged = vec![("a".to_string(), cloud(0.0, 30, 1)), ("b".to_string(), cloud(10.0, 30, 2))];
        let pts = possibility_space_from_embeddings(&tagged, &fast()).unwrap();
        let xy: Vec<[f64; 2]> = pts.iter().map(|p| [p.x, p.y]).collect();
        let labels: Vec<usize> = pts.iter().map(|p| usize::from(p.model == "b")).collect();
        let s = silhouette(&xy, &labels);
        assert!(s > 0.5, "silhouette {s}");
    }

    #[test]
    fn deterministic_given_seed() {
        let tagged = vec![("a".to_string(), cloud(0.0, 8, 1)), ("b".to_string(), cloud(1.0, 8, 2))];
        let o = SpaceOptions {
            iterations: 100,
            ..Default::default()
        };
        assert_eq!(
            possibility_space_from_embeddings(&tagged, &o).unwrap(),
            possibility_space_from_embeddings(&tagged, &o).unwrap()
        );
    }

    #[test]
    fn repeated_embeddings_are_handled() {
        let tagged = vec![
            ("a".to_string(), vec![vec![1.0, 2.0, 3.0]; 5]),
            ("b".to_string(), vec![vec![-1.0, 0.0, 1.0]; 5]),
        ];
        let pts = possibility_space_from_embeddings(&tagged, &fast()).unwrap();
        assert_eq!(pts.len(), 10);
        assert!(pts.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    }

    #[test]
    fn too_few_points() {
        let tagged = vec![("a".to_string(), vec![vec![1.0]]), ("b".to_string(), vec![vec![2.0]])];
        assert!(possibility_space_from_embeddings(&tagged, &fast()).is_err());
        assert!(possibility_space_from_embeddings(&tagged[..1], &fast()).is_err());
    }

    #[test]
    fn silhouette_of_perfect_split() {
        let pts = [[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]];
        assert!(silhouette(&pts, &[0, 0, 1, 1]) > 0.98);
        assert!(silhouette(&pts, &[0, 1, 0, 1]) < 0.0);
    }
}
