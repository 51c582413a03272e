//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{default_workers, parallel_map, EmbeddingCache, LabeledImageSet};
use crate::backends::ImageEmbedder;
use crate::classifiers::ClusterModel;
use crate::rng::seeded;
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative inertia change below which iteration stops.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, then the final value.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center, lowest index on ties.
fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("positive total");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("pushed")));
        }
    }
    centers
}

/// Gives every empty cluster the point farthest from its center, taken from a
/// cluster that keeps at least one member.
fn repair_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], assign: &mut [usize], dist: &mut [f64]) {
    let k = centers.len();
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a] += 1;
    }
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| sizes[assign[i]] > 1 && dist[i] > 0.0)
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
        let Some(i) = far else {
            continue; // duplicates only; leave the center in place
        };
        sizes[assign[i]] -= 1;
        sizes[j] = 1;
        assign[i] = j;
        centers[j] = points[i].clone();
        dist[i] = 0.0;
    }
}

fn means(points: &[Vec<f64>], assign: &[usize], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = old[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(old)
        .map(|((s, n), o)| if n == 0 { o.clone() } else { s.into_iter().map(|v| v / n as f64).collect() })
        .collect()
}

pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {}", cfg.k)));
    }
    if points.is_empty() {
        return Err(Error::Dataset("no points to cluster".into()));
    }
    if cfg.k > points.len() {
        return Err(Error::invalid(format!("k = {} exceeds {} points", cfg.k, points.len())));
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("k-means input".into()));
        }
    }
    if cfg.max_iter == 0 {
        return Err(Error::invalid("max_iter must be positive"));
    }

    let mut rng = seeded(cfg.seed);
    let mut centers = plus_plus_init(points, cfg.k, &mut rng);
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assign = Vec::new();
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let (mut a, mut d): (Vec<usize>, Vec<f64>) = points.iter().map(|p| nearest(p, &centers)).unzip();
        repair_empty(points, &mut centers, &mut a, &mut d);
        let inertia: f64 = d.iter().sum();
        let rel = history
            .last()
            .map(|&prev: &f64| (prev - inertia) / prev.max(f64::MIN_POSITIVE));
        history.push(inertia);
        centers = means(points, &a, &centers);
        let converged = prev_assign.as_ref() == Some(&a) || rel.is_some_and(|r| r <= cfg.tol);
        prev_assign = Some(a.clone());
        assign = a;
        if converged {
            break;
        }
    }
    let inertia: f64 = points
        .iter()
        .zip(&assign)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    history.push(inertia);
    Ok(KMeansFit {
        centers,
        assignments: assign,
        inertia,
        iterations,
        history,
    })
}

/// Embeds every image of `dataset` (cached by file hash) and clusters the embeddings.
pub fn fit_clusters(
    dataset: &LabeledImageSet,
    embedder: &dyn ImageEmbedder,
    cache: &mut EmbeddingCache,
    cfg: &KMeansConfig,
) -> Result<(ClusterModel, KMeansFit)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot cluster an empty dataset".into()));
    }
    let missing: Vec<_> = dataset.records.iter().filter(|r| cache.get(&r.hash).is_none()).collect();
    let fresh = parallel_map(&missing, default_workers(), |r| {
        embedder.embed_image(&Image::load(&r.path)?).map(|e| e.into_inner())
    });
    for (r, e) in missing.iter().zip(fresh) {
        cache.insert(&r.hash, &e?)?;
    }
    let points: Vec<Vec<f64>> = dataset
        .records
        .iter()
        .map(|r| cache.get(&r.hash).expect("embedded").to_vec())
        .collect();
    let fit = kmeans(&points, cfg)?;
    let model = ClusterModel::new(fit.centers.clone(), cfg.seed, fit.inertia)?;
    Ok((model, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use proptest::prelude::*;

    fn blobs(seed: u64, per: usize) -> (Vec<Vec<f64>>, Vec<usize>, [[f64; 2]; 3]) {
        let truth = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let mut rng = seeded(seed);
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        for (j, c) in truth.iter().enumerate() {
            for _ in 0..per {
                let z = normal_vec(&mut rng, 2);
                pts.push(vec![c[0] + 0.05 * z[0], c[1] + 0.05 * z[1]]);
                lab.push(j);
            }
        }
        (pts, lab, truth)
    }

    #[test]
    fn three_blobs_are_recovered() {
        let (pts, lab, truth) = blobs(3, 50);
        let fit = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        // match each true center to its nearest recovered one
        let map: Vec<usize> = truth.iter().map(|t| nearest(t, &fit.centers).0).collect();
        for (t, &j) in truth.iter().zip(&map) {
            assert!(sq_dist(t, &fit.centers[j]).sqrt() < 0.2);
        }
        for (p, &l) in pts.iter().zip(&lab) {
            // brute-force nearest center
            let brute = (0..3)
                .min_by(|&a, &b| sq_dist(p, &fit.centers[a]).total_cmp(&sq_dist(p, &fit.centers[b])))
                .unwrap();
            assert_eq!(brute, map[l]);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let fit = kmeans(&pts, &KMeansConfig::new(6, 1)).unwrap();
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn argument_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&pts, &KMeansConfig::new(3, 0)).is_err());
        assert!(kmeans(&pts, &KMeansConfig::new(1, 0)).is_err());
        assert!(kmeans(&[], &KMeansConfig::new(2, 0)).is_err());
        assert!(kmeans(&[vec![0.0], vec![0.0, 1.0]], &KMeansConfig::new(2, 0)).is_err());
    }

    #[test]
    fn duplicate_points_do_not_break_repair() {
        let pts = vec![vec![1.0, 1.0]; 4];
        let fit = kmeans(&pts, &KMeansConfig::new(3, 0)).unwrap();
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn repair_fills_empty_cluster_with_farthest_point() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        let mut centers = vec![vec![0.0], vec![100.0]];
        let (mut a, mut d): (Vec<usize>, Vec<f64>) = pts.iter().map(|p| nearest(p, &centers)).unzip();
        assert_eq!(a, vec![0, 0, 0]);
        repair_empty(&pts, &mut centers, &mut a, &mut d);
        assert_eq!(a, vec![0, 0, 1]);
        assert_eq!(centers[1], vec![10.0]);
    }

    proptest! {
        #[test]
        fn inertia_is_monotone_and_final_state_is_fixed(
            seed in 0u64..1000,
            n in 4usize..40,
            k in 2usize..5,
        ) {
            let mut rng = seeded(seed);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, 3)).collect();
            let cfg = KMeansConfig { tol: 0.0, ..KMeansConfig::new(k.min(n), seed) };
            let fit = kmeans(&pts, &cfg).unwrap();
            for w in fit.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", fit.history);
            }
            if fit.iterations < cfg.max_iter {
                let reassigned: Vec<usize> = pts.iter().map(|p| nearest(p, &fit.centers).0).collect();
                prop_assert_eq!(&reassigned, &fit.assignments);
                let recentered = means(&pts, &fit.assignments, &fit.centers);
                for (a, b) in recentered.iter().zip(&fit.centers) {
                    prop_assert!(sq_dist(a, b) < 1e-20);
                }
            }
        }
    }
}
