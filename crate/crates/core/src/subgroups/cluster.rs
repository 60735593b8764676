//! Feature-space clustering: Ward agglomerative (default) or seeded k-means.

use kodama::{linkage, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Ward,
    KMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// `None` selects `N / 25` clamped to `[10, 500]` (and to `N`).
    pub n_clusters: Option<usize>,
    pub seed: u64,
    pub linkage: Linkage,
    /// Lloyd iterations for k-means.
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_clusters: None,
            seed: 0,
            linkage: Linkage::Ward,
            max_iter: 100,
        }
    }
}

impl ClusterConfig {
    pub fn resolved_clusters(&self, n: usize) -> usize {
        self.n_clusters
            .unwrap_or_else(|| (n / 25).clamp(10, 500).min(n.max(1)))
    }
}

/// Assigns each row to a cluster. Labels are canonicalised so that clusters
/// are numbered by their first member's row index.
pub fn cluster_features(features: &[Vec<f64>], config: &ClusterConfig) -> Result<Vec<usize>> {
    let n = features.len();
    let k = config.resolved_clusters(n);
    if k == 0 {
        return Err(AuditError::Config("n_clusters must be at least 1".into()));
    }
    if n < k {
        return Err(AuditError::Config(format!(
            "cannot form {k} clusters from {n} images"
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(AuditError::RejectedInput(
            "feature rows must share one length and be finite".into(),
        ));
    }
    let raw = match config.linkage {
        Linkage::Ward => ward(features, k),
        Linkage::KMeans => kmeans(features, k, config.seed, config.max_iter),
    };
    Ok(canonical_labels(&raw))
}

pub fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn ward(features: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = features.len();
    if n == 1 || k == n {
        return (0..n).collect();
    }
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n - 1 {
        for j in i + 1..n {
            condensed.push(euclid(&features[i], &features[j]));
        }
    }
    let dendrogram = linkage(&mut condensed, n, Method::Ward);

    // Replay the first n - k merges with union-find.
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (step_idx, step) in dendrogram.steps().iter().take(n - k).enumerate() {
        let new = n + step_idx;
        let a = find(&mut parent, step.cluster1);
        let b = find(&mut parent, step.cluster2);
        parent[a] = new;
        parent[b] = new;
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// k-means++ seeding followed by Lloyd iterations; deterministic for a seed.
fn kmeans(features: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Vec<usize> {
    let n = features.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f64>> = vec![features[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| euclid(f, &centres[0]).powi(2))
        .collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            // All remaining points coincide with a centre; pick the first unused.
            (0..n).find(|i| !centres.contains(&features[*i])).unwrap_or(0)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        };
        centres.push(features[idx].clone());
        let c = centres.last().expect("just pushed");
        for (dv, f) in d2.iter_mut().zip(features) {
            *dv = dv.min(euclid(f, c).powi(2));
        }
    }

    let nearest = |f: &[f64], centres: &[Vec<f64>]| {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centres.iter().enumerate() {
            let d = euclid(f, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };
    let mut labels: Vec<usize> = features.iter().map(|f| nearest(f, &centres)).collect();
    for _ in 0..max_iter {
        let dim = features[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in features.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centres[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = features.iter().map(|f| nearest(f, &centres)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}
