use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 4, restarts: 10, max_iter: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the chosen run.
    pub history: Vec<f64>,
    /// Index of the chosen restart.
    pub restart: usize,
    /// Histories of every restart, in restart order.
    pub all_histories: Vec<Vec<f64>>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.centroids.len()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    /// Most populated cluster; ties go to the lower index.
    pub fn largest_cluster(&self) -> usize {
        let sizes = self.cluster_sizes();
        let mut best = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if s > sizes[best] {
                best = i;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let n = points.len();
    let d = points[0].len();
    // Forgy initialization
    let mut centroids: Vec<Vec<f64>> = sample(rng, n, k).into_iter().map(|i| points[i].clone()).collect();
    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                continue;
            }
            // empty cluster: take over the point farthest from its centroid
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(&points[a], &centroids[assignment[a]])
                        .total_cmp(&sq_dist(&points[b], &centroids[assignment[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                let old = assignment[i];
                counts[old] -= 1;
                for (s, v) in sums[old].iter_mut().zip(&points[i]) {
                    *s -= v;
                }
                centroids[old] = sums[old].iter().map(|s| s / counts[old] as f64).collect();
                assignment[i] = c;
                counts[c] = 1;
                sums[c] = points[i].clone();
                centroids[c] = points[i].clone();
                changed = true;
            }
        }
        let inertia = points.iter().zip(&assignment).map(|(p, &a)| sq_dist(p, &centroids[a])).sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    (centroids, assignment, history)
}

/// Lloyd's algorithm with Forgy initialization; the restart with the lowest
/// final inertia wins (ties to the earlier restart). `k` is capped at the
/// number of points.
pub fn kmeans(points: &[Vec<f64>], cfg: &KMeansConfig) -> KMeansResult {
    assert!(!points.is_empty(), "kmeans needs at least one point");
    let k = cfg.k.clamp(1, points.len());
    let mut best: Option<KMeansResult> = None;
    let mut all = Vec::with_capacity(cfg.restarts.max(1));
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let (centroids, assignment, history) = lloyd(points, k, cfg.max_iter.max(1), &mut rng);
        let inertia = *history.last().expect("at least one iteration");
        all.push(history.clone());
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult { centroids, assignment, inertia, history, restart: r, all_histories: vec![] });
        }
    }
    let mut best = best.expect("at least one restart");
    best.all_histories = all;
    best
}
