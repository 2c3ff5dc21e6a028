//! Lloyd's k-means with k-means++ seeding.

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub k: usize,
    /// cluster id per row of the input
    pub labels: Vec<usize>,
    /// `K × D`
    pub centroids: Array2<f64>,
    /// inertia after each assignment step
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(x: &Array2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centroids
}

fn assign(x: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(x.nrows());
    let mut dists = Vec::with_capacity(x.nrows());
    for r in x.rows() {
        let (best, d) = centroids
            .rows()
            .into_iter()
            .map(|c| sq_dist(r, c))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (j, d)| if d < acc.1 { (j, d) } else { acc });
        labels.push(best);
        dists.push(d);
    }
    (labels, dists)
}

/// Clusters the rows of `features` into `k` groups. Stops when an
/// assignment step changes nothing or after `iters` assignment steps. An
/// empty cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans_fit(features: &FeatureMatrix, k: usize, rng: &mut Rng, iters: usize) -> Result<ClusterAssignment> {
    let x = features.as_array();
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut centroids = plus_plus_seed(x, k, rng);
    let (mut labels, mut dists) = assign(x, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 1..iters.max(1) {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut s = sums.row_mut(l);
            s += &x.row(i);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            } else {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                centroids.row_mut(c).assign(&x.row(far));
                dists[far] = 0.0;
            }
        }
        let (next_labels, next_dists) = assign(x, &centroids);
        let inertia: f64 = next_dists.iter().sum();
        debug_assert!(inertia <= history.last().unwrap() * (1.0 + 1e-12) + 1e-12, "inertia increased");
        history.push(inertia);
        let converged = next_labels == labels;
        labels = next_labels;
        dists = next_dists;
        if converged {
            break;
        }
    }
    Ok(ClusterAssignment { k, labels, centroids, inertia_history: history })
}
