//! Overclustering: k-means on pooled patch features, cluster-to-class
//! matching and mean IoU.

use ndarray::{concatenate, Array2, Axis};
use serde::Serialize;

use super::hungarian::hungarian;
use super::kmeans::kmeans_fit;
use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::rng::rng_for;
use crate::synth::LabelMask;

/// Pixel (here: patch) counts, prediction × ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTally {
    counts: Array2<u64>,
}

impl ConfusionTally {
    pub fn new(classes: usize) -> Self {
        Self { counts: Array2::zeros((classes, classes)) }
    }

    pub fn from_pairs(classes: usize, predicted: &[usize], truth: &[usize]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut t = Self::new(classes);
        for (&p, &g) in predicted.iter().zip(truth) {
            t.add(p, g)?;
        }
        Ok(t)
    }

    pub fn add(&mut self, predicted: usize, truth: usize) -> Result<()> {
        let c = self.classes();
        if predicted >= c || truth >= c {
            return Err(Error::InvalidArgument(format!("class id out of range for {c} classes")));
        }
        self.counts[[predicted, truth]] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// IoU per class; `None` for classes absent from the ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[[c, c]];
                let gt = self.counts.column(c).sum();
                let pred = self.counts.row(c).sum();
                (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes()).map(|c| self.counts[[c, c]]).sum::<u64>() as f64 / total as f64
    }
}

/// Majority class of each `cell_h × cell_w` block of the mask; ties go to
/// the smaller class id. Output is row-major over the grid.
pub fn patch_labels_from_mask(mask: &LabelMask, grid_h: usize, grid_w: usize) -> Result<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    if grid_h == 0 || grid_w == 0 || h % grid_h != 0 || w % grid_w != 0 {
        return Err(Error::ShapeMismatch(format!("mask {h}x{w} not divisible into a {grid_h}x{grid_w} grid")));
    }
    let (ch, cw) = (h / grid_h, w / grid_w);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    let mut counts = vec![0usize; mask.classes()];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    counts[mask.get(y, x)] += 1;
                }
            }
            out.push(argmax_lowest(&counts));
        }
    }
    Ok(out)
}

fn argmax_lowest(counts: &[usize]) -> usize {
    counts.iter().enumerate().fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best }).0
}

/// Many-to-one map from clusters to classes. Clusters are visited by
/// descending size (ties: lower id) and each takes the class with the most
/// patches inside it, i.e. the highest precision (ties: lower class id).
pub fn greedy_precision_match(cluster_ids: &[usize], labels: &[usize], k: usize, classes: usize) -> Result<Vec<usize>> {
    if cluster_ids.len() != labels.len() {
        return Err(Error::ShapeMismatch("cluster ids and labels differ in length".into()));
    }
    let mut table = vec![vec![0usize; classes]; k];
    for (&cl, &lab) in cluster_ids.iter().zip(labels) {
        if cl >= k || lab >= classes {
            return Err(Error::InvalidArgument("cluster or class id out of range".into()));
        }
        table[cl][lab] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (std::cmp::Reverse(table[c].iter().sum::<usize>()), c));
    let mut map = vec![0; k];
    for c in order {
        map[c] = argmax_lowest(&table[c]);
    }
    Ok(map)
}

/// Cluster → class map maximizing total agreement, one-to-one where
/// possible. `K < C` is handled by padding the agreement matrix.
fn hungarian_match(cluster_ids: &[usize], labels: &[usize], k: usize, classes: usize) -> Result<Vec<usize>> {
    let n = k.max(classes);
    let mut agreement = Array2::<f64>::zeros((n, n));
    for (&cl, &lab) in cluster_ids.iter().zip(labels) {
        agreement[[cl, lab]] += 1.0;
    }
    let assignment = hungarian(&agreement.mapv(|v| -v))?;
    Ok(assignment[..k].to_vec())
}

#[derive(Debug, Clone, Serialize)]
pub struct OverclusterResult {
    /// mIoU averaged over seeds
    pub miou: f64,
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
    /// per-class IoU averaged over seeds (`None` if absent from the labels)
    pub per_class: Vec<Option<f64>>,
}

/// Clusters all patches of all images jointly with `k` clusters, maps
/// clusters to classes (greedy precision matching for `K > C`, Hungarian
/// matching otherwise) and scores mIoU, averaged over `seeds`.
pub fn overcluster_miou(
    features: &[FeatureMatrix],
    labels: &[Vec<usize>],
    k: usize,
    classes: usize,
    seeds: &[u64],
    iters: usize,
) -> Result<OverclusterResult> {
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch("one label vector per feature matrix required".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    for (f, l) in features.iter().zip(labels) {
        if f.rows() != l.len() {
            return Err(Error::ShapeMismatch(format!("{} patches but {} labels", f.rows(), l.len())));
        }
    }
    if features.is_empty() {
        return Err(Error::InvalidArgument("no features to cluster".into()));
    }
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let pooled = FeatureMatrix::new(concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?)?;
    let truth: Vec<usize> = labels.iter().flatten().copied().collect();

    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut accuracy = 0.0;
    let mut class_sums = vec![0.0; classes];
    let mut class_present = vec![false; classes];
    for &seed in seeds {
        let assignment = kmeans_fit(&pooled, k, &mut rng_for(seed, "kmeans", 0), iters)?;
        let map = if k > classes {
            greedy_precision_match(&assignment.labels, &truth, k, classes)?
        } else {
            hungarian_match(&assignment.labels, &truth, k, classes)?
        };
        let predicted: Vec<usize> = assignment.labels.iter().map(|&c| map[c]).collect();
        let tally = ConfusionTally::from_pairs(classes, &predicted, &truth)?;
        per_seed.push(tally.miou());
        accuracy += tally.accuracy();
        for (c, iou) in tally.per_class_iou().into_iter().enumerate() {
            if let Some(v) = iou {
                class_sums[c] += v;
                class_present[c] = true;
            }
        }
    }
    let s = seeds.len() as f64;
    Ok(OverclusterResult {
        miou: per_seed.iter().sum::<f64>() / s,
        accuracy: accuracy / s,
        per_seed,
        per_class: class_sums.iter().zip(&class_present).map(|(&v, &p)| p.then_some(v / s)).collect(),
    })
}
