//! Linear probe: one affine layer on frozen patch features trained with
//! softmax cross-entropy and momentum SGD.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::overcluster::ConfusionTally;
use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.01, momentum: 0.9, weight_decay: 1e-4, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// Trains on `(train_x, train_y)` and reports metrics on `(eval_x, eval_y)`.
pub fn linear_probe(
    train_x: &FeatureMatrix,
    train_y: &[usize],
    eval_x: &FeatureMatrix,
    eval_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeMetrics> {
    if classes < 2 {
        return Err(Error::DegenerateLabels("a probe needs at least two classes".into()));
    }
    if train_x.rows() != train_y.len() || eval_x.rows() != eval_y.len() || train_x.cols() != eval_x.cols() {
        return Err(Error::ShapeMismatch("probe features and labels disagree".into()));
    }
    if train_y.iter().chain(eval_y).any(|&c| c >= classes) {
        return Err(Error::InvalidArgument("label id out of range".into()));
    }
    if distinct_classes(train_y) < 2 {
        return Err(Error::DegenerateLabels("training split has a single class".into()));
    }
    if distinct_classes(eval_y) < 2 {
        return Err(Error::DegenerateLabels("evaluation split has a single class".into()));
    }
    let d = train_x.cols();
    let mut rng = rng_for(config.seed, "probe", 0);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let mut w = Array2::from_shape_simple_fn((d, classes), || init.sample(&mut rng));
    let mut b = Array1::<f64>::zeros(classes);
    let mut vw = Array2::<f64>::zeros((d, classes));
    let mut vb = Array1::<f64>::zeros(classes);

    let x = train_x.as_array();
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select(Axis(0), chunk);
            let mut p = xb.dot(&w) + &b;
            softmax_rows(&mut p);
            for (r, &i) in chunk.iter().enumerate() {
                p[[r, train_y[i]]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let gw = xb.t().dot(&p) + &(&w * config.weight_decay);
            let gb = p.sum_axis(Axis(0)) + &(&b * config.weight_decay);
            vw = &vw * config.momentum + &gw;
            vb = &vb * config.momentum + &gb;
            w.scaled_add(-config.lr, &vw);
            b.scaled_add(-config.lr, &vb);
        }
    }

    let logits = eval_x.as_array().dot(&w) + &b;
    let predicted: Vec<usize> = logits
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc }).0)
        .collect();
    let tally = ConfusionTally::from_pairs(classes, &predicted, eval_y)?;
    Ok(ProbeMetrics { per_class_iou: tally.per_class_iou(), miou: tally.miou(), accuracy: tally.accuracy() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_split_is_rejected() {
        let x = FeatureMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let r = linear_probe(&x, &[0, 0], &x, &[0, 1], 2, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::DegenerateLabels(_))));
        let r = linear_probe(&x, &[0, 1], &x, &[1, 1], 2, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::DegenerateLabels(_))));
    }

    #[test]
    fn zero_learning_rate_is_deterministic_init() {
        let x = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.5, -1.0]]).unwrap();
        let y = [0, 1, 0, 1];
        let cfg = ProbeConfig { lr: 0.0, ..Default::default() };
        let a = linear_probe(&x, &y, &x, &y, 2, &cfg).unwrap();
        let b = linear_probe(&x, &y, &x, &y, 2, &ProbeConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paper_defaults() {
        let c = ProbeConfig::default();
        assert_eq!((c.epochs, c.lr, c.momentum, c.weight_decay), (20, 0.01, 0.9, 1e-4));
    }
}
