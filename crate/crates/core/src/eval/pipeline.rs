//! Runs the evaluation protocols on a model and a labelled dataset and
//! produces the serializable `metrics.json` record.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::overcluster::{overcluster_miou, patch_labels_from_mask, ConfusionTally};
use super::probe::{linear_probe, ProbeConfig};
use super::retrieval::{nn_retrieval_predict_excluding, MemoryBank, PatchRef};
use crate::config::{BankSplit, EvalConfig};
use crate::encoder::{FeatureSource, Model};
use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::rng::rng_for;
use crate::synth::Dataset;

/// Per-fraction retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionMetrics {
    pub fraction: usize,
    pub bank_size: usize,
    pub miou: f64,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Contents of `metrics.json`. `K` is the cluster count (overclustering
/// only), `k` the neighbour count (retrieval only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetrics {
    pub protocol: String,
    #[serde(rename = "K")]
    pub clusters: Option<usize>,
    pub k: Option<usize>,
    pub seeds: Vec<u64>,
    pub miou: f64,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<Vec<FractionMetrics>>,
}

impl EvalMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Per-image dense features and majority patch labels.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub features: Vec<FeatureMatrix>,
    pub labels: Vec<Vec<usize>>,
    pub images: Vec<usize>,
    pub grid: (usize, usize),
}

impl PatchSet {
    pub fn extract(model: &Model, dataset: &Dataset, indices: &[usize], source: FeatureSource) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("no images selected for evaluation".into()));
        }
        let mut features = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut grid = (0, 0);
        for &i in indices {
            let image = dataset
                .images
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("image index {i} outside the dataset")))?;
            let g = model.features(image, source)?;
            grid = (g.height(), g.width());
            labels.push(patch_labels_from_mask(&dataset.masks[i], grid.0, grid.1)?);
            features.push(crate::geometry::flatten_grid(&g));
        }
        Ok(Self { features, labels, images: indices.to_vec(), grid })
    }

    pub fn pooled(&self) -> Result<(FeatureMatrix, Vec<usize>, Vec<PatchRef>)> {
        let rows: Vec<Vec<f64>> =
            self.features.iter().flat_map(|f| f.as_array().rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>()).collect();
        let labels = self.labels.iter().flatten().copied().collect();
        let refs = self
            .images
            .iter()
            .flat_map(|&image| {
                let (h, w) = self.grid;
                (0..h * w).map(move |p| PatchRef { image, y: p / w, x: p % w })
            })
            .collect();
        Ok((FeatureMatrix::from_rows(&rows)?, labels, refs))
    }
}

/// Overclustering mIoU on the evaluation split.
pub fn run_overcluster(model: &Model, dataset: &Dataset, eval_idx: &[usize], cfg: &EvalConfig) -> Result<EvalMetrics> {
    let classes = dataset.manifest.classes;
    let k = cfg.overcluster_k.unwrap_or(3 * classes);
    let set = PatchSet::extract(model, dataset, eval_idx, cfg.feature_source)?;
    let result = overcluster_miou(&set.features, &set.labels, k, classes, &cfg.seeds, cfg.kmeans_iters)?;
    Ok(EvalMetrics {
        protocol: "overcluster".into(),
        clusters: Some(k),
        k: None,
        seeds: cfg.seeds.clone(),
        miou: result.miou,
        accuracy: result.accuracy,
        per_class: result.per_class,
        fractions: None,
    })
}

fn average_class_iou(tallies: &[ConfusionTally]) -> Vec<Option<f64>> {
    let classes = tallies[0].classes();
    (0..classes)
        .map(|c| {
            let vals: Vec<f64> = tallies.iter().filter_map(|t| t.per_class_iou()[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Nearest-neighbour retrieval: the bank is built from the configured split
/// and down-sampled uniformly by each fraction (one draw per seed); queries
/// are the evaluation split.
pub fn run_nn(model: &Model, dataset: &Dataset, train_idx: &[usize], eval_idx: &[usize], cfg: &EvalConfig) -> Result<EvalMetrics> {
    let classes = dataset.manifest.classes;
    let bank_idx = match cfg.bank {
        BankSplit::Train => train_idx,
        BankSplit::Eval => eval_idx,
    };
    let bank_set = PatchSet::extract(model, dataset, bank_idx, cfg.feature_source)?;
    let query_set = PatchSet::extract(model, dataset, eval_idx, cfg.feature_source)?;
    let (keys, bank_labels, bank_refs) = bank_set.pooled()?;
    let full_bank = MemoryBank::new(keys, bank_labels, bank_refs)?;
    let (queries, truth, query_refs) = query_set.pooled()?;
    let exclusion = (cfg.exclude_self && cfg.bank == BankSplit::Eval).then_some(query_refs.as_slice());

    let mut per_fraction = Vec::with_capacity(cfg.fractions.len());
    for &fraction in &cfg.fractions {
        let bank_size = full_bank.len().div_ceil(fraction);
        let mut tallies = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let bank = if fraction == 1 {
                full_bank.clone()
            } else {
                let mut rng = rng_for(seed, "bank", fraction as u64);
                let mut chosen = sample(&mut rng, full_bank.len(), bank_size).into_vec();
                chosen.sort_unstable();
                full_bank.subset(&chosen)?
            };
            let available = bank.len() - usize::from(exclusion.is_some());
            let k = cfg.nn_k.min(available).max(1);
            let predicted = nn_retrieval_predict_excluding(&bank, &queries, k, exclusion)?;
            tallies.push(ConfusionTally::from_pairs(classes, &predicted, &truth)?);
        }
        let n = tallies.len() as f64;
        per_fraction.push(FractionMetrics {
            fraction,
            bank_size,
            miou: tallies.iter().map(ConfusionTally::miou).sum::<f64>() / n,
            accuracy: tallies.iter().map(ConfusionTally::accuracy).sum::<f64>() / n,
            per_class: average_class_iou(&tallies),
        });
    }
    let head = per_fraction.first().cloned().ok_or_else(|| Error::InvalidArgument("no fractions requested".into()))?;
    Ok(EvalMetrics {
        protocol: "nn".into(),
        clusters: None,
        k: Some(cfg.nn_k),
        seeds: cfg.seeds.clone(),
        miou: head.miou,
        accuracy: head.accuracy,
        per_class: head.per_class,
        fractions: Some(per_fraction),
    })
}

/// Linear probe trained on training-split patches, scored on the
/// evaluation split, averaged over seeds.
pub fn run_linear(model: &Model, dataset: &Dataset, train_idx: &[usize], eval_idx: &[usize], cfg: &EvalConfig) -> Result<EvalMetrics> {
    let classes = dataset.manifest.classes;
    let (train_x, train_y, _) = PatchSet::extract(model, dataset, train_idx, cfg.feature_source)?.pooled()?;
    let (eval_x, eval_y, _) = PatchSet::extract(model, dataset, eval_idx, cfg.feature_source)?.pooled()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let probe_cfg = ProbeConfig { seed, ..cfg.probe };
        runs.push(linear_probe(&train_x, &train_y, &eval_x, &eval_y, classes, &probe_cfg)?);
    }
    let n = runs.len() as f64;
    let per_class = (0..classes)
        .map(|c| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.per_class_iou[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Ok(EvalMetrics {
        protocol: "linear".into(),
        clusters: None,
        k: None,
        seeds: cfg.seeds.clone(),
        miou: runs.iter().map(|r| r.miou).sum::<f64>() / n,
        accuracy: runs.iter().map(|r| r.accuracy).sum::<f64>() / n,
        per_class,
        fractions: None,
    })
}
