//! Central finite-difference checks of the analytic gradients.
//!
//! The error of a gradient tensor is `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`
//! with `a` the analytic and `n` the numerical gradient; the floor keeps
//! tensors whose true gradient vanishes from reporting pure round-off. For
//! whole models the floor is additionally `1e-3` of the largest gradient
//! entry anywhere in the model: a tensor can have an identically zero
//! gradient by invariance (the last head bias under a translation-invariant
//! loss), and its round-off must be judged on the model's scale.

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::encoder::{EncoderConfig, FeatureSource, HeadConfig, Model};
use crate::error::Result;
use crate::kernel::{self, Bandwidth, FeatureMatrix, LossKind};
use crate::rng::{rng_for, Rng};
use crate::synth::{Dataset, Image, SceneSpec};
use crate::trainer::{batch_objective, build_view_batch, TrainConfig};

pub const KERNEL_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_with_floor(analytic, numeric, FLOOR)
}

fn relative_error_with_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf_norm(analytic).max(inf_norm(numeric)).max(floor)
}

fn central_difference(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(x)?;
        x[i] = orig - h;
        let down = f(x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Array2::from_shape_simple_fn((n, d), || normal.sample(rng))
}

/// One random `(S, T)` instance of size `12 × 6` for `kind`; MMD uses the
/// median bandwidth of the instance held fixed.
pub fn check_kernel_loss(kind: LossKind, seed: u64) -> Result<GradReport> {
    let mut rng = rng_for(seed, "gradcheck-kernel", kind as u64);
    let (n, d) = (12, 6);
    let s = FeatureMatrix::new(random_matrix(&mut rng, n, d))?;
    let t = FeatureMatrix::new(random_matrix(&mut rng, n, d))?;
    let bw = Bandwidth::Fixed(kernel::median_bandwidth(&s, &t));
    let analytic = match kind {
        LossKind::Paka => kernel::grad_loss_paka(&s, &t)?,
        LossKind::Gram => kernel::grad_loss_gram(&s, &t)?,
        LossKind::Hsic => kernel::grad_loss_hsic(&s, &t)?,
        LossKind::Mmd => kernel::grad_loss_mmd(&s, &t, bw)?,
    };
    let loss = |x: &[f64]| -> Result<f64> {
        let sm = FeatureMatrix::new(Array2::from_shape_vec((n, d), x.to_vec()).expect("shape"))?;
        match kind {
            LossKind::Mmd => kernel::loss_mmd(&sm, &t, bw),
            _ => kernel::loss_value(kind, &sm, &t),
        }
    };
    let mut x: Vec<f64> = s.as_array().iter().copied().collect();
    let numeric = central_difference(&mut x, 1e-6, loss)?;
    let analytic: Vec<f64> = analytic.as_array().iter().copied().collect();
    Ok(GradReport { name: format!("{kind}"), max_rel_error: relative_error(&analytic, &numeric) })
}

fn micro_model(seed: u64) -> Model {
    let enc = EncoderConfig { patch_size: 4, in_channels: 3, dim: 4, blocks: 2, ..Default::default() };
    Model::init(enc, HeadConfig { hidden: 6, out: 5 }, &mut rng_for(seed, "gradcheck-init", 0))
}

fn perturb_each(model: &mut Model, h: f64, mut f: impl FnMut(&Model) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let n_tensors = model.tensors().len();
    let mut out = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let len = model.tensors()[ti].2.len();
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let orig = model.tensors()[ti].2[i];
            model.tensors_mut()[ti][i] = orig + h;
            let up = f(model)?;
            model.tensors_mut()[ti][i] = orig - h;
            let down = f(model)?;
            model.tensors_mut()[ti][i] = orig;
            grads.push((up - down) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

fn compare(analytic: &Model, numeric: &[Vec<f64>], source: FeatureSource) -> Vec<GradReport> {
    let used: Vec<_> = analytic
        .tensors()
        .into_iter()
        .zip(numeric)
        .filter(|((name, _, _), _)| source == FeatureSource::Head || name.starts_with("encoder"))
        .collect();
    let scale = used.iter().fold(0.0f64, |m, ((_, _, a), _)| m.max(inf_norm(a)));
    let floor = FLOOR.max(1e-3 * scale);
    used.into_iter()
        .map(|((name, _, a), n)| GradReport { max_rel_error: relative_error_with_floor(a, n, floor), name })
        .collect()
}

/// Backward pass of encoder (and head) under the linear read-out
/// `L = Σ R ⊙ features` with a random `R`, per parameter tensor.
pub fn check_model_backward(seed: u64, source: FeatureSource) -> Result<Vec<GradReport>> {
    let mut rng = rng_for(seed, "gradcheck-model", 0);
    let mut model = micro_model(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let image = Array3::from_shape_simple_fn((3, 12, 16), || normal.sample(&mut rng));
    let (grid, tape) = model.forward(&image, source)?;
    let readout = random_matrix(&mut rng, grid.height() * grid.width(), grid.channels());
    let analytic = model.backward(&tape, &readout)?;
    let numeric = perturb_each(&mut model, 1e-6, |m| {
        let g = m.features(&image, source)?;
        Ok((g.to_rows() * &readout).sum())
    })?;
    Ok(compare(&analytic, &numeric, source))
}

/// Micro training setup: two 16×16 scenes, patch 4, `D = 4`.
pub fn micro_train_config(loss: LossKind, seed: u64) -> TrainConfig {
    TrainConfig {
        loss,
        n_local: 2,
        batch_size: 2,
        seed,
        global_size: 16,
        local_size: 8,
        target_h: 2,
        target_w: 2,
        min_overlap: 0.5,
        encoder: EncoderConfig { patch_size: 4, in_channels: 3, dim: 4, blocks: 2, ..Default::default() },
        head: HeadConfig { hidden: 6, out: 5 },
        ..Default::default()
    }
}

/// Full batch objective (views, ROI alignment, pair losses, averaging,
/// head and encoder) against finite differences of the student parameters.
pub fn check_training_objective(loss: LossKind, seed: u64) -> Result<Vec<GradReport>> {
    let config = micro_train_config(loss, seed);
    let ds = Dataset::generate(&SceneSpec { size: 16, patch_size: 4, seed, ..Default::default() }, 2)?;
    let images: Vec<&Image> = ds.images.iter().collect();
    let batch = build_view_batch(&mut rng_for(seed, "gradcheck-views", 0), &images, &config)?;
    let mut student = Model::init(config.encoder, config.head, &mut rng_for(seed, "gradcheck-init", 0));
    let teacher = Model::init(config.encoder, config.head, &mut rng_for(seed, "gradcheck-init", 1));
    let analytic = batch_objective(&student, &teacher, &batch, &config)?.grads;
    // a larger step keeps round-off of the many-term objective below the tolerance
    let numeric = perturb_each(&mut student, 1e-5, |m| Ok(batch_objective(m, &teacher, &batch, &config)?.mean_loss))?;
    Ok(compare(&analytic, &numeric, config.feature_source))
}
