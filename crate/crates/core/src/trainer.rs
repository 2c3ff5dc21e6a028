//! Student-teacher dense self-distillation.
//!
//! Each image yields two global crops (seen by both networks) and
//! `n_local` low-resolution local crops (student only). Every teacher global
//! is paired with every student local, and the two globals are crossed
//! between networks. For each pair both grids are ROI-aligned on the shared
//! region and compared with the configured kernel loss; gradients flow into
//! the student only and the teacher follows by EMA.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::checkpoint::Checkpoint;
use crate::encoder::{ema_momentum, ema_update, EmaSchedule, EncoderConfig, FeatureSource, HeadConfig, Model, ModelTape};
use crate::error::{Error, Result};
use crate::geometry::{
    flatten_grid, roi_align, sample_global_crop, sample_local_crop_minoverlap, CropBox, FeatureGrid, RoiPlan, ViewPair,
};
use crate::kernel::{loss_and_grad, FeatureMatrix, LossKind};
use crate::rng::{rng_for, Rng};
use crate::synth::{augment, crop_resize, AugmentStrength, Dataset, Image};

/// How teacher and student views are paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// teacher globals × student locals, plus the crossed globals
    Standard,
    /// each global paired with its own student copy (debugging aid)
    SelfGlobals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub n_global: usize,
    pub n_local: usize,
    pub min_overlap: f64,
    pub teacher_aug: f64,
    pub student_aug: f64,
    pub target_h: usize,
    pub target_w: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_source: FeatureSource,
    pub global_size: usize,
    pub local_size: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub ema_initial: f64,
    pub max_tries: usize,
    pub pairing: Pairing,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Paka,
            n_global: 2,
            n_local: 4,
            min_overlap: 0.9,
            teacher_aug: 0.0,
            student_aug: 1.0,
            target_h: 4,
            target_w: 4,
            learning_rate: 1e-3,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 500,
            batch_size: 4,
            seed: 0,
            feature_source: FeatureSource::Head,
            global_size: 64,
            local_size: 32,
            global_scale: (0.4, 1.0),
            local_scale: (0.05, 0.3),
            ema_initial: 0.99,
            max_tries: crate::geometry::DEFAULT_MAX_TRIES,
            pairing: Pairing::Standard,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_global != 2 {
            return bad("n_global is fixed at 2");
        }
        if !unit(self.min_overlap) || !unit(self.teacher_aug) || !unit(self.student_aug) {
            return bad("min_overlap and augmentation strengths must lie in [0, 1]");
        }
        if self.target_h == 0 || self.target_w == 0 || self.batch_size == 0 {
            return bad("target resolution and batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.epsilon > 0.0) {
            return bad("learning rate and weight decay must be non-negative, epsilon positive");
        }
        if !(unit(self.beta1) && self.beta1 < 1.0 && unit(self.beta2) && self.beta2 < 1.0) {
            return bad("betas must lie in [0, 1)");
        }
        if !unit(self.ema_initial) {
            return bad("ema_initial must lie in [0, 1]");
        }
        let p = self.encoder.patch_size;
        if p == 0 || self.global_size % p != 0 || self.local_size % p != 0 {
            return bad("view resolutions must be multiples of the patch size");
        }
        if self.max_tries == 0 {
            return bad("max_tries must be positive");
        }
        Ok(())
    }

    pub fn local_grid(&self) -> (usize, usize) {
        let p = self.encoder.patch_size;
        (self.local_size / p, self.local_size / p)
    }
}

/// Views of one image.
#[derive(Debug, Clone)]
pub struct ImageViews {
    pub global_boxes: Vec<CropBox>,
    pub local_boxes: Vec<CropBox>,
    pub teacher_globals: Vec<Image>,
    pub student_globals: Vec<Image>,
    pub student_locals: Vec<Image>,
}

impl ImageViews {
    /// `(teacher global index, student view index)` pairs. Student views are
    /// numbered globals first, then locals.
    pub fn pairs(&self, pairing: Pairing) -> Vec<(usize, usize)> {
        let n_global = self.global_boxes.len();
        match pairing {
            Pairing::SelfGlobals => (0..n_global).map(|g| (g, g)).collect(),
            Pairing::Standard => {
                let mut out = Vec::with_capacity(n_global * self.local_boxes.len() + 2);
                for g in 0..n_global {
                    for l in 0..self.local_boxes.len() {
                        out.push((g, n_global + l));
                    }
                }
                out.push((0, 1));
                out.push((1, 0));
                out
            }
        }
    }

    pub fn student_box(&self, view: usize) -> CropBox {
        let n_global = self.global_boxes.len();
        if view < n_global {
            self.global_boxes[view]
        } else {
            self.local_boxes[view - n_global]
        }
    }

    pub fn student_images(&self) -> impl Iterator<Item = &Image> {
        self.student_globals.iter().chain(&self.student_locals)
    }
}

/// Crops, resizes and augments the views of every image.
pub fn build_view_batch(rng: &mut Rng, images: &[&Image], config: &TrainConfig) -> Result<Vec<ImageViews>> {
    let teacher_s = AugmentStrength::new(config.teacher_aug)?;
    let student_s = AugmentStrength::new(config.student_aug)?;
    if let Some(first) = images.first() {
        if images.iter().any(|im| im.dim() != first.dim()) {
            return Err(Error::ShapeMismatch("images in a batch must share dimensions".into()));
        }
    }
    images
        .iter()
        .map(|&image| {
            let globals = sample_global_pair(rng, config)?;
            let locals = (0..config.n_local)
                .map(|_| sample_local_crop_minoverlap(rng, &globals, config.local_scale, config.min_overlap, config.max_tries))
                .collect::<Result<Vec<_>>>()?;
            let g = config.global_size;
            let plain_globals = globals.iter().map(|b| crop_resize(image, b, g, g)).collect::<Result<Vec<_>>>()?;
            let teacher_globals = plain_globals.iter().map(|v| augment(v, teacher_s, rng)).collect();
            let student_globals = plain_globals.iter().map(|v| augment(v, student_s, rng)).collect();
            let l = config.local_size;
            let student_locals = locals
                .iter()
                .map(|b| crop_resize(image, b, l, l).map(|v| augment(&v, student_s, rng)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageViews { global_boxes: globals, local_boxes: locals, teacher_globals, student_globals, student_locals })
        })
        .collect()
}

/// Two global crops with a non-empty common region.
fn sample_global_pair(rng: &mut Rng, config: &TrainConfig) -> Result<Vec<CropBox>> {
    for _ in 0..config.max_tries {
        let a = sample_global_crop(rng, config.global_scale)?;
        let b = sample_global_crop(rng, config.global_scale)?;
        if a.intersection(&b).is_some() {
            return Ok(vec![a, b]);
        }
    }
    Err(Error::InfeasibleConstraint("could not draw two overlapping global crops".into()))
}

/// Loss of one pair and its gradient with respect to the student grid rows.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub loss: f64,
    /// `(h·w) × D`, row-major over the student grid
    pub student_grad: Array2<f64>,
}

/// Aligns both grids on the shared region and evaluates the loss.
pub fn compute_pair_loss(
    teacher_grid: &FeatureGrid,
    teacher_box: &CropBox,
    student_grid: &FeatureGrid,
    student_box: &CropBox,
    config: &TrainConfig,
) -> Result<PairOutcome> {
    let pair = ViewPair::new(*teacher_box, *student_box, config.target_h, config.target_w)?;
    let (t_local, s_local) = pair.local_boxes()?;
    let teacher = flatten_grid(&roi_align(teacher_grid, &t_local, pair.target_h, pair.target_w)?);
    let plan = RoiPlan::new(student_grid.height(), student_grid.width(), &s_local, pair.target_h, pair.target_w)?;
    let student = FeatureMatrix::new(plan.apply(&student_grid.to_rows()))?;
    let (loss, grad) = loss_and_grad(config.loss, &student, &teacher)?;
    Ok(PairOutcome { loss, student_grad: plan.apply_adjoint(grad.as_array()) })
}

/// Loss of one teacher/student pair, `None` if it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairLoss {
    pub image: usize,
    pub teacher_view: usize,
    pub student_view: usize,
    pub loss: Option<f64>,
}

/// Mean loss over a batch of views and its gradient with respect to the
/// student parameters.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub mean_loss: f64,
    pub pairs: Vec<PairLoss>,
    pub grads: Model,
}

impl BatchObjective {
    pub fn evaluated_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.loss.is_some()).count()
    }
}

fn skippable(e: &Error) -> bool {
    matches!(e, Error::DegenerateInput { .. } | Error::ZeroRow { .. } | Error::EmptyIntersection)
}

struct ImageContribution {
    pairs: Vec<PairLoss>,
    loss_sum: f64,
    grads: Model,
}

fn image_contribution(
    index: usize,
    views: &ImageViews,
    student: &Model,
    teacher: &Model,
    config: &TrainConfig,
) -> Result<ImageContribution> {
    let source = config.feature_source;
    let teacher_grids = views.teacher_globals.iter().map(|v| teacher.features(v, source)).collect::<Result<Vec<_>>>()?;
    let student_fwd: Vec<(FeatureGrid, ModelTape)> =
        views.student_images().map(|v| student.forward(v, source)).collect::<Result<_>>()?;
    let mut upstream: Vec<Array2<f64>> =
        student_fwd.iter().map(|(g, _)| Array2::zeros((g.height() * g.width(), g.channels()))).collect();

    let mut pairs = Vec::new();
    let mut loss_sum = 0.0;
    for (t, s) in views.pairs(config.pairing) {
        let outcome = compute_pair_loss(&teacher_grids[t], &views.global_boxes[t], &student_fwd[s].0, &views.student_box(s), config);
        let loss = match outcome {
            Ok(o) => {
                upstream[s] += &o.student_grad;
                loss_sum += o.loss;
                Some(o.loss)
            }
            Err(e) if skippable(&e) => {
                log::warn!("skipping pair (image {index}, teacher {t}, student {s}): {e}");
                None
            }
            Err(e) => return Err(e),
        };
        pairs.push(PairLoss { image: index, teacher_view: t, student_view: s, loss });
    }

    let mut grads = student.zeros_like();
    for ((_, tape), up) in student_fwd.iter().zip(&upstream) {
        if up.iter().any(|&v| v != 0.0) {
            grads.add_assign(&student.backward(tape, up)?);
        }
    }
    Ok(ImageContribution { pairs, loss_sum, grads })
}

/// Averages the pair losses over the whole batch; the teacher only provides
/// targets.
pub fn batch_objective(student: &Model, teacher: &Model, batch: &[ImageViews], config: &TrainConfig) -> Result<BatchObjective> {
    let parts: Vec<ImageContribution> = batch
        .par_iter()
        .enumerate()
        .map(|(i, views)| image_contribution(i, views, student, teacher, config))
        .collect::<Result<_>>()?;
    let mut grads = student.zeros_like();
    let mut pairs = Vec::new();
    let mut loss_sum = 0.0;
    // fixed summation order keeps results independent of thread scheduling
    for part in parts {
        grads.add_assign(&part.grads);
        loss_sum += part.loss_sum;
        pairs.extend(part.pairs);
    }
    let n_valid = pairs.iter().filter(|p| p.loss.is_some()).count();
    let mean_loss = if n_valid > 0 { loss_sum / n_valid as f64 } else { f64::NAN };
    if n_valid > 0 {
        grads.scale(1.0 / n_valid as f64);
    }
    Ok(BatchObjective { mean_loss, pairs, grads })
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
    pub fn step(&mut self, params: &mut Model, grads: &Model) {
        let grads = grads.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.2.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((theta, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let decay = self.lr * self.weight_decay * theta[i];
                theta[i] = theta[i] - self.lr * (m_hat / (v_hat.sqrt() + self.epsilon)) - decay;
            }
        }
    }
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: Model,
    pub teacher: Model,
    pub optimizer: AdamW,
    pub schedule: EmaSchedule,
    pub last_good_step: Option<usize>,
}

impl TrainState {
    /// Student and teacher start from the same weights.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Model::init(config.encoder, config.head, &mut rng_for(config.seed, "init", 0));
        Ok(Self {
            teacher: student.clone(),
            student,
            optimizer: AdamW::new(config),
            schedule: EmaSchedule::new(config.ema_initial, config.steps)?,
            last_good_step: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { student: self.student.clone(), teacher: self.teacher.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub pair_losses: Vec<PairLoss>,
    pub mean_loss: f64,
    pub n_pairs: usize,
    pub ema_momentum: f64,
    pub wall_ms: f64,
}

/// One optimization step on a prepared batch of views.
pub fn training_step(state: &mut TrainState, batch: &[ImageViews], step: usize, config: &TrainConfig) -> Result<StepRecord> {
    let started = Instant::now();
    let objective = batch_objective(&state.student, &state.teacher, batch, config)?;
    let n_pairs = objective.evaluated_pairs();
    if n_pairs > 0 && !objective.mean_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, last_good: state.last_good_step });
    }
    if n_pairs > 0 {
        state.optimizer.step(&mut state.student, &objective.grads);
        if !state.student.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_good: state.last_good_step });
        }
    } else {
        log::warn!("step {step}: every pair was skipped, no update");
    }
    let momentum = ema_momentum(&state.schedule, step)?;
    ema_update(&mut state.teacher, &state.student, momentum)?;
    state.last_good_step = Some(step);
    Ok(StepRecord {
        step,
        pair_losses: objective.pairs,
        mean_loss: objective.mean_loss,
        n_pairs,
        ema_momentum: momentum,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Batch indices for `step`, drawn without replacement from `pool`.
pub fn batch_indices(config: &TrainConfig, pool: &[usize], step: usize) -> Vec<usize> {
    let mut rng = rng_for(config.seed, "order", step as u64);
    let take = config.batch_size.min(pool.len());
    sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
}

/// Trains on the images at `pool` for `config.steps` steps. Data order,
/// crops and augmentations depend only on `config.seed`, not on the loss.
pub fn run_training(
    config: &TrainConfig,
    dataset: &Dataset,
    pool: &[usize],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if pool.is_empty() || dataset.is_empty() {
        return Err(Error::EmptyDataset(Default::default()));
    }
    if let Some(&bad) = pool.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::InvalidArgument(format!("image index {bad} outside the dataset")));
    }
    let mut state = TrainState::new(config)?;
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = batch_indices(config, pool, step);
        let images: Vec<&Image> = idx.iter().map(|&i| &dataset.images[i]).collect();
        let mut view_rng = rng_for(config.seed, "views", step as u64);
        let batch = build_view_batch(&mut view_rng, &images, config)?;
        let record = training_step(&mut state, &batch, step, config)?;
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { state, log })
}

pub const STEPS_CSV_HEADER: &str = "step,mean_loss,n_pairs,ema_momentum,wall_ms";

/// Writes `steps.csv`. With `timing = false` the wall-clock column is
/// written as 0 so repeated runs produce identical files.
pub fn write_steps_csv(log: &[StepRecord], path: &Path, timing: bool) -> Result<()> {
    let mut out = String::with_capacity(64 * (log.len() + 1));
    out.push_str(STEPS_CSV_HEADER);
    out.push('\n');
    for r in log {
        let wall = if timing { r.wall_ms } else { 0.0 };
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.mean_loss, r.n_pairs, r.ema_momentum, wall));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One parsed row of `steps.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub mean_loss: f64,
    pub n_pairs: usize,
    pub ema_momentum: f64,
    pub wall_ms: f64,
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>> {
    let text = std::fs::read_to_string(path)?;
    let corrupt = |reason: String| Error::CorruptFile { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    if lines.next() != Some(STEPS_CSV_HEADER) {
        return Err(corrupt("unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(corrupt(format!("line {}: expected 5 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("line {}: {e}", i + 2)));
            let int = |s: &str| s.parse::<usize>().map_err(|e| corrupt(format!("line {}: {e}", i + 2)));
            Ok(StepRow {
                step: int(fields[0])?,
                mean_loss: num(fields[1])?,
                n_pairs: int(fields[2])?,
                ema_momentum: num(fields[3])?,
                wall_ms: num(fields[4])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvSummary {
    /// CV of each consecutive window
    pub windows: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityVerdict {
    AMoreStable,
    BMoreStable,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub window: usize,
    pub a: CvSummary,
    pub b: CvSummary,
    pub verdict: StabilityVerdict,
}

fn summarize(series: &[f64], window: usize) -> Result<CvSummary> {
    let windows = series
        .chunks_exact(window)
        .map(crate::kernel::coefficient_of_variation)
        .collect::<Result<Vec<_>>>()?;
    let mean = windows.iter().sum::<f64>() / windows.len() as f64;
    let min = windows.iter().copied().fold(f64::INFINITY, f64::min);
    let max = windows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(CvSummary { windows, mean, min, max })
}

/// Compares the loss variability of two equally long runs using the
/// coefficient of variation over consecutive windows of `window` steps
/// (a trailing partial window is ignored). A window equal to the run length
/// gives one CV over the whole run.
pub fn stability_report(a: &[f64], b: &[f64], window: usize) -> Result<StabilityReport> {
    if a.len() != b.len() || window < 2 || a.len() < window {
        return Err(Error::LengthMismatch(format!(
            "logs of {} and {} steps with window {window}",
            a.len(),
            b.len()
        )));
    }
    let sa = summarize(a, window)?;
    let sb = summarize(b, window)?;
    let scale = sa.mean.abs().max(sb.mean.abs()).max(f64::MIN_POSITIVE);
    let verdict = if (sa.mean - sb.mean).abs() <= 1e-12 * scale {
        StabilityVerdict::Tie
    } else if sa.mean < sb.mean {
        StabilityVerdict::AMoreStable
    } else {
        StabilityVerdict::BMoreStable
    };
    Ok(StabilityReport { window, a: sa, b: sb, verdict })
}
