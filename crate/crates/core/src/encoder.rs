//! Dense encoder, projection head, reverse-mode gradients and EMA.
//!
//! The encoder embeds non-overlapping `P × P` patches linearly and refines
//! them with residual blocks
//!
//! ```text
//! x ← x + tanh((x + mean₃ₓ₃(x)) W1 + b1) W2 + b2
//! ```
//!
//! where `mean₃ₓ₃` averages each cell's 3×3 spatial neighbourhood. Features
//! are rows: a grid of `h × w` cells is an `(h·w) × D` matrix, row `y·w + x`.

use ndarray::{Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FeatureGrid;
use crate::rng::Rng;

pub mod checkpoint;

/// How the 3×3 neighbourhood treats the grid border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderMode {
    Clamp,
    Wrap,
}

/// Which features the alignment losses see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Head,
    Backbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub blocks: usize,
    pub border: BorderMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 8, in_channels: 3, dim: 32, blocks: 2, border: BorderMode::Clamp }
    }
}

impl EncoderConfig {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 64, out: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerBlock {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `(P·P·C) × D`
    pub patch_embed: Array2<f64>,
    pub embed_bias: Array1<f64>,
    pub blocks: Vec<MixerBlock>,
}

/// Three affine layers `D → hidden → hidden → out`, tanh after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeadParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Encoder plus projection head; the unit that is optimized, averaged into
/// the teacher and checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub head: ProjectionHeadParams,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn fan_in_init(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    gaussian(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Self {
        let d = config.dim;
        let patch_embed = fan_in_init(rng, config.patch_len(), d);
        let blocks = (0..config.blocks)
            .map(|_| MixerBlock {
                w1: fan_in_init(rng, d, d),
                b1: Array1::zeros(d),
                w2: fan_in_init(rng, d, d),
                b2: Array1::zeros(d),
            })
            .collect();
        Self { config, patch_embed, embed_bias: Array1::zeros(d), blocks }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.config.dim;
        Self {
            config: self.config,
            patch_embed: Array2::zeros(self.patch_embed.raw_dim()),
            embed_bias: Array1::zeros(d),
            blocks: self
                .blocks
                .iter()
                .map(|_| MixerBlock {
                    w1: Array2::zeros((d, d)),
                    b1: Array1::zeros(d),
                    w2: Array2::zeros((d, d)),
                    b2: Array1::zeros(d),
                })
                .collect(),
        }
    }
}

impl ProjectionHeadParams {
    pub fn init(dim_in: usize, config: HeadConfig, rng: &mut Rng) -> Self {
        Self {
            w1: fan_in_init(rng, dim_in, config.hidden),
            b1: Array1::zeros(config.hidden),
            w2: fan_in_init(rng, config.hidden, config.hidden),
            b2: Array1::zeros(config.hidden),
            w3: fan_in_init(rng, config.hidden, config.out),
            b3: Array1::zeros(config.out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.len()),
        }
    }

    pub fn dim_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn dim_out(&self) -> usize {
        self.w3.ncols()
    }
}

/// Cut a `C × H × W` image into patch rows, column order `(c, py, px)`.
pub fn extract_patches(image: &Array3<f64>, config: &EncoderConfig) -> Result<(Array2<f64>, usize, usize)> {
    let (c, h, w) = image.dim();
    let p = config.patch_size;
    if c != config.in_channels || p == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {c}x{h}x{w} incompatible with patch size {p} and {} channels",
            config.in_channels
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, config.patch_len()));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        row[k] = image[[ch, gy * p + py, gx * p + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, gh, gw))
}

fn neighbor_index(v: usize, delta: isize, size: usize, border: BorderMode) -> usize {
    let raw = v as isize + delta;
    match border {
        BorderMode::Clamp => raw.clamp(0, size as isize - 1) as usize,
        BorderMode::Wrap => raw.rem_euclid(size as isize) as usize,
    }
}

/// 3×3 neighbourhood mean over a row-major `h × w` grid of rows. Border
/// cells reuse clamped (or wrapped) neighbours so every mean has 9 terms.
pub fn neighbor_mean(x: &Array2<f64>, h: usize, w: usize, border: BorderMode) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for y in 0..h {
        for xx in 0..w {
            let mut dst = out.row_mut(y * w + xx);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let ny = neighbor_index(y, dy, h, border);
                    let nx = neighbor_index(xx, dx, w, border);
                    dst += &x.row(ny * w + nx);
                }
            }
            dst /= 9.0;
        }
    }
    out
}

fn neighbor_mean_adjoint(g: &Array2<f64>, h: usize, w: usize, border: BorderMode) -> Array2<f64> {
    let mut out = Array2::zeros(g.raw_dim());
    for y in 0..h {
        for xx in 0..w {
            let src = g.row(y * w + xx);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let ny = neighbor_index(y, dy, h, border);
                    let nx = neighbor_index(xx, dx, w, border);
                    out.row_mut(ny * w + nx).scaled_add(1.0 / 9.0, &src);
                }
            }
        }
    }
    out
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

#[derive(Debug, Clone)]
struct BlockTape {
    /// input to the first affine map, `x + mean(x)`
    mixed: Array2<f64>,
    /// `tanh(mixed W1 + b1)`
    act: Array2<f64>,
}

/// Intermediates of one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTape {
    grid_h: usize,
    grid_w: usize,
    patches: Array2<f64>,
    blocks: Vec<BlockTape>,
}

impl EncoderTape {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }
}

/// Intermediates of one projection-head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTape {
    grid_h: usize,
    grid_w: usize,
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

fn encode_rows(
    params: &EncoderParams,
    patches: Array2<f64>,
    gh: usize,
    gw: usize,
    record: bool,
) -> (Array2<f64>, Vec<BlockTape>, Array2<f64>) {
    let mut x = add_bias(patches.dot(&params.patch_embed), &params.embed_bias);
    let mut tapes = Vec::new();
    for block in &params.blocks {
        let mixed = &x + &neighbor_mean(&x, gh, gw, params.config.border);
        let act = add_bias(mixed.dot(&block.w1), &block.b1).mapv_into(f64::tanh);
        x += &add_bias(act.dot(&block.w2), &block.b2);
        if record {
            tapes.push(BlockTape { mixed, act });
        }
    }
    (x, tapes, patches)
}

/// Runs the encoder on a `C × H × W` image.
pub fn encoder_forward(params: &EncoderParams, image: &Array3<f64>) -> Result<(FeatureGrid, EncoderTape)> {
    let (patches, gh, gw) = extract_patches(image, &params.config)?;
    let (x, blocks, patches) = encode_rows(params, patches, gh, gw, true);
    let grid = FeatureGrid::from_rows(x, gh, gw)?;
    Ok((grid, EncoderTape { grid_h: gh, grid_w: gw, patches, blocks }))
}

/// Forward pass without recording intermediates.
pub fn encoder_features(params: &EncoderParams, image: &Array3<f64>) -> Result<FeatureGrid> {
    let (patches, gh, gw) = extract_patches(image, &params.config)?;
    let (x, _, _) = encode_rows(params, patches, gh, gw, false);
    FeatureGrid::from_rows(x, gh, gw)
}

fn head_rows(params: &ProjectionHeadParams, input: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let h1 = add_bias(input.dot(&params.w1), &params.b1).mapv_into(f64::tanh);
    let h2 = add_bias(h1.dot(&params.w2), &params.b2).mapv_into(f64::tanh);
    let out = add_bias(h2.dot(&params.w3), &params.b3);
    (h1, h2, out)
}

pub fn projector_forward(params: &ProjectionHeadParams, grid: &FeatureGrid) -> Result<(FeatureGrid, HeadTape)> {
    if grid.channels() != params.dim_in() {
        return Err(Error::ShapeMismatch(format!(
            "head expects {} channels, grid has {}",
            params.dim_in(),
            grid.channels()
        )));
    }
    let input = grid.to_rows();
    let (h1, h2, out) = head_rows(params, &input);
    let (gh, gw) = (grid.height(), grid.width());
    Ok((FeatureGrid::from_rows(out, gh, gw)?, HeadTape { grid_h: gh, grid_w: gw, input, h1, h2 }))
}

fn tanh_backward(grad: Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
    let mut g = grad;
    g.zip_mut_with(act, |gv, &a| *gv *= 1.0 - a * a);
    g
}

fn check_upstream(rows: &Array2<f64>, n: usize, d: usize, what: &str) -> Result<()> {
    if rows.dim() != (n, d) {
        return Err(Error::StaleCache(format!(
            "{what}: upstream gradient {:?} does not match cached {:?}",
            rows.dim(),
            (n, d)
        )));
    }
    Ok(())
}

/// Gradients of the head parameters and of the head input, given the
/// gradient with respect to the head output rows.
pub fn projector_backward(
    params: &ProjectionHeadParams,
    tape: &HeadTape,
    upstream: &Array2<f64>,
) -> Result<(ProjectionHeadParams, Array2<f64>)> {
    check_upstream(upstream, tape.grid_h * tape.grid_w, params.dim_out(), "head")?;
    if tape.input.ncols() != params.dim_in() || tape.h1.ncols() != params.w1.ncols() {
        return Err(Error::StaleCache("head tape recorded with different parameter shapes".into()));
    }
    let gw3 = tape.h2.t().dot(upstream);
    let gb3 = upstream.sum_axis(Axis(0));
    let dz2 = tanh_backward(upstream.dot(&params.w3.t()), &tape.h2);
    let gw2 = tape.h1.t().dot(&dz2);
    let gb2 = dz2.sum_axis(Axis(0));
    let dz1 = tanh_backward(dz2.dot(&params.w2.t()), &tape.h1);
    let gw1 = tape.input.t().dot(&dz1);
    let gb1 = dz1.sum_axis(Axis(0));
    let grad_input = dz1.dot(&params.w1.t());
    Ok((ProjectionHeadParams { w1: gw1, b1: gb1, w2: gw2, b2: gb2, w3: gw3, b3: gb3 }, grad_input))
}

/// Parameter gradients of the encoder, given the gradient with respect to
/// the output feature rows.
pub fn encoder_backward(params: &EncoderParams, tape: &EncoderTape, upstream: &Array2<f64>) -> Result<EncoderParams> {
    let (gh, gw) = (tape.grid_h, tape.grid_w);
    check_upstream(upstream, gh * gw, params.config.dim, "encoder")?;
    if tape.blocks.len() != params.blocks.len() || tape.patches.ncols() != params.patch_embed.nrows() {
        return Err(Error::StaleCache("encoder tape recorded with a different architecture".into()));
    }
    let mut grads = params.zeros_like();
    let mut dx = upstream.clone();
    for ((block, bt), gblock) in params.blocks.iter().zip(&tape.blocks).zip(grads.blocks.iter_mut()).rev() {
        gblock.w2 = bt.act.t().dot(&dx);
        gblock.b2 = dx.sum_axis(Axis(0));
        let dz = tanh_backward(dx.dot(&block.w2.t()), &bt.act);
        gblock.w1 = bt.mixed.t().dot(&dz);
        gblock.b1 = dz.sum_axis(Axis(0));
        let dmixed = dz.dot(&block.w1.t());
        dx += &neighbor_mean_adjoint(&dmixed, gh, gw, params.config.border);
        dx += &dmixed;
    }
    grads.patch_embed = tape.patches.t().dot(&dx);
    grads.embed_bias = dx.sum_axis(Axis(0));
    Ok(grads)
}

/// Tape of a full model forward.
#[derive(Debug, Clone)]
pub struct ModelTape {
    encoder: EncoderTape,
    head: Option<HeadTape>,
}

impl Model {
    pub fn init(encoder: EncoderConfig, head: HeadConfig, rng: &mut Rng) -> Self {
        let enc = EncoderParams::init(encoder, rng);
        let head = ProjectionHeadParams::init(encoder.dim, head, rng);
        Self { encoder: enc, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self { encoder: self.encoder.zeros_like(), head: self.head.zeros_like() }
    }

    pub fn forward(&self, image: &Array3<f64>, source: FeatureSource) -> Result<(FeatureGrid, ModelTape)> {
        let (grid, enc_tape) = encoder_forward(&self.encoder, image)?;
        match source {
            FeatureSource::Backbone => Ok((grid, ModelTape { encoder: enc_tape, head: None })),
            FeatureSource::Head => {
                let (out, head_tape) = projector_forward(&self.head, &grid)?;
                Ok((out, ModelTape { encoder: enc_tape, head: Some(head_tape) }))
            }
        }
    }

    /// Forward without a tape, as used for the teacher and for evaluation.
    pub fn features(&self, image: &Array3<f64>, source: FeatureSource) -> Result<FeatureGrid> {
        let grid = encoder_features(&self.encoder, image)?;
        match source {
            FeatureSource::Backbone => Ok(grid),
            FeatureSource::Head => {
                let (gh, gw) = (grid.height(), grid.width());
                let (_, _, out) = head_rows(&self.head, &grid.to_rows());
                FeatureGrid::from_rows(out, gh, gw)
            }
        }
    }

    /// Parameter gradients given the gradient with respect to the output
    /// grid (as `(h·w) × D` rows). Head gradients are zero when the tape
    /// stopped at the backbone.
    pub fn backward(&self, tape: &ModelTape, upstream: &Array2<f64>) -> Result<Model> {
        let (head_grads, enc_upstream) = match &tape.head {
            Some(ht) => projector_backward(&self.head, ht, upstream)?,
            None => (self.head.zeros_like(), upstream.clone()),
        };
        let enc_grads = encoder_backward(&self.encoder, &tape.encoder, &enc_upstream)?;
        Ok(Model { encoder: enc_grads, head: head_grads })
    }

    /// Named tensors in a fixed order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let e = &self.encoder;
        out.push(("encoder.patch_embed".into(), e.patch_embed.shape().to_vec(), slice(&e.patch_embed)));
        out.push(("encoder.embed_bias".into(), e.embed_bias.shape().to_vec(), slice(&e.embed_bias)));
        for (i, b) in e.blocks.iter().enumerate() {
            out.push((format!("encoder.blocks.{i}.w1"), b.w1.shape().to_vec(), slice(&b.w1)));
            out.push((format!("encoder.blocks.{i}.b1"), b.b1.shape().to_vec(), slice(&b.b1)));
            out.push((format!("encoder.blocks.{i}.w2"), b.w2.shape().to_vec(), slice(&b.w2)));
            out.push((format!("encoder.blocks.{i}.b2"), b.b2.shape().to_vec(), slice(&b.b2)));
        }
        let h = &self.head;
        for (name, arr) in [("w1", &h.w1), ("w2", &h.w2), ("w3", &h.w3)] {
            out.push((format!("head.{name}"), arr.shape().to_vec(), slice(arr)));
        }
        for (name, arr) in [("b1", &h.b1), ("b2", &h.b2), ("b3", &h.b3)] {
            out.push((format!("head.{name}"), arr.shape().to_vec(), slice(arr)));
        }
        out
    }

    /// Mutable views in the same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let e = &mut self.encoder;
        out.push(slice_mut(&mut e.patch_embed));
        out.push(slice_mut(&mut e.embed_bias));
        for b in e.blocks.iter_mut() {
            out.push(slice_mut(&mut b.w1));
            out.push(slice_mut(&mut b.b1));
            out.push(slice_mut(&mut b.w2));
            out.push(slice_mut(&mut b.b2));
        }
        let h = &mut self.head;
        out.push(slice_mut(&mut h.w1));
        out.push(slice_mut(&mut h.w2));
        out.push(slice_mut(&mut h.w3));
        out.push(slice_mut(&mut h.b1));
        out.push(slice_mut(&mut h.b2));
        out.push(slice_mut(&mut h.b3));
        out
    }

    pub fn same_shapes(&self, other: &Model) -> bool {
        self.encoder.config == other.encoder.config
            && self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.1 == b.1)
            && self.tensors().len() == other.tensors().len()
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Model) {
        let others: Vec<Vec<f64>> = other.tensors().into_iter().map(|t| t.2.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(others) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
    a.as_slice_mut().expect("standard layout")
}

/// Cosine schedule for the teacher momentum, rising from `m0` to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule {
    pub m0: f64,
    pub total_steps: usize,
}

impl EmaSchedule {
    pub fn new(m0: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&m0) {
            return Err(Error::InvalidArgument(format!("initial momentum {m0} outside [0, 1]")));
        }
        Ok(Self { m0, total_steps })
    }
}

/// `1 − (1 − m0)(cos(π t / T) + 1) / 2`.
pub fn ema_momentum(schedule: &EmaSchedule, step: usize) -> Result<f64> {
    let total = schedule.total_steps;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step == total {
        return Ok(1.0);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(1.0 - (1.0 - schedule.m0) * (phase.cos() + 1.0) / 2.0)
}

/// `θ_t ← m θ_t + (1 − m) θ_s`, over encoder and head. Evaluated as
/// `θ_t + (1 − m)(θ_s − θ_t)` so that identical networks stay bit-identical.
pub fn ema_update(teacher: &mut Model, student: &Model, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
    }
    if !teacher.same_shapes(student) {
        return Err(Error::ShapeMismatch("teacher and student architectures differ".into()));
    }
    let src = student.tensors();
    for (dst, (_, _, s)) in teacher.tensors_mut().into_iter().zip(src) {
        if momentum == 0.0 {
            dst.copy_from_slice(s);
            continue;
        }
        for (t, &sv) in dst.iter_mut().zip(s) {
            *t += (1.0 - momentum) * (sv - *t);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn small_config(blocks: usize) -> EncoderConfig {
        EncoderConfig { patch_size: 2, in_channels: 3, dim: 4, blocks, border: BorderMode::Clamp }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = rng_for(seed, "image", 0);
        let n = Normal::new(0.5, 0.3).unwrap();
        Array3::from_shape_simple_fn((3, h, w), || n.sample(&mut rng))
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_grid() {
        let params = EncoderParams::init(small_config(2), &mut rng_for(1, "init", 0));
        let (grid, _) = encoder_forward(&params, &Array3::zeros((3, 4, 6))).unwrap();
        assert_eq!((grid.height(), grid.width(), grid.channels()), (2, 3, 4));
        assert!(grid.as_array().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_blocks_is_pure_embedding() {
        let params = EncoderParams::init(small_config(0), &mut rng_for(2, "init", 0));
        let image = random_image(3, 4, 4);
        let (grid, _) = encoder_forward(&params, &image).unwrap();
        let (patches, _, _) = extract_patches(&image, &params.config).unwrap();
        let expected = patches.dot(&params.patch_embed) + &params.embed_bias;
        assert_eq!(grid.to_rows(), expected);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let params = EncoderParams::init(small_config(2), &mut rng_for(4, "init", 0));
        let image = random_image(5, 6, 4);
        let a = encoder_forward(&params, &image).unwrap().0;
        let b = encoder_forward(&params, &image).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(encoder_features(&params, &image).unwrap(), a);
        assert!(matches!(encoder_forward(&params, &Array3::zeros((3, 5, 4))), Err(Error::ShapeMismatch(_))));
        assert!(matches!(encoder_forward(&params, &Array3::zeros((1, 4, 4))), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn projector_identity_layers_and_shapes() {
        let d = 3;
        let head = ProjectionHeadParams {
            w1: Array2::eye(d),
            b1: Array1::zeros(d),
            w2: Array2::eye(d),
            b2: Array1::zeros(d),
            w3: Array2::eye(d),
            b3: Array1::zeros(d),
        };
        let zero = FeatureGrid::new(Array3::zeros((2, 2, d))).unwrap();
        let (out, _) = projector_forward(&head, &zero).unwrap();
        assert!(out.as_array().iter().all(|&v| v == 0.0));
        let one = FeatureGrid::new(Array3::from_elem((1, 1, d), 0.3)).unwrap();
        let (out, _) = projector_forward(&head, &one).unwrap();
        assert_eq!((out.height(), out.width()), (1, 1));
        assert!((out.as_array()[[0, 0, 0]] - 0.3f64.tanh().tanh()).abs() < 1e-15);
        let wrong = FeatureGrid::new(Array3::zeros((1, 1, d + 1))).unwrap();
        assert!(matches!(projector_forward(&head, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = Model::init(small_config(2), HeadConfig { hidden: 5, out: 3 }, &mut rng_for(6, "init", 0));
        let (grid, tape) = model.forward(&random_image(7, 4, 4), FeatureSource::Head).unwrap();
        let grads = model.backward(&tape, &Array2::zeros((4, grid.channels()))).unwrap();
        assert!(grads.tensors().iter().all(|t| t.2.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_embedding_gradient_for_sum_loss() {
        let params = EncoderParams::init(small_config(0), &mut rng_for(8, "init", 0));
        let image = random_image(9, 4, 6);
        let (grid, tape) = encoder_forward(&params, &image).unwrap();
        let upstream = Array2::ones((grid.height() * grid.width(), grid.channels()));
        let grads = encoder_backward(&params, &tape, &upstream).unwrap();
        let (patches, _, _) = extract_patches(&image, &params.config).unwrap();
        // Σ_patches outer(pixels, 1)
        let column_sums = patches.sum_axis(Axis(0));
        for ((r, c), v) in grads.patch_embed.indexed_iter() {
            assert!((v - column_sums[r]).abs() < 1e-12, "({r},{c})");
        }
        assert!(grads.embed_bias.iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }

    #[test]
    fn stale_cache_detected() {
        let model = Model::init(small_config(1), HeadConfig { hidden: 5, out: 3 }, &mut rng_for(10, "init", 0));
        let (_, tape) = model.forward(&random_image(11, 4, 4), FeatureSource::Head).unwrap();
        assert!(matches!(model.backward(&tape, &Array2::zeros((3, 3))), Err(Error::StaleCache(_))));
        let other = Model::init(small_config(2), HeadConfig { hidden: 5, out: 3 }, &mut rng_for(10, "init", 0));
        assert!(matches!(other.backward(&tape, &Array2::zeros((4, 3))), Err(Error::StaleCache(_))));
    }

    #[test]
    fn momentum_schedule() {
        let s = EmaSchedule::new(0.99, 100).unwrap();
        assert_eq!(ema_momentum(&s, 0).unwrap(), 0.99);
        assert_eq!(ema_momentum(&s, 100).unwrap(), 1.0);
        assert!((ema_momentum(&s, 50).unwrap() - 0.995).abs() < 1e-15);
        assert!(matches!(ema_momentum(&s, 101), Err(Error::StepOutOfRange { .. })));
        let mut prev = 0.0;
        for t in 0..=100 {
            let m = ema_momentum(&s, t).unwrap();
            assert!(m >= prev);
            prev = m;
        }
        assert!(EmaSchedule::new(1.5, 10).is_err());
    }

    #[test]
    fn ema_extremes_and_average() {
        let cfg = small_config(1);
        let head = HeadConfig { hidden: 5, out: 3 };
        let student = Model::init(cfg, head, &mut rng_for(12, "init", 0));
        let teacher0 = Model::init(cfg, head, &mut rng_for(13, "init", 0));

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, teacher0);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 0.5).unwrap();
        for ((a, b), c) in t.tensors().iter().zip(teacher0.tensors()).zip(student.tensors()) {
            for ((x, y), z) in a.2.iter().zip(b.2).zip(c.2) {
                assert!((x - 0.5 * (y + z)).abs() < 1e-15);
            }
        }

        let mismatched = Model::init(small_config(2), head, &mut rng_for(14, "init", 0));
        let mut t = teacher0.clone();
        assert!(matches!(ema_update(&mut t, &mismatched, 0.5), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn wrap_mode_shift_equivariance() {
        let cfg = EncoderConfig { patch_size: 2, in_channels: 3, dim: 4, blocks: 2, border: BorderMode::Wrap };
        let params = EncoderParams::init(cfg, &mut rng_for(15, "init", 0));
        let image = random_image(16, 8, 8);
        // shift right by one patch (2 px) with wrap-around
        let shifted = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| image[[c, y, (x + 8 - 2) % 8]]);
        let a = encoder_features(&params, &image).unwrap();
        let b = encoder_features(&params, &shifted).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for k in 0..4 {
                    assert_eq!(b.as_array()[[y, (x + 1) % 4, k]], a.as_array()[[y, x, k]]);
                }
            }
        }
    }
}
