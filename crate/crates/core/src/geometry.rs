//! Crop boxes, overlap-constrained multi-crop sampling and ROI align.
//!
//! Boxes live in normalized image coordinates (`[0, 1]²`, x to the right,
//! y downwards). A feature grid of `H × W` cells covers its view's unit
//! square with cell `(i, j)` centred at `((j + ½)/W, (i + ½)/H)`.

use ndarray::{Array2, Array3, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;
use crate::rng::Rng;

/// Default number of rejection-sampling attempts for local crops.
pub const DEFAULT_MAX_TRIES: usize = 100;

/// Aspect ratios are drawn log-uniformly from this range.
const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

/// Axis-aligned rectangle in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropBox {
    pub const UNIT: CropBox = CropBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let inside = |v: f64| (0.0..=1.0).contains(&v);
        if !(inside(x0) && inside(y0) && inside(x1) && inside(y1) && x0 < x1 && y0 < y1) {
            return Err(Error::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Like [`CropBox::new`] but first clamps into the unit square, absorbing
    /// rounding from coordinate arithmetic.
    fn clamped(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0))
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn intersection(&self, other: &CropBox) -> Option<CropBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(CropBox { x0, y0, x1, y1 })
    }

    pub fn intersection_area(&self, other: &CropBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    pub fn contains(&self, other: &CropBox) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }
}

/// `H × W × D` dense features of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Array3<f64>,
}

impl FeatureGrid {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!("feature grid must be non-empty, got {h}x{w}x{d}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid"));
        }
        Ok(Self { data })
    }

    /// Builds a grid from an `(H·W) × D` row-major matrix.
    pub fn from_rows(rows: Array2<f64>, h: usize, w: usize) -> Result<Self> {
        let d = rows.ncols();
        if rows.nrows() != h * w {
            return Err(Error::ShapeMismatch(format!("{} rows cannot form a {h}x{w} grid", rows.nrows())));
        }
        let data = rows
            .into_shape_with_order((h, w, d))
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    /// `(H·W) × D` row-major copy.
    pub fn to_rows(&self) -> Array2<f64> {
        let (h, w, d) = self.data.dim();
        self.data.as_standard_layout().into_owned().into_shape_with_order((h * w, d)).expect("contiguous")
    }
}

/// Teacher/student boxes in original-image coordinates plus the resolution
/// both sides are resampled to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewPair {
    pub teacher_box: CropBox,
    pub student_box: CropBox,
    pub target_h: usize,
    pub target_w: usize,
}

impl ViewPair {
    pub fn new(teacher_box: CropBox, student_box: CropBox, target_h: usize, target_w: usize) -> Result<Self> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidArgument("target resolution must be positive".into()));
        }
        if teacher_box.intersection(&student_box).is_none() {
            return Err(Error::EmptyIntersection);
        }
        Ok(Self { teacher_box, student_box, target_h, target_w })
    }

    /// The shared region expressed in each view's own frame
    /// (teacher, student).
    pub fn local_boxes(&self) -> Result<(CropBox, CropBox)> {
        Ok((
            box_in_view_coords(&self.student_box, &self.teacher_box)?,
            box_in_view_coords(&self.teacher_box, &self.student_box)?,
        ))
    }
}

/// Fraction of `local` covered by `global`.
pub fn overlap_ratio(local: &CropBox, global: &CropBox) -> f64 {
    (local.intersection_area(global) / local.area()).clamp(0.0, 1.0)
}

fn check_scale_range(scale_range: (f64, f64)) -> Result<()> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!("scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
    }
    Ok(())
}

/// Draws a box covering an area fraction in `scale_range` with a mild
/// random aspect ratio, placed uniformly inside the unit square.
fn sample_box(rng: &mut Rng, scale_range: (f64, f64)) -> CropBox {
    let (lo, hi) = scale_range;
    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let log_aspect = rng.random_range(ASPECT_RANGE.0.ln()..=ASPECT_RANGE.1.ln());
    let aspect = log_aspect.exp();
    let (mut w, mut h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
    if w > 1.0 || h > 1.0 {
        w = area.sqrt();
        h = w;
    }
    let x0 = if w < 1.0 { rng.random_range(0.0..=(1.0 - w)) } else { 0.0 };
    let y0 = if h < 1.0 { rng.random_range(0.0..=(1.0 - h)) } else { 0.0 };
    CropBox { x0, y0, x1: (x0 + w).min(1.0), y1: (y0 + h).min(1.0) }
}

pub fn sample_global_crop(rng: &mut Rng, scale_range: (f64, f64)) -> Result<CropBox> {
    check_scale_range(scale_range)?;
    Ok(sample_box(rng, scale_range))
}

/// Rejection-samples a local crop whose overlap ratio with every box in
/// `globals` is at least `min_overlap`.
///
/// After `max_tries` rejections a box centred on the common intersection of
/// the globals is shrunk until it satisfies the constraint. That fallback may
/// fall below the requested scale range.
pub fn sample_local_crop_minoverlap(
    rng: &mut Rng,
    globals: &[CropBox],
    scale_range: (f64, f64),
    min_overlap: f64,
    max_tries: usize,
) -> Result<CropBox> {
    check_scale_range(scale_range)?;
    if !(0.0..=1.0).contains(&min_overlap) {
        return Err(Error::InvalidArgument(format!("overlap threshold {min_overlap} outside [0, 1]")));
    }
    if max_tries == 0 {
        return Err(Error::InvalidArgument("max_tries must be at least 1".into()));
    }
    let common = globals
        .iter()
        .try_fold(CropBox::UNIT, |acc, g| acc.intersection(g))
        .ok_or_else(|| Error::InfeasibleConstraint("global crops share no common region".into()))?;
    let satisfies = |b: &CropBox| globals.iter().all(|g| overlap_ratio(b, g) >= min_overlap);

    for _ in 0..max_tries {
        let candidate = sample_box(rng, scale_range);
        if satisfies(&candidate) {
            return Ok(candidate);
        }
    }

    let (cx, cy) = common.center();
    let mut side = scale_range.0.sqrt();
    loop {
        let (hw, hh) = (0.5 * side.min(1.0), 0.5 * side.min(1.0));
        // keep the box in the unit square without moving its centre off `common`
        let x0 = (cx - hw).max(0.0);
        let y0 = (cy - hh).max(0.0);
        let x1 = (cx + hw).min(1.0);
        let y1 = (cy + hh).min(1.0);
        let candidate = CropBox { x0, y0, x1, y1 };
        if candidate.area() > 0.0 && satisfies(&candidate) {
            return Ok(candidate);
        }
        side *= 0.9;
        if side < 1e-9 {
            return Err(Error::InfeasibleConstraint("fallback crop collapsed".into()));
        }
    }
}

/// Intersection of `inner` and `view`, expressed in `view`'s `[0, 1]²`
/// frame.
pub fn box_in_view_coords(inner: &CropBox, view: &CropBox) -> Result<CropBox> {
    let shared = inner.intersection(view).ok_or(Error::EmptyIntersection)?;
    let (w, h) = (view.width(), view.height());
    CropBox::clamped(
        (shared.x0 - view.x0) / w,
        (shared.y0 - view.y0) / h,
        (shared.x1 - view.x0) / w,
        (shared.y1 - view.y0) / h,
    )
}

/// Composes a box given in `outer`'s frame back into `outer`'s parent frame.
pub fn compose_boxes(outer: &CropBox, inner_in_outer: &CropBox) -> CropBox {
    let (w, h) = (outer.width(), outer.height());
    CropBox {
        x0: outer.x0 + inner_in_outer.x0 * w,
        y0: outer.y0 + inner_in_outer.y0 * h,
        x1: outer.x0 + inner_in_outer.x1 * w,
        y1: outer.y0 + inner_in_outer.y1 * h,
    }
}

/// One bilinear tap per output cell: four source cells and their weights.
#[derive(Debug, Clone, Copy)]
struct Tap {
    idx: [usize; 4],
    weight: [f64; 4],
}

/// Precomputed sampling pattern of an ROI align, shared by the forward
/// resample and its adjoint.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<Tap>,
}

fn axis_tap(coord: f64, size: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (size - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(size - 1);
    (lo, hi, c - lo as f64)
}

impl RoiPlan {
    pub fn new(in_h: usize, in_w: usize, bbox: &CropBox, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::InvalidArgument("ROI align dimensions must be positive".into()));
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        // source-cell units; written so an identity box lands exactly on cell centres
        let step_y = bbox.height() * in_h as f64 / out_h as f64;
        let step_x = bbox.width() * in_w as f64 / out_w as f64;
        for i in 0..out_h {
            let y = bbox.y0 * in_h as f64 + (i as f64 + 0.5) * step_y - 0.5;
            let (y_lo, y_hi, wy) = axis_tap(y, in_h);
            for j in 0..out_w {
                let x = bbox.x0 * in_w as f64 + (j as f64 + 0.5) * step_x - 0.5;
                let (x_lo, x_hi, wx) = axis_tap(x, in_w);
                taps.push(Tap {
                    idx: [y_lo * in_w + x_lo, y_lo * in_w + x_hi, y_hi * in_w + x_lo, y_hi * in_w + x_hi],
                    weight: [(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx],
                });
            }
        }
        Ok(Self { in_h, in_w, out_h, out_w, taps })
    }

    /// Resamples `(in_h·in_w) × D` rows into `(out_h·out_w) × D` rows.
    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(rows.nrows(), self.in_h * self.in_w);
        let mut out = Array2::zeros((self.out_h * self.out_w, rows.ncols()));
        for (mut dst, tap) in out.axis_iter_mut(Axis(0)).zip(&self.taps) {
            for (&k, &w) in tap.idx.iter().zip(&tap.weight) {
                if w != 0.0 {
                    dst.scaled_add(w, &rows.row(k));
                }
            }
        }
        out
    }

    /// Adjoint of [`RoiPlan::apply`]: scatters output-row gradients back onto
    /// the input rows.
    pub fn apply_adjoint(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(grad_out.nrows(), self.out_h * self.out_w);
        let mut grad_in = Array2::zeros((self.in_h * self.in_w, grad_out.ncols()));
        for (src, tap) in grad_out.axis_iter(Axis(0)).zip(&self.taps) {
            for (&k, &w) in tap.idx.iter().zip(&tap.weight) {
                if w != 0.0 {
                    grad_in.row_mut(k).scaled_add(w, &src);
                }
            }
        }
        grad_in
    }
}

/// Bilinear resample of `grid` restricted to `bbox` onto an
/// `out_h × out_w` grid, one sample at each output cell centre.
pub fn roi_align(grid: &FeatureGrid, bbox: &CropBox, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    let plan = RoiPlan::new(grid.height(), grid.width(), bbox, out_h, out_w)?;
    let rows = plan.apply(&grid.to_rows());
    FeatureGrid::from_rows(rows, out_h, out_w)
}

/// Row-major flattening, row index `y·W + x`.
pub fn flatten_grid(grid: &FeatureGrid) -> FeatureMatrix {
    FeatureMatrix::new(grid.to_rows()).expect("grid invariants imply a valid matrix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> CropBox {
        CropBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(CropBox::new(0.5, 0.0, 0.5, 1.0).is_err());
        assert!(CropBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
        assert!(CropBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(overlap_ratio(&b(0.2, 0.2, 0.4, 0.4), &CropBox::UNIT), 1.0);
        assert_eq!(overlap_ratio(&b(0.0, 0.0, 0.2, 0.2), &b(0.5, 0.5, 1.0, 1.0)), 0.0);
        assert!((overlap_ratio(&b(0.25, 0.0, 0.75, 0.5), &b(0.0, 0.0, 0.5, 1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn global_crop_contract() {
        let mut rng = rng_for(1, "test", 0);
        assert_eq!(sample_global_crop(&mut rng, (1.0, 1.0)).unwrap(), CropBox::UNIT);
        for _ in 0..1000 {
            let c = sample_global_crop(&mut rng, (0.4, 1.0)).unwrap();
            assert!(c.area() >= 0.4 - 1e-12 && c.area() <= 1.0 + 1e-12, "{c:?}");
            assert!(CropBox::UNIT.contains(&c));
        }
        let a = sample_global_crop(&mut rng_for(5, "x", 0), (0.3, 0.9)).unwrap();
        let c = sample_global_crop(&mut rng_for(5, "x", 0), (0.3, 0.9)).unwrap();
        assert_eq!(a, c);
        assert!(sample_global_crop(&mut rng, (0.0, 0.5)).is_err());
        assert!(sample_global_crop(&mut rng, (0.6, 0.5)).is_err());
    }

    #[test]
    fn local_crop_vacuous_and_containment() {
        let mut rng = rng_for(2, "test", 0);
        let g = [b(0.0, 0.0, 0.3, 0.3)];
        // m = 0 accepts the very first draw, so it matches an unconstrained draw
        let first = sample_local_crop_minoverlap(&mut rng_for(9, "a", 0), &g, (0.05, 0.3), 0.0, 1).unwrap();
        let plain = sample_box(&mut rng_for(9, "a", 0), (0.05, 0.3));
        assert_eq!(first, plain);
        for _ in 0..200 {
            let c = sample_local_crop_minoverlap(&mut rng, &[CropBox::UNIT], (0.05, 0.3), 1.0, 100).unwrap();
            assert!(CropBox::UNIT.contains(&c));
            assert_eq!(overlap_ratio(&c, &CropBox::UNIT), 1.0);
        }
    }

    #[test]
    fn local_crop_infeasible_and_fallback() {
        let mut rng = rng_for(3, "test", 0);
        let disjoint = [b(0.0, 0.0, 0.3, 0.3), b(0.6, 0.6, 1.0, 1.0)];
        assert!(matches!(
            sample_local_crop_minoverlap(&mut rng, &disjoint, (0.05, 0.3), 0.5, 10),
            Err(Error::InfeasibleConstraint(_))
        ));
        // tiny common region forces the deterministic fallback
        let globals = [b(0.0, 0.0, 0.52, 0.52), b(0.48, 0.48, 1.0, 1.0)];
        let c = sample_local_crop_minoverlap(&mut rng, &globals, (0.2, 0.3), 0.9, 3).unwrap();
        assert!(globals.iter().all(|g| overlap_ratio(&c, g) >= 0.9));
    }

    #[test]
    fn view_coords_examples() {
        let v = b(0.2, 0.1, 0.7, 0.9);
        let unit = box_in_view_coords(&v, &v).unwrap();
        for (got, want) in [unit.x0, unit.y0, unit.x1, unit.y1].iter().zip([0.0, 0.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(box_in_view_coords(&v, &CropBox::UNIT).unwrap(), v);
        let r = box_in_view_coords(&b(0.25, 0.25, 0.5, 0.5), &b(0.25, 0.25, 0.75, 0.75)).unwrap();
        assert_eq!(r, b(0.0, 0.0, 0.5, 0.5));
        assert!(matches!(
            box_in_view_coords(&b(0.0, 0.0, 0.1, 0.1), &b(0.5, 0.5, 1.0, 1.0)),
            Err(Error::EmptyIntersection)
        ));
    }

    #[test]
    fn roi_identity_and_constant() {
        let data = Array3::from_shape_fn((3, 4, 2), |(i, j, k)| (i * 10 + j) as f64 + 0.5 * k as f64);
        let grid = FeatureGrid::new(data).unwrap();
        let out = roi_align(&grid, &CropBox::UNIT, 3, 4).unwrap();
        assert_eq!(out, grid);

        let constant = FeatureGrid::new(Array3::from_elem((5, 5, 3), 2.5)).unwrap();
        let out = roi_align(&constant, &b(0.13, 0.4, 0.77, 0.95), 4, 2).unwrap();
        assert!(out.as_array().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn roi_adjoint_matches_inner_products() {
        let plan = RoiPlan::new(4, 5, &b(0.1, 0.2, 0.9, 0.7), 3, 3).unwrap();
        let x = Array2::from_shape_fn((20, 2), |(i, k)| ((i * 7 + k * 3) % 11) as f64 - 5.0);
        let y = Array2::from_shape_fn((9, 2), |(i, k)| ((i * 5 + k) % 7) as f64 - 3.0);
        let lhs: f64 = (&plan.apply(&x) * &y).sum();
        let rhs: f64 = (&x * &plan.apply_adjoint(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flatten_is_row_major() {
        let grid = FeatureGrid::new(array![[[1.0], [2.0]], [[3.0], [4.0]]]).unwrap();
        let m = flatten_grid(&grid);
        assert_eq!(m.as_array(), &array![[1.0], [2.0], [3.0], [4.0]]);
        let single = FeatureGrid::new(Array3::from_elem((1, 1, 3), 0.25)).unwrap();
        assert_eq!(flatten_grid(&single).as_array(), &array![[0.25, 0.25, 0.25]]);
    }
}
