//! Kernel matrices, alignment scores and the alignment losses.
//!
//! All kernels here are linear (`K = F Fᵀ`) except for MMD, which uses a
//! Gaussian kernel. Gradients are taken with respect to the student features
//! only; the teacher side is a constant.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Centered Gram matrices with a Frobenius norm below this are treated as
/// carrying no signal.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Rows with a smaller L2 norm cannot be normalized.
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// `N × D` patch embeddings. Row `i` of a student matrix and row `i` of the
/// paired teacher matrix describe the same spatial location.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Symmetric `N × N` kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    data: Array2<f64>,
}

impl KernelMatrix {
    /// Validates squareness, finiteness and symmetry (within `1e-9` relative
    /// to the largest entry).
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let n = data.nrows();
        if data.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "kernel matrix must be square, got {}x{}",
                n,
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix"));
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (data[[i, j]] - data[[j, i]]).abs() > 1e-9 * scale {
                    return Err(Error::InvalidArgument(format!(
                        "kernel matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { data })
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_inner(&self.data, &self.data).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    Cka,
    Hsic,
    MmdSq,
    GramDistSq,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentScore {
    pub value: f64,
    pub kind: AlignmentKind,
}

/// Gaussian kernel bandwidth for MMD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled samples.
    Median,
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Paka,
    Gram,
    Hsic,
    Mmd,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Paka, LossKind::Gram, LossKind::Hsic, LossKind::Mmd];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Paka => "paka",
            LossKind::Gram => "gram",
            LossKind::Hsic => "hsic",
            LossKind::Mmd => "mmd",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paka" | "cka" => Ok(LossKind::Paka),
            "gram" => Ok(LossKind::Gram),
            "hsic" => Ok(LossKind::Hsic),
            "mmd" => Ok(LossKind::Mmd),
            other => Err(Error::InvalidArgument(format!("unknown loss kind '{other}'"))),
        }
    }
}

fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn same_rows(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<()> {
    if s.rows() != t.rows() {
        return Err(Error::ShapeMismatch(format!(
            "paired feature matrices need equal row counts ({} vs {})",
            s.rows(),
            t.rows()
        )));
    }
    Ok(())
}

fn at_least_two_rows(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 patches, got {n}")));
    }
    Ok(())
}

/// Linear kernel `F Fᵀ`.
pub fn gram(f: &FeatureMatrix) -> KernelMatrix {
    let k = f.data.dot(&f.data.t());
    // symmetrize exactly so downstream symmetry checks never trip on rounding
    let k = (&k + &k.t()) * 0.5;
    KernelMatrix { data: k }
}

/// `H K H` with `H = I − (1/N) 1 1ᵀ`, computed from row, column and grand
/// means.
pub fn center_gram(k: &KernelMatrix) -> Result<KernelMatrix> {
    let n = k.size();
    if n == 0 {
        return Err(Error::ShapeMismatch("cannot center an empty kernel".into()));
    }
    let row_means = k.data.mean_axis(Axis(1)).expect("non-empty");
    let col_means = k.data.mean_axis(Axis(0)).expect("non-empty");
    let grand = row_means.mean().expect("non-empty");
    let mut out = k.data.clone();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = *v - row_means[i] - col_means[j] + grand;
    }
    Ok(KernelMatrix { data: out })
}

fn center_columns(f: &Array2<f64>) -> Array2<f64> {
    let mean = f.mean_axis(Axis(0)).expect("non-empty");
    f - &mean
}

/// Centered kernel alignment of two linear kernels.
pub fn cka(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<AlignmentScore> {
    same_rows(s, t)?;
    at_least_two_rows(s.rows())?;
    let ks = center_gram(&gram(s))?;
    let kt = center_gram(&gram(t))?;
    let ns = ks.frobenius_norm();
    let nt = kt.frobenius_norm();
    let worst = ns.min(nt);
    if worst < DEGENERACY_EPS {
        return Err(Error::DegenerateInput { norm: worst });
    }
    let value = frobenius_inner(&ks.data, &kt.data) / (ns * nt);
    Ok(AlignmentScore { value: value.clamp(0.0, 1.0), kind: AlignmentKind::Cka })
}

/// Biased HSIC estimator `tr(H Ka H · H Kb H) / (N − 1)²`.
pub fn hsic(ka: &KernelMatrix, kb: &KernelMatrix) -> Result<AlignmentScore> {
    if ka.size() != kb.size() {
        return Err(Error::ShapeMismatch(format!(
            "kernel sizes differ ({} vs {})",
            ka.size(),
            kb.size()
        )));
    }
    let n = ka.size();
    at_least_two_rows(n)?;
    let ca = center_gram(ka)?;
    let cb = center_gram(kb)?;
    // tr(A B) = ⟨A, B⟩_F for symmetric B
    let value = frobenius_inner(&ca.data, &cb.data) / ((n - 1) as f64).powi(2);
    Ok(AlignmentScore { value, kind: AlignmentKind::Hsic })
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance over the rows of `s` and `t` pooled;
/// falls back to 1.0 when the median is zero.
pub fn median_bandwidth(s: &FeatureMatrix, t: &FeatureMatrix) -> f64 {
    let pooled: Vec<_> = s.data.rows().into_iter().chain(t.data.rows()).collect();
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn resolve_bandwidth(s: &FeatureMatrix, t: &FeatureMatrix, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(sigma) if sigma > 0.0 && sigma.is_finite() => Ok(sigma),
        Bandwidth::Fixed(sigma) => Err(Error::InvalidArgument(format!("bandwidth {sigma} must be positive"))),
        Bandwidth::Median => Ok(median_bandwidth(s, t)),
    }
}

fn gaussian_cross(a: &Array2<f64>, b: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let denom = 2.0 * sigma * sigma;
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| (-sq_dist(a.row(i), b.row(j)) / denom).exp())
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel.
pub fn mmd_sq(s: &FeatureMatrix, t: &FeatureMatrix, bandwidth: Bandwidth) -> Result<AlignmentScore> {
    if s.cols() != t.cols() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ ({} vs {})",
            s.cols(),
            t.cols()
        )));
    }
    let sigma = resolve_bandwidth(s, t, bandwidth)?;
    let (n, m) = (s.rows() as f64, t.rows() as f64);
    let kss = gaussian_cross(&s.data, &s.data, sigma).sum() / (n * n);
    let ktt = gaussian_cross(&t.data, &t.data, sigma).sum() / (m * m);
    let kst = gaussian_cross(&s.data, &t.data, sigma).sum() / (n * m);
    let value = (kss + ktt - 2.0 * kst).max(0.0);
    Ok(AlignmentScore { value, kind: AlignmentKind::MmdSq })
}

/// `1 − CKA(S, T)`.
pub fn loss_paka(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<f64> {
    Ok(1.0 - cka(s, t)?.value)
}

/// Gradient of `1 − CKA(S, T)` with respect to `S`.
///
/// With `Sc`, `Tc` the column-centered features, `A = ‖Scᵀ Tc‖²`,
/// `B = ‖Scᵀ Sc‖²` and `C = ‖Tcᵀ Tc‖²`:
/// `∂L/∂S = −2 / √(BC) · (K̃ᵗ Sc − (A/B) K̃ˢ Sc)`.
pub fn grad_loss_paka(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(loss_and_grad_paka(s, t)?.1)
}

pub(crate) fn loss_and_grad_paka(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<(f64, FeatureMatrix)> {
    same_rows(s, t)?;
    at_least_two_rows(s.rows())?;
    let sc = center_columns(&s.data);
    let tc = center_columns(&t.data);
    // D×D cross products keep this O(N D²) instead of O(N²)
    let sts = sc.t().dot(&sc);
    let ttt = tc.t().dot(&tc);
    let tts = tc.t().dot(&sc);
    let a: f64 = tts.iter().map(|v| v * v).sum();
    let b: f64 = sts.iter().map(|v| v * v).sum();
    let c: f64 = ttt.iter().map(|v| v * v).sum();
    let (nb, nc) = (b.sqrt(), c.sqrt());
    if nb.min(nc) < DEGENERACY_EPS {
        return Err(Error::DegenerateInput { norm: nb.min(nc) });
    }
    let cka = (a / (nb * nc)).clamp(0.0, 1.0);
    let kt_sc = tc.dot(&tts);
    let ks_sc = sc.dot(&sts);
    let grad = (kt_sc - ks_sc * (a / b)) * (-2.0 / (nb * nc));
    Ok((1.0 - cka, FeatureMatrix { data: grad }))
}

fn normalize_rows(f: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = f.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| n < ZERO_ROW_EPS) {
        return Err(Error::ZeroRow { row });
    }
    let normalized = f / &norms.view().insert_axis(Axis(1));
    Ok((normalized, norms))
}

/// Backpropagates a gradient taken with respect to row-normalized features
/// through the normalization: `g_i ← (g_i − (ŝ_i·g_i) ŝ_i) / ‖s_i‖`.
fn through_row_normalization(g: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let u = unit.row(i);
        let proj = u.dot(&g.row(i));
        row.zip_mut_with(&u, |gv, &uv| *gv -= proj * uv);
        row.mapv_inplace(|v| v / norms[i]);
    }
    out
}

/// `‖K̂ˢ − K̂ᵗ‖²_F` over Gram matrices of row-normalized features.
pub fn loss_gram(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<f64> {
    Ok(loss_and_grad_gram(s, t)?.0)
}

pub fn grad_loss_gram(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(loss_and_grad_gram(s, t)?.1)
}

pub(crate) fn loss_and_grad_gram(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<(f64, FeatureMatrix)> {
    same_rows(s, t)?;
    let (su, snorm) = normalize_rows(&s.data)?;
    let (tu, _) = normalize_rows(&t.data)?;
    let diff = su.dot(&su.t()) - tu.dot(&tu.t());
    let loss = diff.iter().map(|v| v * v).sum();
    let g_unit = diff.dot(&su) * 4.0;
    let grad = through_row_normalization(&g_unit, &su, &snorm);
    Ok((loss, FeatureMatrix { data: grad }))
}

/// Negative biased HSIC between linear kernels of row-normalized features.
///
/// Raw HSIC is unbounded in the feature scale, so the features are put on
/// the unit sphere first, as for the Gram loss.
pub fn loss_hsic(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<f64> {
    Ok(loss_and_grad_hsic(s, t)?.0)
}

pub fn grad_loss_hsic(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(loss_and_grad_hsic(s, t)?.1)
}

pub(crate) fn loss_and_grad_hsic(s: &FeatureMatrix, t: &FeatureMatrix) -> Result<(f64, FeatureMatrix)> {
    same_rows(s, t)?;
    at_least_two_rows(s.rows())?;
    let n = s.rows();
    let (su, snorm) = normalize_rows(&s.data)?;
    let (tu, _) = normalize_rows(&t.data)?;
    let sc = center_columns(&su);
    let tc = center_columns(&tu);
    let tts = tc.t().dot(&sc);
    let scale = ((n - 1) as f64).powi(2);
    let loss = -tts.iter().map(|v| v * v).sum::<f64>() / scale;
    // d/dŜ of −tr(K̃ŝ K̃t̂)/(N−1)² is −2 K̃t̂ Ŝc/(N−1)²; centering is absorbed by K̃t̂
    let g_unit = tc.dot(&tts) * (-2.0 / scale);
    let grad = through_row_normalization(&g_unit, &su, &snorm);
    Ok((loss, FeatureMatrix { data: grad }))
}

/// Squared MMD as a loss. With [`Bandwidth::Median`] the bandwidth is
/// resolved once from the current features and held constant for the
/// gradient.
pub fn loss_mmd(s: &FeatureMatrix, t: &FeatureMatrix, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd_sq(s, t, bandwidth)?.value)
}

pub fn grad_loss_mmd(s: &FeatureMatrix, t: &FeatureMatrix, bandwidth: Bandwidth) -> Result<FeatureMatrix> {
    Ok(loss_and_grad_mmd(s, t, bandwidth)?.1)
}

pub(crate) fn loss_and_grad_mmd(
    s: &FeatureMatrix,
    t: &FeatureMatrix,
    bandwidth: Bandwidth,
) -> Result<(f64, FeatureMatrix)> {
    let loss = mmd_sq(s, t, bandwidth)?.value;
    let sigma = resolve_bandwidth(s, t, bandwidth)?;
    let (n, m) = (s.rows() as f64, t.rows() as f64);
    let kss = gaussian_cross(&s.data, &s.data, sigma);
    let kst = gaussian_cross(&s.data, &t.data, sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut grad = Array2::<f64>::zeros(s.data.raw_dim());
    for i in 0..s.rows() {
        let si = s.data.row(i);
        let mut g = grad.row_mut(i);
        for j in 0..s.rows() {
            let w = -2.0 / (n * n) * kss[[i, j]] * inv_s2;
            g.zip_mut_with(&(&si - &s.data.row(j)), |gv, &d| *gv += w * d);
        }
        for j in 0..t.rows() {
            let w = 2.0 / (n * m) * kst[[i, j]] * inv_s2;
            g.zip_mut_with(&(&si - &t.data.row(j)), |gv, &d| *gv += w * d);
        }
    }
    Ok((loss, FeatureMatrix { data: grad }))
}

/// Loss and its gradient with respect to the student features.
///
/// The reported loss is exactly [`loss_value`], so callers see the same
/// number whether or not they request a gradient.
pub fn loss_and_grad(kind: LossKind, s: &FeatureMatrix, t: &FeatureMatrix) -> Result<(f64, FeatureMatrix)> {
    let grad = match kind {
        LossKind::Paka => loss_and_grad_paka(s, t)?.1,
        LossKind::Gram => loss_and_grad_gram(s, t)?.1,
        LossKind::Hsic => loss_and_grad_hsic(s, t)?.1,
        LossKind::Mmd => loss_and_grad_mmd(s, t, Bandwidth::Median)?.1,
    };
    Ok((loss_value(kind, s, t)?, grad))
}

pub fn loss_value(kind: LossKind, s: &FeatureMatrix, t: &FeatureMatrix) -> Result<f64> {
    match kind {
        LossKind::Paka => loss_paka(s, t),
        LossKind::Gram => loss_gram(s, t),
        LossKind::Hsic => loss_hsic(s, t),
        LossKind::Mmd => loss_mmd(s, t, Bandwidth::Median),
    }
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::EmptyOrZeroMean);
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::EmptyOrZeroMean);
    }
    let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(a: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(a).unwrap()
    }

    #[test]
    fn gram_trivial_cases() {
        let k = gram(&fm(array![[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(k.as_array(), &array![[1.0, 0.0], [0.0, 1.0]]);
        let k = gram(&fm(array![[1.0, 1.0], [1.0, 1.0]]));
        assert_eq!(k.as_array(), &array![[2.0, 2.0], [2.0, 2.0]]);
    }

    #[test]
    fn rejects_non_finite_features() {
        assert!(matches!(FeatureMatrix::new(array![[f64::NAN]]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn centering_identity_and_constants() {
        let k = KernelMatrix::new(Array2::eye(2)).unwrap();
        let c = center_gram(&k).unwrap();
        assert_eq!(c.as_array(), &array![[0.5, -0.5], [-0.5, 0.5]]);

        let k = gram(&fm(array![[3.0, -1.0], [3.0, -1.0], [3.0, -1.0]]));
        let c = center_gram(&k).unwrap();
        assert!(c.as_array().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn centering_rejects_empty() {
        let k = KernelMatrix::new(Array2::zeros((0, 0))).unwrap();
        assert!(center_gram(&k).is_err());
    }

    #[test]
    fn kernel_matrix_rejects_asymmetry() {
        assert!(KernelMatrix::new(array![[1.0, 2.0], [0.0, 1.0]]).is_err());
        assert!(KernelMatrix::new(array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn cka_examples() {
        let s = fm(array![[1.0], [0.0], [-1.0]]);
        let t = fm(array![[1.0], [-2.0], [1.0]]);
        assert!(cka(&s, &t).unwrap().value.abs() < 1e-15);
        assert!((loss_paka(&s, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((cka(&s, &s).unwrap().value - 1.0).abs() < 1e-12);
        assert!(loss_paka(&s, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cka_degenerate_and_shape_errors() {
        let s = fm(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        let t = fm(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!(matches!(cka(&s, &t), Err(Error::DegenerateInput { .. })));
        assert!(matches!(grad_loss_paka(&s, &t), Err(Error::DegenerateInput { .. })));
        let short = fm(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(cka(&short, &t), Err(Error::ShapeMismatch(_))));
        let one = fm(array![[1.0]]);
        assert!(cka(&one, &one).is_err());
    }

    #[test]
    fn hsic_zero_for_constant_kernel() {
        let c = gram(&fm(array![[2.0], [2.0], [2.0]]));
        let other = gram(&fm(array![[1.0], [5.0], [-3.0]]));
        assert!(hsic(&c, &other).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn mmd_identical_inputs_vanish() {
        let s = fm(array![[0.3, 1.0], [2.0, -1.0], [0.0, 0.5]]);
        assert!(mmd_sq(&s, &s, Bandwidth::Fixed(0.7)).unwrap().value.abs() < 1e-12);
        assert!(mmd_sq(&s, &s, Bandwidth::Median).unwrap().value.abs() < 1e-12);
        let one = fm(array![[1.5, -2.0]]);
        assert!(mmd_sq(&one, &one.clone(), Bandwidth::Median).unwrap().value.abs() < 1e-12);
        assert!(mmd_sq(&s, &s, Bandwidth::Fixed(0.0)).is_err());
    }

    #[test]
    fn median_bandwidth_falls_back_on_coincident_points() {
        let s = fm(array![[1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(median_bandwidth(&s, &s), 1.0);
    }

    #[test]
    fn gram_loss_examples() {
        let s = fm(array![[1.0, 0.0]]);
        let t = fm(array![[0.0, 1.0]]);
        assert_eq!(loss_gram(&s, &t).unwrap(), 0.0);
        let g = grad_loss_gram(&s, &t).unwrap();
        assert!(g.as_array().iter().all(|v| v.abs() < 1e-15));
        let z = fm(array![[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(loss_gram(&z, &z), Err(Error::ZeroRow { row: 0 })));
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(coefficient_of_variation(&[1.0]).is_err());
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_err());
    }

    #[test]
    fn loss_kind_parses() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("l2".parse::<LossKind>().is_err());
    }
}
