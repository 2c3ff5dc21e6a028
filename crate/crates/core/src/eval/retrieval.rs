//! Patch-level nearest-neighbour label transfer from a memory bank.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::FeatureMatrix;

/// Where a bank row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchRef {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    keys: Array2<f64>,
    labels: Vec<usize>,
    provenance: Vec<PatchRef>,
}

impl MemoryBank {
    pub fn new(keys: FeatureMatrix, labels: Vec<usize>, provenance: Vec<PatchRef>) -> Result<Self> {
        if keys.rows() != labels.len() || labels.len() != provenance.len() {
            return Err(Error::ShapeMismatch(format!(
                "bank has {} keys, {} labels and {} provenance entries",
                keys.rows(),
                labels.len(),
                provenance.len()
            )));
        }
        Ok(Self { keys: keys.into_inner(), labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[PatchRef] {
        &self.provenance
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyBank);
        }
        let keys = self.keys.select(ndarray::Axis(0), indices);
        Ok(Self {
            keys,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        })
    }
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let norms: Array1<f64> = m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Cosine top-`k` retrieval with a similarity-weighted label vote per query
/// (ties to the smaller class id). Exact search.
pub fn nn_retrieval_predict(bank: &MemoryBank, queries: &FeatureMatrix, k: usize) -> Result<Vec<usize>> {
    nn_retrieval_predict_excluding(bank, queries, k, None)
}

/// As [`nn_retrieval_predict`]; when `query_refs` is given, bank rows with
/// the same provenance as the query are never retrieved.
pub fn nn_retrieval_predict_excluding(
    bank: &MemoryBank,
    queries: &FeatureMatrix,
    k: usize,
    query_refs: Option<&[PatchRef]>,
) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if k == 0 || k > bank.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, {}]", bank.len())));
    }
    if queries.cols() != bank.keys.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} differs from bank dim {}",
            queries.cols(),
            bank.keys.ncols()
        )));
    }
    if let Some(refs) = query_refs {
        if refs.len() != queries.rows() {
            return Err(Error::ShapeMismatch("one provenance entry per query required".into()));
        }
    }
    let classes = bank.labels.iter().max().map_or(0, |&m| m + 1);
    let keys = unit_rows(&bank.keys);
    let q = unit_rows(queries.as_array());
    let sims = q.dot(&keys.t());
    let mut out = Vec::with_capacity(q.nrows());
    let mut order: Vec<usize> = Vec::with_capacity(bank.len());
    let mut votes = vec![0.0; classes];
    for (qi, row) in sims.rows().into_iter().enumerate() {
        order.clear();
        match query_refs {
            Some(refs) => order.extend((0..bank.len()).filter(|&j| bank.provenance[j] != refs[qi])),
            None => order.extend(0..bank.len()),
        }
        if order.len() < k {
            return Err(Error::InvalidArgument("not enough bank rows left after self-exclusion".into()));
        }
        // highest similarity first, lower index on ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        // only classes present among the neighbours compete; similarities can be negative
        votes.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for &j in &order[..k] {
            let v = &mut votes[bank.labels[j]];
            *v = if v.is_finite() { *v + row[j] } else { row[j] };
        }
        let mut best: Option<(usize, f64)> = None;
        for (c, &v) in votes.iter().enumerate() {
            if v > f64::NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        out.push(best.expect("k >= 1 neighbours vote").0);
    }
    Ok(out)
}
