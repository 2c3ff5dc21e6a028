//! Minimum-cost perfect matching on a square cost matrix.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Returns `assignment` with `assignment[row] = column`, minimizing the
/// summed cost. Shortest augmenting paths with row/column potentials,
/// `O(n³)`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::ShapeMismatch(format!("cost matrix must be square, got {}x{}", n, cost.ncols())));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based bookkeeping; index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

pub fn assignment_cost(cost: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_entry() {
        assert_eq!(hungarian(&array![[3.5]]).unwrap(), vec![0]);
    }

    #[test]
    fn recovers_zero_cost_permutation() {
        let perm = [2, 0, 3, 1];
        let cost = Array2::from_shape_fn((4, 4), |(r, c)| if perm[r] == c { 0.0 } else { 1.0 + (r * 4 + c) as f64 });
        let a = hungarian(&cost).unwrap();
        assert_eq!(a, perm);
        assert_eq!(assignment_cost(&cost, &a), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&Array2::zeros((2, 3))).is_err());
        assert!(hungarian(&array![[f64::NAN]]).is_err());
        assert!(hungarian(&Array2::zeros((0, 0))).unwrap().is_empty());
    }
}
