//! Bipartite matching between ground-truth slots and detection slots.

use crate::charset::LabelSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Optimal one-to-one assignment: `perm[i]` is the prediction matched to
/// ground-truth slot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment<T> {
    pub perm: Vec<usize>,
    pub total_cost: T,
}

/// `cost[i][j] = -P_j(c_i) - beta * P_j(l_i)` for ground-truth slot `i` and
/// prediction `j`, where `P` are detached probabilities.
pub fn match_cost_matrix<T: Scalar>(
    char_probs: &Matrix<T>,
    pos_probs: &Matrix<T>,
    labels: &LabelSet,
    beta: T,
) -> Result<Matrix<T>> {
    let n = labels.n();
    if char_probs.rows() != n || pos_probs.rows() != n || pos_probs.cols() != n + 1 {
        return Err(Error::shape(format!(
            "cost matrix: char probs {:?}, pos probs {:?}, {n} label slots",
            char_probs.shape(),
            pos_probs.shape()
        )));
    }
    if labels.char_classes.iter().any(|&c| c >= char_probs.cols()) {
        return Err(Error::shape("label class outside the character alphabet"));
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        -char_probs[(j, labels.char_classes[i])] - beta * pos_probs[(j, labels.pos_classes[i])]
    }))
}

/// Minimum-cost perfect matching of a square cost matrix.
///
/// Among all optimal assignments the lexicographically smallest `perm` is
/// returned.
pub fn hungarian_assign<T: Scalar>(cost: &Matrix<T>) -> Result<MatchAssignment<T>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape(format!("cost matrix {:?} is not square", cost.shape())));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    if n == 0 {
        return Ok(MatchAssignment {
            perm: Vec::new(),
            total_cost: T::zero(),
        });
    }
    let a: Vec<f64> = cost.as_slice().iter().map(|v| v.as_f64()).collect();
    let at = |i: usize, j: usize| a[i * n + j];

    // Shortest augmenting paths with row/column potentials (1-based, column 0
    // is a virtual source).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }

    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| at(i, j) - u[i + 1] - v[j + 1] <= tol;
    let perm = lexicographic_refine(n, col_of.clone(), &tight);

    let row_sum = |perm: &[usize]| -> T { (0..n).map(|i| cost[(i, perm[i])]).sum() };
    let refined = row_sum(&perm);
    let base = row_sum(&col_of);
    // Guard against tolerance artefacts: never trade optimality for order.
    let (perm, total_cost) = if refined.as_f64() <= base.as_f64() + tol {
        (perm, refined)
    } else {
        (col_of, base)
    };
    Ok(MatchAssignment { perm, total_cost })
}

/// Walks rows in order and gives each the smallest column that still admits
/// a perfect matching over tight edges for the remaining rows.
fn lexicographic_refine(n: usize, mut col_of: Vec<usize>, tight: &dyn Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut row_of = vec![0usize; n];
    for (r, &c) in col_of.iter().enumerate() {
        row_of[c] = r;
    }
    for i in 0..n {
        for j in 0..col_of[i] {
            let r = row_of[j];
            if r < i || !tight(i, j) {
                continue;
            }
            // Row i takes j; row r must reach i's old column through rows > i.
            let target = col_of[i];
            let mut visited = vec![false; n];
            visited[j] = true;
            for c in col_of.iter().take(i) {
                visited[*c] = true;
            }
            let mut path = Vec::new();
            if augment(r, target, i, tight, &col_of, &row_of, &mut visited, &mut path) {
                // path holds (row, new column) pairs
                for &(row, col) in &path {
                    col_of[row] = col;
                    row_of[col] = row;
                }
                col_of[i] = j;
                row_of[j] = i;
                break;
            }
        }
    }
    col_of
}

#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    target: usize,
    fixed_upto: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of: &[usize],
    row_of: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..col_of.len() {
        if visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target {
            path.push((row, c));
            return true;
        }
        let next = row_of[c];
        if next > fixed_upto && augment(next, target, fixed_upto, tight, col_of, row_of, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charset::{derive_labels, CharSet, PositionSet};

    #[test]
    fn two_by_two() {
        let c = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 1.0]]).unwrap();
        let m = hungarian_assign(&c).unwrap();
        assert_eq!(m.perm, vec![0, 1]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn negative_diagonal_is_identity() {
        let c = Matrix::from_fn(6, 6, |i, j| if i == j { -5.0f64 } else { (i * 7 + j) as f64 % 3.0 });
        assert_eq!(hungarian_assign(&c).unwrap().perm, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = Matrix::<f64>::zeros(4, 4);
        assert_eq!(hungarian_assign(&c).unwrap().perm, vec![0, 1, 2, 3]);
        // identical rows: any permutation of the tied block is optimal
        let c = Matrix::from_rows(&[
            vec![5.0f64, 5.0, 0.0],
            vec![1.0, 1.0, 9.0],
            vec![1.0, 1.0, 9.0],
        ])
        .unwrap();
        assert_eq!(hungarian_assign(&c).unwrap().perm, vec![2, 0, 1]);
    }

    #[test]
    fn rejects_non_finite() {
        let c = Matrix::from_rows(&[vec![1.0f64, f64::NAN], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(hungarian_assign(&c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn certain_and_uniform_costs() {
        let cs = CharSet;
        let ps = PositionSet::new(5);
        let labels = derive_labels("ab", &cs, &ps).unwrap();
        let beta: f64 = 1.5;
        let uniform_c = Matrix::filled(5, 37, 1.0 / 37.0);
        let uniform_p = Matrix::filled(5, 6, 1.0 / 6.0);
        let cost = match_cost_matrix(&uniform_c, &uniform_p, &labels, beta).unwrap();
        let expect = -(1.0 / 37.0 + beta / 6.0);
        assert!(cost.as_slice().iter().all(|&v| (v - expect).abs() < 1e-15));

        let mut pc = Matrix::zeros(5, 37);
        let mut pp = Matrix::zeros(5, 6);
        pc[(3, labels.char_classes[0])] = 1.0;
        pp[(3, 0)] = 1.0;
        let cost = match_cost_matrix(&pc, &pp, &labels, beta).unwrap();
        assert_eq!(cost[(0, 3)], -(1.0 + beta));
    }

    #[test]
    fn cost_shape_checked() {
        let labels = derive_labels("ab", &CharSet, &PositionSet::new(5)).unwrap();
        let pc = Matrix::<f64>::zeros(4, 37);
        let pp = Matrix::<f64>::zeros(5, 6);
        assert!(matches!(
            match_cost_matrix(&pc, &pp, &labels, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
