//! Exact 2-Wasserstein distance between equal-size uniform point sets.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{sample_dataset, DatasetSpec};
use crate::error::{Error, Result};

/// Seed offset of the held-out test set drawn by [`evaluate`].
pub const TEST_SEED_OFFSET: u64 = 0x07e5_75e7;
pub const DEFAULT_N_EVAL: usize = 1024;

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row/column potentials (Dijkstra on reduced
/// costs), O(n^3). Returns `assignment[row] = col`.
pub fn solve_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::invalid(format!("assignment needs a square matrix, got {:?}", cost.dim())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // 1-based columns; column 0 is the virtual source of each augmentation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut dist = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        row_of[0] = row;
        let mut j0 = 0usize;
        dist.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let crow = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = crow[j - 1] - u[i0] - v[j];
                if reduced < dist[j] {
                    dist[j] = reduced;
                    way[j] = j0;
                }
                if dist[j] < delta {
                    delta = dist[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    dist[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn sq_dist_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

/// `(min_sigma (1/n) sum_i |a_i - b_sigma(i)|^2)^(1/2)` over permutations `sigma`.
pub fn exact_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::LengthMismatch { expected: a.nrows(), got: b.nrows() });
    }
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch { expected: a.ncols(), got: b.ncols() });
    }
    let n = a.nrows();
    if n == 0 {
        return Err(Error::invalid("exact_w2 needs at least one point"));
    }
    let cost = sq_dist_matrix(a, b);
    let assignment = solve_assignment(cost.view())?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub w2: f64,
    pub n_eval: usize,
    pub steps_used: usize,
    pub seed: u64,
}

/// The held-out test set used by [`evaluate`] for `spec`.
pub fn test_set(spec: &DatasetSpec, n_eval: usize) -> Result<Array2<f64>> {
    let held_out = DatasetSpec { seed: spec.seed.wrapping_add(TEST_SEED_OFFSET), ..*spec };
    sample_dataset(&held_out, n_eval)
}

/// Exact W2 between the first `n_eval` generated points and a fresh test set from `spec`.
pub fn evaluate(
    generated: ArrayView2<'_, f64>,
    spec: &DatasetSpec,
    n_eval: usize,
    steps_used: usize,
) -> Result<EvalReport> {
    if n_eval == 0 {
        return Err(Error::invalid("n_eval must be positive"));
    }
    if generated.nrows() < n_eval {
        return Err(Error::invalid(format!(
            "need at least {n_eval} generated samples, got {}",
            generated.nrows()
        )));
    }
    let test = test_set(spec, n_eval)?;
    let w2 = exact_w2(generated.slice(ndarray::s![..n_eval, ..]), test.view())?;
    Ok(EvalReport { w2, n_eval, steps_used, seed: spec.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use ndarray::array;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = array![[0.0, 1.0], [2.0, 3.0], [-1.0, 0.5]];
        let b = array![[2.0, 3.0], [-1.0, 0.5], [0.0, 1.0]];
        assert_eq!(exact_w2(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn single_point() {
        let w = exact_w2(array![[0.0, 0.0]].view(), array![[3.0, 4.0]].view()).unwrap();
        assert!((w - 5.0).abs() < 1e-15);
    }

    #[test]
    fn three_points_match_enumeration() {
        let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 1.0], [2.0, 0.0], [0.0, 2.0]];
        // Brute force over the 6 permutations: best is identity-like pairing
        // (0,0)->(1,1), (1,0)->(2,0), (0,1)->(0,2) with cost 2 + 1 + 1 = 4.
        let w = exact_w2(a.view(), b.view()).unwrap();
        assert!((w - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unequal_counts_rejected() {
        let r = exact_w2(array![[0.0], [1.0]].view(), array![[0.0]].view());
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn evaluate_test_set_and_shift() {
        let spec = DatasetSpec::new(Dataset::Moons, 4);
        let test = test_set(&spec, 64).unwrap();
        assert_eq!(evaluate(test.view(), &spec, 64, 0).unwrap().w2, 0.0);
        let shifted = &test + &array![0.3, -0.4];
        let w2 = evaluate(shifted.view(), &spec, 64, 0).unwrap().w2;
        assert!((w2 - 0.5).abs() < 1e-12);
        assert!(evaluate(test.view(), &spec, 65, 0).is_err());
    }
}
