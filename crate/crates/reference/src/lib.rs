//! Brute-force and closed-form reference computations.
//!
//! Nothing here shares code with `sinkflow-core`: costs are recomputed from
//! coordinates, OT problems are solved in the ordinary (non-log) domain and
//! assignments are found by enumeration. Everything is dense and slow, meant
//! for n up to a few dozen.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Squared Euclidean distance.
pub fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `0.5 |x_i - y_j|^2` for every pair.
pub fn half_sq_cost(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| 0.5 * sq_dist(x.row(i), y.row(j)))
}

/// Calls `visit` with every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&p);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            visit(&p);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Exact squared 2-Wasserstein distance between equal-size uniform clouds by
/// exhaustive search over assignments: `min_s (1/n) sum_i |a_i - b_s(i)|^2`.
pub fn brute_force_w2_sq(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    assert_eq!(a.nrows(), b.nrows(), "brute force needs equal counts");
    let n = a.nrows();
    let d = Array2::from_shape_fn((n, n), |(i, j)| sq_dist(a.row(i), b.row(j)));
    let mut best = f64::INFINITY;
    for_each_permutation(n, |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| d[[i, j]]).sum();
        best = best.min(s);
    });
    best / n as f64
}

/// Entropic OT solved by matrix scaling in the ordinary domain.
#[derive(Debug, Clone)]
pub struct DenseEntropic {
    pub plan: Array2<f64>,
    /// `<P, C> + eps KL(P | a x b)`.
    pub primal: f64,
    /// Potentials recovered from the scalings, `f = eps log u`, `g = eps log v`.
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

impl DenseEntropic {
    pub fn dual(&self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        a.dot(&self.f) + b.dot(&self.g)
    }
}

/// `<P, C> + eps * sum P log(P / (a b^T)) - P + a b^T`.
pub fn entropic_primal(
    plan: ArrayView2<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for ((i, j), &p) in plan.indexed_iter() {
        let r = a[i] * b[j];
        total += p * cost[[i, j]] + r * eps;
        if p > 0.0 {
            total += eps * (p * (p / r).ln() - p);
        }
    }
    total
}

/// Sinkhorn-Knopp on `K = exp(-C / eps)` until both marginals are within `tol`.
/// Only usable when `C / eps` stays far from the exponent range limits.
pub fn matrix_scaling(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> DenseEntropic {
    let k = cost.mapv(|c| (-c / eps).exp());
    scale_to_marginals(&k, a, b, eps, tol, max_iters)
}

/// Scales the kernel `K` (relative to `a b^T`) to the marginals and reports the result.
fn scale_to_marginals(
    kernel: &Array2<f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    eps: f64,
    tol: f64,
    max_iters: usize,
) -> DenseEntropic {
    // Plan = diag(a u) K diag(b v).
    let (n, m) = kernel.dim();
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    for _ in 0..max_iters {
        for i in 0..n {
            let s: f64 = (0..m).map(|j| kernel[[i, j]] * b[j] * v[j]).sum();
            u[i] = 1.0 / s;
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| kernel[[i, j]] * a[i] * u[i]).sum();
            v[j] = 1.0 / s;
        }
        let row_err = (0..n)
            .map(|i| (a[i] * u[i] * (0..m).map(|j| kernel[[i, j]] * b[j] * v[j]).sum::<f64>() - a[i]).abs())
            .fold(0.0, f64::max);
        if row_err <= tol {
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| a[i] * u[i] * kernel[[i, j]] * b[j] * v[j]);
    let cost = kernel.mapv(|k| -eps * k.ln());
    let primal = entropic_primal(plan.view(), a, b, cost.view(), eps);
    DenseEntropic { primal, f: u.mapv(|x| eps * x.ln()), g: v.mapv(|x| eps * x.ln()), plan }
}

/// Minimizes the entropic primal over the coupling polytope by entropic mirror
/// descent: `P <- Proj(P * exp(-step * grad))`, where the KL projection onto
/// the couplings is itself a matrix scaling.
pub fn mirror_descent_primal(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    cost: ArrayView2<'_, f64>,
    eps: f64,
    iterations: usize,
) -> f64 {
    let (n, m) = cost.dim();
    let outer = Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j]);
    let mut plan = outer.clone();
    // Step below 1/eps so the iteration is a genuine contraction, not a one-shot solve.
    let step = 0.5 / eps;
    for _ in 0..iterations {
        let mut y = Array2::zeros((n, m));
        for ((i, j), &p) in plan.indexed_iter() {
            let grad = cost[[i, j]] + eps * (p / outer[[i, j]]).ln();
            y[[i, j]] = p / outer[[i, j]] * (-step * grad).exp();
        }
        plan = scale_to_marginals(&y, a, b, eps, 1e-15, 10_000).plan;
    }
    entropic_primal(plan.view(), a, b, cost, eps)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`, largest over entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Position after `k` Euler steps of `x <- x + eta (y - x)`: `y + (1 - eta)^k (x0 - y)`.
pub fn dirac_flow(x0: &[f64], y: &[f64], eta: f64, k: i32) -> Vec<f64> {
    let r = (1.0 - eta).powi(k);
    x0.iter().zip(y).map(|(a, b)| b + r * (a - b)).collect()
}

/// Interpolation time of `x` on the segment from `a` to `b`.
pub fn segment_time(x: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(a).zip(b).map(|((x, a), b)| (x - a) * (b - a)).sum();
    let den: f64 = a.iter().zip(b).map(|(a, b)| (b - a) * (b - a)).sum();
    num / den
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn permutations_are_complete() {
        let mut seen = std::collections::BTreeSet::new();
        for_each_permutation(4, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn brute_force_small_case() {
        let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let b = array![[1.0, 1.0], [2.0, 0.0], [0.0, 2.0]];
        assert!((brute_force_w2_sq(a.view(), b.view()) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matrix_scaling_and_mirror_descent_agree() {
        let x = array![[0.0, 0.1], [0.5, -0.3], [1.0, 0.0]];
        let y = array![[0.2, 0.2], [-0.4, 0.9], [0.7, 0.7], [1.1, -0.2]];
        let a = Array1::from_elem(3, 1.0 / 3.0);
        let b = array![0.1, 0.2, 0.3, 0.4];
        let c = half_sq_cost(x.view(), y.view());
        let dense = matrix_scaling(a.view(), b.view(), c.view(), 0.5, 1e-15, 100_000);
        let md = mirror_descent_primal(a.view(), b.view(), c.view(), 0.5, 200);
        assert!((dense.primal - md).abs() < 1e-10, "{} vs {md}", dense.primal);
        assert!((dense.primal - dense.dual(a.view(), b.view())).abs() < 1e-10);
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_gradient(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!(max_relative_error(&g, &[2.0, 3.0], 1e-12) < 1e-9);
    }

    #[test]
    fn dirac_flow_example() {
        assert_eq!(dirac_flow(&[0.0, 0.0], &[2.0, 0.0], 0.5, 2), vec![1.5, 0.0]);
        assert!((segment_time(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
