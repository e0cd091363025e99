//! Entropic optimal transport with the quadratic cost `c(x, y) = |x - y|^2 / 2`.
//!
//! Potentials are computed in the log domain: every softmin is evaluated
//! with a max shift so no intermediate exponential overflows, which keeps the
//! solver usable down to `epsilon ~ 1e-4 * diam^2`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::cloud::{diameter, PointCloud};
use crate::error::{Error, Result};

/// Solver settings. The regularization strength is `epsilon = blur^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub blur: f64,
    /// Geometric factor of the epsilon-annealing schedule, in (0, 1).
    pub scaling: f64,
    pub max_iters: usize,
    /// Stopping threshold on the sup-norm change of the potentials.
    pub tol: f64,
    /// Relaxation of the symmetric fixed point, in (0, 1].
    pub damping: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { blur: 0.5, scaling: 0.9, max_iters: 10_000, tol: 1e-9, damping: 0.5 }
    }
}

impl SinkhornConfig {
    pub fn with_blur(blur: f64) -> Self {
        Self { blur, ..Self::default() }
    }

    /// Config whose epsilon is `epsilon` up to the rounding of `sqrt`.
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self::with_blur(epsilon.sqrt())
    }

    pub fn epsilon(&self) -> f64 {
        self.blur * self.blur
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur > 0.0 && self.blur.is_finite()) {
            return Err(Error::invalid(format!("blur must be positive, got {}", self.blur)));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::invalid(format!("scaling must lie in (0,1), got {}", self.scaling)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid(format!("damping must lie in (0,1], got {}", self.damping)));
        }
        Ok(())
    }

    /// Epsilon levels visited before the target level: `eps0 * scaling^k` while above target.
    fn annealing_levels(&self, eps0: f64) -> Vec<f64> {
        let target = self.epsilon();
        let mut levels = Vec::new();
        let mut eps = eps0;
        while eps > target {
            levels.push(eps);
            eps *= self.scaling;
        }
        levels
    }
}

/// Converged (or best-effort) dual potentials for a pair of measures.
///
/// `f` lives on the source support and `g` on the target support. The pair is
/// only defined up to `(f + K, g - K)`; nothing downstream depends on `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub epsilon_used: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl PotentialPair {
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged { residual: self.residual, iterations: self.iterations })
        }
    }

    /// Applies the gauge shift `(f + k, g - k)`.
    pub fn shifted(&self, k: f64) -> Self {
        Self { f: &self.f + k, g: &self.g - k, ..self.clone() }
    }
}

/// Self-potential `b = A(b, mu)` of a single measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPotential {
    pub b: Array1<f64>,
    pub epsilon_used: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl SymmetricPotential {
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged { residual: self.residual, iterations: self.iterations })
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")))
    }
}

fn half_sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// `C[i][j] = |x_i - y_j|^2 / 2` for row-wise point sets.
pub fn cost_matrix(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: y.ncols() });
    }
    Ok(Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| half_sq_dist(x.row(i), y.row(j))))
}

pub fn pairwise_cost(x: &PointCloud, y: &PointCloud) -> Result<Array2<f64>> {
    cost_matrix(x.points(), y.points())
}

/// Exponent range within which `exp` neither underflows nor loses the smallest
/// kernel terms against the largest.
const KERNEL_RANGE: f64 = 300.0;

/// Row-wise softmin against a donor measure.
///
/// For every row `i` of `cost` (queries x donors) returns
/// `-eps * log sum_j exp(log_w[j] + (pot[j] - cost[i][j]) / eps)`.
///
/// After [`Softmin::prepare`] repeated calls at the same `eps` reuse the Gibbs kernel
/// `exp(-cost / eps)` and cost one exponential per donor instead of one per entry,
/// as long as the donor exponents span less than `KERNEL_RANGE`.
struct Softmin {
    shifted: Vec<f64>,
    scratch: Vec<f64>,
    kernel: Option<(f64, Array2<f64>)>,
}

impl Softmin {
    fn new(m: usize) -> Self {
        Self { shifted: vec![0.0; m], scratch: vec![0.0; m], kernel: None }
    }

    fn prepare(&mut self, cost: ArrayView2<'_, f64>, eps: f64) {
        let max = cost.iter().fold(0.0, |a: f64, &c| a.max(c));
        self.kernel = (max / eps <= KERNEL_RANGE).then(|| (eps, cost.mapv(|c| (-c / eps).exp())));
    }

    fn apply(
        &mut self,
        cost: ArrayView2<'_, f64>,
        log_w: &[f64],
        pot: &[f64],
        eps: f64,
        out: &mut [f64],
    ) {
        let inv = 1.0 / eps;
        for (h, (&lw, &p)) in self.shifted.iter_mut().zip(log_w.iter().zip(pot)) {
            *h = lw + p * inv;
        }
        if let Some((_, kernel)) = self.kernel.as_ref().filter(|(k_eps, _)| *k_eps == eps) {
            let hi = self.shifted.iter().fold(f64::NEG_INFINITY, |a, &h| a.max(h));
            let lo = self.shifted.iter().fold(f64::INFINITY, |a, &h| a.min(h));
            if hi - lo <= KERNEL_RANGE {
                for (z, &h) in self.scratch.iter_mut().zip(&self.shifted) {
                    *z = (h - hi).exp();
                }
                for (o, row) in out.iter_mut().zip(kernel.rows()) {
                    let sum: f64 = row.iter().zip(&self.scratch).map(|(k, z)| k * z).sum();
                    *o = -eps * (hi + sum.ln());
                }
                return;
            }
        }
        for (o, row) in out.iter_mut().zip(cost.rows()) {
            let mut max = f64::NEG_INFINITY;
            for ((z, &h), &c) in self.scratch.iter_mut().zip(&self.shifted).zip(row.iter()) {
                *z = h - c * inv;
                max = max.max(*z);
            }
            let sum: f64 = self.scratch.iter().map(|&z| (z - max).exp()).sum();
            *o = -eps * (max + sum.ln());
        }
    }
}

fn log_weights(cloud: &PointCloud) -> Vec<f64> {
    cloud.weights().iter().map(|w| w.ln()).collect()
}

/// The Sinkhorn mapping `A(p, donor)(q) = -eps log sum_j b_j exp((p_j - c(q, y_j)) / eps)`,
/// evaluated at every query point.
pub fn sinkhorn_mapping(
    query: ArrayView2<'_, f64>,
    donor: &PointCloud,
    donor_potential: ArrayView1<'_, f64>,
    epsilon: f64,
) -> Result<Array1<f64>> {
    check_epsilon(epsilon)?;
    if donor_potential.len() != donor.len() {
        return Err(Error::LengthMismatch { expected: donor.len(), got: donor_potential.len() });
    }
    let cost = cost_matrix(query, donor.points())?;
    let pot = donor_potential.to_vec();
    let mut out = vec![0.0; query.nrows()];
    Softmin::new(donor.len()).apply(cost.view(), &log_weights(donor), &pot, epsilon, &mut out);
    Ok(Array1::from(out))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Anderson mixing (type II) for a fixed-point map `x -> G(x)`.
///
/// Plain Sinkhorn sweeps stall on a few isolated eigenvalues close to 1 when
/// the plan is nearly a permutation (e.g. clouds that almost coincide at
/// small epsilon). Extrapolating over the last few residuals removes those
/// modes in a handful of steps. The history is dropped whenever the residual
/// grows well past the best seen so far.
#[derive(Debug)]
struct Anderson {
    depth: usize,
    d_res: Vec<Vec<f64>>,
    d_map: Vec<Vec<f64>>,
    prev_res: Option<Vec<f64>>,
    prev_map: Option<Vec<f64>>,
    best: f64,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, d_res: Vec::new(), d_map: Vec::new(), prev_res: None, prev_map: None, best: f64::INFINITY }
    }

    fn reset(&mut self) {
        self.d_res.clear();
        self.d_map.clear();
        self.prev_res = None;
        self.prev_map = None;
    }

    /// Given the current iterate `x` and `gx = G(x)`, returns the next iterate.
    fn next(&mut self, x: &[f64], gx: &[f64]) -> Vec<f64> {
        let res: Vec<f64> = gx.iter().zip(x).map(|(g, x)| g - x).collect();
        let norm = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        if norm > 10.0 * self.best {
            self.reset();
        }
        self.best = self.best.min(norm);
        if let (Some(pr), Some(pm)) = (self.prev_res.take(), self.prev_map.take()) {
            if self.d_res.len() == self.depth {
                self.d_res.remove(0);
                self.d_map.remove(0);
            }
            self.d_res.push(res.iter().zip(&pr).map(|(a, b)| a - b).collect());
            self.d_map.push(gx.iter().zip(&pm).map(|(a, b)| a - b).collect());
        }
        self.prev_res = Some(res.clone());
        self.prev_map = Some(gx.to_vec());

        let k = self.d_res.len();
        let mut out = gx.to_vec();
        if k == 0 {
            return out;
        }
        // Normal equations of min_gamma |res - dR gamma|, lightly regularized.
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            for j in 0..=i {
                let v: f64 = self.d_res[i].iter().zip(&self.d_res[j]).map(|(a, b)| a * b).sum();
                gram[i * k + j] = v;
                gram[j * k + i] = v;
            }
            rhs[i] = self.d_res[i].iter().zip(&res).map(|(a, b)| a * b).sum();
        }
        let trace: f64 = (0..k).map(|i| gram[i * k + i]).sum();
        for i in 0..k {
            gram[i * k + i] += 1e-12 * trace + f64::MIN_POSITIVE;
        }
        let Some(gamma) = solve_spd(&mut gram, &mut rhs, k) else {
            self.reset();
            return out;
        };
        for (col, &c) in self.d_map.iter().zip(&gamma) {
            for (o, d) in out.iter_mut().zip(col) {
                *o -= c * d;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            self.reset();
            return gx.to_vec();
        }
        out
    }
}

/// Cholesky solve of a small dense SPD system; `None` if not positive definite.
fn solve_spd(a: &mut [f64], b: &mut [f64], k: usize) -> Option<Vec<f64>> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut v = a[i * k + j];
            for p in 0..j {
                v -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = v / d;
        }
    }
    for i in 0..k {
        let mut v = b[i];
        for p in 0..i {
            v -= a[i * k + p] * b[p];
        }
        b[i] = v / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut v = b[i];
        for p in i + 1..k {
            v -= a[p * k + i] * b[p];
        }
        b[i] = v / a[i * k + i];
    }
    Some(b.to_vec())
}

const ANDERSON_DEPTH: usize = 5;

/// Dual potentials `(f, g)` with `f = A(g, nu)` on `mu`'s support and `g = A(f, mu)` on `nu`'s.
///
/// Epsilon is annealed geometrically from `diam^2` down to `cfg.epsilon()`,
/// one sweep per level, then the alternating iteration runs at the target
/// level until the sup-norm update drops below `cfg.tol`. Running out of
/// iterations is not an error: the pair comes back with `converged == false`.
pub fn sinkhorn_potentials(
    mu: &PointCloud,
    nu: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<PotentialPair> {
    solve_potentials(mu, nu, cfg, None)
}

/// Same fixed point as [`sinkhorn_potentials`], started from a previous target-side
/// potential `g` (on the same target support) and without annealing.
pub fn sinkhorn_potentials_warm(
    mu: &PointCloud,
    nu: &PointCloud,
    cfg: &SinkhornConfig,
    g_init: ArrayView1<'_, f64>,
) -> Result<PotentialPair> {
    if g_init.len() != nu.len() {
        return Err(Error::LengthMismatch { expected: nu.len(), got: g_init.len() });
    }
    solve_potentials(mu, nu, cfg, Some(g_init))
}

fn solve_potentials(
    mu: &PointCloud,
    nu: &PointCloud,
    cfg: &SinkhornConfig,
    g_init: Option<ArrayView1<'_, f64>>,
) -> Result<PotentialPair> {
    cfg.validate()?;
    mu.check_same_dim(nu)?;
    if mu == nu {
        // The optimal pair is symmetric up to gauge: f = g = b with b = A(b, mu).
        let sym = solve_symmetric(mu, cfg, g_init)?;
        return Ok(PotentialPair {
            f: sym.b.clone(),
            g: sym.b,
            epsilon_used: sym.epsilon_used,
            iterations: sym.iterations,
            residual: sym.residual,
            converged: sym.converged,
        });
    }
    let eps = cfg.epsilon();
    let cost = pairwise_cost(mu, nu)?;
    let cost_t = cost.t().as_standard_layout().into_owned();
    let (log_a, log_b) = (log_weights(mu), log_weights(nu));
    let (n, m) = (mu.len(), nu.len());

    let mut f = vec![0.0; n];
    let mut g = g_init.map_or_else(|| vec![0.0; m], |g| g.to_vec());
    let mut g_new = vec![0.0; m];
    let mut rows = Softmin::new(m);
    let mut cols = Softmin::new(n);

    let mut iterations = 0;
    if g_init.is_none() {
        let eps0 = diameter(&[mu.points(), nu.points()]).powi(2);
        for level in cfg.annealing_levels(eps0) {
            rows.apply(cost.view(), &log_b, &g, level, &mut f);
            cols.apply(cost_t.view(), &log_a, &f, level, &mut g);
            iterations += 1;
        }
    }
    // Fixed-point iteration on g -> A(A(g, nu), mu). Each pass evaluates
    // f = A(g) and G = A(f); the returned pair is (f, G), so g = A(f) exactly
    // and f = A(g) up to |G - g|.
    rows.prepare(cost.view(), eps);
    cols.prepare(cost_t.view(), eps);
    let mut residual = f64::INFINITY;
    let mut accel = Anderson::new(ANDERSON_DEPTH);
    while iterations < cfg.max_iters {
        rows.apply(cost.view(), &log_b, &g, eps, &mut f);
        cols.apply(cost_t.view(), &log_a, &f, eps, &mut g_new);
        iterations += 1;
        residual = sup_diff(&g_new, &g);
        if !residual.is_finite() || residual <= cfg.tol {
            std::mem::swap(&mut g, &mut g_new);
            break;
        }
        g = accel.next(&g, &g_new);
    }
    check_finite(&f, "source potential")?;
    check_finite(&g, "target potential")?;

    Ok(PotentialPair {
        f: Array1::from(f),
        g: Array1::from(g),
        epsilon_used: eps,
        iterations,
        residual,
        converged: residual <= cfg.tol,
    })
}

/// Self-potential `b = A(b, mu)` via the damped update `b <- (1 - d) b + d A(b, mu)`.
///
/// `W_eps(mu, mu) = 2 <mu, b>`. The reported residual is `sup |A(b) - b|` at the
/// last evaluated iterate.
pub fn symmetric_potential(mu: &PointCloud, cfg: &SinkhornConfig) -> Result<SymmetricPotential> {
    solve_symmetric(mu, cfg, None)
}

/// [`symmetric_potential`] started from `b_init` without annealing.
pub fn symmetric_potential_warm(
    mu: &PointCloud,
    cfg: &SinkhornConfig,
    b_init: ArrayView1<'_, f64>,
) -> Result<SymmetricPotential> {
    if b_init.len() != mu.len() {
        return Err(Error::LengthMismatch { expected: mu.len(), got: b_init.len() });
    }
    solve_symmetric(mu, cfg, Some(b_init))
}

fn solve_symmetric(
    mu: &PointCloud,
    cfg: &SinkhornConfig,
    b_init: Option<ArrayView1<'_, f64>>,
) -> Result<SymmetricPotential> {
    cfg.validate()?;
    let eps = cfg.epsilon();
    let damping = cfg.damping;
    let cost = pairwise_cost(mu, mu)?;
    let log_a = log_weights(mu);
    let n = mu.len();
    let mut soft = Softmin::new(n);
    let mut b = b_init.map_or_else(|| vec![0.0; n], |b| b.to_vec());
    let mut mapped = vec![0.0; n];

    let relax = |b: &mut [f64], mapped: &[f64]| {
        for (bi, &ai) in b.iter_mut().zip(mapped) {
            *bi += damping * (ai - *bi);
        }
    };

    let mut iterations = 0;
    if b_init.is_none() {
        let eps0 = diameter(&[mu.points()]).powi(2);
        let levels = cfg.annealing_levels(eps0);
        if let Some(&first) = levels.first() {
            // Undamped start: b = A(0, mu) at the coarsest level.
            soft.apply(cost.view(), &log_a, &vec![0.0; n], first, &mut b);
        }
        for level in levels {
            soft.apply(cost.view(), &log_a, &b, level, &mut mapped);
            relax(&mut b, &mapped);
            iterations += 1;
        }
    }

    soft.prepare(cost.view(), eps);
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iters {
        soft.apply(cost.view(), &log_a, &b, eps, &mut mapped);
        iterations += 1;
        residual = sup_diff(&mapped, &b);
        if !residual.is_finite() {
            break;
        }
        relax(&mut b, &mapped);
        if residual <= cfg.tol {
            break;
        }
    }
    check_finite(&b, "symmetric potential")?;

    Ok(SymmetricPotential {
        b: Array1::from(b),
        epsilon_used: eps,
        iterations,
        residual,
        converged: residual <= cfg.tol,
    })
}

/// `<mu, f> + <nu, g>`, the entropic OT value at converged potentials.
pub fn dual_value(pair: &PotentialPair, mu: &PointCloud, nu: &PointCloud) -> Result<f64> {
    if pair.f.len() != mu.len() {
        return Err(Error::LengthMismatch { expected: mu.len(), got: pair.f.len() });
    }
    if pair.g.len() != nu.len() {
        return Err(Error::LengthMismatch { expected: nu.len(), got: pair.g.len() });
    }
    Ok(mu.weights().dot(&pair.f) + nu.weights().dot(&pair.g))
}

/// Marginal violations and primal value of the plan implied by a potential pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanDiagnostics {
    pub max_row_error: f64,
    pub max_col_error: f64,
    /// `<pi, C> + eps * KL(pi | mu x nu)`, with the generalized KL (mass term included).
    pub primal: f64,
    pub dual: f64,
}

impl PlanDiagnostics {
    pub fn gap(&self) -> f64 {
        (self.primal - self.dual).abs()
    }
}

/// Reconstructs `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)` and checks it.
pub fn plan_diagnostics(
    pair: &PotentialPair,
    mu: &PointCloud,
    nu: &PointCloud,
) -> Result<PlanDiagnostics> {
    let dual = dual_value(pair, mu, nu)?;
    let eps = pair.epsilon_used;
    check_epsilon(eps)?;
    let cost = pairwise_cost(mu, nu)?;
    let (a, b) = (mu.weights(), nu.weights());

    let mut row_sums = Array1::<f64>::zeros(mu.len());
    let mut col_sums = Array1::<f64>::zeros(nu.len());
    let mut transport = 0.0;
    let mut entropy = 0.0;
    let mut mass = 0.0;
    for (i, crow) in cost.rows().into_iter().enumerate() {
        for (j, &c) in crow.iter().enumerate() {
            // log(pi / (a b)), formed directly so empty cells do not produce log(0).
            let log_ratio = (pair.f[i] + pair.g[j] - c) / eps;
            let p = a[i] * b[j] * log_ratio.exp();
            row_sums[i] += p;
            col_sums[j] += p;
            transport += p * c;
            entropy += p * log_ratio;
            mass += p;
        }
    }
    let primal = transport + eps * (entropy - mass + 1.0);
    if !primal.is_finite() {
        return Err(Error::NonFinite("transport plan".into()));
    }
    let max_abs = |s: &Array1<f64>, w: ArrayView1<'_, f64>| {
        Zip::from(s).and(&w).fold(0.0f64, |acc, &x, &y| acc.max((x - y).abs()))
    };
    Ok(PlanDiagnostics {
        max_row_error: max_abs(&row_sums, a),
        max_col_error: max_abs(&col_sums, b),
        primal,
        dual,
    })
}

/// `W_eps(mu, nu)` from converged potentials.
pub fn entropic_ot(mu: &PointCloud, nu: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    let pair = sinkhorn_potentials(mu, nu, cfg)?.ensure_converged()?;
    dual_value(&pair, mu, nu)
}

/// `W_eps(mu, mu) = 2 <mu, b>` from the symmetric potential.
pub fn self_transport(mu: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    let sym = symmetric_potential(mu, cfg)?.ensure_converged()?;
    Ok(2.0 * mu.weights().dot(&sym.b))
}

/// `S_eps(mu, nu) = W_eps(mu, nu) - W_eps(mu, mu) / 2 - W_eps(nu, nu) / 2`.
pub fn sinkhorn_divergence(mu: &PointCloud, nu: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    mu.check_same_dim(nu)?;
    let cross = entropic_ot(mu, nu, cfg)?;
    Ok(cross - 0.5 * self_transport(mu, cfg)? - 0.5 * self_transport(nu, cfg)?)
}

/// Gradient in the query point of the extended potential `x -> A(p, donor)(x)`,
/// with the donor potential held fixed:
/// `x - sum_j w_j y_j` where `w = softmax_j(log b_j + (p_j - c(x, y_j)) / eps)`.
pub fn potential_gradient(
    query: ArrayView2<'_, f64>,
    donor: &PointCloud,
    donor_potential: ArrayView1<'_, f64>,
    epsilon: f64,
) -> Result<Array2<f64>> {
    check_epsilon(epsilon)?;
    if donor_potential.len() != donor.len() {
        return Err(Error::LengthMismatch { expected: donor.len(), got: donor_potential.len() });
    }
    if query.ncols() != donor.dim() {
        return Err(Error::DimensionMismatch { expected: donor.dim(), got: query.ncols() });
    }
    let inv = 1.0 / epsilon;
    let y = donor.points();
    let shifted: Vec<f64> = donor
        .weights()
        .iter()
        .zip(donor_potential.iter())
        .map(|(w, p)| w.ln() + p * inv)
        .collect();
    let mut logits = vec![0.0; donor.len()];
    let mut grad = Array2::zeros(query.raw_dim());
    for (x, mut out) in query.rows().into_iter().zip(grad.rows_mut()) {
        let mut max = f64::NEG_INFINITY;
        for (j, z) in logits.iter_mut().enumerate() {
            *z = shifted[j] - half_sq_dist(x, y.row(j)) * inv;
            max = max.max(*z);
        }
        let mut total = 0.0;
        for z in logits.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        out.assign(&x);
        for (j, &w) in logits.iter().enumerate() {
            out.scaled_add(-w / total, &y.row(j));
        }
    }
    Ok(grad)
}
