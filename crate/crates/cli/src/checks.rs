//! Numerical self-checks against independent oracles. Shared by `selftest`
//! and the acceptance suite.

use ndarray::{Array1, Array2};
use rand::Rng;
use sinkflow_core::cloud::diameter;
use sinkflow_core::data::{rng_from_seed, sample_dataset, Dataset, DatasetSpec, PointMass, SeededRng};
use sinkflow_core::eval::exact_w2;
use sinkflow_core::exec::Exec;
use sinkflow_core::flow::{build_pool, objective_trace, simulate, FlowConfig, PoolLabels};
use sinkflow_core::nn::{
    mean_squared_error, train_nsf, train_time_predictor, train_velocity_matching, MlpParams, MlpSpec,
    OutputActivation, TrainConfig,
};
use sinkflow_core::ot::{
    dual_value, entropic_ot, plan_diagnostics, potential_gradient, self_transport, sinkhorn_mapping,
    sinkhorn_potentials, SinkhornConfig,
};
use sinkflow_core::PointCloud;
use sinkflow_reference as reference;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Observed value against its bound.
    pub detail: String,
}

impl Check {
    /// `worst <= bound`.
    pub fn bound(name: &str, worst: f64, bound: f64) -> Self {
        Self { name: name.into(), passed: worst <= bound, detail: format!("worst {worst:.3e} (bound {bound:.1e})") }
    }

    pub fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self { name: name.into(), passed: false, detail: format!("error: {err}") }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type R<T> = sinkflow_core::Result<T>;

fn cloud(rng: &mut SeededRng, n: usize, d: usize, uniform: bool) -> PointCloud {
    let pts = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    if uniform {
        return PointCloud::uniform(pts).expect("non-empty");
    }
    let w = Array1::from_shape_fn(n, |_| rng.random_range(0.2..1.0));
    let s = w.sum();
    PointCloud::new(pts, w / s).expect("valid weights")
}

fn max_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Default)]
struct Worst {
    marginal: f64,
    gap: f64,
    negativity: f64,
    diagonal: f64,
    asymmetry: f64,
    gauge: f64,
}

fn sinkhorn_case(rng: &mut SeededRng, w: &mut Worst) -> R<()> {
    let (n, m, d) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=4));
    let eps = rng.random_range(0.05..2.0);
    let (mu, nu) = (cloud(rng, n, d, false), cloud(rng, m, d, false));
    let cfg = SinkhornConfig { tol: 1e-9, max_iters: 100_000, ..SinkhornConfig::with_epsilon(eps) };
    let pair = sinkhorn_potentials(&mu, &nu, &cfg)?.ensure_converged()?;
    let diag = plan_diagnostics(&pair, &mu, &nu)?;
    w.marginal = w.marginal.max(diag.max_row_error).max(diag.max_col_error);
    w.gap = w.gap.max(diag.gap() / (1.0 + diag.dual.abs()));
    let gauge = (dual_value(&pair.shifted(0.731), &mu, &nu)? - diag.dual).abs();
    w.gauge = w.gauge.max(gauge);

    let back = sinkhorn_potentials(&nu, &mu, &cfg)?.ensure_converged()?;
    let (self_mu, self_nu) = (self_transport(&mu, &cfg)?, self_transport(&nu, &cfg)?);
    let s_ab = diag.dual - 0.5 * self_mu - 0.5 * self_nu;
    let s_ba = dual_value(&back, &nu, &mu)? - 0.5 * self_nu - 0.5 * self_mu;
    w.negativity = w.negativity.max(-s_ab.min(s_ba));
    w.asymmetry = w.asymmetry.max((s_ab - s_ba).abs());
    let s_aa = entropic_ot(&mu, &mu.clone(), &cfg)? - self_mu;
    w.diagonal = w.diagonal.max(s_aa.abs());
    Ok(())
}

/// Random pairs with `n, m <= 64`, `d <= 4`, `eps` in `[0.05, 2]`.
pub fn sinkhorn_suite(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = rng_from_seed(seed);
    let mut w = Worst::default();
    for _ in 0..cases {
        if let Err(e) = sinkhorn_case(&mut rng, &mut w) {
            return vec![Check::failed("sinkhorn suite", e)];
        }
    }
    vec![
        Check::bound("marginal violation", w.marginal, 1e-6),
        Check::bound("primal-dual gap / (1 + |dual|)", w.gap, 1e-5),
        Check::bound("divergence negativity", w.negativity, 1e-6),
        Check::bound("|S(mu, mu)|", w.diagonal, 1e-6),
        Check::bound("divergence asymmetry", w.asymmetry, 1e-8),
        Check::bound("gauge shift of the dual", w.gauge, 1e-12),
    ]
}

/// Equal-weight clouds with `n <= 8` in `[-1, 1]^2`: `2 W_eps` against the
/// exhaustive-search `W2^2` at `eps = 1e-4 diam^2`.
///
/// Near a permutation plan the entropic term adds about `2 eps ln n` to
/// `2 W_eps`. With `literal` every case counts; otherwise cases where that
/// excess alone exceeds 1% of `W2^2` are skipped and counted.
pub fn small_epsilon(cases: usize, seed: u64, literal: bool) -> Check {
    let name = if literal {
        "small-epsilon transport vs permutation search"
    } else {
        "small-epsilon transport vs permutation search (resolvable cases)"
    };
    let mut rng = rng_from_seed(seed);
    let (mut worst, mut skipped, mut over) = (0.0f64, 0usize, 0usize);
    let mut corrected = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(2..=8);
        let (mu, nu) = (cloud(&mut rng, n, 2, true), cloud(&mut rng, n, 2, true));
        let diam = diameter(&[mu.points(), nu.points()]);
        let eps = 1e-4 * diam * diam;
        let exact = reference::brute_force_w2_sq(mu.points(), nu.points());
        if !literal && 2.0 * eps * (n as f64).ln() > 0.01 * exact {
            skipped += 1;
            continue;
        }
        let cfg = SinkhornConfig { tol: 1e-7 * diam * diam, max_iters: 200_000, ..SinkhornConfig::with_epsilon(eps) };
        let w_eps = match entropic_ot(&mu, &nu, &cfg) {
            Ok(v) => 2.0 * v,
            Err(e) => return Check::failed(name, e),
        };
        let rel = (w_eps - exact).abs() / exact;
        corrected = corrected.max((w_eps - 2.0 * eps * (n as f64).ln() - exact).abs() / exact);
        over += usize::from(rel > 1e-2);
        worst = worst.max(rel);
    }
    let mut check = Check::bound(name, worst, 1e-2);
    if literal {
        check.detail.push_str(&format!(
            "; {over} of {cases} cases above 1%; after removing 2 eps ln n the worst is {corrected:.3e}"
        ));
    } else {
        check.detail.push_str(&format!("; {skipped} of {cases} cases skipped"));
    }
    check
}

fn gradient_worst(seed: u64) -> R<(f64, f64)> {
    let mut rng = rng_from_seed(seed);
    let mut pot_err = 0.0f64;
    for _ in 0..10 {
        let donor = cloud(&mut rng, 7, 3, false);
        let pot = Array1::from_shape_fn(7, |_| rng.random_range(-0.5..0.5));
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eps = rng.random_range(0.05..2.0);
        let value = |x: &[f64]| {
            let x = Array2::from_shape_vec((1, 3), x.to_vec()).expect("shape");
            sinkhorn_mapping(x.view(), &donor, pot.view(), eps).map(|v| v[0]).unwrap_or(f64::NAN)
        };
        let fd = reference::central_gradient(&q, 1e-5, value);
        let qa = Array2::from_shape_vec((1, 3), q).expect("shape");
        let g = potential_gradient(qa.view(), &donor, pot.view(), eps)?;
        pot_err = pot_err.max(reference::max_relative_error(&g.iter().copied().collect::<Vec<_>>(), &fd, 1e-3));
    }

    let (mu, nu) = (cloud(&mut rng, 6, 2, false), cloud(&mut rng, 5, 2, false));
    let cfg = SinkhornConfig { tol: 1e-12, max_iters: 100_000, ..SinkhornConfig::with_epsilon(0.3) };
    let pair = sinkhorn_potentials(&mu, &nu, &cfg)?.ensure_converged()?;
    let grad = potential_gradient(mu.points(), &nu, pair.g.view(), cfg.epsilon())?;
    let mut env_err = 0.0f64;
    for i in 0..mu.len() {
        let xi = mu.point(i).to_vec();
        let value = |x: &[f64]| {
            let mut pts = mu.points().to_owned();
            pts.row_mut(i).assign(&ndarray::ArrayView1::from(x));
            mu.with_points(pts).and_then(|m| entropic_ot(&m, &nu, &cfg)).unwrap_or(f64::NAN)
        };
        let fd = reference::central_gradient(&xi, 1e-5, value);
        let analytic: Vec<f64> = grad.row(i).iter().map(|g| mu.weights()[i] * g).collect();
        env_err = env_err.max(reference::max_relative_error(&analytic, &fd, 1e-4));
    }
    Ok((pot_err, env_err))
}

fn mlp_gradient_worst(seed: u64) -> R<f64> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for k in 0..24 {
        let mut spec = MlpSpec::velocity(2, k % 4, 1 + k % 8);
        if k % 3 == 2 {
            spec.output_dim = 1;
            spec.output_activation = OutputActivation::Sigmoid;
        }
        let net = MlpParams::init(spec, rng.random())?;
        let inputs = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.5..1.5));
        let targets = Array2::from_shape_fn((4, spec.output_dim), |_| rng.random_range(-1.5..1.5));
        let (_, grads) = net.loss_grad(inputs.view(), targets.view())?;
        let analytic: Vec<f64> = grads.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect();
        let mut probe = net.clone();
        let fd = reference::central_gradient(&net.to_flat(), 1e-6, |p| {
            probe.set_flat(p).ok();
            probe.loss_grad(inputs.view(), targets.view()).map(|r| r.0).unwrap_or(f64::NAN)
        });
        worst = worst.max(reference::max_relative_error(&analytic, &fd, 1e-4));
    }
    Ok(worst)
}

pub fn gradients(seed: u64) -> Vec<Check> {
    let mut out = match gradient_worst(seed) {
        Ok((pot, env)) => vec![
            Check::bound("potential gradient vs finite differences", pot, 1e-4),
            Check::bound("envelope gradient vs re-solved transport", env, 1e-3),
        ],
        Err(e) => vec![Check::failed("potential gradients", e)],
    };
    out.push(match mlp_gradient_worst(seed ^ 1) {
        Ok(w) => Check::bound("MLP gradients vs finite differences", w, 1e-5),
        Err(e) => Check::failed("MLP gradients", e),
    });
    out
}

/// Exact assignment against permutation search on small random clouds.
pub fn assignment(cases: usize, seed: u64) -> Check {
    let name = "exact W2 vs permutation search";
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=7);
        let a = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let b = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let w2 = match exact_w2(a.view(), b.view()) {
            Ok(v) => v,
            Err(e) => return Check::failed(name, e),
        };
        worst = worst.max((w2 * w2 - reference::brute_force_w2_sq(a.view(), b.view())).abs());
    }
    Check::bound(name, worst, 1e-12)
}

fn dirac_checks() -> R<Vec<Check>> {
    let (x0, y) = ([0.0, 0.0], [2.0, -1.0]);
    let eta = 0.4;
    let cfg = FlowConfig { steps: 8, step_size: eta, batch_size: 1, ..FlowConfig::default() };
    let flow = simulate(ndarray::arr2(&[x0]).view(), ndarray::arr2(&[y]).view(), &cfg)?;
    let mut flow_err = 0.0f64;
    for (k, s) in flow.states.iter().enumerate() {
        let want = reference::dirac_flow(&x0, &y, eta, k as i32);
        flow_err = flow_err.max(max_abs(&[s[[0, 0]] - want[0], s[[0, 1]] - want[1]]));
    }

    let labels = PoolLabels { source: "x0".into(), target: "y".into() };
    let pool_cfg = FlowConfig { steps: 4, step_size: 0.5, batch_size: 4, num_batches: 2, ..FlowConfig::default() };
    let pool = build_pool(&PointMass(x0.to_vec()), &PointMass(y.to_vec()), &pool_cfg, labels, Exec::Sequential)?;
    let tc = |iterations, lr| TrainConfig { iterations, minibatch: 64, lr, seed: 21, eval_every: 50, ..Default::default() };
    let v = train_velocity_matching(&pool, MlpSpec::velocity(2, 2, 32), &tc(2000, 3e-3))?;
    let mut inputs = Array2::zeros((pool.len(), 3));
    for (i, r) in pool.records().enumerate() {
        inputs.row_mut(i).slice_mut(ndarray::s![..2]).assign(&r.position);
        inputs[[i, 2]] = r.step as f64 / 4.0;
    }
    let v_mse = mean_squared_error(&v.params, inputs.view(), pool.velocities())?;

    let (a, b) = ([-1.0, 0.5], [1.0, 1.5]);
    let (pa, pb) = (PointMass(a.to_vec()), PointMass(b.to_vec()));
    let nsf = train_nsf(&pa, &pb, MlpSpec::velocity(2, 2, 32), &tc(4000, 3e-3))?;
    let mut nsf_err = 0.0f64;
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let x: Vec<f64> = (0..2).map(|k| a[k] + t * (b[k] - a[k])).collect();
        let u = nsf.params.forward_point(&x, t)?;
        nsf_err = nsf_err.max(max_abs(&[u[0] - (b[0] - a[0]), u[1] - (b[1] - a[1])]));
    }

    let tp = train_time_predictor(&pa, &pb, MlpSpec::time_predictor(2, 2, 32), &tc(3000, 3e-3))?;
    let mut rng = rng_from_seed(77);
    let ts: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    let x = Array2::from_shape_fn((500, 2), |(i, k)| a[k] + ts[i] * (b[k] - a[k]));
    let labels: Vec<f64> = x.rows().into_iter().map(|r| reference::segment_time(&r.to_vec(), &a, &b)).collect();
    let targets = Array2::from_shape_vec((500, 1), labels).expect("shape");
    let tp_mse = mean_squared_error(&tp.params, x.view(), targets.view())?;

    Ok(vec![
        Check::bound("Dirac flow vs closed form", flow_err, 1e-12),
        Check::bound("velocity net on Dirac pool (MSE)", v_mse, 1e-4),
        Check::bound("NSF on Dirac pair vs b - a", nsf_err, 1e-2),
        Check::bound("time predictor held-out MSE", tp_mse, 1e-3),
    ])
}

pub fn closed_form() -> Vec<Check> {
    dirac_checks().unwrap_or_else(|e| vec![Check::failed("closed-form flows", e)])
}

fn descent_worst() -> R<(f64, f64, f64)> {
    let n = 256;
    let x0 = sample_dataset(&DatasetSpec::new(Dataset::EightGaussians, 41), n)?;
    let y = sample_dataset(&DatasetSpec::new(Dataset::Moons, 42), n)?;
    let diam = diameter(&[x0.view(), y.view()]);
    let sink = SinkhornConfig { tol: 1e-9, ..SinkhornConfig::with_blur(0.5) };
    let cfg = FlowConfig { steps: 50, step_size: 0.05 * diam, batch_size: n, sinkhorn: sink, ..FlowConfig::default() };
    let flow = simulate(x0.view(), y.view(), &cfg)?;
    let trace = objective_trace(&flow.states, &PointCloud::uniform(y.clone())?, &sink)?;
    let rise = trace.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);

    let still = simulate(y.view(), y.view(), &FlowConfig { steps: 5, ..cfg })?;
    let vmax = max_abs(still.velocities.iter().flat_map(|v| v.iter()));
    Ok((rise, vmax, trace[50] / trace[0]))
}

/// 8gaussians to moons with `n = 256`, `T = 50`, `eta = 0.05 diam`.
pub fn descent() -> Vec<Check> {
    match descent_worst() {
        Ok((rise, vmax, ratio)) => vec![
            Check {
                passed: rise <= 1e-6,
                detail: format!("largest step-to-step change {rise:.3e} (bound 1e-6); S_T / S_0 = {ratio:.3e}"),
                name: "divergence nonincreasing along the flow".into(),
            },
            Check::bound("velocity sup-norm when starting at the target", vmax, 1e-5),
        ],
        Err(e) => vec![Check::failed("descent", e)],
    }
}

/// Median over seeds of the final divergence to a 1024-point test sample,
/// for each batch size.
pub fn mean_field(sizes: &[usize], seeds: u64) -> R<Vec<f64>> {
    let sink = SinkhornConfig { tol: 1e-6, ..SinkhornConfig::with_blur(0.5) };
    let test = PointCloud::uniform(sample_dataset(&DatasetSpec::new(Dataset::Moons, 999), 1024)?)?;
    sizes
        .iter()
        .map(|&n| {
            let finals = Exec::default().try_map(seeds as usize, |s| {
                let s = s as u64;
                let x0 = sample_dataset(&DatasetSpec::new(Dataset::Gaussian, 100 + s), n)?;
                let y = sample_dataset(&DatasetSpec::new(Dataset::Moons, 200 + s), n)?;
                let cfg = FlowConfig { steps: 10, step_size: 0.5, batch_size: n, sinkhorn: sink, ..FlowConfig::default() };
                let end = simulate(x0.view(), y.view(), &cfg)?.states.pop().expect("at least one state");
                sinkhorn_divergence_to(&end, &test, &sink)
            })?;
            Ok(reference::median(&finals))
        })
        .collect()
}

fn sinkhorn_divergence_to(points: &Array2<f64>, test: &PointCloud, cfg: &SinkhornConfig) -> R<f64> {
    sinkflow_core::ot::sinkhorn_divergence(&PointCloud::uniform(points.clone())?, test, cfg)
}

pub fn mean_field_check(sizes: &[usize], seeds: u64) -> Check {
    let name = "median final divergence strictly decreasing in n";
    match mean_field(sizes, seeds) {
        Ok(medians) => Check {
            passed: medians.windows(2).all(|w| w[1] < w[0]),
            detail: sizes.iter().zip(&medians).map(|(n, m)| format!("n={n}: {m:.4e}")).collect::<Vec<_>>().join(", "),
            name: name.into(),
        },
        Err(e) => Check::failed(name, e),
    }
}

/// The fast checks run by `selftest`.
pub fn fast_suite() -> Vec<Check> {
    let mut out = sinkhorn_suite(40, 1);
    out.push(small_epsilon(50, 2, false));
    out.extend(gradients(3));
    out.push(assignment(200, 4));
    out.extend(closed_form());
    out
}
