use ndarray::{Array1, Array2};
use rand::Rng;
use sinkflow_core::cloud::diameter;
use sinkflow_core::data::{rng_from_seed, SeededRng};
use sinkflow_core::ot::*;
use sinkflow_core::PointCloud;
use sinkflow_reference as reference;

fn random_cloud(rng: &mut SeededRng, n: usize, d: usize, uniform: bool) -> PointCloud {
    let pts = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    if uniform {
        return PointCloud::uniform(pts).unwrap();
    }
    let w = Array1::from_shape_fn(n, |_| rng.random_range(0.2..1.0));
    let s = w.sum();
    PointCloud::new(pts, w / s).unwrap()
}

fn tight(eps: f64) -> SinkhornConfig {
    SinkhornConfig { tol: 1e-12, max_iters: 100_000, ..SinkhornConfig::with_epsilon(eps) }
}

#[test]
fn dual_matches_dense_primal_on_four_points() {
    let mut rng = rng_from_seed(11);
    for _ in 0..20 {
        let (mu, nu) = (random_cloud(&mut rng, 4, 2, false), random_cloud(&mut rng, 4, 2, false));
        let pair = sinkhorn_potentials(&mu, &nu, &tight(0.5)).unwrap().ensure_converged().unwrap();
        let dual = dual_value(&pair, &mu, &nu).unwrap();
        let cost = reference::half_sq_cost(mu.points(), nu.points());
        let md = reference::mirror_descent_primal(mu.weights(), nu.weights(), cost.view(), 0.5, 300);
        let dense =
            reference::matrix_scaling(mu.weights(), nu.weights(), cost.view(), 0.5, 1e-15, 100_000);
        assert!((dual - md).abs() <= 1e-6, "dual {dual} vs mirror descent {md}");
        assert!((dual - dense.primal).abs() <= 1e-6, "dual {dual} vs scaling {}", dense.primal);
    }
}

#[test]
fn small_epsilon_recovers_exact_transport() {
    let mut rng = rng_from_seed(12);
    for _ in 0..30 {
        let n = rng.random_range(2..=8);
        let (mu, nu) = (random_cloud(&mut rng, n, 2, true), random_cloud(&mut rng, n, 2, true));
        let diam = diameter(&[mu.points(), nu.points()]);
        let cfg = SinkhornConfig { tol: 1e-7 * diam * diam, max_iters: 200_000, ..SinkhornConfig::with_epsilon(1e-4 * diam * diam) };
        let w_eps = entropic_ot(&mu, &nu, &cfg).unwrap();
        // Half-squared cost: the unregularized optimum is half the squared W2.
        let exact = 0.5 * reference::brute_force_w2_sq(mu.points(), nu.points());
        assert!((w_eps - exact).abs() <= 0.01 * exact, "n={n}: {w_eps} vs {exact}");
    }
}

#[test]
fn converged_plans_satisfy_marginals_and_strong_duality() {
    let mut rng = rng_from_seed(13);
    for k in 0..10 {
        let d = 1 + k % 3;
        let (mu, nu) = (random_cloud(&mut rng, 16, d, false), random_cloud(&mut rng, 16, d, true));
        let cfg = SinkhornConfig { tol: 1e-9, ..SinkhornConfig::with_blur(0.4) };
        let pair = sinkhorn_potentials(&mu, &nu, &cfg).unwrap().ensure_converged().unwrap();
        let diag = plan_diagnostics(&pair, &mu, &nu).unwrap();
        assert!(diag.max_row_error <= 1e-6 && diag.max_col_error <= 1e-6, "{diag:?}");
        assert!(diag.gap() <= 1e-5 * (1.0 + diag.dual.abs()), "{diag:?}");
    }
}

#[test]
fn potentials_are_fixed_points() {
    let mut rng = rng_from_seed(14);
    let (mu, nu) = (random_cloud(&mut rng, 12, 2, false), random_cloud(&mut rng, 9, 2, false));
    let cfg = SinkhornConfig { tol: 1e-9, ..SinkhornConfig::with_blur(0.5) };
    let pair = sinkhorn_potentials(&mu, &nu, &cfg).unwrap().ensure_converged().unwrap();
    let eps = pair.epsilon_used;
    let f = sinkhorn_mapping(mu.points(), &nu, pair.g.view(), eps).unwrap();
    let g = sinkhorn_mapping(nu.points(), &mu, f.view(), eps).unwrap();
    let drift = (&f - &pair.f).iter().chain((&g - &pair.g).iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(drift <= 2.0 * cfg.tol, "drift {drift}");

    let sym = symmetric_potential(&mu, &cfg).unwrap().ensure_converged().unwrap();
    let again = sinkhorn_mapping(mu.points(), &mu, sym.b.view(), eps).unwrap();
    let drift = (&again - &sym.b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(drift <= 2.0 * cfg.tol, "symmetric drift {drift}");
}

#[test]
fn potential_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(15);
    for _ in 0..10 {
        let donor = random_cloud(&mut rng, 7, 3, false);
        let pot = Array1::from_shape_fn(7, |_| rng.random_range(-0.5..0.5));
        let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eps = rng.random_range(0.05..2.0);
        let value = |x: &[f64]| {
            let x = Array2::from_shape_vec((1, 3), x.to_vec()).unwrap();
            sinkhorn_mapping(x.view(), &donor, pot.view(), eps).unwrap()[0]
        };
        let fd = reference::central_gradient(&q, 1e-5, value);
        let qa = Array2::from_shape_vec((1, 3), q.clone()).unwrap();
        let g = potential_gradient(qa.view(), &donor, pot.view(), eps).unwrap();
        let err = reference::max_relative_error(g.as_slice().unwrap(), &fd, 1e-3);
        assert!(err <= 1e-4, "relative error {err}");
    }
}

#[test]
fn envelope_property_for_resolved_transport() {
    let mut rng = rng_from_seed(16);
    let (mu, nu) = (random_cloud(&mut rng, 6, 2, false), random_cloud(&mut rng, 5, 2, false));
    let cfg = tight(0.3);
    let pair = sinkhorn_potentials(&mu, &nu, &cfg).unwrap().ensure_converged().unwrap();
    let grad = potential_gradient(mu.points(), &nu, pair.g.view(), cfg.epsilon()).unwrap();
    for i in 0..mu.len() {
        let xi: Vec<f64> = mu.point(i).to_vec();
        let value = |x: &[f64]| {
            let mut pts = mu.points().to_owned();
            pts.row_mut(i).assign(&ndarray::ArrayView1::from(x));
            let moved = mu.with_points(pts).unwrap();
            entropic_ot(&moved, &nu, &cfg).unwrap()
        };
        let fd = reference::central_gradient(&xi, 1e-5, value);
        let analytic: Vec<f64> = grad.row(i).iter().map(|g| mu.weights()[i] * g).collect();
        let err = reference::max_relative_error(&analytic, &fd, 1e-4);
        assert!(err <= 1e-3, "particle {i}: {analytic:?} vs {fd:?}");
    }
}

#[test]
fn divergence_of_far_diracs_and_symmetry() {
    let a = PointCloud::dirac(&[0.0, 0.0]).unwrap();
    let b = PointCloud::dirac(&[2.0, 0.0]).unwrap();
    let cfg = SinkhornConfig::default();
    assert!((sinkhorn_divergence(&a, &b, &cfg).unwrap() - 2.0).abs() < 1e-12);
    let mut rng = rng_from_seed(17);
    let (mu, nu) = (random_cloud(&mut rng, 20, 2, false), random_cloud(&mut rng, 13, 2, true));
    let cfg = SinkhornConfig { tol: 1e-10, ..SinkhornConfig::with_blur(0.5) };
    let (s1, s2) = (sinkhorn_divergence(&mu, &nu, &cfg).unwrap(), sinkhorn_divergence(&nu, &mu, &cfg).unwrap());
    assert!((s1 - s2).abs() <= 1e-8, "{s1} vs {s2}");
    assert!(s1 >= -1e-6);
}
