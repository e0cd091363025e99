use ndarray::{Array2, Axis};
use sinkflow_core::data::{sample_dataset, Dataset, DatasetSpec, PointMass};
use sinkflow_core::exec::Exec;
use sinkflow_core::flow::{build_pool, FlowConfig, PoolLabels};
use sinkflow_core::nn::*;
use sinkflow_core::sampler::*;

fn cfg(iterations: usize) -> TrainConfig {
    TrainConfig { iterations, minibatch: 64, lr: 3e-3, seed: 8, eval_every: 100, ..Default::default() }
}

#[test]
fn nsgf_on_dirac_pool_reaches_the_target() {
    let (x0, y) = (vec![0.0, 0.0], vec![2.0, 1.0]);
    let flow = FlowConfig { steps: 6, step_size: 0.7, batch_size: 4, num_batches: 2, ..FlowConfig::default() };
    let labels = PoolLabels { source: "x0".into(), target: "y".into() };
    let pool = build_pool(&PointMass(x0.clone()), &PointMass(y.clone()), &flow, labels, Exec::Sequential).unwrap();
    let net = train_velocity_matching(&pool, MlpSpec::velocity(2, 2, 32), &cfg(3000)).unwrap();
    let prior = Array2::from_shape_fn((10, 2), |(_, k)| x0[k]);
    let out = nsgf_infer(&net.params, prior.view(), 6, 0.7).unwrap();
    for row in out.rows() {
        assert!((row[0] - y[0]).abs() <= 1e-2 && (row[1] - y[1]).abs() <= 1e-2, "{row}");
    }
}

#[test]
fn two_phase_completes_straight_lines() {
    let (a, b) = (PointMass(vec![-1.0, 0.0]), PointMass(vec![1.0, 1.0]));
    let nsf = train_nsf(&a, &b, MlpSpec::velocity(2, 2, 32), &cfg(2000)).unwrap();
    let tp = train_time_predictor(&a, &b, MlpSpec::time_predictor(2, 2, 32), &cfg(4000)).unwrap();
    let identity = MlpParams::zeros(MlpSpec::velocity(2, 1, 4)).unwrap();
    let starts = [0.1, 0.3, 0.5, 0.8];
    let prior = Array2::from_shape_fn((4, 2), |(i, k)| a.0[k] + starts[i] * (b.0[k] - a.0[k]));
    let pp = NsgfPpConfig {
        nsgf_steps: 2,
        nsgf_step_size: 0.5,
        trained_steps: 10,
        nsf_step_size: 0.1,
        seed: 0,
        handoff: Handoff::PerSample,
    };
    let out = nsgf_pp_infer(&identity, &tp.params, &nsf.params, prior.view(), &pp, Exec::Sequential).unwrap();
    // Each sample continues the segment for the remaining time 1 - t_hat.
    for (i, row) in out.samples.rows().into_iter().enumerate() {
        let rest = 1.0 - out.t_hat[i];
        for k in 0..2 {
            let want = prior[[i, k]] + rest * (b.0[k] - a.0[k]);
            assert!((row[k] - want).abs() <= 1e-2, "sample {i}: {row} vs {want}");
        }
    }
    for (i, (&t, &k)) in out.t_hat.iter().zip(&out.nsf_nfe).enumerate() {
        assert!((t - starts[i]).abs() < 2e-2, "t_hat {t} for {}", starts[i]);
        assert_eq!(k, ((1.0 - t) / 0.1 - 1e-9).ceil() as usize);
        assert_eq!(out.total_nfe()[i], 2 + k);
    }
}

#[test]
fn samplers_do_not_depend_on_the_executor() {
    let spec = MlpSpec::velocity(2, 2, 16);
    let v = MlpParams::init(spec, 1).unwrap();
    let u = MlpParams::init(spec, 2).unwrap();
    let tp = MlpParams::init(MlpSpec::time_predictor(2, 2, 16), 3).unwrap();
    let prior = sample_dataset(&DatasetSpec::new(Dataset::Gaussian, 4), 700).unwrap();
    let schedule = NsgfSchedule::uniform(5, 0.3);
    let a = nsgf_infer_with(&v, prior.view(), &schedule, true, Exec::Parallel).unwrap();
    let b = nsgf_infer_with(&v, prior.view(), &schedule, true, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let pp = NsgfPpConfig {
        nsgf_steps: 3,
        nsgf_step_size: 0.3,
        trained_steps: 10,
        nsf_step_size: 0.2,
        seed: 0,
        handoff: Handoff::PerSample,
    };
    let x = nsgf_pp_infer(&v, &tp, &u, prior.view(), &pp, Exec::Parallel).unwrap();
    let y = nsgf_pp_infer(&v, &tp, &u, prior.view(), &pp, Exec::Sequential).unwrap();
    assert_eq!(x, y);
    assert!(x.t_hat.iter().all(|&t| (0.0..=0.8).contains(&t)));
    let z = nsgf_pp_infer(&v, &tp, &u, prior.view(), &NsgfPpConfig { handoff: Handoff::BatchMean, ..pp }, Exec::Parallel)
        .unwrap();
    assert!(z.t_hat.iter().all(|&t| t == z.t_hat[0]));
    assert_eq!(
        nsf_infer(&u, prior.view(), 4, Exec::Parallel).unwrap(),
        nsf_infer(&u, prior.view(), 4, Exec::Sequential).unwrap()
    );
}

#[test]
fn trajectory_rows_follow_the_schedule() {
    let v = MlpParams::init(MlpSpec::velocity(2, 1, 8), 5).unwrap();
    let prior = sample_dataset(&DatasetSpec::new(Dataset::Gaussian, 6), 10).unwrap();
    let out = nsgf_infer_with(&v, prior.view(), &NsgfSchedule::uniform(4, 0.25), true, Exec::Sequential).unwrap();
    let tr = out.trajectory.unwrap();
    assert_eq!(tr.len(), 5);
    for t in 0..4 {
        let vel = v.forward_at_time(tr[t].view(), t as f64 / 4.0).unwrap();
        let next = &tr[t] + &(vel * 0.25);
        assert_eq!(next, tr[t + 1]);
    }
    assert_eq!(out.nfe, 4);
    assert_eq!(tr[0].len_of(Axis(0)), 10);
}
