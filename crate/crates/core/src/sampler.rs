//! Euler samplers driven by trained networks.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::flow::PoolMeta;
use crate::nn::MlpParams;

/// Rows integrated together; fixed so that results do not depend on the executor.
const CHUNK: usize = 256;

/// Euler grid for a velocity-matched net: the step sizes and the normalized
/// time fed to the network before each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsgfSchedule {
    pub times: Vec<f64>,
    pub step_sizes: Vec<f64>,
}

impl NsgfSchedule {
    /// `steps` steps of `step_size`, feeding `t / steps` to the net.
    pub fn uniform(steps: usize, step_size: f64) -> Self {
        Self {
            times: (0..steps).map(|t| t as f64 / steps as f64).collect(),
            step_sizes: vec![step_size; steps],
        }
    }

    /// The grid the pool was simulated on.
    pub fn native(meta: &PoolMeta) -> Self {
        Self {
            times: (0..meta.steps).map(|t| t as f64 / meta.steps as f64).collect(),
            step_sizes: meta.step_sizes(),
        }
    }

    /// `steps` equal steps over the continuous-time equivalent of the pool grid.
    ///
    /// A pool step of size `eta < 1` contracts a linear field by `1 - eta`,
    /// which the exact flow does in time `-ln(1 - eta)`; steps with `eta >= 1`
    /// keep their length. The label at time `s` inside pool step `k` of
    /// duration `tau_k` starting at `s_k` is `(k + (s - s_k) / tau_k) / T`.
    pub fn refined(meta: &PoolMeta, steps: usize) -> Self {
        let durations: Vec<f64> = meta
            .step_sizes()
            .into_iter()
            .map(|eta| if eta < 1.0 { -(-eta).ln_1p() } else { eta })
            .collect();
        let horizon: f64 = durations.iter().sum();
        let h = horizon / steps.max(1) as f64;
        let label = |s: f64| {
            let mut start = 0.0;
            for (k, &tau) in durations.iter().enumerate() {
                if s < start + tau || k + 1 == durations.len() {
                    return ((k as f64 + (s - start) / tau) / meta.steps as f64).min(1.0);
                }
                start += tau;
            }
            0.0
        };
        Self { times: (0..steps).map(|i| label(i as f64 * h)).collect(), step_sizes: vec![h; steps] }
    }

    pub fn len(&self) -> usize {
        self.step_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.step_sizes.is_empty()
    }

    /// Total flow time covered.
    pub fn horizon(&self) -> f64 {
        self.step_sizes.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.times.len() != self.step_sizes.len() {
            return Err(Error::LengthMismatch { expected: self.step_sizes.len(), got: self.times.len() });
        }
        if self.times.iter().chain(&self.step_sizes).any(|x| !x.is_finite()) {
            return Err(Error::invalid("schedule times and step sizes must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsgfOutput {
    pub samples: Array2<f64>,
    /// Positions before every step and after the last one, if requested.
    pub trajectory: Option<Vec<Array2<f64>>>,
    /// Network evaluations per sample.
    pub nfe: usize,
}

fn check_velocity_net(params: &MlpParams, prior: ArrayView2<'_, f64>) -> Result<()> {
    let d = prior.ncols();
    if params.spec.input_dim != d + 1 || params.spec.output_dim != d {
        return Err(Error::DimensionMismatch { expected: params.spec.output_dim, got: d });
    }
    Ok(())
}

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(CHUNK)).map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n))).collect()
}

fn stitch(parts: Vec<Array2<f64>>, d: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, d));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunks share a width")
}

/// `X <- X + eta v(X, t / T)` for `t = 0..T`.
pub fn nsgf_infer(
    params: &MlpParams,
    prior: ArrayView2<'_, f64>,
    steps: usize,
    step_size: f64,
) -> Result<Array2<f64>> {
    Ok(nsgf_infer_with(params, prior, &NsgfSchedule::uniform(steps, step_size), false, Exec::default())?
        .samples)
}

pub fn nsgf_infer_with(
    params: &MlpParams,
    prior: ArrayView2<'_, f64>,
    schedule: &NsgfSchedule,
    record_trajectory: bool,
    exec: Exec,
) -> Result<NsgfOutput> {
    check_velocity_net(params, prior)?;
    schedule.validate()?;
    let parts = chunks(prior.nrows());
    let runs = exec.try_map(parts.len(), |c| {
        let (lo, hi) = parts[c];
        let mut x = prior.slice(s![lo..hi, ..]).to_owned();
        let mut traj = record_trajectory.then(|| vec![x.clone()]);
        for (t, (&time, &dt)) in schedule.times.iter().zip(&schedule.step_sizes).enumerate() {
            let v = params.forward_at_time(x.view(), time)?;
            x.scaled_add(dt, &v);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample positions at step {t}")));
            }
            if let Some(tr) = traj.as_mut() {
                tr.push(x.clone());
            }
        }
        Ok((x, traj))
    })?;

    let d = prior.ncols();
    let (samples, trajs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let trajectory = record_trajectory.then(|| {
        (0..=schedule.len())
            .map(|t| stitch(trajs.iter().map(|tr| tr.as_ref().unwrap()[t].clone()).collect(), d))
            .collect()
    });
    Ok(NsgfOutput { samples: stitch(samples, d), trajectory, nfe: schedule.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Handoff {
    /// Each sample gets its own predicted time and refinement grid.
    #[default]
    PerSample,
    /// One shared time: the batch mean of the predictions.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsgfPpConfig {
    /// NSGF phase steps `T`, at most 5.
    pub nsgf_steps: usize,
    pub nsgf_step_size: f64,
    /// Steps of the NSGF training pool; phase one feeds `t / trained_steps` to the net.
    pub trained_steps: usize,
    /// Nominal NSF step `omega` in (0, 1).
    pub nsf_step_size: f64,
    pub seed: u64,
    pub handoff: Handoff,
}

pub const MAX_NSGF_PP_STEPS: usize = 5;

impl NsgfPpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nsgf_steps == 0 || self.nsgf_steps > MAX_NSGF_PP_STEPS {
            return Err(Error::invalid(format!(
                "two-phase sampler needs 1..={MAX_NSGF_PP_STEPS} NSGF steps, got {}",
                self.nsgf_steps
            )));
        }
        if !(self.nsf_step_size > 0.0 && self.nsf_step_size < 1.0) {
            return Err(Error::invalid(format!("omega must lie in (0,1), got {}", self.nsf_step_size)));
        }
        if !(self.nsgf_step_size > 0.0 && self.nsgf_step_size.is_finite()) {
            return Err(Error::invalid("NSGF step size must be positive"));
        }
        if self.trained_steps < self.nsgf_steps {
            return Err(Error::invalid(format!(
                "{} NSGF steps exceed the {} steps the velocity net was trained on",
                self.nsgf_steps, self.trained_steps
            )));
        }
        Ok(())
    }

    fn schedule(&self) -> NsgfSchedule {
        NsgfSchedule {
            times: (0..self.nsgf_steps).map(|t| t as f64 / self.trained_steps as f64).collect(),
            step_sizes: vec![self.nsgf_step_size; self.nsgf_steps],
        }
    }
}

/// Refinement steps for a handoff time already clamped into `[0, 1 - omega]`.
pub fn refinement_steps(t_hat: f64, omega: f64) -> usize {
    // The slack keeps `t_hat = 1 - omega` at exactly one step despite rounding.
    (((1.0 - t_hat) / omega) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct NsgfPpOutput {
    pub samples: Array2<f64>,
    /// Clamped handoff time of every sample.
    pub t_hat: Vec<f64>,
    pub nsgf_nfe: usize,
    /// NSF steps of every sample.
    pub nsf_nfe: Vec<usize>,
}

impl NsgfPpOutput {
    /// `T + K_i` per sample.
    pub fn total_nfe(&self) -> Vec<usize> {
        self.nsf_nfe.iter().map(|k| self.nsgf_nfe + k).collect()
    }

    pub fn mean_nfe(&self) -> f64 {
        let t = self.total_nfe();
        t.iter().sum::<usize>() as f64 / t.len().max(1) as f64
    }
}

/// Straight-flow Euler integration from per-sample start times to `t = 1`.
/// Sample `i` takes `steps[i]` equal steps of `(1 - start[i]) / steps[i]`.
pub fn nsf_refine(
    nsf: &MlpParams,
    x: ArrayView2<'_, f64>,
    start: &[f64],
    steps: &[usize],
) -> Result<Array2<f64>> {
    check_velocity_net(nsf, x)?;
    let n = x.nrows();
    if start.len() != n || steps.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: start.len().min(steps.len()) });
    }
    let d = x.ncols();
    let mut x = x.to_owned();
    let dt: Vec<f64> = start.iter().zip(steps).map(|(s, &k)| (1.0 - s) / k as f64).collect();
    let max_steps = steps.iter().copied().max().unwrap_or(0);
    for k in 0..max_steps {
        let active: Vec<usize> = (0..n).filter(|&i| k < steps[i]).collect();
        let mut inputs = Array2::zeros((active.len(), d + 1));
        for (r, &i) in active.iter().enumerate() {
            inputs.row_mut(r).slice_mut(s![..d]).assign(&x.row(i));
            inputs[[r, d]] = start[i] + k as f64 * dt[i];
        }
        let u = nsf.forward(inputs.view())?;
        for (r, &i) in active.iter().enumerate() {
            x.row_mut(i).scaled_add(dt[i], &u.row(r));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("refined positions at NSF step {k}")));
        }
    }
    Ok(x)
}

/// Two-phase sampler: `T` NSGF steps, a time prediction per sample, then a
/// straight-flow Euler refinement from the predicted time to 1.
pub fn nsgf_pp_infer(
    velocity: &MlpParams,
    time_predictor: &MlpParams,
    nsf: &MlpParams,
    prior: ArrayView2<'_, f64>,
    cfg: &NsgfPpConfig,
    exec: Exec,
) -> Result<NsgfPpOutput> {
    cfg.validate()?;
    let d = prior.ncols();
    check_velocity_net(velocity, prior)?;
    check_velocity_net(nsf, prior)?;
    if time_predictor.spec.input_dim != d || time_predictor.spec.output_dim != 1 {
        return Err(Error::DimensionMismatch { expected: time_predictor.spec.input_dim, got: d });
    }

    let phase1 = nsgf_infer_with(velocity, prior, &cfg.schedule(), false, exec)?.samples;
    let parts = chunks(phase1.nrows());
    let predicted: Vec<Array2<f64>> = exec.try_map(parts.len(), |c| {
        let (lo, hi) = parts[c];
        time_predictor.forward(phase1.slice(s![lo..hi, ..]))
    })?;
    let raw: Vec<f64> = predicted.iter().flat_map(|p| p.iter().copied()).collect();
    let omega = cfg.nsf_step_size;
    let clamp = |t: f64| t.clamp(0.0, 1.0 - omega);
    let t_hat: Vec<f64> = match cfg.handoff {
        Handoff::PerSample => raw.iter().map(|&t| clamp(t)).collect(),
        Handoff::BatchMean => {
            let mean = Array1::from(raw.clone()).mean().unwrap_or(0.0);
            vec![clamp(mean); raw.len()]
        }
    };
    if t_hat.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("predicted handoff times".into()));
    }
    let nsf_nfe: Vec<usize> = t_hat.iter().map(|&t| refinement_steps(t, omega)).collect();

    let refined = exec.try_map(parts.len(), |c| {
        let (lo, hi) = parts[c];
        nsf_refine(nsf, phase1.slice(s![lo..hi, ..]), &t_hat[lo..hi], &nsf_nfe[lo..hi])
    })?;
    Ok(NsgfPpOutput { samples: stitch(refined, d), t_hat, nsgf_nfe: cfg.nsgf_steps, nsf_nfe })
}

/// Plain straight-flow sampler: `steps` uniform Euler steps from `t = 0` to `t = 1`.
pub fn nsf_infer(
    nsf: &MlpParams,
    prior: ArrayView2<'_, f64>,
    steps: usize,
    exec: Exec,
) -> Result<Array2<f64>> {
    check_velocity_net(nsf, prior)?;
    if steps == 0 {
        return Err(Error::invalid("straight-flow sampling needs at least one step"));
    }
    let parts = chunks(prior.nrows());
    let out = exec.try_map(parts.len(), |c| {
        let (lo, hi) = parts[c];
        let m = hi - lo;
        nsf_refine(nsf, prior.slice(s![lo..hi, ..]), &vec![0.0; m], &vec![steps; m])
    })?;
    Ok(stitch(out, prior.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, MlpSpec};
    use ndarray::array;

    /// Linear "network" `u(x, t) = c` (zero hidden layers).
    fn constant_field(c: &[f64]) -> MlpParams {
        let d = c.len();
        let spec = MlpSpec::velocity(d, 0, 0);
        MlpParams::from_layers(
            spec,
            vec![Layer { weights: Array2::zeros((d + 1, d)), bias: Array1::from(c.to_vec()) }],
        )
        .unwrap()
    }

    fn constant_time(t: f64) -> MlpParams {
        let spec = MlpSpec::time_predictor(2, 0, 0);
        let logit = (t / (1.0 - t)).ln();
        MlpParams::from_layers(spec, vec![Layer { weights: Array2::zeros((2, 1)), bias: array![logit] }])
            .unwrap()
    }

    #[test]
    fn zero_net_keeps_prior() {
        let prior = array![[0.5, -1.0], [2.0, 3.0]];
        let p = MlpParams::zeros(MlpSpec::velocity(2, 2, 8)).unwrap();
        assert_eq!(nsgf_infer(&p, prior.view(), 7, 0.3).unwrap(), prior);
        assert_eq!(nsgf_infer(&constant_field(&[1.0, 1.0]), prior.view(), 0, 0.3).unwrap(), prior);
    }

    #[test]
    fn trajectory_has_every_state() {
        let prior = Array2::from_shape_fn((300, 2), |(i, k)| (i * 2 + k) as f64);
        let out = nsgf_infer_with(
            &constant_field(&[1.0, -1.0]),
            prior.view(),
            &NsgfSchedule::uniform(3, 0.5),
            true,
            Exec::Parallel,
        )
        .unwrap();
        let tr = out.trajectory.unwrap();
        assert_eq!(tr.len(), 4);
        assert_eq!(tr[0], prior);
        assert_eq!(tr[3], out.samples);
        assert_eq!(out.samples[[299, 0]], prior[[299, 0]] + 1.5);
    }

    fn meta(steps: usize, step_size: f64, ramp: bool) -> PoolMeta {
        PoolMeta {
            dim: 2,
            steps,
            step_size,
            batch_size: 1,
            num_batches: 1,
            epsilon: 0.25,
            seed: 0,
            source: "a".into(),
            target: "b".into(),
            ramp,
        }
    }

    #[test]
    fn refined_schedules_cover_the_pool_horizon() {
        let m = meta(10, 0.3, false);
        let native = NsgfSchedule::native(&m);
        assert_eq!(native, NsgfSchedule::uniform(10, 0.3));
        let fine = NsgfSchedule::refined(&m, 100);
        assert_eq!(fine.len(), 100);
        assert!((fine.horizon() - 10.0 * (1.0f64 / 0.7).ln()).abs() < 1e-12);
        assert!((fine.times[50] - 0.5).abs() < 1e-12);

        // Ramp steps .25 and .5 last ln(4/3) and ln 2.
        let r = meta(2, 0.5, true);
        let fine = NsgfSchedule::refined(&r, 2);
        let (a, b) = ((4.0f64 / 3.0).ln(), 2.0f64.ln());
        let h = (a + b) / 2.0;
        assert!((fine.step_sizes[0] - h).abs() < 1e-15);
        assert_eq!(fine.times[0], 0.0);
        assert!((fine.times[1] - (1.0 + (h - a) / b) / 2.0).abs() < 1e-12);

        // Steps of size 1 or more keep their length.
        let big = NsgfSchedule::refined(&meta(3, 1.5, false), 6);
        assert!((big.horizon() - 4.5).abs() < 1e-12);
        assert!((big.times[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refinement_step_counts() {
        assert_eq!(refinement_steps(0.9, 0.1), 1);
        assert_eq!(refinement_steps(1.0 - 0.3, 0.3), 1);
        assert_eq!(refinement_steps(0.0, 0.1), 10);
        assert_eq!(refinement_steps(0.55, 0.1), 5);
    }

    #[test]
    fn handoff_at_one_minus_omega_takes_one_step() {
        let prior = array![[0.0, 0.0], [1.0, 1.0]];
        let cfg = NsgfPpConfig {
            nsgf_steps: 2,
            nsgf_step_size: 0.5,
            trained_steps: 2,
            nsf_step_size: 0.25,
            seed: 0,
            handoff: Handoff::PerSample,
        };
        let out = nsgf_pp_infer(
            &constant_field(&[0.0, 0.0]),
            &constant_time(0.999),
            &constant_field(&[1.0, 0.0]),
            prior.view(),
            &cfg,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(out.nsf_nfe, vec![1, 1]);
        assert_eq!(out.total_nfe(), vec![3, 3]);
        assert!((out.samples[[0, 0]] - 0.25).abs() < 1e-12);
        assert!(out.t_hat.iter().all(|&t| (t - 0.75).abs() < 1e-15));
    }

    #[test]
    fn rejects_too_many_nsgf_steps() {
        let cfg = NsgfPpConfig {
            nsgf_steps: 6,
            nsgf_step_size: 0.5,
            trained_steps: 2,
            nsf_step_size: 0.25,
            seed: 0,
            handoff: Handoff::PerSample,
        };
        assert!(cfg.validate().is_err());
        assert!(NsgfPpConfig { nsgf_steps: 5, nsf_step_size: 1.0, ..cfg }.validate().is_err());
        assert!(NsgfPpConfig { nsgf_steps: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn nan_positions_name_the_step() {
        let prior = array![[1e308, 0.0]];
        let err = nsgf_infer(&constant_field(&[1e308, 0.0]), prior.view(), 3, 1.0).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
    }
}
