use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::mlp::{MlpParams, MlpSpec, OutputActivation};
use crate::data::{rng_from_seed, Sampler, SeededRng};
use crate::error::{Error, Result};
use crate::flow::TrajectoryPool;

/// Offset between the initialization stream and the minibatch stream of a trainer.
const DATA_STREAM: u64 = 0x5eed_da7a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Loss-trace granularity: one trace point per `eval_every` iterations.
    pub eval_every: usize,
    pub decay: LrDecay,
}

/// Learning-rate schedule over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// `lr (1 + cos(pi k / iterations)) / 2` at iteration `k`.
    Cosine,
}

impl LrDecay {
    pub fn factor(self, it: usize, iterations: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / iterations as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 20_000, minibatch: 256, lr: 1e-4, seed: 0, eval_every: 100, decay: LrDecay::Constant }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.minibatch == 0 || self.eval_every == 0 {
            return Err(Error::invalid("iterations, minibatch and eval_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A trained network and its optimization history.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: MlpParams,
    /// Minibatch loss of every iteration.
    pub losses: Vec<f64>,
    pub seed: u64,
}

impl Trained {
    /// Mean minibatch loss over each consecutive window of `eval_every` iterations.
    pub fn loss_trace(&self, eval_every: usize) -> Vec<(usize, f64)> {
        self.losses
            .chunks_exact(eval_every.max(1))
            .enumerate()
            .map(|(k, w)| ((k + 1) * eval_every, w.iter().sum::<f64>() / w.len() as f64))
            .collect()
    }

    pub fn final_loss(&self) -> f64 {
        let tail = (self.losses.len() / 10).max(1);
        let w = &self.losses[self.losses.len() - tail..];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Generic Adam regression loop over minibatches produced by `draw`.
fn fit<F>(spec: MlpSpec, cfg: &TrainConfig, mut draw: F) -> Result<Trained>
where
    F: FnMut(&mut SeededRng) -> (Array2<f64>, Array2<f64>),
{
    cfg.validate()?;
    let mut params = MlpParams::init(spec, cfg.seed)?;
    let mut adam = Adam::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng_from_seed(cfg.seed ^ DATA_STREAM);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (inputs, targets) = draw(&mut rng);
        let (loss, grads) = params.loss_grad(inputs.view(), targets.view()).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {it}")),
            other => other,
        })?;
        adam.config.lr = cfg.lr * cfg.decay.factor(it, cfg.iterations);
        adam.step(&mut params, &grads);
        losses.push(loss);
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    Ok(Trained { params, losses, seed: cfg.seed })
}

fn check_velocity_spec(spec: &MlpSpec, dim: usize) -> Result<()> {
    if spec.input_dim != dim + 1 || spec.output_dim != dim {
        return Err(Error::invalid(format!(
            "velocity net must map R^{} -> R^{dim}, spec is {} -> {}",
            dim + 1,
            spec.input_dim,
            spec.output_dim
        )));
    }
    Ok(())
}

/// Which `(position, time)` inputs velocity matching regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    /// Recorded positions at their step times `t / T`.
    #[default]
    Recorded,
    /// Points `x + s eta_t v` along each recorded Euler segment, labelled
    /// `(t + s) / T` with `s ~ U[0, 1)`. The target is still the segment's `v`.
    Segment,
}

/// Regresses `v(x, t / T)` onto the pool's empirical velocities using uniformly
/// sampled minibatches of records.
pub fn train_velocity_matching(
    pool: &TrajectoryPool,
    spec: MlpSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    train_velocity_matching_with(pool, spec, cfg, TimeSampling::Recorded)
}

pub fn train_velocity_matching_with(
    pool: &TrajectoryPool,
    spec: MlpSpec,
    cfg: &TrainConfig,
    sampling: TimeSampling,
) -> Result<Trained> {
    if pool.is_empty() {
        return Err(Error::invalid("trajectory pool is empty"));
    }
    let d = pool.dim();
    check_velocity_spec(&spec, d)?;
    let horizon = pool.meta.steps as f64;
    let (positions, velocities, steps) = (pool.positions(), pool.velocities(), pool.steps());
    let step_sizes = pool.meta.step_sizes();
    fit(spec, cfg, |rng| {
        let mut inputs = Array2::zeros((cfg.minibatch, d + 1));
        let mut targets = Array2::zeros((cfg.minibatch, d));
        for b in 0..cfg.minibatch {
            let i = rng.random_range(0..pool.len());
            let offset = match sampling {
                TimeSampling::Recorded => 0.0,
                TimeSampling::Segment => rng.random::<f64>(),
            };
            let mut x = inputs.row_mut(b);
            let mut x = x.slice_mut(ndarray::s![..d]);
            x.assign(&positions.row(i));
            x.scaled_add(offset * step_sizes[steps[i]], &velocities.row(i));
            inputs[[b, d]] = (steps[i] as f64 + offset) / horizon;
            targets.row_mut(b).assign(&velocities.row(i));
        }
        (inputs, targets)
    })
}

/// Draws `(x0, y, t)` and the straight-line interpolant `x_t = t y + (1 - t) x0`.
fn interpolants(
    source: &dyn Sampler,
    target: &dyn Sampler,
    n: usize,
    rng: &mut SeededRng,
) -> (Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>) {
    let x0 = source.sample(n, rng);
    let y = target.sample(n, rng);
    let t = Array1::from_shape_simple_fn(n, || rng.random::<f64>());
    let tc = t.view().insert_axis(Axis(1));
    let xt = &y * &tc + &x0 * &(1.0 - &tc);
    (x0, y, t, xt)
}

fn check_samplers(source: &dyn Sampler, target: &dyn Sampler) -> Result<usize> {
    let d = source.dim();
    if target.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.dim() });
    }
    Ok(d)
}

/// Straight-flow matching: regresses `u(x_t, t)` onto `y - x0` under the independent coupling.
pub fn train_nsf(
    source: &dyn Sampler,
    target: &dyn Sampler,
    spec: MlpSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let d = check_samplers(source, target)?;
    check_velocity_spec(&spec, d)?;
    fit(spec, cfg, |rng| {
        let (x0, y, t, xt) = interpolants(source, target, cfg.minibatch, rng);
        let inputs = ndarray::concatenate(Axis(1), &[xt.view(), t.view().insert_axis(Axis(1))])
            .expect("matching row counts");
        (inputs, y - x0)
    })
}

/// Regresses the sigmoid-output predictor `t(x_t)` onto the interpolation time `t`.
pub fn train_time_predictor(
    source: &dyn Sampler,
    target: &dyn Sampler,
    spec: MlpSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    let d = check_samplers(source, target)?;
    if spec.input_dim != d || spec.output_dim != 1 || spec.output_activation != OutputActivation::Sigmoid
    {
        return Err(Error::invalid(format!(
            "time predictor must map R^{d} -> (0,1) with sigmoid output, spec is {spec:?}"
        )));
    }
    fit(spec, cfg, |rng| {
        let (_, _, t, xt) = interpolants(source, target, cfg.minibatch, rng);
        (xt, t.insert_axis(Axis(1)))
    })
}

/// Mean over rows of the squared L2 error of `params` on `(inputs, targets)`.
pub fn mean_squared_error(
    params: &MlpParams,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<f64> {
    Ok(params.loss_grad(inputs, targets)?.0)
}
