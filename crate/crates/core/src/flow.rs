//! Minibatch Sinkhorn gradient flow: particles follow
//! `v(x) = grad f_{mu,mu}(x) - grad f_{mu,target}(x)` with explicit Euler steps.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::data::{rng_from_seed, Sampler};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ot::{
    potential_gradient, sinkhorn_divergence, sinkhorn_potentials, sinkhorn_potentials_warm,
    symmetric_potential, symmetric_potential_warm, SinkhornConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Number of Euler steps `T` per trajectory.
    pub steps: usize,
    /// Euler step size `eta`.
    pub step_size: f64,
    pub batch_size: usize,
    pub num_batches: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornConfig,
    /// Linear ramp `eta_t = eta (t + 1) / T` instead of a constant step.
    pub ramp: bool,
    /// Start each step's Sinkhorn solve from the previous step's potentials.
    pub warm_start: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 1.0,
            batch_size: 256,
            num_batches: 200,
            seed: 0,
            sinkhorn: SinkhornConfig { tol: 1e-6, ..SinkhornConfig::default() },
            ramp: false,
            warm_start: true,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("flow steps must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.num_batches == 0 {
            return Err(Error::invalid("num_batches must be >= 1"));
        }
        self.sinkhorn.validate()
    }

    pub fn step_size_at(&self, t: usize) -> f64 {
        if self.ramp {
            self.step_size * (t + 1) as f64 / self.steps as f64
        } else {
            self.step_size
        }
    }

    /// Total flow time `sum_t eta_t`.
    pub fn horizon(&self) -> f64 {
        (0..self.steps).map(|t| self.step_size_at(t)).sum()
    }
}

/// `v(x_i) = grad f_{mu,mu}(x_i) - grad f_{mu,target}(x_i)` for every particle of `current`.
pub fn empirical_velocity(
    current: &PointCloud,
    target: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<Array2<f64>> {
    VelocitySolver::new(*cfg, false).velocity(current, target)
}

/// Velocity evaluation that can reuse potentials across consecutive flow steps.
#[derive(Debug, Clone)]
pub struct VelocitySolver {
    cfg: SinkhornConfig,
    warm_start: bool,
    prev_cross: Option<ndarray::Array1<f64>>,
    prev_self: Option<ndarray::Array1<f64>>,
}

impl VelocitySolver {
    pub fn new(cfg: SinkhornConfig, warm_start: bool) -> Self {
        Self { cfg, warm_start, prev_cross: None, prev_self: None }
    }

    pub fn velocity(&mut self, current: &PointCloud, target: &PointCloud) -> Result<Array2<f64>> {
        current.check_same_dim(target)?;
        let cfg = &self.cfg;
        let eps = cfg.epsilon();

        let cross = match (&self.prev_cross, self.warm_start) {
            (Some(g), true) if g.len() == target.len() => {
                sinkhorn_potentials_warm(current, target, cfg, g.view())?
            }
            _ => sinkhorn_potentials(current, target, cfg)?,
        }
        .ensure_converged()?;
        let sym = match (&self.prev_self, self.warm_start) {
            (Some(b), true) if b.len() == current.len() => {
                symmetric_potential_warm(current, cfg, b.view())?
            }
            _ => symmetric_potential(current, cfg)?,
        }
        .ensure_converged()?;

        let x = current.points();
        let grad_self = potential_gradient(x, current, sym.b.view(), eps)?;
        let grad_cross = potential_gradient(x, target, cross.g.view(), eps)?;
        if self.warm_start {
            self.prev_cross = Some(cross.g);
            self.prev_self = Some(sym.b);
        }
        Ok(grad_self - grad_cross)
    }
}

/// `x'_i = x_i + eta v_i`.
pub fn euler_step(
    positions: ArrayView2<'_, f64>,
    velocities: ArrayView2<'_, f64>,
    step_size: f64,
) -> Result<Array2<f64>> {
    if positions.nrows() != velocities.nrows() {
        return Err(Error::LengthMismatch { expected: positions.nrows(), got: velocities.nrows() });
    }
    if positions.ncols() != velocities.ncols() {
        return Err(Error::DimensionMismatch { expected: positions.ncols(), got: velocities.ncols() });
    }
    let mut next = positions.to_owned();
    next.scaled_add(step_size, &velocities);
    Ok(next)
}

/// One simulated particle flow: `states[t]` for `t = 0..=T`, `velocities[t]` for `t < T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub states: Vec<Array2<f64>>,
    pub velocities: Vec<Array2<f64>>,
}

/// Runs `cfg.steps` Euler steps of the empirical flow from `source` towards the fixed
/// `target` batch (uniform weights on both).
pub fn simulate(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    cfg.validate()?;
    let target = PointCloud::uniform(target.to_owned())?;
    let mut current = PointCloud::uniform(source.to_owned())?;
    current.check_same_dim(&target)?;
    let mut solver = VelocitySolver::new(cfg.sinkhorn, cfg.warm_start);
    let mut states = vec![current.points().to_owned()];
    let mut velocities = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let v = solver.velocity(&current, &target)?;
        let next = euler_step(current.points(), v.view(), cfg.step_size_at(t))?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("particle positions after step {t}")));
        }
        velocities.push(v);
        current = current.with_points(next.clone())?;
        states.push(next);
    }
    Ok(FlowTrajectory { states, velocities })
}

/// `S_eps(state_t, target)` for every stored state.
pub fn objective_trace(
    states: &[Array2<f64>],
    target: &PointCloud,
    cfg: &SinkhornConfig,
) -> Result<Vec<f64>> {
    states
        .iter()
        .map(|s| sinkhorn_divergence(&PointCloud::uniform(s.clone())?, target, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub dim: usize,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub num_batches: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub ramp: bool,
}

impl PoolMeta {
    /// Euler step the pool used at step `t`.
    pub fn step_size_at(&self, t: usize) -> f64 {
        if self.ramp {
            self.step_size * (t + 1) as f64 / self.steps as f64
        } else {
            self.step_size
        }
    }

    /// Per-step sizes of the recorded flows.
    pub fn step_sizes(&self) -> Vec<f64> {
        (0..self.steps).map(|t| self.step_size_at(t)).collect()
    }
}

/// One stored `(step, position, empirical velocity)` triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord<'a> {
    pub batch: usize,
    pub step: usize,
    pub position: ArrayView1<'a, f64>,
    pub velocity: ArrayView1<'a, f64>,
}

/// Regression data for velocity matching, ordered by (batch, step, particle).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPool {
    pub meta: PoolMeta,
    batches: Vec<usize>,
    steps: Vec<usize>,
    positions: Array2<f64>,
    velocities: Array2<f64>,
}

impl TrajectoryPool {
    pub fn from_parts(
        meta: PoolMeta,
        batches: Vec<usize>,
        steps: Vec<usize>,
        positions: Array2<f64>,
        velocities: Array2<f64>,
    ) -> Result<Self> {
        let n = batches.len();
        for (what, len) in
            [("steps", steps.len()), ("positions", positions.nrows()), ("velocities", velocities.nrows())]
        {
            if len != n {
                return Err(Error::invalid(format!("pool {what} has {len} rows, expected {n}")));
            }
        }
        for m in [positions.ncols(), velocities.ncols()] {
            if m != meta.dim {
                return Err(Error::DimensionMismatch { expected: meta.dim, got: m });
            }
        }
        if let Some(&t) = steps.iter().find(|&&t| t >= meta.steps) {
            return Err(Error::invalid(format!("record step {t} outside [0, {})", meta.steps)));
        }
        if let Some(&b) = batches.iter().find(|&&b| b >= meta.num_batches) {
            return Err(Error::invalid(format!("record batch {b} outside [0, {})", meta.num_batches)));
        }
        if positions.iter().chain(velocities.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pool records".into()));
        }
        Ok(Self { meta, batches, steps, positions, velocities })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn record(&self, i: usize) -> TrajectoryRecord<'_> {
        TrajectoryRecord {
            batch: self.batches[i],
            step: self.steps[i],
            position: self.positions.row(i),
            velocity: self.velocities.row(i),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TrajectoryRecord<'_>> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn batches(&self) -> &[usize] {
        &self.batches
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn positions(&self) -> ArrayView2<'_, f64> {
        self.positions.view()
    }

    pub fn velocities(&self) -> ArrayView2<'_, f64> {
        self.velocities.view()
    }
}

/// Names recorded in pool metadata for the two samplers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolLabels {
    pub source: String,
    pub target: String,
}

fn batch_seed(seed: u64, batch: usize) -> u64 {
    seed ^ batch as u64
}

fn simulate_batch(
    source: &dyn Sampler,
    target: &dyn Sampler,
    cfg: &FlowConfig,
    batch: usize,
) -> Result<FlowTrajectory> {
    let mut rng = rng_from_seed(batch_seed(cfg.seed, batch));
    let x0 = source.sample(cfg.batch_size, &mut rng);
    let y = target.sample(cfg.batch_size, &mut rng);
    match simulate(x0.view(), y.view(), cfg) {
        Err(Error::NotConverged { .. }) => {
            let mut retry = *cfg;
            retry.sinkhorn.max_iters *= 2;
            simulate(x0.view(), y.view(), &retry)
        }
        other => other,
    }
}

/// Simulates `cfg.num_batches` independent minibatch flows and stores every
/// `(t, x_i, v_i)` triple. Batches may run in parallel; the pool is always
/// ordered by batch index, so the result does not depend on `exec`.
pub fn build_pool(
    source: &dyn Sampler,
    target: &dyn Sampler,
    cfg: &FlowConfig,
    labels: PoolLabels,
    exec: Exec,
) -> Result<TrajectoryPool> {
    cfg.validate()?;
    let d = source.dim();
    if target.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.dim() });
    }
    let flows = exec.try_map(cfg.num_batches, |b| {
        simulate_batch(source, target, cfg, b)
            .map_err(|e| Error::Batch { batch: b, source: Box::new(e) })
    })?;

    let per_batch = cfg.steps * cfg.batch_size;
    let total = per_batch * cfg.num_batches;
    let mut batches = Vec::with_capacity(total);
    let mut steps = Vec::with_capacity(total);
    let mut pos_views = Vec::with_capacity(cfg.steps * cfg.num_batches);
    let mut vel_views = Vec::with_capacity(cfg.steps * cfg.num_batches);
    for (b, flow) in flows.iter().enumerate() {
        for t in 0..cfg.steps {
            batches.extend(std::iter::repeat_n(b, cfg.batch_size));
            steps.extend(std::iter::repeat_n(t, cfg.batch_size));
            pos_views.push(flow.states[t].view());
            vel_views.push(flow.velocities[t].view());
        }
    }
    let positions = ndarray::concatenate(Axis(0), &pos_views)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let velocities = ndarray::concatenate(Axis(0), &vel_views)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let meta = PoolMeta {
        dim: d,
        steps: cfg.steps,
        step_size: cfg.step_size,
        batch_size: cfg.batch_size,
        num_batches: cfg.num_batches,
        epsilon: cfg.sinkhorn.epsilon(),
        seed: cfg.seed,
        source: labels.source,
        target: labels.target,
        ramp: cfg.ramp,
    };
    TrajectoryPool::from_parts(meta, batches, steps, positions, velocities)
}
