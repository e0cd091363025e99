//! Run configuration: every tunable of a run under a flat dotted key.
//!
//! Values come from the defaults, then a JSON config file, then `--key value`
//! flags. Unknown keys are rejected at every layer.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;
use sinkflow_core::data::{Dataset, DatasetSpec, DEFAULT_NOISE};
use sinkflow_core::exec::Exec;
use sinkflow_core::flow::FlowConfig;
use sinkflow_core::nn::{LrDecay, MlpSpec, TimeSampling, TrainConfig};
use sinkflow_core::ot::SinkhornConfig;
use sinkflow_core::sampler::Handoff;

use crate::error::{CliError, Result};

/// Every configuration key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("out", "output directory"),
    ("seed", "master seed; every stage derives its own stream from it"),
    ("data.source", "source distribution (prior)"),
    ("data.target", "target distribution"),
    ("data.noise", "noise std for moons and scurve"),
    ("data.n", "number of generated or sampled points"),
    ("sinkhorn.blur", "blur; epsilon = blur^2"),
    ("sinkhorn.scaling", "epsilon annealing factor in (0,1)"),
    ("sinkhorn.max_iters", "iteration cap per solve"),
    ("sinkhorn.tol", "sup-norm stopping tolerance"),
    ("sinkhorn.damping", "damping of the symmetric fixed point"),
    ("flow.steps", "Euler steps T per trajectory"),
    ("flow.step_size", "Euler step size eta"),
    ("flow.batch_size", "particles per minibatch flow"),
    ("flow.num_batches", "minibatch flows in the pool"),
    ("flow.ramp", "linear step-size ramp eta (t+1)/T"),
    ("flow.warm_start", "reuse the previous step's potentials"),
    ("flow.parallel", "simulate batches and sample chunks in parallel"),
    ("mlp.hidden_layers", "hidden layers of every network"),
    ("mlp.hidden_width", "hidden units per layer"),
    ("train.iterations", "optimizer steps per network"),
    ("train.minibatch", "regression minibatch size"),
    ("train.lr", "Adam learning rate"),
    ("train.eval_every", "loss-trace window"),
    ("train.time_sampling", "velocity matching inputs: recorded | segment"),
    ("train.lr_decay", "learning-rate schedule: constant | cosine"),
    ("nsgfpp.steps", "steps T of the two-phase sampler's own NSGF pool and net (at most 5)"),
    ("nsgfpp.step_size", "Euler step size eta of that pool and of the NSGF phase"),
    ("nsgfpp.omega", "NSF step size omega in (0,1)"),
    ("nsgfpp.handoff", "per-sample | batch-mean"),
    ("infer.mode", "nsgf | nsgf++ | nsf"),
    ("infer.steps", "Euler steps for nsgf and nsf sampling"),
    ("eval.n", "test-set size"),
    ("eval.input", "samples CSV to evaluate (default: output of the infer settings)"),
    ("pipeline.tasks", "comma-separated task list"),
    ("pipeline.steps", "comma-separated step counts for nsgf and nsf"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Nsgf,
    NsgfPp,
    Nsf,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Nsgf => "nsgf",
            Mode::NsgfPp => "nsgf++",
            Mode::Nsf => "nsf",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nsgf" => Ok(Mode::Nsgf),
            "nsgf++" | "nsgfpp" => Ok(Mode::NsgfPp),
            "nsf" => Ok(Mode::Nsf),
            _ => Err(format!("unknown mode {s:?} (expected nsgf, nsgf++ or nsf)")),
        }
    }
}

/// A benchmark task: a named source/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub name: &'static str,
    pub source: Dataset,
    pub target: Dataset,
}

pub const TASKS: [Task; 5] = [
    Task { name: "8gaussians", source: Dataset::Gaussian, target: Dataset::EightGaussians },
    Task { name: "8gaussians-moons", source: Dataset::EightGaussians, target: Dataset::Moons },
    Task { name: "moons", source: Dataset::Gaussian, target: Dataset::Moons },
    Task { name: "scurve", source: Dataset::Gaussian, target: Dataset::Scurve },
    Task { name: "checkerboard", source: Dataset::Gaussian, target: Dataset::Checkerboard },
];

pub fn task(name: &str) -> Result<Task> {
    TASKS
        .iter()
        .find(|t| t.name == name)
        .copied()
        .ok_or_else(|| CliError::Config(format!("unknown task {name:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub source: Dataset,
    pub target: Dataset,
    pub noise: f64,
    pub n: usize,
    pub sinkhorn: SinkhornConfig,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub num_batches: usize,
    pub ramp: bool,
    pub warm_start: bool,
    pub parallel: bool,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub iterations: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub time_sampling: TimeSampling,
    pub lr_decay: LrDecay,
    pub pp_steps: usize,
    pub pp_step_size: f64,
    pub omega: f64,
    pub handoff: Handoff,
    pub mode: Mode,
    pub infer_steps: usize,
    pub n_eval: usize,
    pub eval_input: Option<PathBuf>,
    pub tasks: Vec<Task>,
    pub pipeline_steps: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            seed: 0,
            source: Dataset::Gaussian,
            target: Dataset::Moons,
            noise: DEFAULT_NOISE,
            n: 1024,
            sinkhorn: SinkhornConfig { tol: 1e-6, ..SinkhornConfig::with_blur(0.5) },
            steps: 10,
            step_size: 0.7,
            batch_size: 256,
            num_batches: 200,
            ramp: false,
            warm_start: true,
            parallel: true,
            hidden_layers: 3,
            hidden_width: 256,
            iterations: 20_000,
            minibatch: 256,
            lr: 1e-4,
            eval_every: 100,
            time_sampling: TimeSampling::Recorded,
            lr_decay: LrDecay::Constant,
            pp_steps: 5,
            pp_step_size: 0.6,
            omega: 0.1,
            handoff: Handoff::PerSample,
            mode: Mode::Nsgf,
            infer_steps: 10,
            n_eval: 1024,
            eval_input: None,
            tasks: TASKS.to_vec(),
            pipeline_steps: vec![10, 100],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn fmt_f64(x: f64) -> String {
    // Debug formatting is the shortest string that parses back to the same value.
    format!("{x:?}")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "data.source" => self.source = parse(key, value)?,
            "data.target" => self.target = parse(key, value)?,
            "data.noise" => self.noise = parse(key, value)?,
            "data.n" => self.n = parse(key, value)?,
            "sinkhorn.blur" => self.sinkhorn.blur = parse(key, value)?,
            "sinkhorn.scaling" => self.sinkhorn.scaling = parse(key, value)?,
            "sinkhorn.max_iters" => self.sinkhorn.max_iters = parse(key, value)?,
            "sinkhorn.tol" => self.sinkhorn.tol = parse(key, value)?,
            "sinkhorn.damping" => self.sinkhorn.damping = parse(key, value)?,
            "flow.steps" => self.steps = parse(key, value)?,
            "flow.step_size" => self.step_size = parse(key, value)?,
            "flow.batch_size" => self.batch_size = parse(key, value)?,
            "flow.num_batches" => self.num_batches = parse(key, value)?,
            "flow.ramp" => self.ramp = parse(key, value)?,
            "flow.warm_start" => self.warm_start = parse(key, value)?,
            "flow.parallel" => self.parallel = parse(key, value)?,
            "mlp.hidden_layers" => self.hidden_layers = parse(key, value)?,
            "mlp.hidden_width" => self.hidden_width = parse(key, value)?,
            "train.iterations" => self.iterations = parse(key, value)?,
            "train.minibatch" => self.minibatch = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.time_sampling" => {
                self.time_sampling = match value.trim() {
                    "recorded" => TimeSampling::Recorded,
                    "segment" => TimeSampling::Segment,
                    other => {
                        return Err(CliError::Config(format!(
                            "{key}: expected recorded or segment, got {other:?}"
                        )))
                    }
                }
            }
            "train.lr_decay" => {
                self.lr_decay = match value.trim() {
                    "constant" => LrDecay::Constant,
                    "cosine" => LrDecay::Cosine,
                    other => {
                        return Err(CliError::Config(format!("{key}: expected constant or cosine, got {other:?}")))
                    }
                }
            }
            "nsgfpp.steps" => self.pp_steps = parse(key, value)?,
            "nsgfpp.step_size" => self.pp_step_size = parse(key, value)?,
            "nsgfpp.omega" => self.omega = parse(key, value)?,
            "nsgfpp.handoff" => {
                self.handoff = match value.trim() {
                    "per-sample" => Handoff::PerSample,
                    "batch-mean" => Handoff::BatchMean,
                    other => {
                        return Err(CliError::Config(format!(
                            "{key}: expected per-sample or batch-mean, got {other:?}"
                        )))
                    }
                }
            }
            "infer.mode" => self.mode = parse(key, value)?,
            "infer.steps" => self.infer_steps = parse(key, value)?,
            "eval.n" => self.n_eval = parse(key, value)?,
            "eval.input" => {
                self.eval_input = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "pipeline.tasks" => {
                self.tasks = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| task(s.trim()))
                    .collect::<Result<_>>()?
            }
            "pipeline.steps" => self.pipeline_steps = parse_list(key, value)?,
            _ => return Err(CliError::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in `KEYS` order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let handoff = match self.handoff {
            Handoff::PerSample => "per-sample",
            Handoff::BatchMean => "batch-mean",
        };
        let sampling = match self.time_sampling {
            TimeSampling::Recorded => "recorded",
            TimeSampling::Segment => "segment",
        };
        let decay = match self.lr_decay {
            LrDecay::Constant => "constant",
            LrDecay::Cosine => "cosine",
        };
        let join = |v: Vec<String>| v.join(",");
        let values = [
            self.out.display().to_string(),
            self.seed.to_string(),
            self.source.to_string(),
            self.target.to_string(),
            fmt_f64(self.noise),
            self.n.to_string(),
            fmt_f64(self.sinkhorn.blur),
            fmt_f64(self.sinkhorn.scaling),
            self.sinkhorn.max_iters.to_string(),
            fmt_f64(self.sinkhorn.tol),
            fmt_f64(self.sinkhorn.damping),
            self.steps.to_string(),
            fmt_f64(self.step_size),
            self.batch_size.to_string(),
            self.num_batches.to_string(),
            self.ramp.to_string(),
            self.warm_start.to_string(),
            self.parallel.to_string(),
            self.hidden_layers.to_string(),
            self.hidden_width.to_string(),
            self.iterations.to_string(),
            self.minibatch.to_string(),
            fmt_f64(self.lr),
            self.eval_every.to_string(),
            sampling.to_string(),
            decay.to_string(),
            self.pp_steps.to_string(),
            fmt_f64(self.pp_step_size),
            fmt_f64(self.omega),
            handoff.to_string(),
            self.mode.name().to_string(),
            self.infer_steps.to_string(),
            self.n_eval.to_string(),
            self.eval_input.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            join(self.tasks.iter().map(|t| t.name.to_string()).collect()),
            join(self.pipeline_steps.iter().map(|s| s.to_string()).collect()),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Applies a JSON object of dotted keys. Nested objects are flattened with dots.
    pub fn apply_json(&mut self, value: &Value) -> Result<()> {
        let Value::Object(map) = value else {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        };
        let mut flat = Vec::new();
        flatten("", map, &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_json(&value)
    }

    /// The effective configuration as a JSON object of dotted keys.
    pub fn to_json(&self) -> Value {
        let map = self.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
        Value::Object(map)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.flow_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.source_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.n == 0 {
            return bad("data.n must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("flow.batch_size must be >= 2".into());
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return bad("mlp.hidden_width must be >= 1".into());
        }
        self.train_config(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.pp_steps == 0 || self.pp_steps > sinkflow_core::sampler::MAX_NSGF_PP_STEPS {
            return bad(format!("nsgfpp.steps must lie in 1..=5, got {}", self.pp_steps));
        }
        self.pp_flow_config().validate().map_err(|e| CliError::Config(format!("nsgfpp: {e}")))?;
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return bad(format!("nsgfpp.omega must lie in (0,1), got {}", self.omega));
        }
        if self.mode == Mode::Nsf && self.infer_steps == 0 {
            return bad("infer.steps must be >= 1 in nsf mode".into());
        }
        if self.n_eval == 0 {
            return bad("eval.n must be >= 1".into());
        }
        if self.tasks.is_empty() || self.pipeline_steps.is_empty() {
            return bad("pipeline.tasks and pipeline.steps must be non-empty".into());
        }
        if self.pipeline_steps.contains(&0) {
            return bad("pipeline.steps entries must be >= 1".into());
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn source_spec(&self) -> DatasetSpec {
        DatasetSpec { dataset: self.source, noise: self.noise, seed: self.seed }
    }

    /// Target generator; its seed also keys the held-out test set.
    pub fn target_spec(&self) -> DatasetSpec {
        DatasetSpec { dataset: self.target, noise: self.noise, seed: self.seed }
    }

    /// Prior samples for inference come from their own stream.
    pub fn prior_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: self.seed.wrapping_add(Stream::Prior as u64), ..self.source_spec() }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            steps: self.steps,
            step_size: self.step_size,
            batch_size: self.batch_size,
            num_batches: self.num_batches,
            seed: self.seed,
            sinkhorn: self.sinkhorn,
            ramp: self.ramp,
            warm_start: self.warm_start,
        }
    }

    /// The short pool behind the two-phase sampler's NSGF phase, from its own seed stream.
    pub fn pp_flow_config(&self) -> FlowConfig {
        FlowConfig {
            steps: self.pp_steps,
            step_size: self.pp_step_size,
            seed: self.seed.wrapping_add(Stream::NsgfPp as u64),
            ..self.flow_config()
        }
    }

    pub fn train_config(&self, stream: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            minibatch: self.minibatch,
            lr: self.lr,
            seed: self.seed.wrapping_add(stream),
            eval_every: self.eval_every,
            decay: self.lr_decay,
        }
    }

    pub fn velocity_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec::velocity(dim, self.hidden_layers, self.hidden_width)
    }

    pub fn time_predictor_spec(&self, dim: usize) -> MlpSpec {
        MlpSpec::time_predictor(dim, self.hidden_layers, self.hidden_width)
    }

    /// The same configuration pointed at one benchmark task.
    pub fn for_task(&self, task: &Task) -> Self {
        Self {
            source: task.source,
            target: task.target,
            out: self.out.join(task.name),
            ..self.clone()
        }
    }
}

/// Seed offsets of the independent random streams of a run.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Nsgf = 1,
    Nsf = 2,
    TimePredictor = 3,
    Prior = 4,
    NsgfPp = 5,
}

fn flatten(prefix: &str, map: &serde_json::Map<String, Value>, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in map {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            Value::Object(inner) => {
                flatten(&key, inner, out)?;
                continue;
            }
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Bool(b) => b.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|i| match i {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(CliError::Config(format!("{key}: list entries must be strings or numbers"))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            Value::Null => return Err(CliError::Config(format!("{key}: null is not a value"))),
        };
        out.push((key, text));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn entries_round_trip_through_set() {
        let mut c = RunConfig::default();
        c.set("flow.step_size", "0.37").unwrap();
        c.set("pipeline.tasks", "moons,scurve").unwrap();
        c.set("nsgfpp.handoff", "batch-mean").unwrap();
        let mut d = RunConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert_eq!(c.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("flow.stpes", "3").is_err());
        assert!(c.apply_json(&json!({"flow": {"steps": 4}, "bogus": 1})).is_err());
        assert!(c.set("data.target", "spiral").is_err());
    }

    #[test]
    fn json_accepts_flat_and_nested_keys() {
        let mut c = RunConfig::default();
        c.apply_json(&json!({"flow.steps": 4, "train": {"lr": 0.001}, "pipeline.tasks": ["moons"]})).unwrap();
        assert_eq!((c.steps, c.lr, c.tasks.len()), (4, 1e-3, 1));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        c.set("nsgfpp.steps", "6").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("sinkhorn.scaling", "1.5").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
