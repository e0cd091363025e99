//! The individual subcommands. Each reads its inputs from and writes its
//! outputs to the configured output directory.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::json;
use sinkflow_core::data::{sample_dataset, Dataset, Sampler};
use sinkflow_core::eval::evaluate;
use sinkflow_core::flow::{build_pool, PoolLabels};
use sinkflow_core::nn::{train_nsf, train_time_predictor, train_velocity_matching_with, Trained};
use sinkflow_core::sampler::{nsf_infer, nsgf_infer_with, nsgf_pp_infer, NsgfPpConfig, NsgfSchedule};

use crate::config::{Mode, RunConfig, Stream};
use crate::error::{CliError, Result};
use crate::formats::{self, Checkpoint, ResultRow};
use crate::svg;

/// Switches shared by all commands.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags {
    pub force: bool,
    pub fresh: bool,
    pub svg: bool,
    pub trajectory: bool,
    pub dry_run: bool,
}

/// The networks and their checkpoint stems. `NsgfPp` is the velocity net of the
/// two-phase sampler, fitted to its own short pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Nsgf,
    NsgfPp,
    Nsf,
    TimePredictor,
}

impl Net {
    pub fn stem(self) -> &'static str {
        match self {
            Net::Nsgf => "nsgf",
            Net::NsgfPp => "nsgfpp",
            Net::Nsf => "nsf",
            Net::TimePredictor => "tp",
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Net::Nsgf => "v_θ (train-nsgf)",
            Net::NsgfPp => "v_θ of nsgf++ (train-nsgf-pp)",
            Net::Nsf => "u_δ (train-nsf)",
            Net::TimePredictor => "t_φ (train-tp)",
        }
    }
}

fn mode_tag(mode: Mode) -> &'static str {
    match mode {
        Mode::Nsgf => "nsgf",
        Mode::NsgfPp => "nsgfpp",
        Mode::Nsf => "nsf",
    }
}

/// Artifact locations under an output directory.
pub mod paths {
    use super::*;

    pub fn data(out: &Path) -> PathBuf {
        out.join("data.csv")
    }

    /// The pool behind `net`, one of the two NSGF velocity nets.
    pub fn pool(out: &Path, net: Net) -> PathBuf {
        match net {
            Net::NsgfPp => out.join("pool-nsgfpp.csv"),
            _ => out.join("pool.csv"),
        }
    }

    pub fn checkpoint(out: &Path, net: Net) -> PathBuf {
        out.join(format!("{}.ckpt.json", net.stem()))
    }

    pub fn loss(out: &Path, net: Net) -> PathBuf {
        out.join(format!("{}.loss.csv", net.stem()))
    }

    pub fn samples(out: &Path, mode: Mode, steps: usize) -> PathBuf {
        out.join(format!("samples-{}-{steps}.csv", mode_tag(mode)))
    }

    pub fn nfe(out: &Path, steps: usize) -> PathBuf {
        out.join(format!("nfe-{}-{steps}.csv", mode_tag(Mode::NsgfPp)))
    }

    pub fn trajectory(out: &Path, mode: Mode, steps: usize) -> PathBuf {
        out.join(format!("trajectory-{}-{steps}.csv", mode_tag(mode)))
    }

    pub fn results(out: &Path) -> PathBuf {
        out.join("results.csv")
    }
}

/// Steps recorded for a sampler run: the NSGF phase length for the two-phase sampler.
pub fn run_steps(cfg: &RunConfig) -> usize {
    match cfg.mode {
        Mode::NsgfPp => cfg.pp_steps,
        Mode::Nsgf | Mode::Nsf => cfg.infer_steps,
    }
}

/// `target` for Gaussian sources, `source-target` otherwise.
pub fn task_label(cfg: &RunConfig) -> String {
    match cfg.source {
        Dataset::Gaussian => cfg.target.to_string(),
        src => format!("{src}-{}", cfg.target),
    }
}

fn guard(paths: &[&Path], flags: Flags) -> Result<()> {
    paths.iter().try_for_each(|p| formats::ensure_writable(p, flags.force))
}

pub fn gen_data(cfg: &RunConfig, flags: Flags, log: &mut dyn Write) -> Result<()> {
    let path = paths::data(&cfg.out);
    guard(&[&path], flags)?;
    let points = sample_dataset(&cfg.target_spec(), cfg.n)?;
    formats::write_points(&path, points.view())?;
    say(log, format_args!("wrote {} points of {} to {}", cfg.n, cfg.target, path.display()));
    Ok(())
}

/// Builds the pool for `net`: the main NSGF pool or the two-phase sampler's short one.
pub fn build_pool_cmd(cfg: &RunConfig, net: Net, flags: Flags, log: &mut dyn Write) -> Result<()> {
    let path = paths::pool(&cfg.out, net);
    guard(&[&path, &formats::meta_path(&path)], flags)?;
    let labels = PoolLabels { source: cfg.source.to_string(), target: cfg.target.to_string() };
    let flow = if net == Net::NsgfPp { cfg.pp_flow_config() } else { cfg.flow_config() };
    let pool = build_pool(&cfg.source_spec(), &cfg.target_spec(), &flow, labels, cfg.exec())?;
    formats::write_pool(&path, &pool)?;
    say(log, format_args!("wrote {} pool records to {}", pool.len(), path.display()));
    Ok(())
}

fn save_trained(
    cfg: &RunConfig,
    net: Net,
    trained: &Trained,
    pool: Option<sinkflow_core::flow::PoolMeta>,
    log: &mut dyn Write,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(net.stem(), &trained.params, trained.seed, cfg.iterations, trained.final_loss());
    ckpt.pool = pool;
    let path = paths::checkpoint(&cfg.out, net);
    formats::save_checkpoint(&path, &ckpt)?;
    formats::write_loss_trace(&paths::loss(&cfg.out, net), &trained.loss_trace(cfg.eval_every))?;
    say(log, format_args!("wrote {} (final loss {:.6e})", path.display(), ckpt.final_loss));
    Ok(())
}

pub fn train(cfg: &RunConfig, net: Net, flags: Flags, log: &mut dyn Write) -> Result<()> {
    let ckpt_path = paths::checkpoint(&cfg.out, net);
    guard(&[&ckpt_path, &paths::loss(&cfg.out, net)], flags)?;
    let d = cfg.source_spec().dim();
    match net {
        Net::Nsgf | Net::NsgfPp => {
            let pool_path = paths::pool(&cfg.out, net);
            if !pool_path.exists() {
                let cmd = if net == Net::NsgfPp { "build-pool-pp" } else { "build-pool" };
                return Err(CliError::format(&pool_path, format!("trajectory pool not found (run {cmd} first)")));
            }
            let pool = formats::load_pool(&pool_path)?;
            if pool.dim() != d {
                return Err(CliError::format(
                    &pool_path,
                    format!("pool dimension {} does not match the {d}-dimensional data", pool.dim()),
                ));
            }
            let stream = if net == Net::NsgfPp { Stream::NsgfPp } else { Stream::Nsgf };
            let tc = cfg.train_config(stream as u64);
            let trained = train_velocity_matching_with(&pool, cfg.velocity_spec(d), &tc, cfg.time_sampling)?;
            save_trained(cfg, net, &trained, Some(pool.meta.clone()), log)
        }
        Net::Nsf => {
            let tc = cfg.train_config(Stream::Nsf as u64);
            let trained = train_nsf(&cfg.source_spec(), &cfg.target_spec(), cfg.velocity_spec(d), &tc)?;
            save_trained(cfg, net, &trained, None, log)
        }
        Net::TimePredictor => {
            let tc = cfg.train_config(Stream::TimePredictor as u64);
            let trained =
                train_time_predictor(&cfg.source_spec(), &cfg.target_spec(), cfg.time_predictor_spec(d), &tc)?;
            save_trained(cfg, net, &trained, None, log)
        }
    }
}

/// Loads the checkpoints a sampler needs, reporting every missing one at once.
fn load_nets(out: &Path, nets: &[Net]) -> Result<Vec<Checkpoint>> {
    let missing: Vec<&str> =
        nets.iter().filter(|n| !paths::checkpoint(out, **n).exists()).map(|n| n.symbol()).collect();
    if !missing.is_empty() {
        return Err(CliError::MissingCheckpoint(missing.join(", ")));
    }
    nets.iter().map(|n| formats::load_checkpoint(&paths::checkpoint(out, *n))).collect()
}

fn params(ckpt: &Checkpoint, out: &Path, net: Net) -> Result<sinkflow_core::nn::MlpParams> {
    ckpt.params().map_err(|e| CliError::format(&paths::checkpoint(out, net), e.to_string()))
}

/// The schedule for `steps` NSGF steps: the pool grid itself, or an equal
/// refinement of it.
pub fn nsgf_schedule(ckpt: &Checkpoint, cfg: &RunConfig, steps: usize) -> NsgfSchedule {
    match &ckpt.pool {
        Some(meta) if meta.steps == steps => NsgfSchedule::native(meta),
        Some(meta) => NsgfSchedule::refined(meta, steps),
        None => NsgfSchedule::uniform(steps, cfg.step_size),
    }
}

pub fn infer(cfg: &RunConfig, flags: Flags, log: &mut dyn Write) -> Result<()> {
    let steps = run_steps(cfg);
    let out = &cfg.out;
    let samples_path = paths::samples(out, cfg.mode, steps);
    let svg_path = samples_path.with_extension("svg");
    let mut outputs = vec![samples_path.clone()];
    if cfg.mode == Mode::NsgfPp {
        outputs.push(paths::nfe(out, steps));
    }
    if flags.trajectory {
        if cfg.mode != Mode::Nsgf {
            return Err(CliError::Config("--trajectory is only available in nsgf mode".into()));
        }
        outputs.push(paths::trajectory(out, cfg.mode, steps));
    }
    if flags.svg {
        outputs.push(svg_path.clone());
    }
    guard(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), flags)?;

    let prior = sample_dataset(&cfg.prior_spec(), cfg.n)?;
    let samples = match cfg.mode {
        Mode::Nsgf => {
            let ckpt = load_nets(out, &[Net::Nsgf])?.remove(0);
            let net = params(&ckpt, out, Net::Nsgf)?;
            let schedule = nsgf_schedule(&ckpt, cfg, steps);
            let result = nsgf_infer_with(&net, prior.view(), &schedule, flags.trajectory, cfg.exec())?;
            if let Some(traj) = &result.trajectory {
                formats::write_trajectory(&paths::trajectory(out, cfg.mode, steps), traj)?;
            }
            say(log, format_args!("nfe per sample: {}", result.nfe));
            result.samples
        }
        Mode::Nsf => {
            let ckpt = load_nets(out, &[Net::Nsf])?.remove(0);
            let samples = nsf_infer(&params(&ckpt, out, Net::Nsf)?, prior.view(), steps, cfg.exec())?;
            say(log, format_args!("nfe per sample: {steps}"));
            samples
        }
        Mode::NsgfPp => {
            let ckpts = load_nets(out, &[Net::NsgfPp, Net::TimePredictor, Net::Nsf])?;
            let (v, t, u) = (
                params(&ckpts[0], out, Net::NsgfPp)?,
                params(&ckpts[1], out, Net::TimePredictor)?,
                params(&ckpts[2], out, Net::Nsf)?,
            );
            let pp = pp_config(cfg, &ckpts[0]);
            let result = nsgf_pp_infer(&v, &t, &u, prior.view(), &pp, cfg.exec())?;
            let header: Vec<String> = ["t_hat", "nsgf_steps", "nsf_steps", "nfe"].map(String::from).to_vec();
            let rows = result.t_hat.iter().zip(&result.nsf_nfe).map(|(th, k)| {
                vec![formats::fmt_float(*th), steps.to_string(), k.to_string(), (steps + k).to_string()]
            });
            formats::write_csv(&paths::nfe(out, steps), &header, rows)?;
            let mut histogram = BTreeMap::new();
            for n in result.total_nfe() {
                *histogram.entry(n).or_insert(0usize) += 1;
            }
            for (nfe, count) in &histogram {
                say(log, format_args!("nfe {nfe}: {count} samples"));
            }
            say(log, format_args!("mean nfe per sample: {}", result.mean_nfe()));
            result.samples
        }
    };
    formats::write_points(&samples_path, samples.view())?;
    if flags.svg {
        let target = sample_dataset(&cfg.target_spec(), cfg.n)?;
        let title = format!("{} {} steps={steps}", task_label(cfg), cfg.mode.name());
        let layers =
            [svg::Layer { points: target.view(), color: "#bbbbbb" }, svg::Layer { points: samples.view(), color: "#1f77b4" }];
        formats::write_text(&svg_path, &svg::scatter(&title, &layers))?;
    }
    say(log, format_args!("wrote {} samples to {}", samples.nrows(), samples_path.display()));
    Ok(())
}

/// The NSGF phase runs on the grid of the pool its net was fitted to.
pub fn pp_config(cfg: &RunConfig, nsgf: &Checkpoint) -> NsgfPpConfig {
    let (trained_steps, step_size) = match &nsgf.pool {
        Some(meta) => (meta.steps, meta.step_size),
        None => (cfg.pp_steps, cfg.pp_step_size),
    };
    NsgfPpConfig {
        nsgf_steps: cfg.pp_steps,
        nsgf_step_size: step_size,
        trained_steps,
        nsf_step_size: cfg.omega,
        seed: cfg.seed,
        handoff: cfg.handoff,
    }
}

/// Mean per-sample NFE recorded by a two-phase inference run.
pub fn read_mean_nfe(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut total = 0usize;
    let mut count = 0usize;
    for (i, line) in text.lines().enumerate().skip(1) {
        let field = line.rsplit(',').next().unwrap_or("");
        total += field.parse::<usize>().map_err(|e| CliError::Parse {
            path: path.into(),
            line: i as u64 + 1,
            msg: format!("cannot parse nfe {field:?}: {e}"),
        })?;
        count += 1;
    }
    if count == 0 {
        return Err(CliError::format(path, "no samples"));
    }
    Ok(total as f64 / count as f64)
}

/// Evaluates a samples file and upserts the result. Returns the row.
pub fn eval(cfg: &RunConfig, log: &mut dyn Write) -> Result<ResultRow> {
    let steps = run_steps(cfg);
    let input = cfg.eval_input.clone().unwrap_or_else(|| paths::samples(&cfg.out, cfg.mode, steps));
    let d = cfg.target_spec().dim();
    let generated: Array2<f64> = formats::read_points(&input, d)?;
    let report = evaluate(generated.view(), &cfg.target_spec(), cfg.n_eval, steps)?;
    let nfe_path = paths::nfe(&cfg.out, steps);
    let nfe = if cfg.mode == Mode::NsgfPp && nfe_path.exists() { read_mean_nfe(&nfe_path)? } else { steps as f64 };
    let row = ResultRow {
        dataset: task_label(cfg),
        method: cfg.mode.name().to_string(),
        steps,
        nfe,
        w2: report.w2,
        n_eval: report.n_eval,
        seed: report.seed,
    };
    formats::upsert_result(&paths::results(&cfg.out), &row)?;
    let line = json!({
        "dataset": row.dataset,
        "method": row.method,
        "steps": row.steps,
        "nfe": row.nfe,
        "w2": row.w2,
        "n_eval": row.n_eval,
        "seed": row.seed,
    });
    say(log, format_args!("{line}"));
    Ok(row)
}

pub(crate) fn say(log: &mut dyn Write, args: std::fmt::Arguments<'_>) {
    let _ = writeln!(log, "{args}");
}
