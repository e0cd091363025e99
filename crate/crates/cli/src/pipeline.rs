//! End-to-end runs over the benchmark tasks with per-stage caching.
//!
//! Every stage has a key: a SHA-256 over the configuration values it reads and
//! the keys of the stages it consumes. A stage is skipped when its stored key
//! matches and its outputs exist, unless `--fresh` is given.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::commands::{self, paths, say, Flags, Net};
use crate::config::{Mode, RunConfig, Task};
use crate::error::{CliError, Result};
use crate::formats::{self, ResultRow};

const CACHE_DIR: &str = ".cache";
/// Steps of the NSF run matched to the two-phase sampler's NFE, resolved at run time.
const MATCHED: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    GenData,
    BuildPool(Net),
    Train(Net),
    Infer(Mode, usize),
    Eval(Mode, usize),
}

#[derive(Debug, Clone)]
struct Stage {
    name: String,
    kind: Kind,
    key: String,
    outputs: Vec<PathBuf>,
}

fn hash(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `key=value` for every configuration key starting with one of `prefixes`.
fn config_parts(cfg: &RunConfig, prefixes: &[&str]) -> Vec<String> {
    cfg.entries()
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k == p || k.starts_with(&format!("{p}."))))
        .map(|(k, v)| format!("{k}={v}"))
        .collect()
}

fn key(name: &str, cfg: &RunConfig, prefixes: &[&str], upstream: &[&str]) -> String {
    let mut parts = vec![env!("CARGO_PKG_VERSION").to_string(), name.to_string()];
    parts.extend(config_parts(cfg, prefixes));
    parts.extend(upstream.iter().map(|s| s.to_string()));
    hash(&parts)
}

const DATA_KEYS: &[&str] = &["seed", "data.source", "data.target", "data.noise"];
const FLOW_KEYS: &[&str] = &[
    "sinkhorn",
    "flow.steps",
    "flow.step_size",
    "flow.batch_size",
    "flow.num_batches",
    "flow.ramp",
    "flow.warm_start",
];
/// The two-phase sampler's pool shares everything but its length and step size.
const PP_FLOW_KEYS: &[&str] = &[
    "sinkhorn",
    "flow.batch_size",
    "flow.num_batches",
    "flow.ramp",
    "flow.warm_start",
    "nsgfpp.steps",
    "nsgfpp.step_size",
];

/// Stage plan of one task, in execution order.
fn plan(cfg: &RunConfig) -> Vec<Stage> {
    let out = &cfg.out;
    let mut stages = Vec::new();
    let mut push = |name: String, kind: Kind, key: String, outputs: Vec<PathBuf>| {
        stages.push(Stage { name, kind, key: key.clone(), outputs });
        key
    };
    let with = |extra: &[&'static str]| [DATA_KEYS, extra].concat();

    push("gen-data".into(), Kind::GenData, key("gen-data", cfg, &with(&["data.n"]), &[]), vec![paths::data(out)]);
    let mut pool_stage = |name: &str, net: Net, flow_keys: &[&str]| {
        let path = paths::pool(out, net);
        let k = key(name, cfg, &[DATA_KEYS, flow_keys].concat(), &[]);
        push(name.into(), Kind::BuildPool(net), k, vec![formats::meta_path(&path), path])
    };
    let pool = pool_stage("build-pool", Net::Nsgf, FLOW_KEYS);
    let pp_pool = pool_stage("build-pool-pp", Net::NsgfPp, PP_FLOW_KEYS);
    let net_keys = ["mlp", "train"];
    let mut nets = Vec::new();
    for net in [Net::Nsgf, Net::Nsf, Net::TimePredictor, Net::NsgfPp] {
        let name = if net == Net::NsgfPp { "train-nsgf-pp".to_string() } else { format!("train-{}", net.stem()) };
        let upstream: Vec<&str> = match net {
            Net::Nsgf => vec![&pool],
            Net::NsgfPp => vec![&pp_pool],
            _ => vec![],
        };
        let k = key(&name, cfg, &with(&net_keys), &upstream);
        nets.push(push(name, Kind::Train(net), k, vec![paths::checkpoint(out, net), paths::loss(out, net)]));
    }
    let (nsgf, nsf, tp, nsgf_pp) = (nets[0].clone(), nets[1].clone(), nets[2].clone(), nets[3].clone());

    let infer_keys = with(&["data.n"]);
    let mut samplers: Vec<(Mode, usize, Vec<String>)> = Vec::new();
    for &s in &cfg.pipeline_steps {
        samplers.push((Mode::Nsgf, s, vec![nsgf.clone()]));
        samplers.push((Mode::Nsf, s, vec![nsf.clone()]));
    }
    samplers.push((Mode::NsgfPp, cfg.pp_steps, vec![nsgf_pp, tp.clone(), nsf.clone()]));
    let mut pp_key = String::new();
    for (mode, steps, upstream) in samplers {
        let name = format!("infer-{}-{steps}", mode.name());
        let extra = if mode == Mode::NsgfPp { vec!["nsgfpp".to_string()] } else { vec![] };
        let mut up: Vec<&str> = upstream.iter().map(String::as_str).collect();
        let steps_part = format!("steps={steps}");
        up.push(&steps_part);
        let prefixes: Vec<&str> = infer_keys.iter().copied().chain(extra.iter().map(String::as_str)).collect();
        let mut outputs = vec![paths::samples(out, mode, steps)];
        if mode == Mode::NsgfPp {
            outputs.push(paths::nfe(out, steps));
        }
        let k = push(name, Kind::Infer(mode, steps), key(&format!("infer-{}", mode.name()), cfg, &prefixes, &up), outputs);
        if mode == Mode::NsgfPp {
            pp_key = k.clone();
        }
        push(
            format!("eval-{}-{steps}", mode.name()),
            Kind::Eval(mode, steps),
            key("eval", cfg, &["eval.n"], &[&k]),
            vec![paths::results(out)],
        );
    }
    let k = push(
        "infer-nsf-matched".into(),
        Kind::Infer(Mode::Nsf, MATCHED),
        key("infer-nsf-matched", cfg, &infer_keys, &[&nsf, &pp_key]),
        vec![],
    );
    push(
        "eval-nsf-matched".into(),
        Kind::Eval(Mode::Nsf, MATCHED),
        key("eval", cfg, &["eval.n"], &[&k]),
        vec![paths::results(out)],
    );
    stages
}

fn key_path(out: &Path, stage: &Stage) -> PathBuf {
    out.join(CACHE_DIR).join(format!("{}.key", stage.name))
}

fn is_cached(out: &Path, stage: &Stage) -> bool {
    let stored = std::fs::read_to_string(key_path(out, stage)).unwrap_or_default();
    stored.trim() == stage.key && stage.outputs.iter().all(|p| p.exists())
}

/// NSF step count matching the two-phase sampler's mean NFE.
fn matched_steps(cfg: &RunConfig) -> Result<usize> {
    let mean = commands::read_mean_nfe(&paths::nfe(&cfg.out, cfg.pp_steps))?;
    Ok((mean - 1e-9).ceil().max(1.0) as usize)
}

fn run_stage(cfg: &RunConfig, stage: &Stage, log: &mut dyn Write) -> Result<()> {
    let flags = Flags { force: true, ..Flags::default() };
    let sampler_cfg = |mode: Mode, steps: usize| -> Result<RunConfig> {
        let mut c = cfg.clone();
        c.mode = mode;
        c.eval_input = None;
        c.infer_steps = if steps == MATCHED { matched_steps(cfg)? } else { steps };
        Ok(c)
    };
    match stage.kind {
        Kind::GenData => commands::gen_data(cfg, flags, log),
        Kind::BuildPool(net) => commands::build_pool_cmd(cfg, net, flags, log),
        Kind::Train(net) => commands::train(cfg, net, flags, log),
        Kind::Infer(mode, steps) => commands::infer(&sampler_cfg(mode, steps)?, flags, log),
        Kind::Eval(mode, steps) => commands::eval(&sampler_cfg(mode, steps)?, log).map(|_| ()),
    }
}

/// Runs (or with `dry_run`, lists) every stage of every configured task, then
/// writes the summary tables.
pub fn run(cfg: &RunConfig, flags: Flags, log: &mut dyn Write) -> Result<()> {
    let tasks: Vec<(Task, RunConfig)> = cfg.tasks.iter().map(|t| (*t, cfg.for_task(t))).collect();
    if flags.dry_run {
        for (task, tcfg) in &tasks {
            for stage in plan(tcfg) {
                let status = if !flags.fresh && is_cached(&tcfg.out, &stage) { "cached" } else { "run" };
                say(log, format_args!("{}/{} {} {status}", task.name, stage.name, &stage.key[..16]));
            }
        }
        say(log, format_args!("summary {}", cfg.out.join("summary.md").display()));
        return Ok(());
    }
    formats::write_json(&cfg.out.join("config.json"), &cfg.to_json())?;
    for (task, tcfg) in &tasks {
        for stage in plan(tcfg) {
            let label = format!("{}/{}", task.name, stage.name);
            if !flags.fresh && is_cached(&tcfg.out, &stage) {
                say(log, format_args!("{label} cached"));
                continue;
            }
            say(log, format_args!("{label} running"));
            let _ = std::fs::remove_file(key_path(&tcfg.out, &stage));
            run_stage(tcfg, &stage, log).map_err(|e| CliError::Stage { stage: label.clone(), source: Box::new(e) })?;
            formats::write_text(&key_path(&tcfg.out, &stage), &format!("{}\n", stage.key))?;
        }
    }
    let summary = Summary::collect(cfg)?;
    formats::write_text(&cfg.out.join("summary.md"), &summary.markdown(cfg))?;
    summary.write_csv(&cfg.out.join("summary.csv"))?;
    say(log, format_args!("wrote {}", cfg.out.join("summary.md").display()));
    Ok(())
}

/// Results of all tasks, keyed by task.
pub struct Summary {
    pub rows: Vec<(String, Vec<ResultRow>)>,
}

impl Summary {
    pub fn collect(cfg: &RunConfig) -> Result<Self> {
        let rows = cfg
            .tasks
            .iter()
            .map(|t| {
                let tcfg = cfg.for_task(t);
                let rows = formats::read_results(&paths::results(&tcfg.out))?
                    .into_iter()
                    .filter(|r| r.n_eval == cfg.n_eval)
                    .collect();
                Ok((t.name.to_string(), rows))
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn lookup(&self, task: &str, method: &str, steps: usize) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|(t, _)| t == task)
            .and_then(|(_, rows)| rows.iter().find(|r| r.method == method && r.steps == steps))
    }

    fn task_names(&self) -> Vec<&str> {
        self.rows.iter().map(|(t, _)| t.as_str()).collect()
    }

    /// The NSF run whose step count matched the two-phase sampler's mean NFE.
    pub fn matched(&self, task: &str, cfg: &RunConfig) -> Option<(&ResultRow, &ResultRow)> {
        let pp = self.lookup(task, Mode::NsgfPp.name(), cfg.pp_steps)?;
        let steps = (pp.nfe - 1e-9).ceil().max(1.0) as usize;
        Some((pp, self.lookup(task, Mode::Nsf.name(), steps)?))
    }

    pub fn markdown(&self, cfg: &RunConfig) -> String {
        let tasks = self.task_names();
        let cell = |r: Option<&ResultRow>| r.map_or("-".to_string(), |r| format!("{:.3}", r.w2));
        let mut s = String::from("# 2-Wasserstein distance\n\n");
        let mut head = String::from("| Algorithm |");
        let mut sub = String::from("| |");
        let mut rule = String::from("|---|");
        for &steps in &cfg.pipeline_steps {
            for t in &tasks {
                head.push_str(&format!(" {steps} steps |"));
                sub.push_str(&format!(" {t} |"));
                rule.push_str("---|");
            }
        }
        for line in [head, rule, sub] {
            s.push_str(&line);
            s.push('\n');
        }
        for (label, method) in [("NSGF", Mode::Nsgf), ("NSF", Mode::Nsf)] {
            s.push_str(&format!("| {label} |"));
            for &steps in &cfg.pipeline_steps {
                for t in &tasks {
                    s.push_str(&format!(" {} |", cell(self.lookup(t, method.name(), steps))));
                }
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "\n# NSGF++ ({} NSGF steps, omega = {})\n\n| Task | mean NFE | NSGF++ | NSF at ceil(NFE) | ratio |\n|---|---|---|---|---|\n",
            cfg.pp_steps, cfg.omega
        ));
        for t in &tasks {
            match self.matched(t, cfg) {
                Some((pp, nsf)) => s.push_str(&format!(
                    "| {t} | {:.3} | {:.3} | {:.3} ({} steps) | {:.3} |\n",
                    pp.nfe,
                    pp.w2,
                    nsf.w2,
                    nsf.steps,
                    pp.w2 / nsf.w2
                )),
                None => s.push_str(&format!("| {t} | - | - | - | - |\n")),
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> =
            ["task", "method", "steps", "nfe", "w2", "n_eval", "seed"].map(String::from).to_vec();
        let rows = self.rows.iter().flat_map(|(t, rows)| {
            rows.iter().map(move |r| {
                vec![
                    t.clone(),
                    r.method.clone(),
                    r.steps.to_string(),
                    formats::fmt_float(r.nfe),
                    formats::fmt_float(r.w2),
                    r.n_eval.to_string(),
                    r.seed.to_string(),
                ]
            })
        });
        formats::write_csv(path, &header, rows)
    }
}
