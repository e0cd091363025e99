//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::checks;
use crate::commands::{self, Flags, Net};
use crate::config::{RunConfig, KEYS};
use crate::error::{CliError, Result};
use crate::pipeline;

pub const COMMANDS: [(&str, &str); 11] = [
    ("gen-data", "sample the target distribution to data.csv"),
    ("build-pool", "simulate minibatch Sinkhorn flows into pool.csv"),
    ("train-nsgf", "fit the velocity net v_θ to the pool"),
    ("build-pool-pp", "simulate the short (T <= 5) pool of the two-phase sampler"),
    ("train-nsgf-pp", "fit the two-phase sampler's velocity net to its pool"),
    ("train-nsf", "fit the straight-flow net u_δ"),
    ("train-tp", "fit the handoff-time predictor t_φ"),
    ("infer", "generate samples with the selected mode"),
    ("eval", "exact W2 of generated samples against a held-out test set"),
    ("pipeline", "every stage for every task, plus the summary table"),
    ("selftest", "fast numerical checks against independent oracles"),
];

fn common_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("JSON config with dotted keys"))
        .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("overwrite existing outputs"))
        .arg(Arg::new("fresh").long("fresh").action(ArgAction::SetTrue).help("ignore cached pipeline stages"))
        .arg(Arg::new("svg").long("svg").action(ArgAction::SetTrue).help("also write an SVG scatter plot"))
        .arg(Arg::new("trajectory").long("trajectory").action(ArgAction::SetTrue).help("also write every Euler state"))
        .arg(Arg::new("dry-run").long("dry-run").action(ArgAction::SetTrue).help("print the stage plan only"));
    KEYS.iter().fold(cmd, |cmd, (key, help)| cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help)))
}

pub fn command() -> Command {
    let root = Command::new("sinkflow")
        .about("Neural Sinkhorn gradient flows on 2D benchmark data")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    COMMANDS.iter().fold(root, |root, (name, about)| root.subcommand(common_args(Command::new(*name).about(*about))))
}

/// Defaults, then the config file, then flags.
fn resolve(m: &ArgMatches) -> Result<(RunConfig, Flags)> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(&PathBuf::from(path))?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    let flags = Flags {
        force: m.get_flag("force"),
        fresh: m.get_flag("fresh"),
        svg: m.get_flag("svg"),
        trajectory: m.get_flag("trajectory"),
        dry_run: m.get_flag("dry-run"),
    };
    Ok((cfg, flags))
}

fn dispatch(name: &str, m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let (cfg, flags) = resolve(m)?;
    match name {
        "gen-data" => commands::gen_data(&cfg, flags, out),
        "build-pool" => commands::build_pool_cmd(&cfg, Net::Nsgf, flags, out),
        "build-pool-pp" => commands::build_pool_cmd(&cfg, Net::NsgfPp, flags, out),
        "train-nsgf" => commands::train(&cfg, Net::Nsgf, flags, out),
        "train-nsgf-pp" => commands::train(&cfg, Net::NsgfPp, flags, out),
        "train-nsf" => commands::train(&cfg, Net::Nsf, flags, out),
        "train-tp" => commands::train(&cfg, Net::TimePredictor, flags, out),
        "infer" => commands::infer(&cfg, flags, out),
        "eval" => commands::eval(&cfg, out).map(|_| ()),
        "pipeline" => pipeline::run(&cfg, flags, out),
        "selftest" => {
            let results = checks::fast_suite();
            for c in &results {
                let _ = writeln!(out, "{c}");
            }
            match results.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                n => Err(CliError::Selftest(n)),
            }
        }
        other => Err(CliError::Config(format!("unknown command {other:?}"))),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    match dispatch(name, sub, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
