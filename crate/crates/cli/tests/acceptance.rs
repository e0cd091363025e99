//! Acceptance criteria. Prints one PASS/FAIL line per criterion, followed by the
//! individual measurements. With `ACCEPTANCE_STRICT` set it exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use sinkflow_cli::checks::{self, Check};
use sinkflow_cli::config::TASKS;

const BIN: &str = env!("CARGO_BIN_EXE_sinkflow");

struct Outcome {
    id: u8,
    title: &'static str,
    limit: Option<Duration>,
    elapsed: Duration,
    checks: Vec<Check>,
}

impl Outcome {
    fn passed(&self) -> bool {
        !self.checks.is_empty()
            && self.checks.iter().all(|c| c.passed)
            && self.limit.is_none_or(|l| self.elapsed <= l)
    }

    fn print(&self) {
        let limit = self.limit.map_or(String::new(), |l| format!(", limit {} s", l.as_secs()));
        println!(
            "{} {} {} [{:.1} s{limit}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.elapsed.as_secs_f64()
        );
        for c in &self.checks {
            println!("    {} {}: {}", if c.passed { "ok  " } else { "over" }, c.name, c.detail);
        }
    }
}

fn timed(id: u8, title: &'static str, limit: Option<u64>, f: impl FnOnce() -> Vec<Check>) -> Outcome {
    let start = Instant::now();
    let checks = f();
    let outcome = Outcome { id, title, limit: limit.map(Duration::from_secs), elapsed: start.elapsed(), checks };
    outcome.print();
    outcome
}

fn sinkflow(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn sinkflow")
}

fn ran(name: &str, out: &Output) -> Check {
    Check {
        name: name.into(),
        passed: out.status.success(),
        detail: if out.status.success() {
            "exit 0".into()
        } else {
            format!("{}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())
        },
    }
}

fn flag(name: &str, passed: bool, detail: String) -> Check {
    Check { name: name.into(), passed, detail }
}

fn table_args(out: &Path) -> Vec<String> {
    [
        "--out",
        &out.display().to_string(),
        "--flow.num_batches",
        "200",
        "--flow.batch_size",
        "256",
        "--flow.steps",
        "10",
        "--train.iterations",
        "6000",
        "--train.minibatch",
        "128",
        "--train.lr",
        "1e-3",
        "--train.lr_decay",
        "cosine",
    ]
    .map(String::from)
    .to_vec()
}

fn pipeline(args: &[String], extra: &[&str]) -> Output {
    let mut all: Vec<&str> = vec!["pipeline"];
    all.extend(args.iter().map(String::as_str));
    all.extend(extra);
    sinkflow(&all)
}

/// `summary.csv` rows as (task, method, steps) -> (nfe, w2).
fn read_summary(path: &Path) -> BTreeMap<(String, String, usize), (f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let key = (f.first()?.to_string(), f.get(1)?.to_string(), f.get(2)?.parse().ok()?);
            Some((key, (f.get(3)?.parse().ok()?, f.get(4)?.parse().ok()?)))
        })
        .collect()
}

fn cells(line: &str) -> Vec<String> {
    line.trim().trim_matches('|').split('|').map(|c| c.trim().to_string()).collect()
}

/// Two step groups of five task columns, task sub-header, NSGF and NSF rows.
fn layout(markdown: &str) -> Check {
    let name = "summary table layout";
    let lines: Vec<&str> = markdown.lines().collect();
    let Some(at) = lines.iter().position(|l| l.starts_with("| Algorithm |")) else {
        return flag(name, false, "no header row".into());
    };
    let tasks: Vec<&str> = TASKS.iter().map(|t| t.name).collect();
    let mut problems = Vec::new();
    let head = cells(lines[at]);
    let want_head: Vec<String> = std::iter::once("Algorithm".to_string())
        .chain([10, 100].iter().flat_map(|s| std::iter::repeat_n(format!("{s} steps"), 5)))
        .collect();
    if head != want_head {
        problems.push(format!("header {head:?}"));
    }
    let sub = lines.get(at + 2).map(|l| cells(l)).unwrap_or_default();
    let want_sub: Vec<String> =
        std::iter::once(String::new()).chain((0..2).flat_map(|_| tasks.iter().map(|t| t.to_string()))).collect();
    if sub != want_sub {
        problems.push(format!("task row {sub:?}"));
    }
    for (offset, label) in [(3, "NSGF"), (4, "NSF")] {
        let row = lines.get(at + offset).map(|l| cells(l)).unwrap_or_default();
        let numeric = row.iter().skip(1).filter(|c| c.parse::<f64>().is_ok()).count();
        if row.first().map(String::as_str) != Some(label) || row.len() != 11 || numeric != 10 {
            problems.push(format!("{label} row {row:?}"));
        }
    }
    let detail = if problems.is_empty() { "2 step groups x 5 tasks, NSGF and NSF rows".into() } else { problems.join("; ") };
    flag(name, problems.is_empty(), detail)
}

fn table_checks(summary: &BTreeMap<(String, String, usize), (f64, f64)>) -> Vec<Check> {
    let w2 = |task: &str, method: &str, steps: usize| summary.get(&(task.into(), method.into(), steps)).map(|r| r.1);
    let mut wins = 0;
    let mut detail = Vec::new();
    for t in TASKS {
        match (w2(t.name, "nsgf", 10), w2(t.name, "nsf", 10)) {
            (Some(a), Some(b)) => {
                wins += usize::from(a < b);
                detail.push(format!("{} {a:.3} vs {b:.3}", t.name));
            }
            _ => detail.push(format!("{} missing", t.name)),
        }
    }
    let missing = f64::INFINITY;
    vec![
        flag(
            "NSGF beats NSF at 10 steps on at least 3 of 5 tasks",
            wins >= 3,
            format!("{wins} of 5 ({})", detail.join(", ")),
        ),
        Check::bound("moons NSGF w2 at 10 steps", w2("moons", "nsgf", 10).unwrap_or(missing), 0.25),
        Check::bound("moons NSGF w2 at 100 steps", w2("moons", "nsgf", 100).unwrap_or(missing), 0.20),
    ]
}

/// Every row of the NFE file against `T + ceil((1 - t_hat) / omega)`.
fn nfe_check(path: &Path, steps: usize, omega: f64, reported_mean: Option<f64>) -> Check {
    let name = "per-sample NFE equals T + ceil((1 - t_hat) / omega)";
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return Check::failed(name, format!("{}: {e}", path.display())),
    };
    let (mut rows, mut bad, mut total) = (0usize, 0usize, 0.0);
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').filter_map(|c| c.parse().ok()).collect();
        let [t_hat, nsgf, nsf, nfe] = f[..] else {
            bad += 1;
            continue;
        };
        let x = (1.0 - t_hat) / omega;
        // A ratio that lands on an integer up to rounding may go either way.
        let ok_nsf = nsf == x.ceil() || ((x - x.round()).abs() < 1e-9 && nsf == x.round());
        bad += usize::from(!(ok_nsf && nsgf == steps as f64 && nfe == nsgf + nsf));
        rows += 1;
        total += nfe;
    }
    let mean = total / rows.max(1) as f64;
    let mean_ok = reported_mean.is_some_and(|m| (m - mean).abs() <= 1e-12);
    flag(
        name,
        rows > 0 && bad == 0 && mean_ok,
        format!("{bad} of {rows} samples disagree; mean {mean:.4} (reported {reported_mean:?})"),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).expect("inside").to_path_buf(), std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    files
}

fn same_output(name: &str, a: &Output, b: &Output) -> Check {
    let same = a.status.code() == b.status.code() && a.stdout == b.stdout && a.stderr == b.stderr;
    flag(name, same, format!("{} bytes of stdout, exit {:?}", a.stdout.len(), a.status.code()))
}

fn determinism(root: &Path, table: &[String]) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(same_output("selftest twice", &sinkflow(&["selftest"]), &sinkflow(&["selftest"])));
    out.push(same_output("pipeline --dry-run twice", &pipeline(table, &["--dry-run"]), &pipeline(table, &["--dry-run"])));

    let dir = root.join("rerun");
    let small: Vec<String> = [
        "--out",
        &dir.display().to_string(),
        "--pipeline.tasks",
        "moons",
        "--pipeline.steps",
        "10",
        "--flow.num_batches",
        "4",
        "--flow.batch_size",
        "64",
        "--train.iterations",
        "200",
        "--data.n",
        "256",
        "--eval.n",
        "256",
    ]
    .map(String::from)
    .to_vec();
    let first = pipeline(&small, &[]);
    out.push(ran("small pipeline", &first));
    let before = snapshot(&dir);
    let second = pipeline(&small, &["--fresh"]);
    let after = snapshot(&dir);
    out.push(same_output("pipeline rerun log", &first, &second));
    let differing: Vec<String> = before
        .keys()
        .chain(after.keys())
        .filter(|k| before.get(*k) != after.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    out.push(flag(
        "pipeline rerun files",
        differing.is_empty() && !before.is_empty(),
        format!("{} files, differing: {differing:?}", before.len()),
    ));

    let pools: Vec<Vec<u8>> = ["true", "false"]
        .iter()
        .map(|parallel| {
            let d = root.join(format!("pool-{parallel}"));
            let d = d.display().to_string();
            sinkflow(&["build-pool", "--out", &d, "--flow.num_batches", "6", "--flow.batch_size", "64", "--flow.parallel", parallel]);
            std::fs::read(Path::new(&d).join("pool.csv")).unwrap_or_default()
        })
        .collect();
    out.push(flag(
        "pool identical with and without parallel batches",
        !pools[0].is_empty() && pools[0] == pools[1],
        format!("{} bytes", pools[0].len()),
    ));
    out
}

fn main() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("scratch directory");
    let mut outcomes = Vec::new();

    outcomes.push(timed(1, "Sinkhorn correctness suite", Some(5), || checks::sinkhorn_suite(200, 11)));
    outcomes.push(timed(2, "epsilon -> 0 consistency", Some(5), || vec![checks::small_epsilon(100, 12, true)]));
    outcomes.push(timed(3, "gradient checks", Some(10), || checks::gradients(13)));
    outcomes.push(timed(4, "descent property", Some(60), checks::descent));
    outcomes.push(timed(5, "mean-field trend", Some(300), || vec![checks::mean_field_check(&[32, 128, 512], 10)]));
    outcomes.push(timed(6, "closed-form flows", Some(1), checks::closed_form));

    let table_dir = root.join("table");
    let table = table_args(&table_dir);
    let mut task_times = BTreeMap::new();
    let table_outcome = timed(7, "end-to-end 2D table", Some(1800), || {
        let mut runs = Vec::new();
        for t in TASKS {
            let start = Instant::now();
            let out = pipeline(&table, &["--pipeline.tasks", t.name, "--fresh"]);
            task_times.insert(t.name, start.elapsed());
            runs.push(ran(&format!("{} pipeline ({:.0} s)", t.name, start.elapsed().as_secs_f64()), &out));
        }
        runs.push(ran("summary over all tasks", &pipeline(&table, &[])));
        let summary = read_summary(&table_dir.join("summary.csv"));
        runs.extend(table_checks(&summary));
        runs.push(layout(&std::fs::read_to_string(table_dir.join("summary.md")).unwrap_or_default()));
        runs
    });
    outcomes.push(table_outcome);

    // The two-phase sampler shares the 8gaussians-moons run above; its time is that
    // task's full pipeline, pool and training included.
    let summary = read_summary(&table_dir.join("summary.csv"));
    let task = "8gaussians-moons";
    let pp = summary.get(&(task.into(), "nsgf++".into(), 5)).copied();
    let mut checks8 = Vec::new();
    match pp {
        Some((nfe, w2)) => {
            let steps = (nfe - 1e-9).ceil() as usize;
            match summary.get(&(task.into(), "nsf".into(), steps)) {
                Some(&(_, nsf)) => checks8.push(Check::bound(
                    &format!("NSGF++ w2 / NSF w2 at {steps} steps (NSGF++ {w2:.3}, NSF {nsf:.3})"),
                    w2 / nsf,
                    1.1,
                )),
                None => checks8.push(Check::failed("NSF at matched NFE", format!("no NSF row at {steps} steps"))),
            }
        }
        None => checks8.push(Check::failed("NSGF++ result", "missing")),
    }
    checks8.push(nfe_check(&table_dir.join(task).join("nfe-nsgfpp-5.csv"), 5, 0.1, pp.map(|p| p.0)));
    let c8 = Outcome {
        id: 8,
        title: "NSGF++ two-phase sampling",
        limit: Some(Duration::from_secs(600)),
        elapsed: task_times.get(task).copied().unwrap_or(Duration::MAX),
        checks: checks8,
    };
    c8.print();
    outcomes.push(c8);

    outcomes.push(timed(9, "determinism", None, || determinism(&root, &table)));

    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.id).collect();
    println!("\n{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        // cargo stops at the first failing test binary, so by default the other suites still run.
        if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
