//! On-disk formats: CSV for numeric bulk data, JSON for metadata and checkpoints.
//!
//! Floats are written with 17 significant digits, which round-trips every f64.
//! JSON sidecars and checkpoints carry `format_version`; anything else is refused.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sinkflow_core::flow::{PoolMeta, TrajectoryPool};
use sinkflow_core::nn::{MlpParams, MlpSpec};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Fails with `Exists` unless `force` is set or `path` is absent.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported format_version {version} (this build reads {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    create_parent(path)?;
    let io = |e: csv::Error| CliError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Data rows of a CSV file, checked against `header`, with their line numbers.
fn read_csv(path: &Path, header: &[String]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    })?;
    let found = r.headers().map_err(|e| CliError::Parse { path: path.into(), line: 1, msg: e.to_string() })?;
    if found.iter().collect::<Vec<_>>() != header.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(CliError::Parse {
            path: path.into(),
            line: 1,
            msg: format!("expected header {}, found {}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Parse { path: path.into(), line, msg: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        rows.push((line, rec));
    }
    Ok(rows)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, field: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    field.trim().parse().map_err(|e| CliError::Parse {
        path: path.into(),
        line,
        msg: format!("cannot parse {field:?}: {e}"),
    })
}

fn coord_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{prefix}{k}")).collect()
}

/// `x0,x1,...` CSV, one row per point.
pub fn write_points(path: &Path, points: ArrayView2<'_, f64>) -> Result<()> {
    let rows = points.rows().into_iter().map(|r| r.iter().map(|&x| fmt_float(x)).collect());
    write_csv(path, &coord_header("x", points.ncols()), rows)
}

/// Reads a points CSV of dimension `d`.
pub fn read_points(path: &Path, d: usize) -> Result<Array2<f64>> {
    let rows = read_csv(path, &coord_header("x", d))?;
    let mut out = Array2::zeros((rows.len(), d));
    for (i, (line, rec)) in rows.iter().enumerate() {
        for k in 0..d {
            out[[i, k]] = parse_field(path, *line, &rec[k])?;
        }
    }
    Ok(out)
}

/// `step,x0,x1,...` CSV holding every state of a sampled trajectory.
pub fn write_trajectory(path: &Path, states: &[Array2<f64>]) -> Result<()> {
    let d = states.first().map_or(0, |s| s.ncols());
    let mut header = vec!["step".to_string()];
    header.extend(coord_header("x", d));
    let rows = states.iter().enumerate().flat_map(|(t, s)| {
        s.rows()
            .into_iter()
            .map(move |r| std::iter::once(t.to_string()).chain(r.iter().map(|&x| fmt_float(x))).collect())
            .collect::<Vec<_>>()
    });
    write_csv(path, &header, rows)
}

/// `pool.csv` -> `pool.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolSidecar {
    format_version: u32,
    record_count: usize,
    #[serde(flatten)]
    meta: PoolMeta,
}

fn pool_header(d: usize) -> Vec<String> {
    let mut h = vec!["batch".to_string(), "step".to_string()];
    h.extend(coord_header("x", d));
    h.extend(coord_header("v", d));
    h
}

pub fn write_pool(path: &Path, pool: &TrajectoryPool) -> Result<()> {
    let rows = pool.records().map(|r| {
        let mut row = vec![r.batch.to_string(), r.step.to_string()];
        row.extend(r.position.iter().map(|&x| fmt_float(x)));
        row.extend(r.velocity.iter().map(|&x| fmt_float(x)));
        row
    });
    write_csv(path, &pool_header(pool.dim()), rows)?;
    let sidecar = PoolSidecar { format_version: FORMAT_VERSION, record_count: pool.len(), meta: pool.meta.clone() };
    write_json(&meta_path(path), &sidecar)
}

pub fn load_pool(path: &Path) -> Result<TrajectoryPool> {
    let meta_file = meta_path(path);
    if !meta_file.exists() {
        return Err(CliError::format(path, format!("metadata sidecar {} is missing", meta_file.display())));
    }
    let sidecar: PoolSidecar = read_json(&meta_file)?;
    check_version(&meta_file, sidecar.format_version)?;
    let d = sidecar.meta.dim;
    let rows = read_csv(path, &pool_header(d))?;
    if rows.len() != sidecar.record_count {
        return Err(CliError::format(
            path,
            format!("{} records on disk, metadata says {}", rows.len(), sidecar.record_count),
        ));
    }
    let n = rows.len();
    let (mut batches, mut steps) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut pos, mut vel) = (Array2::zeros((n, d)), Array2::zeros((n, d)));
    for (i, (line, rec)) in rows.iter().enumerate() {
        batches.push(parse_field(path, *line, &rec[0])?);
        steps.push(parse_field(path, *line, &rec[1])?);
        for k in 0..d {
            pos[[i, k]] = parse_field(path, *line, &rec[2 + k])?;
            vel[[i, k]] = parse_field(path, *line, &rec[2 + d + k])?;
        }
    }
    TrajectoryPool::from_parts(sidecar.meta, batches, steps, pos, vel)
        .map_err(|e| CliError::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Row-major `fan_in x fan_out`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `nsgf`, `nsf` or `tp`.
    pub kind: String,
    pub spec: MlpSpec,
    pub layers: Vec<LayerRecord>,
    pub train_seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    /// Flow grid of the pool a velocity net was matched on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolMeta>,
}

impl Checkpoint {
    pub fn new(kind: &str, params: &MlpParams, train_seed: u64, iterations: usize, final_loss: f64) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| LayerRecord { weights: l.weights.iter().copied().collect(), bias: l.bias.to_vec() })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            spec: params.spec,
            layers,
            train_seed,
            iterations,
            final_loss,
            pool: None,
        }
    }

    pub fn params(&self) -> sinkflow_core::Result<MlpParams> {
        let mut params = MlpParams::zeros(self.spec)?;
        let flat: Vec<f64> = self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect();
        params.set_flat(&flat)?;
        Ok(params)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    check_version(path, ckpt.format_version)?;
    ckpt.params().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(ckpt)
}

pub fn write_loss_trace(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let header = ["iteration".to_string(), "loss".to_string()];
    write_csv(path, &header, trace.iter().map(|(i, l)| vec![i.to_string(), fmt_float(*l)]))
}

/// One row of the accumulated results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub steps: usize,
    pub nfe: f64,
    pub w2: f64,
    pub n_eval: usize,
    pub seed: u64,
}

impl ResultRow {
    fn key(&self) -> (&str, &str, usize, usize, u64) {
        (&self.dataset, &self.method, self.steps, self.n_eval, self.seed)
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.method.clone(),
            self.steps.to_string(),
            fmt_float(self.nfe),
            fmt_float(self.w2),
            self.n_eval.to_string(),
            self.seed.to_string(),
        ]
    }
}

const RESULT_HEADER: [&str; 7] = ["dataset", "method", "steps", "nfe", "w2", "n_eval", "seed"];

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let header: Vec<String> = RESULT_HEADER.iter().map(|s| s.to_string()).collect();
    read_csv(path, &header)?
        .into_iter()
        .map(|(line, r)| {
            Ok(ResultRow {
                dataset: r[0].to_string(),
                method: r[1].to_string(),
                steps: parse_field(path, line, &r[2])?,
                nfe: parse_field(path, line, &r[3])?,
                w2: parse_field(path, line, &r[4])?,
                n_eval: parse_field(path, line, &r[5])?,
                seed: parse_field(path, line, &r[6])?,
            })
        })
        .collect()
}

/// Adds `row`, replacing an earlier row for the same dataset, method, steps,
/// test-set size and seed, so re-running an evaluation leaves the file unchanged.
pub fn upsert_result(path: &Path, row: &ResultRow) -> Result<()> {
    let mut rows = read_results(path)?;
    match rows.iter_mut().find(|r| r.key() == row.key()) {
        Some(existing) => *existing = row.clone(),
        None => rows.push(row.clone()),
    }
    let header: Vec<String> = RESULT_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(path, &header, rows.iter().map(ResultRow::fields))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn floats_keep_seventeen_digits() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = fmt_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_float(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn points_round_trip_and_errors_carry_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        let pts = array![[0.1, -3.0], [1e-17, 2.0 / 3.0]];
        write_points(&p, pts.view()).unwrap();
        assert_eq!(read_points(&p, 2).unwrap(), pts);
        fs::write(&p, "x0,x1\n1.0,2.0\n3.0,oops\n").unwrap();
        let err = read_points(&p, 2).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_points(&p, 2).unwrap_err().to_string().contains(":1:"));
    }

    #[test]
    fn results_are_upserted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.csv");
        let mut row = ResultRow {
            dataset: "moons".into(),
            method: "nsgf".into(),
            steps: 10,
            nfe: 10.0,
            w2: 0.2,
            n_eval: 1024,
            seed: 0,
        };
        upsert_result(&p, &row).unwrap();
        let once = fs::read(&p).unwrap();
        upsert_result(&p, &row).unwrap();
        assert_eq!(fs::read(&p).unwrap(), once);
        row.steps = 100;
        upsert_result(&p, &row).unwrap();
        assert_eq!(read_results(&p).unwrap().len(), 2);
    }
}
