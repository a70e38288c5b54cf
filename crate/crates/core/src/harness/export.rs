//! CSV and JSON artifacts. Floats are written with 17 significant digits so
//! that parsing reproduces every value exactly.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Policy;
use super::episode::{Aggregates, EpisodeLog, StepRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config { path: "format".into(), message: format!("unknown format `{s}`") }),
        }
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_err(e: std::io::Error) -> Error {
    Error::io("<sink>", e)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => write_err(io),
        other => Error::Parse { line: 0, message: format!("{other:?}") },
    }
}

pub const STEP_COLUMNS: [&str; 40] = [
    "step",
    "s_lx", "s_ly", "s_vx", "s_vy",
    "m_lx", "m_ly", "m_vx", "m_vy",
    "p00", "p01", "p02", "p03", "p10", "p11", "p12", "p13",
    "p20", "p21", "p22", "p23", "p30", "p31", "p32", "p33",
    "y_x", "y_y",
    "sigma00", "sigma01", "sigma10", "sigma11",
    "u_x", "u_y",
    "k", "k_next",
    "j_est", "j_ctrl", "j_sens", "j_est_belief", "efe",
];

fn step_row(r: &StepRecord) -> Vec<String> {
    let mut row = vec![r.step.to_string()];
    let floats = r
        .true_state
        .iter()
        .chain(&r.belief_mean)
        .chain(&r.belief_cov)
        .chain(&r.y)
        .chain(&r.sigma_hat)
        .chain(&r.u);
    row.extend(floats.map(|v| fmt_f64(*v)));
    row.push(r.k.to_string());
    row.push(r.k_next.to_string());
    for v in [r.j_est, r.j_ctrl, r.j_sens, r.j_est_belief, r.efe] {
        row.push(fmt_f64(v));
    }
    row
}

/// Header plus one row per step, columns in [`StepRecord`] field order.
pub fn write_csv<W: Write>(log: &EpisodeLog, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(STEP_COLUMNS).map_err(csv_err)?;
    for r in &log.records {
        w.write_record(step_row(r)).map_err(csv_err)?;
    }
    w.flush().map_err(write_err)
}

pub fn read_csv<R: Read>(source: R) -> Result<Vec<StepRecord>> {
    let mut rd = csv::Reader::from_reader(source);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(STEP_COLUMNS) {
        return Err(Error::Parse { line: 1, message: "unexpected step-record header".into() });
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let bad = |col: usize| Error::Parse { line, message: format!("column {} is malformed", col + 1) };
        let f = |col: usize| row.get(col).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(col));
        let int = |col: usize| row.get(col).and_then(|s| s.parse::<u64>().ok()).ok_or_else(|| bad(col));
        let span = |start: usize, out: &mut [f64]| -> Result<()> {
            for (j, o) in out.iter_mut().enumerate() {
                *o = f(start + j)?;
            }
            Ok(())
        };
        let mut r = StepRecord {
            step: int(0)? as usize,
            true_state: [0.0; 4],
            belief_mean: [0.0; 4],
            belief_cov: [0.0; 16],
            y: [0.0; 2],
            sigma_hat: [0.0; 4],
            u: [0.0; 2],
            k: int(33)? as u32,
            k_next: int(34)? as u32,
            j_est: f(35)?,
            j_ctrl: f(36)?,
            j_sens: f(37)?,
            j_est_belief: f(38)?,
            efe: f(39)?,
        };
        span(1, &mut r.true_state)?;
        span(5, &mut r.belief_mean)?;
        span(9, &mut r.belief_cov)?;
        span(25, &mut r.y)?;
        span(27, &mut r.sigma_hat)?;
        span(31, &mut r.u)?;
        out.push(r);
    }
    Ok(out)
}

/// Config snapshot, records and aggregates.
pub fn write_json<W: Write>(log: &EpisodeLog, mut sink: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut sink, log).map_err(|e| write_err(e.into()))?;
    sink.write_all(b"\n").map_err(write_err)
}

pub fn read_json<R: Read>(source: R) -> Result<EpisodeLog> {
    serde_json::from_reader(source)
        .map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
}

pub fn export<W: Write>(log: &EpisodeLog, format: Format, sink: W) -> Result<()> {
    match format {
        Format::Csv => write_csv(log, sink),
        Format::Json => write_json(log, sink),
    }
}

/// One aggregate row of a summary table. `seed` is `"mean"` or `"sd"` for the
/// rows pooled over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub policy: Policy,
    pub horizon: usize,
    pub seed: String,
    pub aggregates: Aggregates,
}

fn aggregate_fields(a: &Aggregates) -> [f64; 8] {
    [
        a.sum_est,
        a.sum_ctrl,
        a.sum_sens,
        a.sum_est_belief,
        a.total_j,
        a.window_j_mean,
        a.mean_efe,
        a.mean_k,
    ]
}

fn aggregate_from(v: [f64; 8]) -> Aggregates {
    Aggregates {
        sum_est: v[0],
        sum_ctrl: v[1],
        sum_sens: v[2],
        sum_est_belief: v[3],
        total_j: v[4],
        window_j_mean: v[5],
        mean_efe: v[6],
        mean_k: v[7],
    }
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "policy",
    "horizon",
    "seed",
    "sum_est",
    "sum_ctrl",
    "sum_sens",
    "sum_est_belief",
    "total_j",
    "window_j_mean",
    "mean_efe",
    "mean_k",
];

/// Per-seed rows followed by mean and sample SD rows for every
/// `(policy, horizon)` group, in order of first appearance.
pub fn summarize(logs: &[EpisodeLog]) -> Vec<SummaryRow> {
    let mut groups: Vec<((Policy, usize), Vec<&EpisodeLog>)> = Vec::new();
    for log in logs {
        let key = (log.config.policy, log.config.planner.horizon);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(log),
            None => groups.push((key, vec![log])),
        }
    }
    let mut rows = Vec::new();
    for ((policy, horizon), members) in groups {
        let n = members.len() as f64;
        let mut mean = [0.0; 8];
        for log in &members {
            rows.push(SummaryRow {
                policy,
                horizon,
                seed: log.seed.to_string(),
                aggregates: log.aggregates.clone(),
            });
            for (m, v) in mean.iter_mut().zip(aggregate_fields(&log.aggregates)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 8];
        if members.len() > 1 {
            for log in &members {
                for ((s, v), m) in var.iter_mut().zip(aggregate_fields(&log.aggregates)).zip(mean) {
                    *s += (v - m).powi(2);
                }
            }
            var.iter_mut().for_each(|s| *s /= n - 1.0);
        }
        rows.push(SummaryRow { policy, horizon, seed: "mean".into(), aggregates: aggregate_from(mean) });
        rows.push(SummaryRow {
            policy,
            horizon,
            seed: "sd".into(),
            aggregates: aggregate_from(var.map(f64::sqrt)),
        });
    }
    rows
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.policy.name().to_string(), r.horizon.to_string(), r.seed.clone()];
        rec.extend(aggregate_fields(&r.aggregates).iter().map(|v| fmt_f64(*v)));
        w.write_record(rec).map_err(csv_err)?;
    }
    w.flush().map_err(write_err)
}

pub fn episode_file_name(log: &EpisodeLog, format: Format) -> String {
    format!(
        "{}_T{}_seed{}.{}",
        log.config.policy.name(),
        log.config.planner.horizon,
        log.seed,
        format.extension()
    )
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Writes one file per episode (unless `per_episode` is false) plus
/// `summary.csv` into `dir`. Returns the paths written.
pub fn export_all(logs: &[EpisodeLog], dir: &Path, format: Format, per_episode: bool) -> Result<Vec<PathBuf>> {
    if logs.is_empty() {
        return Err(Error::contract("nothing to export"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if per_episode {
        for log in logs {
            let path = dir.join(episode_file_name(log, format));
            with_path(&path, export(log, format, create(&path)?))?;
            written.push(path);
        }
    }
    let path = dir.join("summary.csv");
    with_path(&path, write_summary(&summarize(logs), create(&path)?))?;
    written.push(path);
    Ok(written)
}
