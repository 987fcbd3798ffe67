//! CSV artifacts. Floats are written with 17 significant digits so every
//! value round-trips exactly.

use std::fs::File;
use std::path::Path;

use flowdas_core::assimilate::NodeDiagnostics;
use flowdas_core::dynamics::ObservationOperator;
use flowdas_core::train::EpochRecord;
use flowdas_core::{ObservationSeries, StateVector, Trajectory};

use crate::error::{CliError, Result};

pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| data_err(path, format!("bad number '{s}'")))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| data_err(path, format!("bad integer '{s}'")))
}

/// One series per id: `(first step, rows)`.
type Grouped = Vec<(usize, Vec<Vec<f64>>)>;

fn write_series<'a>(
    path: &Path,
    prefix: char,
    dim: usize,
    rows: impl Iterator<Item = (usize, usize, &'a [f64])>,
) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["traj_id".to_string(), "step".to_string()];
    header.extend((0..dim).map(|i| format!("{prefix}{i}")));
    w.write_record(&header)?;
    for (id, step, values) in rows {
        let mut rec = vec![id.to_string(), step.to_string()];
        rec.extend(values.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_series(path: &Path, prefix: char) -> Result<Grouped> {
    let mut r = reader(path)?;
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(2);
    let ok = header.len() > 2
        && &header[0] == "traj_id"
        && &header[1] == "step"
        && (0..dim).all(|i| header[i + 2] == format!("{prefix}{i}"));
    if !ok {
        return Err(data_err(path, format!("expected header traj_id,step,{prefix}0,...")));
    }
    let mut out: Grouped = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = parse_usize(path, &rec[0])?;
        let step = parse_usize(path, &rec[1])?;
        let values = (2..rec.len())
            .map(|i| parse_f64(path, &rec[i]))
            .collect::<Result<Vec<_>>>()?;
        if id == out.len() {
            out.push((step, vec![values]));
        } else if id + 1 == out.len() {
            let (first, rows) = out.last_mut().unwrap();
            if step != *first + rows.len() {
                return Err(data_err(path, format!("series {id}: step {step} out of order")));
            }
            rows.push(values);
        } else {
            return Err(data_err(path, format!("series id {id} out of order")));
        }
    }
    Ok(out)
}

pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let dim = trajectories.first().map_or(0, |t| t.dim());
    let rows = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| t.states().iter().enumerate().map(move |(k, s)| (i, k, s.as_slice())));
    write_series(path, 'x', dim, rows)
}

pub fn read_trajectories(path: &Path, dt: f64) -> Result<Vec<Trajectory>> {
    read_series(path, 'x')?
        .into_iter()
        .enumerate()
        .map(|(i, (first, rows))| {
            if first != 0 {
                return Err(data_err(path, format!("trajectory {i} does not start at step 0")));
            }
            let states = rows
                .into_iter()
                .map(StateVector::new)
                .collect::<flowdas_core::Result<Vec<_>>>()?;
            Ok(Trajectory::new(states, dt)?)
        })
        .collect()
}

pub fn write_observations(path: &Path, series: &[ObservationSeries]) -> Result<()> {
    let dim = series
        .iter()
        .find_map(|s| s.observations().first())
        .map_or(0, |y| y.len());
    let rows = series.iter().enumerate().flat_map(|(i, s)| {
        s.observations()
            .iter()
            .enumerate()
            .map(move |(j, y)| (i, s.first_index() + j, y.as_slice()))
    });
    write_series(path, 'y', dim, rows)
}

pub fn read_observations(path: &Path, operator: &ObservationOperator, gamma: f64) -> Result<Vec<ObservationSeries>> {
    read_series(path, 'y')?
        .into_iter()
        .map(|(first, rows)| Ok(ObservationSeries::new(rows, operator.clone(), gamma, first)?))
        .collect()
}

pub fn write_diagnostics(path: &Path, diagnostics: &[NodeDiagnostics]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["member", "k", "n", "guidance_loss", "weight_entropy", "drift_norm"])?;
    for d in diagnostics {
        w.write_record([
            d.member.to_string(),
            d.k.to_string(),
            d.n.to_string(),
            opt(d.guidance_loss),
            opt(d.weight_entropy),
            fmt(d.drift_norm),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_loss(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "mean_loss", "lr"])?;
    for r in history {
        w.write_record([r.epoch.to_string(), fmt(r.mean_loss), fmt(r.lr)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_loss(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = reader(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(EpochRecord {
                epoch: parse_usize(path, &rec[0])?,
                mean_loss: parse_f64(path, &rec[1])?,
                lr: parse_f64(path, &rec[2])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub per_step: Vec<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["metric", "value", "per_step_json"])?;
    for r in rows {
        let json = serde_json::to_string(&r.per_step).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_record([r.metric.clone(), fmt(r.value), json])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = reader(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let per_step: Vec<Option<f64>> = serde_json::from_str(&rec[2]).map_err(|e| data_err(path, e))?;
            Ok(MetricRow {
                metric: rec[0].to_string(),
                value: parse_f64(path, &rec[1])?,
                per_step: per_step.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub param: String,
    pub value: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub seeds: usize,
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["param", "value", "rmse_mean", "rmse_std", "seeds"])?;
    for r in rows {
        w.write_record([
            r.param.clone(),
            r.value.clone(),
            fmt(r.rmse_mean),
            fmt(r.rmse_std),
            r.seeds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_ablation(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = reader(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(AblationRow {
                param: rec[0].to_string(),
                value: rec[1].to_string(),
                rmse_mean: parse_f64(path, &rec[2])?,
                rmse_std: parse_f64(path, &rec[3])?,
                seeds: parse_usize(path, &rec[4])?,
            })
        })
        .collect()
}

/// Per-seed ablation results: one row per (cell, seed).
pub fn write_ablation_runs(path: &Path, rows: &[(String, String, u64, f64)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["param", "value", "seed", "rmse"])?;
    for (p, v, s, r) in rows {
        w.write_record([p.clone(), v.clone(), s.to_string(), fmt(*r)])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
