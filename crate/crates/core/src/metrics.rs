//! RMSE, skill score against NWP, interval coverage and the paired t-test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use duq_diff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::infer::{target_name, to_csv_bytes};
use crate::stats::student_t_cdf;

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: no values")));
    }
    Ok(())
}

/// Pooled root mean squared error.
pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat, "rmse")?;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Fraction of truths inside the closed interval `[lower, upper]`.
pub fn picp(y: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_len(y, lower, "picp")?;
    check_len(y, upper, "picp")?;
    if let Some(k) = (0..y.len()).find(|&k| lower[k] > upper[k]) {
        return Err(Error::Degenerate(format!(
            "interval {k} has lower {} above upper {}",
            lower[k], upper[k]
        )));
    }
    let covered = (0..y.len()).filter(|&k| lower[k] <= y[k] && y[k] <= upper[k]).count();
    Ok(covered as f64 / y.len() as f64)
}

fn objective_column(t: &Tensor, objective: usize, what: &str) -> Result<Vec<f64>> {
    match t.shape() {
        [s, steps, n] if objective < *n => Ok((0..s * steps).map(|k| t.data()[k * n + objective]).collect()),
        shape => Err(Error::Shape(format!(
            "{what}: expected (S, T_D, N3) with objective {objective} in range, got {shape:?}"
        ))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// RMSE of one objective over all stations and steps of `(S, T_D, N3)` grids.
pub fn rmse_obj(y: &Tensor, yhat: &Tensor, objective: usize) -> Result<f64> {
    same_shape(y, yhat)?;
    rmse(
        &objective_column(y, objective, "y")?,
        &objective_column(yhat, objective, "yhat")?,
    )
}

pub fn picp_obj(y: &Tensor, lower: &Tensor, upper: &Tensor, objective: usize) -> Result<f64> {
    same_shape(y, lower)?;
    same_shape(y, upper)?;
    picp(
        &objective_column(y, objective, "y")?,
        &objective_column(lower, objective, "lower")?,
        &objective_column(upper, objective, "upper")?,
    )
}

/// `1 - rmse_ml / rmse_nwp`.
pub fn ss_obj(rmse_ml: f64, rmse_nwp: f64) -> Result<f64> {
    if !(rmse_nwp > 0.0) {
        return Err(Error::Degenerate(format!(
            "skill score undefined for reference RMSE {rmse_nwp}"
        )));
    }
    Ok(1.0 - rmse_ml / rmse_nwp)
}

pub fn ss_day(ss: &[f64]) -> f64 {
    mean(ss)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alternative {
    /// Mean of `a - b` is above zero.
    Greater,
    /// Mean of `a - b` is below zero.
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// One-tailed paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    if d.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("paired t-test: all differences are zero".into()));
    }
    if !(var > 0.0) || var.sqrt() <= 1e-12 * m.abs() {
        return Err(Error::Degenerate(
            "paired t-test: differences have zero variance, the statistic is undefined".into(),
        ));
    }
    let t = m / (var / n).sqrt();
    let df = d.len() - 1;
    let cdf = student_t_cdf(t, df as f64);
    let p = match alternative {
        Alternative::Greater => 1.0 - cdf,
        Alternative::Less => cdf,
    };
    Ok(TTest { t, p, df })
}

/// Identity of one evaluated value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub date_idx: usize,
    pub station_id: usize,
    pub step: usize,
    /// 0-based objective index.
    pub target: usize,
}

/// A model forecast of one cell in physical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellForecast {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub date_idx: usize,
    pub rmse: Vec<f64>,
    pub rmse_day: f64,
    pub ss: Vec<f64>,
    pub ss_day: f64,
    pub picp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub z: f64,
    pub stations: usize,
    pub days: usize,
    pub targets: Vec<String>,
    pub per_day: Vec<DayMetrics>,
    pub rmse_avg: f64,
    pub ss_avg: f64,
    /// Per objective, averaged over days.
    pub picp_obj_avg: Vec<f64>,
    pub picp_avg: f64,
}

fn missing_list(what: &str, keys: &[CellKey]) -> String {
    const SHOW: usize = 10;
    let mut s = format!("{} cells missing from {what}:", keys.len());
    for k in keys.iter().take(SHOW) {
        s += &format!(
            " (date {}, station {}, step {}, {})",
            k.date_idx,
            k.station_id,
            k.step,
            target_name(k.target)
        );
    }
    if keys.len() > SHOW {
        s += " ...";
    }
    s
}

/// Per-day and averaged metrics. The three inputs must cover exactly the
/// same cells.
pub fn build_report(
    forecasts: &BTreeMap<CellKey, CellForecast>,
    truths: &BTreeMap<CellKey, f64>,
    nwp: &BTreeMap<CellKey, f64>,
    z: f64,
) -> Result<MetricsReport> {
    let mut problems = Vec::new();
    for (what, keys) in [
        ("truths", truths.keys().collect::<BTreeSet<_>>()),
        ("nwp", nwp.keys().collect()),
    ] {
        let missing: Vec<CellKey> = forecasts.keys().filter(|k| !keys.contains(k)).copied().collect();
        if !missing.is_empty() {
            problems.push(missing_list(what, &missing));
        }
        let extra: Vec<CellKey> = keys
            .iter()
            .filter(|k| !forecasts.contains_key(k))
            .map(|k| **k)
            .collect();
        if !extra.is_empty() {
            problems.push(missing_list("forecasts", &extra));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Misaligned(problems.join("; ")));
    }
    if forecasts.is_empty() {
        return Err(Error::Degenerate("nothing to evaluate".into()));
    }
    let n_targets = forecasts.keys().map(|k| k.target).max().unwrap_or(0) + 1;
    let stations: BTreeSet<usize> = forecasts.keys().map(|k| k.station_id).collect();

    // date -> objective -> (y, point, lower, upper, nwp)
    type Columns = [Vec<f64>; 5];
    let mut days: BTreeMap<usize, Vec<Columns>> = BTreeMap::new();
    for (key, f) in forecasts {
        let cols = days
            .entry(key.date_idx)
            .or_insert_with(|| vec![Default::default(); n_targets]);
        let c = &mut cols[key.target];
        c[0].push(truths[key]);
        c[1].push(f.point);
        c[2].push(f.lower);
        c[3].push(f.upper);
        c[4].push(nwp[key]);
    }
    let mut per_day = Vec::with_capacity(days.len());
    for (date_idx, cols) in days {
        let (mut r, mut s, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for (o, [y, point, lower, upper, ref_nwp]) in cols.iter().enumerate() {
            if y.is_empty() {
                return Err(Error::Misaligned(format!(
                    "date {date_idx} has no cells for {}",
                    target_name(o)
                )));
            }
            let rm = rmse(y, point)?;
            r.push(rm);
            s.push(
                ss_obj(rm, rmse(y, ref_nwp)?)
                    .map_err(|e| Error::Degenerate(format!("date {date_idx}, {}: {e}", target_name(o))))?,
            );
            p.push(picp(y, lower, upper)?);
        }
        per_day.push(DayMetrics {
            date_idx,
            rmse_day: mean(&r),
            ss_day: ss_day(&s),
            rmse: r,
            ss: s,
            picp: p,
        });
    }
    let picp_obj_avg: Vec<f64> = (0..n_targets)
        .map(|o| per_day.iter().map(|d| d.picp[o]).sum::<f64>() / per_day.len() as f64)
        .collect();
    Ok(MetricsReport {
        z,
        stations: stations.len(),
        days: per_day.len(),
        targets: (0..n_targets).map(target_name).collect(),
        rmse_avg: per_day.iter().map(|d| d.rmse_day).sum::<f64>() / per_day.len() as f64,
        ss_avg: per_day.iter().map(|d| d.ss_day).sum::<f64>() / per_day.len() as f64,
        picp_avg: mean(&picp_obj_avg),
        picp_obj_avg,
        per_day,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    date_idx: usize,
    target: &'a str,
    rmse: f64,
    ss: f64,
    picp: f64,
    rmse_day: f64,
    ss_day: f64,
}

impl MetricsReport {
    /// `date_idx,target,rmse,ss,picp,rmse_day,ss_day`, one row per day and
    /// objective.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rows = Vec::new();
        for d in &self.per_day {
            for (o, name) in self.targets.iter().enumerate() {
                rows.push(ReportRow {
                    date_idx: d.date_idx,
                    target: name,
                    rmse: d.rmse[o],
                    ss: d.ss[o],
                    picp: d.picp[o],
                    rmse_day: d.rmse_day,
                    ss_day: d.ss_day,
                });
            }
        }
        write_atomic(path, &to_csv_bytes(path, &rows)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            line: e.line() as u64,
            message: format!("{}: {e}", path.display()),
        })
    }

    /// Per-day `rmse_day` series, in date order.
    pub fn daily_rmse(&self) -> Vec<f64> {
        self.per_day.iter().map(|d| d.rmse_day).collect()
    }

    pub fn daily_ss(&self) -> Vec<f64> {
        self.per_day.iter().map(|d| d.ss_day).collect()
    }
}
