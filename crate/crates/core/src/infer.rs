//! Point forecasts and Gaussian prediction intervals in physical units.

use std::path::Path;

use duq_diff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{NormalizationSpec, TrainingSample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{forward_batch, ForecastDistribution, ModelParams};

/// Standard normal quantile, Acklam's rational approximation (relative error
/// below 1.2e-9 over the open unit interval).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - P_LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Two-sided multiplier for a `1 - z` interval: `Phi^-1(1 - z/2)`.
pub fn lambda_from_z(z: f64) -> Result<f64> {
    if !(z > 0.0 && z < 1.0) {
        return Err(Error::InvalidZ(z));
    }
    Ok(inverse_normal_cdf(1.0 - z / 2.0))
}

/// How member variances combine in an ensemble.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleVariance {
    /// Average of member variances.
    #[default]
    Mean,
    /// Variance of the equal-weight Gaussian mixture: mean variance plus the
    /// spread of member means.
    Mixture,
}

impl std::str::FromStr for EnsembleVariance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "mixture" => Ok(Self::Mixture),
            other => Err(Error::Config(format!(
                "unknown ensemble variance `{other}` (expected mean or mixture)"
            ))),
        }
    }
}

impl std::fmt::Display for EnsembleVariance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Mixture => "mixture",
        })
    }
}

/// Bounds, point and standard deviation per `(step, target)`, in physical
/// units.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInterval {
    pub point: Tensor,
    pub lower: Tensor,
    pub upper: Tensor,
    pub sigma: Tensor,
    pub z: f64,
    pub lambda: f64,
}

/// `u +- lambda * sigma` in normalised space, then each of point, lower and
/// upper mapped back through the target's min-max range.
pub fn interval_from_distribution(
    dist: &ForecastDistribution,
    z: f64,
    spec: &NormalizationSpec,
) -> Result<PredictionInterval> {
    let lambda = lambda_from_z(z)?;
    let shape = dist.mean.shape().to_vec();
    let (steps, targets) = match shape[..] {
        [s, t] => (s, t),
        _ => return Err(Error::Shape(format!("distribution shape {shape:?} is not (T_D, N3)"))),
    };
    let ranges = (0..targets)
        .map(|k| spec.target(k).copied())
        .collect::<Result<Vec<_>>>()?;
    let n = steps * targets;
    let (mut point, mut lower, mut upper, mut sigma) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for (k, (&u, &s2)) in dist.mean.data().iter().zip(dist.variance.data()).enumerate() {
        let r = ranges[k % targets];
        let s = s2.sqrt();
        point.push(r.invert(u));
        lower.push(r.invert(u - lambda * s));
        upper.push(r.invert(u + lambda * s));
        sigma.push(s * r.width());
    }
    Ok(PredictionInterval {
        point: Tensor::new(shape.clone(), point)?,
        lower: Tensor::new(shape.clone(), lower)?,
        upper: Tensor::new(shape.clone(), upper)?,
        sigma: Tensor::new(shape, sigma)?,
        z,
        lambda,
    })
}

pub fn predict(
    params: &ModelParams,
    sample: &TrainingSample<'_>,
    z: f64,
    spec: &NormalizationSpec,
) -> Result<PredictionInterval> {
    Ok(predict_batch(params, std::slice::from_ref(sample), z, spec)?.remove(0))
}

pub fn predict_batch(
    params: &ModelParams,
    samples: &[TrainingSample<'_>],
    z: f64,
    spec: &NormalizationSpec,
) -> Result<Vec<PredictionInterval>> {
    lambda_from_z(z)?;
    forward_batch(params, samples)?
        .iter()
        .map(|d| interval_from_distribution(d, z, spec))
        .collect()
}

/// Combines member distributions of the same sample in normalised space.
pub fn combine(members: &[ForecastDistribution], mode: EnsembleVariance) -> Result<ForecastDistribution> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    let shape = first.mean.shape();
    if let Some(m) = members.iter().find(|m| m.mean.shape() != shape) {
        return Err(Error::Shape(format!(
            "ensemble members disagree on output shape: {shape:?} vs {:?}",
            m.mean.shape()
        )));
    }
    let k = members.len() as f64;
    let mean = Tensor::from_fn(shape, |j| members.iter().map(|m| m.mean.data()[j]).sum::<f64>() / k);
    let variance = Tensor::from_fn(shape, |j| {
        let avg_var = members.iter().map(|m| m.variance.data()[j]).sum::<f64>() / k;
        match mode {
            EnsembleVariance::Mean => avg_var,
            EnsembleVariance::Mixture => {
                let mu = mean.data()[j];
                avg_var + members.iter().map(|m| (m.mean.data()[j] - mu).powi(2)).sum::<f64>() / k
            }
        }
    });
    Ok(ForecastDistribution { mean, variance })
}

pub fn ensemble_predict(
    members: &[ModelParams],
    sample: &TrainingSample<'_>,
    z: f64,
    spec: &NormalizationSpec,
    mode: EnsembleVariance,
) -> Result<PredictionInterval> {
    Ok(ensemble_predict_batch(members, std::slice::from_ref(sample), z, spec, mode)?.remove(0))
}

pub fn ensemble_predict_batch(
    members: &[ModelParams],
    samples: &[TrainingSample<'_>],
    z: f64,
    spec: &NormalizationSpec,
    mode: EnsembleVariance,
) -> Result<Vec<PredictionInterval>> {
    if members.is_empty() {
        return Err(Error::Config("an ensemble needs at least one member".into()));
    }
    lambda_from_z(z)?;
    let per_member = members
        .iter()
        .map(|p| forward_batch(p, samples))
        .collect::<Result<Vec<_>>>()?;
    (0..samples.len())
        .map(|i| {
            let dists: Vec<ForecastDistribution> = per_member.iter().map(|m| m[i].clone()).collect();
            interval_from_distribution(&combine(&dists, mode)?, z, spec)
        })
        .collect()
}

/// One line of the forecast file; `target` is the 1-based target name (`t1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub date_idx: usize,
    pub station_id: usize,
    pub step: usize,
    pub target: String,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub sigma: f64,
}

pub fn target_name(k: usize) -> String {
    format!("t{}", k + 1)
}

/// Parses `t1`, `t2`, ... into a 0-based target index.
pub fn target_index(name: &str) -> Option<usize> {
    name.strip_prefix('t')?.parse::<usize>().ok()?.checked_sub(1)
}

pub fn forecast_rows(samples: &[TrainingSample<'_>], intervals: &[PredictionInterval]) -> Vec<ForecastRow> {
    let mut rows = Vec::new();
    for (s, iv) in samples.iter().zip(intervals) {
        let targets = iv.point.shape()[1];
        for (k, &point) in iv.point.data().iter().enumerate() {
            rows.push(ForecastRow {
                date_idx: s.date_id(),
                station_id: s.station,
                step: k / targets,
                target: target_name(k % targets),
                point,
                lower: iv.lower.data()[k],
                upper: iv.upper.data()[k],
                sigma: iv.sigma.data()[k],
            });
        }
    }
    rows
}

pub(crate) fn to_csv_bytes<T: Serialize>(path: &Path, rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.into_inner().map_err(|e| Error::io(path, e.into_error()))
}

pub(crate) fn read_csv_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| crate::data::csv_error(path, e)))
        .collect()
}

pub fn write_forecast_csv(path: impl AsRef<Path>, rows: &[ForecastRow]) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &to_csv_bytes(path, rows)?)
}

pub fn read_forecast_csv(path: impl AsRef<Path>) -> Result<Vec<ForecastRow>> {
    read_csv_rows(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureRange, NamedRange};
    use proptest::prelude::*;

    fn spec(ranges: &[(f64, f64)]) -> NormalizationSpec {
        NormalizationSpec {
            features: ranges
                .iter()
                .enumerate()
                .map(|(k, &(min, max))| NamedRange {
                    name: target_name(k),
                    range: FeatureRange { min, max },
                })
                .collect(),
        }
    }

    fn dist(mean: Vec<f64>, variance: Vec<f64>, targets: usize) -> ForecastDistribution {
        let steps = mean.len() / targets;
        ForecastDistribution {
            mean: Tensor::new(vec![steps, targets], mean).unwrap(),
            variance: Tensor::new(vec![steps, targets], variance).unwrap(),
        }
    }

    #[test]
    fn lambda_values() {
        assert!((lambda_from_z(0.1).unwrap() - 1.6448536269514722).abs() < 1e-8);
        assert!((lambda_from_z(0.1).unwrap() - 1.645).abs() < 5e-3);
        assert!((lambda_from_z(0.3173).unwrap() - 1.0).abs() < 1e-4);
        assert!(lambda_from_z(1.0 - 1e-12).unwrap().abs() < 1e-10);
        assert!((lambda_from_z(0.05).unwrap() - 1.959963984540054).abs() < 1e-8);
        for z in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(lambda_from_z(z), Err(Error::InvalidZ(_))));
        }
    }

    #[test]
    fn quantile_tails_and_symmetry() {
        assert!((inverse_normal_cdf(0.001) + 3.090232306167813).abs() < 1e-8);
        assert!((inverse_normal_cdf(0.999) - 3.090232306167813).abs() < 1e-8);
        assert_eq!(inverse_normal_cdf(0.5), 0.0);
    }

    #[test]
    fn denormalises_point_and_width() {
        let d = dist(vec![0.5], vec![0.01], 1);
        let iv = interval_from_distribution(&d, 0.1, &spec(&[(0.0, 40.0)])).unwrap();
        assert!((iv.point.data()[0] - 20.0).abs() < 1e-12);
        let width = iv.upper.data()[0] - iv.lower.data()[0];
        assert!((width - 2.0 * iv.lambda * 0.1 * 40.0).abs() < 1e-9);
        assert!((iv.sigma.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_variance_collapses_interval() {
        let d = dist(vec![0.3, 0.7], vec![1e-12, 1e-12], 2);
        let iv = interval_from_distribution(&d, 0.1, &spec(&[(0.0, 10.0), (-5.0, 5.0)])).unwrap();
        for k in 0..2 {
            assert!((iv.upper.data()[k] - iv.lower.data()[k]).abs() < 1e-3);
        }
    }

    #[test]
    fn unknown_target_rejected() {
        let d = dist(vec![0.3, 0.7], vec![0.1, 0.1], 2);
        assert!(matches!(
            interval_from_distribution(&d, 0.1, &spec(&[(0.0, 1.0)])),
            Err(Error::UnknownFeature(_))
        ));
    }

    #[test]
    fn ensemble_combination() {
        let a = dist(vec![1.0, -2.0], vec![0.5, 0.2], 2);
        let b = dist(vec![-1.0, 2.0], vec![0.3, 0.4], 2);
        let m = combine(&[a.clone(), b.clone()], EnsembleVariance::Mean).unwrap();
        assert_eq!(m.mean.data(), &[0.0, 0.0]);
        assert!((m.variance.data()[0] - 0.4).abs() < 1e-15);
        let x = combine(&[a.clone(), b], EnsembleVariance::Mixture).unwrap();
        assert!((x.variance.data()[0] - 1.4).abs() < 1e-15);
        assert!((x.variance.data()[1] - 4.3).abs() < 1e-15);
        assert_eq!(combine(&[a.clone()], EnsembleVariance::Mean).unwrap(), a);
        assert!(combine(&[], EnsembleVariance::Mean).is_err());
    }

    #[test]
    fn target_names_round_trip() {
        assert_eq!(target_index(&target_name(0)), Some(0));
        assert_eq!(target_index("t12"), Some(11));
        assert_eq!(target_index("t0"), None);
        assert_eq!(target_index("x1"), None);
    }

    proptest! {
        #[test]
        fn interval_invariants(u in -2.0f64..2.0, s2 in 1e-6f64..4.0, lo in -50.0f64..50.0, w in 0.0f64..100.0,
                               z1 in 0.01f64..0.99, z2 in 0.01f64..0.99) {
            let sp = spec(&[(lo, lo + w)]);
            let d = dist(vec![u], vec![s2], 1);
            let (z1, z2) = if z1 < z2 { (z1, z2) } else { (z2, z1) };
            let a = interval_from_distribution(&d, z1, &sp).unwrap();
            let b = interval_from_distribution(&d, z2, &sp).unwrap();
            let (l, p, h) = (a.lower.data()[0], a.point.data()[0], a.upper.data()[0]);
            prop_assert!(l <= p && p <= h);
            prop_assert!(((h - p) - (p - l)).abs() < 1e-9);
            prop_assert!(l <= b.lower.data()[0] && b.upper.data()[0] <= h);
        }

        #[test]
        fn denormalisation_commutes_with_averaging(means in prop::collection::vec(-2.0f64..2.0, 1..6), lo in -10.0f64..10.0, w in 0.1f64..50.0) {
            let sp = spec(&[(lo, lo + w)]);
            let members: Vec<_> = means.iter().map(|&m| dist(vec![m], vec![0.1], 1)).collect();
            let ens = interval_from_distribution(&combine(&members, EnsembleVariance::Mean).unwrap(), 0.1, &sp).unwrap();
            let after: f64 = members.iter()
                .map(|m| interval_from_distribution(m, 0.1, &sp).unwrap().point.data()[0])
                .sum::<f64>() / members.len() as f64;
            prop_assert!((ens.point.data()[0] - after).abs() < 1e-12 * (1.0 + after.abs()));
        }
    }
}
