//! Glue between the stages: repair and split records, and turn tensors and
//! forecasts into the cell maps the metrics consume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    apply_normalizer, build_tensors, drop_block_missing, fit_normalizer, impute_local_missing, DatasetTensors,
    StationRecords,
};
use crate::error::{Error, Result};
use crate::infer::{target_index, ForecastRow};
use crate::metrics::{CellForecast, CellKey};

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15 }
    }
}

impl SplitFractions {
    /// Date counts per block; the test block takes the remainder.
    pub fn sizes(&self, dates: usize) -> Result<[usize; 3]> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.train) || !ok(self.val) || self.train + self.val >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions train={} val={} leave no test block",
                self.train, self.val
            )));
        }
        let train = (dates as f64 * self.train).round() as usize;
        let val = (dates as f64 * self.val).round() as usize;
        if train == 0 || val == 0 || train + val >= dates {
            return Err(Error::Config(format!(
                "{dates} dates are too few for a train/val/test split"
            )));
        }
        Ok([train, val, dates - train - val])
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: DatasetTensors,
    pub val: DatasetTensors,
    pub test: DatasetTensors,
    pub dropped_dates: Vec<usize>,
}

/// Drops block-missing dates, interpolates local gaps, splits by date and
/// normalises every block with ranges fitted on the training block only.
pub fn preprocess(records: &StationRecords, fractions: SplitFractions) -> Result<Splits> {
    let dropped = drop_block_missing(records);
    if dropped.is_empty() {
        return Err(Error::AllMissing);
    }
    let clean = impute_local_missing(&dropped.records)?;
    let sizes = fractions.sizes(clean.dates())?;
    let mut blocks = clean.split_dates(&sizes)?.into_iter();
    let (train, val, test) = (blocks.next(), blocks.next(), blocks.next());
    let (train, val, test) = match (train, val, test) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => unreachable!("three sizes give three blocks"),
    };
    let spec = fit_normalizer(&train)?;
    let s = records.schema();
    let build = |r: &StationRecords| build_tensors(&apply_normalizer(&spec, r)?, &spec, s.history_len, s.horizon);
    Ok(Splits {
        train: build(&train)?,
        val: build(&val)?,
        test: build(&test)?,
        dropped_dates: dropped.dropped_dates,
    })
}

fn physical_cells(
    tensors: &DatasetTensors,
    value: impl Fn(&[f64], &[f64], usize) -> f64,
    names: impl Fn(usize) -> String,
) -> Result<BTreeMap<CellKey, f64>> {
    let n3 = tensors.n_targets();
    let ranges = (0..n3)
        .map(|o| tensors.spec().get(&names(o)).copied())
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for sample in tensors.all_samples() {
        for step in 0..tensors.horizon() {
            let (y, nwp) = (sample.target_row(step), sample.nwp_row(step));
            for (o, r) in ranges.iter().enumerate() {
                let key = CellKey {
                    date_idx: sample.date_id(),
                    station_id: sample.station,
                    step,
                    target: o,
                };
                out.insert(key, r.invert(value(y, nwp, o)));
            }
        }
    }
    Ok(out)
}

/// Observed targets in physical units.
pub fn truth_cells(tensors: &DatasetTensors) -> Result<BTreeMap<CellKey, f64>> {
    physical_cells(tensors, |y, _, o| y[o], |o| format!("t{}", o + 1))
}

/// The NWP reference forecast: NWP column `k` forecasts target `k`.
pub fn nwp_cells(tensors: &DatasetTensors) -> Result<BTreeMap<CellKey, f64>> {
    if tensors.n_nwp() < tensors.n_targets() {
        return Err(Error::Config(format!(
            "{} NWP columns cannot serve as reference for {} targets",
            tensors.n_nwp(),
            tensors.n_targets()
        )));
    }
    physical_cells(tensors, |_, nwp, o| nwp[o], |o| format!("nwp.f{}", o + 1))
}

pub fn forecast_cells(rows: &[ForecastRow]) -> Result<BTreeMap<CellKey, CellForecast>> {
    let mut out = BTreeMap::new();
    for r in rows {
        let target =
            target_index(&r.target).ok_or_else(|| Error::Config(format!("unknown target name {:?}", r.target)))?;
        let key = CellKey {
            date_idx: r.date_idx,
            station_id: r.station_id,
            step: r.step,
            target,
        };
        let f = CellForecast {
            point: r.point,
            lower: r.lower,
            upper: r.upper,
        };
        if out.insert(key, f).is_some() {
            return Err(Error::Config(format!(
                "duplicate forecast for date {}, station {}, step {}, {}",
                r.date_idx, r.station_id, r.step, r.target
            )));
        }
    }
    Ok(out)
}

/// A point forecast as a zero-width interval, e.g. NWP scored as a model.
pub fn point_cells(points: &BTreeMap<CellKey, f64>) -> BTreeMap<CellKey, CellForecast> {
    points
        .iter()
        .map(|(k, &v)| {
            (
                *k,
                CellForecast {
                    point: v,
                    lower: v,
                    upper: v,
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::build_report;
    use crate::synth::{generate, inject_missing, SynthConfig};

    fn config() -> SynthConfig {
        SynthConfig {
            dates: 30,
            stations: 2,
            history_len: 6,
            horizon: 4,
            n_obs: 3,
            n_nwp: 3,
            n_targets: 2,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn split_sizes() {
        assert_eq!(SplitFractions::default().sizes(100).unwrap(), [70, 15, 15]);
        assert!(SplitFractions { train: 0.9, val: 0.1 }.sizes(100).is_err());
        assert!(SplitFractions::default().sizes(3).is_err());
    }

    #[test]
    fn preprocess_splits_chronologically() {
        let (r, _) = generate(&config()).unwrap();
        let holed = inject_missing(&r, 0.05, 0.02, 1).unwrap();
        let s = preprocess(&holed, SplitFractions::default()).unwrap();
        let kept = 30 - s.dropped_dates.len();
        assert_eq!(s.train.dates() + s.val.dates() + s.test.dates(), kept);
        assert!(s.train.date_ids().last() < s.val.date_ids().first());
        assert!(s.val.date_ids().last() < s.test.date_ids().first());
        // training targets span exactly [0, 1] after normalisation
        let t = s.train.targets().data();
        let max = t.iter().cloned().fold(f64::MIN, f64::max);
        let min = t.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 1.0).abs() < 1e-12 && min.abs() < 1e-12);
    }

    #[test]
    fn truths_come_back_in_physical_units() {
        let (r, _) = generate(&config()).unwrap();
        let s = preprocess(&r, SplitFractions::default()).unwrap();
        let truths = truth_cells(&s.test).unwrap();
        let first = s.test.date_ids()[0];
        let pos = r.date_ids().iter().position(|&d| d == first).unwrap();
        let key = CellKey {
            date_idx: first,
            station_id: 1,
            step: 2,
            target: 1,
        };
        let want = r.get(crate::data::Channel::Target, pos, 1, 2, 1);
        assert!((truths[&key] - want).abs() < 1e-9);
    }

    #[test]
    fn nwp_against_itself_has_zero_skill() {
        let (r, _) = generate(&config()).unwrap();
        let s = preprocess(&r, SplitFractions::default()).unwrap();
        let nwp = nwp_cells(&s.test).unwrap();
        let truths = truth_cells(&s.test).unwrap();
        let report = build_report(&point_cells(&nwp), &truths, &nwp, 0.1).unwrap();
        assert!(report.per_day.iter().all(|d| d.ss_day == 0.0));
    }

    #[test]
    fn duplicate_forecast_rows_rejected() {
        let row = ForecastRow {
            date_idx: 0,
            station_id: 0,
            step: 0,
            target: "t1".into(),
            point: 1.0,
            lower: 0.0,
            upper: 2.0,
            sigma: 1.0,
        };
        assert!(forecast_cells(&[row.clone(), row]).is_err());
    }
}
