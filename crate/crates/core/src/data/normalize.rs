use serde::{Deserialize, Serialize};

use super::records::{is_missing, Channel, StationRecords};
use crate::error::{Error, Result};

/// Fitted `(min, max)` of one continuous column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

impl FeatureRange {
    /// A constant column normalises to 0.
    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_constant() {
            0.0
        } else {
            (x - self.min) / self.width()
        }
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * self.width() + self.min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedRange {
    pub name: String,
    #[serde(flatten)]
    pub range: FeatureRange,
}

/// Min-max ranges per named feature, fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub features: Vec<NamedRange>,
}

impl NormalizationSpec {
    pub fn get(&self, name: &str) -> Result<&FeatureRange> {
        self.features
            .iter()
            .find(|f| f.name == name)
            .map(|f| &f.range)
            .ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    /// Range of the `k`-th target (`t{k+1}`).
    pub fn target(&self, k: usize) -> Result<&FeatureRange> {
        self.get(&format!("t{}", k + 1))
    }

    pub fn constant_features(&self) -> impl Iterator<Item = &str> {
        self.features
            .iter()
            .filter(|f| f.range.is_constant())
            .map(|f| f.name.as_str())
    }

    /// Maps normalised values of a named feature back to physical units.
    pub fn invert(&self, name: &str, values: &[f64]) -> Result<Vec<f64>> {
        let r = self.get(name)?;
        Ok(values.iter().map(|&v| r.invert(v)).collect())
    }
}

fn channels(r: &StationRecords) -> [(Channel, Vec<String>); 3] {
    let s = r.schema();
    [
        (Channel::Obs, s.obs_names()),
        (Channel::Nwp, s.nwp_names()),
        (Channel::Target, s.target_names()),
    ]
}

/// Per-column min and max over every date, station and hour; missing cells
/// are ignored.
pub fn fit_normalizer(train: &StationRecords) -> Result<NormalizationSpec> {
    if train.is_empty() {
        return Err(Error::Degenerate("cannot fit a normaliser on zero dates".into()));
    }
    let mut features = Vec::new();
    for (channel, names) in channels(train) {
        for (k, name) in names.into_iter().enumerate() {
            let (min, max) = train
                .feature_values(channel, k)
                .filter(|v| !is_missing(*v))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if min > max {
                return Err(Error::Degenerate(format!("feature {name} has no observed values")));
            }
            features.push(NamedRange {
                name,
                range: FeatureRange { min, max },
            });
        }
    }
    Ok(NormalizationSpec { features })
}

/// `x -> (x - min) / (max - min)`; values outside the fitted range are kept.
pub fn apply_normalizer(spec: &NormalizationSpec, r: &StationRecords) -> Result<StationRecords> {
    let mut out = r.clone();
    for (channel, names) in channels(r) {
        for (k, name) in names.iter().enumerate() {
            let range = *spec.get(name)?;
            out.map_feature(channel, k, |v| range.apply(v));
        }
    }
    Ok(out)
}

pub fn invert_normalizer(spec: &NormalizationSpec, r: &StationRecords) -> Result<StationRecords> {
    let mut out = r.clone();
    for (channel, names) in channels(r) {
        for (k, name) in names.iter().enumerate() {
            let range = *spec.get(name)?;
            out.map_feature(channel, k, |v| range.invert(v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::RecordSchema;

    fn records(values: &[f64]) -> StationRecords {
        let schema = RecordSchema {
            stations: 1,
            history_len: values.len(),
            horizon: 1,
            n_obs: 1,
            n_nwp: 1,
            n_targets: 1,
        };
        let mut r = StationRecords::empty_grid(schema, vec![0]);
        for (h, &v) in values.iter().enumerate() {
            r.set(Channel::Obs, 0, 0, h, 0, v);
        }
        r.set(Channel::Nwp, 0, 0, 0, 0, 7.0);
        r.set(Channel::Target, 0, 0, 0, 0, 3.0);
        r
    }

    #[test]
    fn fits_min_and_max() {
        let spec = fit_normalizer(&records(&[0.0, 5.0, 10.0])).unwrap();
        assert_eq!(*spec.get("obs.f1").unwrap(), FeatureRange { min: 0.0, max: 10.0 });
        let n = apply_normalizer(&spec, &records(&[0.0, 5.0, 10.0])).unwrap();
        assert_eq!(n.get(Channel::Obs, 0, 0, 1, 0), 0.5);
    }

    #[test]
    fn constant_feature_is_flagged_and_maps_to_zero() {
        let r = records(&[1.0, 2.0]);
        let spec = fit_normalizer(&r).unwrap();
        let constant: Vec<&str> = spec.constant_features().collect();
        assert_eq!(constant, vec!["nwp.f1", "t1"]);
        let n = apply_normalizer(&spec, &r).unwrap();
        assert_eq!(n.get(Channel::Nwp, 0, 0, 0, 0), 0.0);
        assert_eq!(invert_normalizer(&spec, &n).unwrap(), r);
    }

    #[test]
    fn out_of_range_values_are_not_clipped() {
        let spec = fit_normalizer(&records(&[0.0, 10.0])).unwrap();
        let n = apply_normalizer(&spec, &records(&[12.0, -1.0])).unwrap();
        assert!((n.get(Channel::Obs, 0, 0, 0, 0) - 1.2).abs() < 1e-15);
        assert!((n.get(Channel::Obs, 0, 0, 1, 0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn unknown_feature_rejected() {
        let mut spec = fit_normalizer(&records(&[0.0, 1.0])).unwrap();
        spec.features.retain(|f| f.name != "t1");
        assert!(matches!(
            apply_normalizer(&spec, &records(&[0.0, 1.0])),
            Err(Error::UnknownFeature(name)) if name == "t1"
        ));
    }

    #[test]
    fn missing_cells_are_ignored_and_preserved() {
        let r = records(&[2.0, f64::NAN, 4.0]);
        let spec = fit_normalizer(&r).unwrap();
        assert_eq!(*spec.get("obs.f1").unwrap(), FeatureRange { min: 2.0, max: 4.0 });
        assert!(is_missing(apply_normalizer(&spec, &r).unwrap().get(
            Channel::Obs,
            0,
            0,
            1,
            0
        )));
    }
}
