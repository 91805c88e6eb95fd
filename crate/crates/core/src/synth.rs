//! Synthetic multi-station records with a known heteroskedastic law.
//!
//! Per station `s`, target `o` and absolute hour `tau`:
//!
//! ```text
//! mu*(tau)    = base_o + offset_s + A_season sin(2 pi tau / 8760)
//!               + A_day_o sin(2 pi (tau mod 24) / 24 + phase_o) + a(tau)
//! sigma*(tau) = sigma_base + sigma_amp |sin(2 pi tau / 24)|
//! y(tau)      = mu*(tau) + sigma*(tau) eps,  eps ~ N(0, 1)
//! ```
//!
//! `a` is a stationary AR(1) anomaly, so recent observations carry
//! information about the coming hours. Date `i` covers hours
//! `24 i .. 24 i + T_E + T_D`. The first `N3` NWP columns are
//! `mu* + nwp_bias + nwp_noise eta`; extra columns are weaker signals.
//! Observed columns are the targets followed by lagged, noisy copies.
//!
//! Every noise source draws from its own stream, so changing one scale
//! leaves the other draws untouched.

use std::f64::consts::PI;
use std::path::Path;

use duq_diff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Channel, RecordSchema, StationRecords};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::infer::{read_csv_rows, target_name, to_csv_bytes};

const HOURS_PER_YEAR: f64 = 8760.0;
const OBS_NOISE: f64 = 0.2;
const WEAK_NWP_NOISE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dates: usize,
    pub stations: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub n_obs: usize,
    pub n_nwp: usize,
    pub n_targets: usize,
    pub seasonal_amplitude: f64,
    pub daily_amplitude: f64,
    /// One offset per station; empty spreads offsets evenly over `[-2, 2]`.
    pub station_offsets: Vec<f64>,
    pub sigma_base: f64,
    pub sigma_amp: f64,
    pub anomaly_phi: f64,
    pub anomaly_std: f64,
    pub nwp_bias: f64,
    pub nwp_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dates: 400,
            stations: 4,
            history_len: 16,
            horizon: 12,
            n_obs: 4,
            n_nwp: 4,
            n_targets: 3,
            seasonal_amplitude: 3.0,
            daily_amplitude: 2.0,
            station_offsets: Vec::new(),
            sigma_base: 0.1,
            sigma_amp: 0.3,
            anomaly_phi: 0.97,
            anomaly_std: 1.0,
            nwp_bias: 0.5,
            nwp_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.schema().validate()?;
        if self.dates == 0 {
            return Err(Error::Config("dates must be at least 1".into()));
        }
        if self.n_obs < self.n_targets || self.n_nwp < self.n_targets {
            return Err(Error::Config("n_obs and n_nwp must be at least n_targets".into()));
        }
        if !(self.sigma_base > 0.0) || self.sigma_amp < 0.0 || self.nwp_noise < 0.0 || self.anomaly_std < 0.0 {
            return Err(Error::Config(
                "need sigma_base > 0 and non-negative sigma_amp, nwp_noise, anomaly_std".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.anomaly_phi) {
            return Err(Error::Config("anomaly_phi must lie in [0, 1)".into()));
        }
        if !self.station_offsets.is_empty() && self.station_offsets.len() != self.stations {
            return Err(Error::Config(format!(
                "{} station offsets for {} stations",
                self.station_offsets.len(),
                self.stations
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> RecordSchema {
        RecordSchema {
            stations: self.stations,
            history_len: self.history_len,
            horizon: self.horizon,
            n_obs: self.n_obs,
            n_nwp: self.n_nwp,
            n_targets: self.n_targets,
        }
    }

    pub fn sigma_star(&self, tau: usize) -> f64 {
        self.sigma_base + self.sigma_amp * (2.0 * PI * tau as f64 / 24.0).sin().abs()
    }

    fn offset(&self, s: usize) -> f64 {
        if let Some(v) = self.station_offsets.get(s) {
            *v
        } else if self.stations == 1 {
            0.0
        } else {
            -2.0 + 4.0 * s as f64 / (self.stations - 1) as f64
        }
    }

    /// Deterministic part of the mean, without the anomaly.
    fn climatology(&self, s: usize, o: usize, tau: f64) -> f64 {
        let base = 10.0 * o as f64;
        let season = self.seasonal_amplitude * (2.0 * PI * tau / HOURS_PER_YEAR).sin();
        let day_amp = self.daily_amplitude * (1.0 + 0.25 * o as f64);
        let day = day_amp * (2.0 * PI * (tau % 24.0) / 24.0 + o as f64 * PI / 3.0).sin();
        base + self.offset(s) + season + day
    }
}

/// Truth behind a generated record set, each `(I, T_D, S, N3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub mu_star: Tensor,
    pub sigma_star: Tensor,
    pub eps: Tensor,
    pub date_ids: Vec<usize>,
}

enum Stream {
    Anomaly = 1,
    Target = 2,
    Nwp = 3,
    Obs = 4,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate(config: &SynthConfig) -> Result<(StationRecords, SynthTruth)> {
    config.validate()?;
    let c = config;
    let (s_n, n3) = (c.stations, c.n_targets);
    let lags = c.n_obs.div_ceil(n3);
    let pad = lags;
    let span = 24 * (c.dates - 1) + c.history_len + c.horizon;
    let len = pad + span;
    let idx = |tau: usize, s: usize, o: usize| (tau * s_n + s) * n3 + o;

    // continuous hourly series, index tau + pad
    let mut anomaly_rng = stream(c.seed, Stream::Anomaly);
    let mut target_rng = stream(c.seed, Stream::Target);
    let mut mu = vec![0.0; len * s_n * n3];
    let mut eps = vec![0.0; len * s_n * n3];
    let innovation = (1.0 - c.anomaly_phi * c.anomaly_phi).sqrt() * c.anomaly_std;
    for s in 0..s_n {
        for o in 0..n3 {
            let mut a = c.anomaly_std * normal(&mut anomaly_rng);
            for k in 0..len {
                if k > 0 {
                    a = c.anomaly_phi * a + innovation * normal(&mut anomaly_rng);
                }
                let tau = k as f64 - pad as f64;
                mu[idx(k, s, o)] = c.climatology(s, o, tau) + a;
                eps[idx(k, s, o)] = normal(&mut target_rng);
            }
        }
    }
    let sigma_at = |k: usize| c.sigma_star(k.saturating_sub(pad));
    let y = |k: usize, s: usize, o: usize| mu[idx(k, s, o)] + sigma_at(k) * eps[idx(k, s, o)];

    let mut obs_rng = stream(c.seed, Stream::Obs);
    let mut obs_noise = vec![0.0; len * s_n * c.n_obs];
    obs_noise.iter_mut().for_each(|v| *v = normal(&mut obs_rng));

    let mut nwp_rng = stream(c.seed, Stream::Nwp);
    let date_ids: Vec<usize> = (0..c.dates).collect();
    let mut records = StationRecords::empty_grid(c.schema(), date_ids.clone());
    let cells = c.dates * c.horizon * s_n * n3;
    let (mut mu_t, mut sigma_t, mut eps_t) = (vec![0.0; cells], vec![0.0; cells], vec![0.0; cells]);
    for d in 0..c.dates {
        let start = 24 * d + pad;
        for s in 0..s_n {
            for h in 0..c.history_len {
                let k = start + h;
                for f in 0..c.n_obs {
                    let (o, lag) = (f % n3, f / n3);
                    let v = if lag == 0 {
                        y(k, s, o)
                    } else {
                        y(k - lag, s, o) + OBS_NOISE * obs_noise[(k * s_n + s) * c.n_obs + f]
                    };
                    records.set(Channel::Obs, d, s, h, f, v);
                }
            }
        }
        for t in 0..c.horizon {
            let k = start + c.history_len + t;
            for s in 0..s_n {
                for f in 0..c.n_nwp {
                    let eta = normal(&mut nwp_rng);
                    let o = f % n3;
                    let m = mu[idx(k, s, o)];
                    let v = if f < n3 {
                        m + c.nwp_bias + c.nwp_noise * eta
                    } else {
                        0.5 * (m - 10.0 * o as f64) + WEAK_NWP_NOISE * eta
                    };
                    records.set(Channel::Nwp, d, s, t, f, v);
                }
                for o in 0..n3 {
                    records.set(Channel::Target, d, s, t, o, y(k, s, o));
                    let cell = ((d * c.horizon + t) * s_n + s) * n3 + o;
                    mu_t[cell] = mu[idx(k, s, o)];
                    sigma_t[cell] = sigma_at(k);
                    eps_t[cell] = eps[idx(k, s, o)];
                }
            }
        }
    }
    let shape = vec![c.dates, c.horizon, s_n, n3];
    let truth = SynthTruth {
        mu_star: Tensor::new(shape.clone(), mu_t)?,
        sigma_star: Tensor::new(shape.clone(), sigma_t)?,
        eps: Tensor::new(shape, eps_t)?,
        date_ids,
    };
    Ok((records, truth))
}

/// Per station-day probability that gives `fraction` of dates at least one
/// blanked station: `1 - (1 - fraction)^(1/S)`.
pub fn block_rate_for_dropped_fraction(fraction: f64, stations: usize) -> f64 {
    1.0 - (1.0 - fraction).powf(1.0 / stations as f64)
}

/// Blanks whole station-days with probability `block_rate` and then single
/// cells with probability `local_rate`.
pub fn inject_missing(records: &StationRecords, block_rate: f64, local_rate: f64, seed: u64) -> Result<StationRecords> {
    for (name, r) in [("block_rate", block_rate), ("local_rate", local_rate)] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
        }
    }
    let mut out = records.clone();
    let s = records.schema().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = [
        (Channel::Obs, s.history_len),
        (Channel::Nwp, s.horizon),
        (Channel::Target, s.horizon),
    ];
    for d in 0..records.dates() {
        for st in 0..s.stations {
            let block = rng.random::<f64>() < block_rate;
            for (ch, hours) in channels {
                for h in 0..hours {
                    let row = out.row_mut(ch, d, st, h);
                    for v in row.iter_mut() {
                        if block || rng.random::<f64>() < local_rate {
                            *v = f64::NAN;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub date_idx: usize,
    pub station_id: usize,
    pub step: usize,
    pub target: String,
    pub mu_star: f64,
    pub sigma_star: f64,
}

impl SynthTruth {
    pub fn rows(&self) -> Vec<TruthRow> {
        let sh = self.mu_star.shape();
        let (steps, stations, n3) = (sh[1], sh[2], sh[3]);
        let mut rows = Vec::with_capacity(self.mu_star.len());
        for (d, &date_idx) in self.date_ids.iter().enumerate() {
            for s in 0..stations {
                for t in 0..steps {
                    for o in 0..n3 {
                        let k = ((d * steps + t) * stations + s) * n3 + o;
                        rows.push(TruthRow {
                            date_idx,
                            station_id: s,
                            step: t,
                            target: target_name(o),
                            mu_star: self.mu_star.data()[k],
                            sigma_star: self.sigma_star.data()[k],
                        });
                    }
                }
            }
        }
        rows
    }

    /// `date_idx,station_id,step,target,mu_star,sigma_star`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &to_csv_bytes(path, &self.rows())?)
    }
}

pub fn read_truth_csv(path: impl AsRef<Path>) -> Result<Vec<TruthRow>> {
    read_csv_rows(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{drop_block_missing, impute_local_missing, is_missing, load_records, save_records};

    fn small() -> SynthConfig {
        SynthConfig {
            dates: 6,
            stations: 3,
            history_len: 8,
            horizon: 6,
            n_obs: 5,
            n_nwp: 4,
            n_targets: 2,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&SynthConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn targets_follow_the_law() {
        let (r, t) = generate(&small()).unwrap();
        let c = small();
        for d in 0..c.dates {
            for step in 0..c.horizon {
                for s in 0..c.stations {
                    for o in 0..c.n_targets {
                        let k = ((d * c.horizon + step) * c.stations + s) * c.n_targets + o;
                        let want = t.mu_star.data()[k] + t.sigma_star.data()[k] * t.eps.data()[k];
                        assert!((r.get(Channel::Target, d, s, step, o) - want).abs() < 1e-12);
                        assert_eq!(t.sigma_star.data()[k], c.sigma_star(24 * d + c.history_len + step));
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_nwp_equals_true_mean() {
        let c = SynthConfig {
            sigma_amp: 0.0,
            nwp_noise: 0.0,
            nwp_bias: 0.0,
            ..small()
        };
        let (r, t) = generate(&c).unwrap();
        for d in 0..c.dates {
            for step in 0..c.horizon {
                for s in 0..c.stations {
                    for o in 0..c.n_targets {
                        let k = ((d * c.horizon + step) * c.stations + s) * c.n_targets + o;
                        assert_eq!(r.get(Channel::Nwp, d, s, step, o), t.mu_star.data()[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn overlapping_dates_share_the_series() {
        // T_E + T_D = 30 > 24: the first history hours of date 1 are hours 24..
        let c = SynthConfig {
            history_len: 20,
            horizon: 10,
            ..small()
        };
        let (r, _) = generate(&c).unwrap();
        // hour 24 of date 0 is forecast step 4; hour 0 of date 1 is history 0
        assert_eq!(r.get(Channel::Target, 0, 1, 4, 0), r.get(Channel::Obs, 1, 1, 0, 0));
    }

    #[test]
    fn nwp_noise_only_scales_its_own_stream() {
        let (a, ta) = generate(&small()).unwrap();
        let (b, tb) = generate(&SynthConfig {
            nwp_noise: 1.0,
            ..small()
        })
        .unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.get(Channel::Obs, 2, 1, 3, 0), b.get(Channel::Obs, 2, 1, 3, 0));
        assert_ne!(a.get(Channel::Nwp, 2, 1, 3, 0), b.get(Channel::Nwp, 2, 1, 3, 0));
    }

    #[test]
    fn injection_rates() {
        let (r, _) = generate(&small()).unwrap();
        assert_eq!(inject_missing(&r, 0.0, 0.0, 1).unwrap(), r);
        assert!(inject_missing(&r, 1.0, 0.0, 1).is_err());
        assert!(inject_missing(&r, 0.0, -0.1, 1).is_err());
        let holed = inject_missing(&r, 0.3, 0.05, 2).unwrap();
        assert!(holed.missing_count() > 0);
        let repaired = impute_local_missing(&drop_block_missing(&holed).records).unwrap();
        assert_eq!(repaired.missing_count(), 0);
    }

    #[test]
    fn reference_block_rate_drops_about_forty_days() {
        let schema_cfg = SynthConfig {
            dates: 1188,
            stations: 10,
            history_len: 1,
            horizon: 1,
            n_obs: 1,
            n_nwp: 1,
            n_targets: 1,
            ..SynthConfig::default()
        };
        let mut r = StationRecords::empty_grid(schema_cfg.schema(), (0..1188).collect());
        for d in 0..1188 {
            for s in 0..10 {
                r.set(Channel::Obs, d, s, 0, 0, 1.0);
                r.set(Channel::Nwp, d, s, 0, 0, 1.0);
                r.set(Channel::Target, d, s, 0, 0, 1.0);
            }
        }
        let rate = block_rate_for_dropped_fraction(40.0 / 1188.0, 10);
        let runs = 20;
        let dropped: usize = (0..runs)
            .map(|seed| {
                drop_block_missing(&inject_missing(&r, rate, 0.0, seed).unwrap())
                    .dropped_dates
                    .len()
            })
            .sum();
        let avg = dropped as f64 / runs as f64;
        // binomial sd per run is about 6.2, so the mean of 20 runs has sd 1.4
        assert!((avg - 40.0).abs() < 5.0, "average dropped {avg}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (r, t) = generate(&small()).unwrap();
        let holed = inject_missing(&r, 0.1, 0.05, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("records.csv");
        save_records(&p, &holed).unwrap();
        let back = load_records(&p, &small().schema()).unwrap();
        assert_eq!(back.missing_count(), holed.missing_count());
        for d in 0..back.dates() {
            for s in 0..3 {
                for h in 0..6 {
                    for (a, b) in back
                        .row(Channel::Nwp, d, s, h)
                        .iter()
                        .zip(holed.row(Channel::Nwp, d, s, h))
                    {
                        assert!(a == b || (is_missing(*a) && is_missing(*b)));
                    }
                }
            }
        }
        let tp = dir.path().join("truth.csv");
        t.write_csv(&tp).unwrap();
        assert_eq!(read_truth_csv(&tp).unwrap(), t.rows());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&SynthConfig {
            sigma_base: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig { stations: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig {
            station_offsets: vec![1.0],
            ..small()
        })
        .is_err());
    }
}
