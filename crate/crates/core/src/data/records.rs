use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column counts and grid extents of a record set.
///
/// Each date carries `history_len` observation hours followed by `horizon`
/// forecast hours for every station. By convention the first `n_targets`
/// NWP columns are the NWP forecasts of the targets, in target order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSchema {
    pub stations: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub n_obs: usize,
    pub n_nwp: usize,
    pub n_targets: usize,
}

impl RecordSchema {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stations", self.stations),
            ("history_len", self.history_len),
            ("horizon", self.horizon),
            ("n_obs", self.n_obs),
            ("n_nwp", self.n_nwp),
            ("n_targets", self.n_targets),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn obs_names(&self) -> Vec<String> {
        (1..=self.n_obs).map(|k| format!("obs.f{k}")).collect()
    }

    pub fn nwp_names(&self) -> Vec<String> {
        (1..=self.n_nwp).map(|k| format!("nwp.f{k}")).collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        (1..=self.n_targets).map(|k| format!("t{k}")).collect()
    }

    fn obs_per_date(&self) -> usize {
        self.stations * self.history_len * self.n_obs
    }

    fn nwp_per_date(&self) -> usize {
        self.stations * self.horizon * self.n_nwp
    }

    fn targets_per_date(&self) -> usize {
        self.stations * self.horizon * self.n_targets
    }
}

/// Which block of a station-day a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Obs,
    Nwp,
    Target,
}

/// Per-date, per-station, per-hour records with `NaN` marking missing cells.
///
/// Storage is `[date][station][hour][feature]` for each of the three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct StationRecords {
    schema: RecordSchema,
    date_ids: Vec<usize>,
    obs: Vec<f64>,
    nwp: Vec<f64>,
    targets: Vec<f64>,
}

pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

impl StationRecords {
    /// All cells missing.
    pub fn empty_grid(schema: RecordSchema, date_ids: Vec<usize>) -> Self {
        let n = date_ids.len();
        Self {
            obs: vec![f64::NAN; n * schema.obs_per_date()],
            nwp: vec![f64::NAN; n * schema.nwp_per_date()],
            targets: vec![f64::NAN; n * schema.targets_per_date()],
            schema,
            date_ids,
        }
    }

    pub fn schema(&self) -> &RecordSchema {
        &self.schema
    }

    /// Original date identifiers, in storage order.
    pub fn date_ids(&self) -> &[usize] {
        &self.date_ids
    }

    pub fn dates(&self) -> usize {
        self.date_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.date_ids.is_empty()
    }

    fn dims(&self, channel: Channel) -> (usize, usize) {
        let s = &self.schema;
        match channel {
            Channel::Obs => (s.history_len, s.n_obs),
            Channel::Nwp => (s.horizon, s.n_nwp),
            Channel::Target => (s.horizon, s.n_targets),
        }
    }

    fn buf(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::Obs => &self.obs,
            Channel::Nwp => &self.nwp,
            Channel::Target => &self.targets,
        }
    }

    fn buf_mut(&mut self, channel: Channel) -> &mut Vec<f64> {
        match channel {
            Channel::Obs => &mut self.obs,
            Channel::Nwp => &mut self.nwp,
            Channel::Target => &mut self.targets,
        }
    }

    fn index(&self, channel: Channel, date: usize, station: usize, hour: usize, feature: usize) -> usize {
        let (hours, width) = self.dims(channel);
        debug_assert!(station < self.schema.stations && hour < hours && feature < width);
        ((date * self.schema.stations + station) * hours + hour) * width + feature
    }

    /// Value at a cell; `hour` counts within the channel (0..history_len for
    /// observations, 0..horizon for NWP and targets).
    pub fn get(&self, channel: Channel, date: usize, station: usize, hour: usize, feature: usize) -> f64 {
        self.buf(channel)[self.index(channel, date, station, hour, feature)]
    }

    pub fn set(&mut self, channel: Channel, date: usize, station: usize, hour: usize, feature: usize, v: f64) {
        let k = self.index(channel, date, station, hour, feature);
        self.buf_mut(channel)[k] = v;
    }

    /// Contiguous feature row of one hour.
    pub fn row(&self, channel: Channel, date: usize, station: usize, hour: usize) -> &[f64] {
        let (_, width) = self.dims(channel);
        let k = self.index(channel, date, station, hour, 0);
        &self.buf(channel)[k..k + width]
    }

    pub fn row_mut(&mut self, channel: Channel, date: usize, station: usize, hour: usize) -> &mut [f64] {
        let (_, width) = self.dims(channel);
        let k = self.index(channel, date, station, hour, 0);
        &mut self.buf_mut(channel)[k..k + width]
    }

    pub fn missing_count(&self) -> usize {
        [&self.obs, &self.nwp, &self.targets]
            .iter()
            .map(|b| b.iter().filter(|v| is_missing(**v)).count())
            .sum()
    }

    /// Values of one feature of one channel, in storage order, for fitting.
    pub(crate) fn feature_values(&self, channel: Channel, feature: usize) -> impl Iterator<Item = f64> + '_ {
        let (_, width) = self.dims(channel);
        self.buf(channel).iter().skip(feature).step_by(width).copied()
    }

    pub(crate) fn map_feature(&mut self, channel: Channel, feature: usize, f: impl Fn(f64) -> f64) {
        let (_, width) = self.dims(channel);
        for v in self.buf_mut(channel).iter_mut().skip(feature).step_by(width) {
            *v = f(*v);
        }
    }

    /// Subset of dates, by storage position.
    pub fn select_dates(&self, positions: &[usize]) -> StationRecords {
        let s = &self.schema;
        let mut out = StationRecords::empty_grid(s.clone(), positions.iter().map(|&p| self.date_ids[p]).collect());
        for (dst, &src) in positions.iter().enumerate() {
            for channel in [Channel::Obs, Channel::Nwp, Channel::Target] {
                let per = match channel {
                    Channel::Obs => s.obs_per_date(),
                    Channel::Nwp => s.nwp_per_date(),
                    Channel::Target => s.targets_per_date(),
                };
                let from = &self.buf(channel)[src * per..(src + 1) * per];
                out.buf_mut(channel)[dst * per..(dst + 1) * per].copy_from_slice(from);
            }
        }
        out
    }

    /// Splits dates chronologically into consecutive blocks of the given sizes.
    pub fn split_dates(&self, sizes: &[usize]) -> Result<Vec<StationRecords>> {
        let total: usize = sizes.iter().sum();
        if total > self.dates() {
            return Err(Error::Config(format!(
                "split sizes {sizes:?} exceed {} available dates",
                self.dates()
            )));
        }
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let positions: Vec<usize> = (start..start + n).collect();
                start += n;
                self.select_dates(&positions)
            })
            .collect())
    }

    fn station_day_series(&self, channel: Channel, date: usize, station: usize, feature: usize) -> Vec<f64> {
        let (hours, _) = self.dims(channel);
        (0..hours)
            .map(|h| self.get(channel, date, station, h, feature))
            .collect()
    }
}

/// Outcome of [`drop_block_missing`].
#[derive(Clone, Debug)]
pub struct BlockDrop {
    pub records: StationRecords,
    pub dropped_dates: Vec<usize>,
}

impl BlockDrop {
    /// Set when every date was dropped.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Removes every date on which some station lost a whole day of data.
///
/// A station-day counts as lost when any feature series of any channel is
/// entirely missing for that day; such a series cannot be interpolated.
/// Dropping is per date across all stations so tensors stay rectangular.
pub fn drop_block_missing(r: &StationRecords) -> BlockDrop {
    let s = r.schema();
    let mut keep = Vec::new();
    let mut dropped_dates = Vec::new();
    for d in 0..r.dates() {
        let lost = (0..s.stations).any(|st| {
            [Channel::Obs, Channel::Nwp, Channel::Target].into_iter().any(|ch| {
                let (hours, width) = r.dims(ch);
                (0..width).any(|f| (0..hours).all(|h| is_missing(r.get(ch, d, st, h, f))))
            })
        });
        if lost {
            dropped_dates.push(r.date_ids[d]);
        } else {
            keep.push(d);
        }
    }
    BlockDrop {
        records: r.select_dates(&keep),
        dropped_dates,
    }
}

/// Fills gaps (`NaN`) by linear interpolation between the nearest present
/// neighbours; leading and trailing gaps hold the nearest present value.
pub fn interpolate_local_missing(series: &[f64]) -> Result<Vec<f64>> {
    let present: Vec<usize> = (0..series.len()).filter(|&k| !is_missing(series[k])).collect();
    let (&first, &last) = match (present.first(), present.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::AllMissing),
    };
    let mut out = series.to_vec();
    out[..first].fill(series[first]);
    out[last + 1..].fill(series[last]);
    for w in present.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (va, vb) = (series[a], series[b]);
        for k in a + 1..b {
            let frac = (k - a) as f64 / (b - a) as f64;
            out[k] = va + (vb - va) * frac;
        }
    }
    Ok(out)
}

/// Applies [`interpolate_local_missing`] to every per-day feature series.
pub fn impute_local_missing(r: &StationRecords) -> Result<StationRecords> {
    let mut out = r.clone();
    let s = r.schema().clone();
    for ch in [Channel::Obs, Channel::Nwp, Channel::Target] {
        let (hours, width) = r.dims(ch);
        for d in 0..r.dates() {
            for st in 0..s.stations {
                for f in 0..width {
                    let series = r.station_day_series(ch, d, st, f);
                    if !series.iter().any(|v| is_missing(*v)) {
                        continue;
                    }
                    let filled = interpolate_local_missing(&series)
                        .map_err(|_| Error::IncompleteGrid { date_id: r.date_ids[d] })?;
                    for (h, v) in filled.into_iter().enumerate().take(hours) {
                        out.set(ch, d, st, h, f, v);
                    }
                }
            }
        }
    }
    Ok(out)
}
