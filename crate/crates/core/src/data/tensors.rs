use std::path::Path;

use duq_diff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::container::{read_container, write_container, Magic};
use super::normalize::NormalizationSpec;
use super::records::{is_missing, Channel, StationRecords};
use crate::error::{Error, Result};

/// Number of id columns ahead of the NWP features in decoder inputs.
pub const ID_COLUMNS: usize = 2;
pub const TIME_ID_COLUMN: usize = 0;
pub const STATION_ID_COLUMN: usize = 1;

/// The three aligned model tensors.
///
/// * encoder: `(I, T_E, S, N1)` normalised observations
/// * decoder: `(I, T_D, S, 2 + nwp)` laid out as `[TimeID, StaID, NWP...]`
/// * targets: `(I, T_D, S, N3)` normalised ground truth
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetTensors {
    encoder: Tensor,
    decoder: Tensor,
    targets: Tensor,
    spec: NormalizationSpec,
    date_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    spec: NormalizationSpec,
    date_ids: Vec<usize>,
}

/// Which input channel [`mask_channel`] zeroes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mask {
    Nwp,
    #[serde(alias = "obs")]
    Observations,
}

impl std::str::FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nwp" => Ok(Mask::Nwp),
            "obs" | "observations" => Ok(Mask::Observations),
            other => Err(Error::Config(format!("unknown mask `{other}` (expected nwp or obs)"))),
        }
    }
}

/// Assembles tensors from imputed, normalised records.
pub fn build_tensors(
    r: &StationRecords,
    spec: &NormalizationSpec,
    history_len: usize,
    horizon: usize,
) -> Result<DatasetTensors> {
    let s = r.schema();
    if s.history_len != history_len || s.horizon != horizon {
        return Err(Error::Config(format!(
            "records hold {}+{} hours per date, requested T_E={history_len}, T_D={horizon}",
            s.history_len, s.horizon
        )));
    }
    for name in s.obs_names().iter().chain(&s.nwp_names()).chain(&s.target_names()) {
        spec.get(name)?;
    }
    let (dates, stations) = (r.dates(), s.stations);
    let n2 = ID_COLUMNS + s.n_nwp;
    let mut encoder = Vec::with_capacity(dates * history_len * stations * s.n_obs);
    let mut decoder = Vec::with_capacity(dates * horizon * stations * n2);
    let mut targets = Vec::with_capacity(dates * horizon * stations * s.n_targets);
    for d in 0..dates {
        let incomplete = || Error::IncompleteGrid {
            date_id: r.date_ids()[d],
        };
        for t in 0..history_len {
            for st in 0..stations {
                let row = r.row(Channel::Obs, d, st, t);
                if row.iter().any(|v| is_missing(*v)) {
                    return Err(incomplete());
                }
                encoder.extend_from_slice(row);
            }
        }
        for t in 0..horizon {
            for st in 0..stations {
                let nwp = r.row(Channel::Nwp, d, st, t);
                let y = r.row(Channel::Target, d, st, t);
                if nwp.iter().chain(y).any(|v| is_missing(*v)) {
                    return Err(incomplete());
                }
                decoder.push(t as f64);
                decoder.push(st as f64);
                decoder.extend_from_slice(nwp);
                targets.extend_from_slice(y);
            }
        }
    }
    Ok(DatasetTensors {
        encoder: Tensor::new(vec![dates, history_len, stations, s.n_obs], encoder)?,
        decoder: Tensor::new(vec![dates, horizon, stations, n2], decoder)?,
        targets: Tensor::new(vec![dates, horizon, stations, s.n_targets], targets)?,
        spec: spec.clone(),
        date_ids: r.date_ids().to_vec(),
    })
}

impl DatasetTensors {
    pub fn encoder(&self) -> &Tensor {
        &self.encoder
    }

    pub fn decoder(&self) -> &Tensor {
        &self.decoder
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn spec(&self) -> &NormalizationSpec {
        &self.spec
    }

    pub fn date_ids(&self) -> &[usize] {
        &self.date_ids
    }

    pub fn dates(&self) -> usize {
        self.encoder.shape()[0]
    }

    pub fn history_len(&self) -> usize {
        self.encoder.shape()[1]
    }

    pub fn stations(&self) -> usize {
        self.encoder.shape()[2]
    }

    pub fn n_obs(&self) -> usize {
        self.encoder.shape()[3]
    }

    pub fn horizon(&self) -> usize {
        self.decoder.shape()[1]
    }

    /// Decoder width including the two id columns.
    pub fn decoder_width(&self) -> usize {
        self.decoder.shape()[3]
    }

    pub fn n_nwp(&self) -> usize {
        self.decoder_width() - ID_COLUMNS
    }

    pub fn n_targets(&self) -> usize {
        self.targets.shape()[3]
    }

    pub fn sample(&self, date: usize, station: usize) -> TrainingSample<'_> {
        assert!(
            date < self.dates() && station < self.stations(),
            "sample index out of range"
        );
        TrainingSample {
            tensors: self,
            date,
            station,
        }
    }

    /// Every `(date, station)` pair, date-major.
    pub fn all_samples(&self) -> Vec<TrainingSample<'_>> {
        (0..self.dates())
            .flat_map(|i| (0..self.stations()).map(move |s| (i, s)))
            .map(|(i, s)| self.sample(i, s))
            .collect()
    }

    /// Restricts to a subset of dates, by position.
    pub fn select_dates(&self, positions: &[usize]) -> DatasetTensors {
        let pick = |t: &Tensor| {
            let per: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(per * positions.len());
            for &p in positions {
                data.extend_from_slice(&t.data()[p * per..(p + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = positions.len();
            Tensor::new(shape, data).expect("extent bookkeeping")
        };
        DatasetTensors {
            encoder: pick(&self.encoder),
            decoder: pick(&self.decoder),
            targets: pick(&self.targets),
            spec: self.spec.clone(),
            date_ids: positions.iter().map(|&p| self.date_ids[p]).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_string(&TensorMeta {
            spec: self.spec.clone(),
            date_ids: self.date_ids.clone(),
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        write_container(
            path.as_ref(),
            Magic::Tensors,
            &meta,
            &[
                ("encoder", &self.encoder),
                ("decoder", &self.decoder),
                ("targets", &self.targets),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = read_container(path, Magic::Tensors)?;
        let bad = |message: String| Error::Container {
            path: path.to_path_buf(),
            message,
        };
        let meta: TensorMeta = serde_json::from_str(&c.meta).map_err(|e| bad(format!("metadata: {e}")))?;
        let mut take = |name: &str| c.take(name).ok_or_else(|| bad(format!("missing entry `{name}`")));
        let (encoder, decoder, targets) = (take("encoder")?, take("decoder")?, take("targets")?);
        let out = DatasetTensors {
            encoder,
            decoder,
            targets,
            spec: meta.spec,
            date_ids: meta.date_ids,
        };
        out.check().map_err(|e| bad(e.to_string()))?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let (e, d, y) = (self.encoder.shape(), self.decoder.shape(), self.targets.shape());
        let ok = e.len() == 4
            && d.len() == 4
            && y.len() == 4
            && e[0] == d[0]
            && d[0] == y[0]
            && e[2] == d[2]
            && d[2] == y[2]
            && d[1] == y[1]
            && d[3] > ID_COLUMNS
            && self.date_ids.len() == e[0];
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "inconsistent tensors encoder {e:?}, decoder {d:?}, targets {y:?}, {} date ids",
                self.date_ids.len()
            )))
        }
    }
}

/// A view of one `(date, station)` instance; rows are borrowed, never copied.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSample<'a> {
    tensors: &'a DatasetTensors,
    pub date: usize,
    pub station: usize,
}

impl<'a> TrainingSample<'a> {
    fn row(t: &'a Tensor, date: usize, step: usize, station: usize) -> &'a [f64] {
        let s = t.shape();
        let start = ((date * s[1] + step) * s[2] + station) * s[3];
        &t.data()[start..start + s[3]]
    }

    pub fn tensors(&self) -> &'a DatasetTensors {
        self.tensors
    }

    /// Observed features at encoder step `t`.
    pub fn encoder_row(&self, t: usize) -> &'a [f64] {
        Self::row(&self.tensors.encoder, self.date, t, self.station)
    }

    /// `[TimeID, StaID, NWP...]` at decoder step `t`.
    pub fn decoder_row(&self, t: usize) -> &'a [f64] {
        Self::row(&self.tensors.decoder, self.date, t, self.station)
    }

    pub fn nwp_row(&self, t: usize) -> &'a [f64] {
        &self.decoder_row(t)[ID_COLUMNS..]
    }

    pub fn target_row(&self, t: usize) -> &'a [f64] {
        Self::row(&self.tensors.targets, self.date, t, self.station)
    }

    pub fn date_id(&self) -> usize {
        self.tensors.date_ids[self.date]
    }
}

/// `batch_size` independent `(i, s)` draws with replacement.
pub fn sample_batch<'a>(tensors: &'a DatasetTensors, batch_size: usize, rng: &mut impl Rng) -> Vec<TrainingSample<'a>> {
    (0..batch_size)
        .map(|_| {
            let i = rng.random_range(0..tensors.dates());
            let s = rng.random_range(0..tensors.stations());
            tensors.sample(i, s)
        })
        .collect()
}

/// Copy with either the NWP columns of the decoder input or the whole encoder
/// input set to zero; id columns are kept.
pub fn mask_channel(tensors: &DatasetTensors, which: Mask) -> DatasetTensors {
    let mut out = tensors.clone();
    match which {
        Mask::Observations => out.encoder.data_mut().fill(0.0),
        Mask::Nwp => {
            let width = out.decoder_width();
            for row in out.decoder.data_mut().chunks_mut(width) {
                row[ID_COLUMNS..].fill(0.0);
            }
        }
    }
    out
}
