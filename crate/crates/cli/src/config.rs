//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};
use duq_core::data::Mask;
use duq_core::infer::EnsembleVariance;
use duq_core::loss::LossKind;
use duq_core::model::ModelConfig;
use duq_core::pipeline::SplitFractions;
use duq_core::synth::SynthConfig;
use duq_core::train::{AdamConfig, TrainConfig};

use crate::Usage;

/// Every setting of every command. Defaults follow the reference setup:
/// 1188 days of 10 stations, 28 observed and 37 forecast hours, 9 observed
/// features, 29 NWP features, 3 targets, a [300, 300] network, batch 512,
/// at most 10000 iterations, validation every 50, patience 10.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub dates: usize,
    pub stations: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub n_obs: usize,
    pub n_nwp: usize,
    pub n_targets: usize,
    pub seasonal_amplitude: f64,
    pub daily_amplitude: f64,
    pub station_offsets: Vec<f64>,
    pub sigma_base: f64,
    pub sigma_amp: f64,
    pub anomaly_phi: f64,
    pub anomaly_std: f64,
    pub nwp_bias: f64,
    pub nwp_noise: f64,
    pub block_rate: f64,
    pub local_rate: f64,

    pub train_fraction: f64,
    pub val_fraction: f64,

    pub hidden_sizes: Vec<usize>,
    pub embed_dim_station: usize,
    pub embed_dim_time: usize,
    pub min_variance: f64,

    pub batch_size: usize,
    pub max_iterations: usize,
    pub validation_interval: usize,
    pub early_stop_tolerance: usize,
    pub loss: LossKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// `0` disables clipping.
    pub clip_norm: f64,
    pub ensemble_size: usize,
    pub mask_nwp: bool,
    pub mask_obs: bool,

    pub z: f64,
    pub variance_mode: EnsembleVariance,

    pub records: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub members: Vec<PathBuf>,
    pub forecast: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let adam = AdamConfig::default();
        Self {
            seed: 0,
            dates: 1188,
            stations: 10,
            history_len: 28,
            horizon: 37,
            n_obs: 9,
            n_nwp: 29,
            n_targets: 3,
            seasonal_amplitude: synth.seasonal_amplitude,
            daily_amplitude: synth.daily_amplitude,
            station_offsets: Vec::new(),
            sigma_base: synth.sigma_base,
            sigma_amp: synth.sigma_amp,
            anomaly_phi: synth.anomaly_phi,
            anomaly_std: synth.anomaly_std,
            nwp_bias: synth.nwp_bias,
            nwp_noise: synth.nwp_noise,
            // about 40 of 1188 days lose a station
            block_rate: 0.0034,
            local_rate: 0.01,
            train_fraction: SplitFractions::default().train,
            val_fraction: SplitFractions::default().val,
            hidden_sizes: vec![300, 300],
            embed_dim_station: 2,
            embed_dim_time: 2,
            min_variance: 1e-6,
            batch_size: train.batch_size,
            max_iterations: train.max_iterations,
            validation_interval: train.validation_interval,
            early_stop_tolerance: train.early_stop_tolerance,
            loss: train.loss,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            clip_norm: train.clip_norm.unwrap_or(0.0),
            ensemble_size: 1,
            mask_nwp: false,
            mask_obs: false,
            z: 0.1,
            variance_mode: EnsembleVariance::default(),
            records: None,
            truth: None,
            data_dir: None,
            test_data: None,
            members: Vec::new(),
            forecast: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!(Usage(format!("config key `{key}`: cannot parse `{value}`: {e}"))))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Applies one setting; unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "dates" => self.dates = parse(key, v)?,
            "stations" => self.stations = parse(key, v)?,
            "history_len" => self.history_len = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "n_obs" => self.n_obs = parse(key, v)?,
            "n_nwp" => self.n_nwp = parse(key, v)?,
            "n_targets" => self.n_targets = parse(key, v)?,
            "seasonal_amplitude" => self.seasonal_amplitude = parse(key, v)?,
            "daily_amplitude" => self.daily_amplitude = parse(key, v)?,
            "station_offsets" => self.station_offsets = parse_list(key, v)?,
            "sigma_base" => self.sigma_base = parse(key, v)?,
            "sigma_amp" => self.sigma_amp = parse(key, v)?,
            "anomaly_phi" => self.anomaly_phi = parse(key, v)?,
            "anomaly_std" => self.anomaly_std = parse(key, v)?,
            "nwp_bias" => self.nwp_bias = parse(key, v)?,
            "nwp_noise" => self.nwp_noise = parse(key, v)?,
            "block_rate" => self.block_rate = parse(key, v)?,
            "local_rate" => self.local_rate = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "hidden_sizes" => self.hidden_sizes = parse_list(key, v)?,
            "embed_dim_station" => self.embed_dim_station = parse(key, v)?,
            "embed_dim_time" => self.embed_dim_time = parse(key, v)?,
            "min_variance" => self.min_variance = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_iterations" => self.max_iterations = parse(key, v)?,
            "validation_interval" => self.validation_interval = parse(key, v)?,
            "early_stop_tolerance" => self.early_stop_tolerance = parse(key, v)?,
            "loss" => self.loss = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "ensemble_size" => self.ensemble_size = parse(key, v)?,
            "mask_nwp" => self.mask_nwp = parse(key, v)?,
            "mask_obs" => self.mask_obs = parse(key, v)?,
            "z" => self.z = parse(key, v)?,
            "variance_mode" => self.variance_mode = parse(key, v)?,
            "records" => self.records = opt_path(v),
            "truth" => self.truth = opt_path(v),
            "data_dir" => self.data_dir = opt_path(v),
            "test_data" => self.test_data = opt_path(v),
            "members" => self.members = parse_list(key, v)?,
            "forecast" => self.forecast = opt_path(v),
            other => return Err(anyhow!(Usage(format!("unknown config key `{other}`")))),
        }
        Ok(())
    }

    /// `key=value` assignments, e.g. from `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!(Usage(format!("expected key=value, got `{assignment}`"))))?;
        self.set(k, v)
    }

    /// Reads a file of `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_assignment(line)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mask = |b: bool| b.to_string();
        BTreeMap::from([
            ("seed", self.seed.to_string()),
            ("dates", self.dates.to_string()),
            ("stations", self.stations.to_string()),
            ("history_len", self.history_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_obs", self.n_obs.to_string()),
            ("n_nwp", self.n_nwp.to_string()),
            ("n_targets", self.n_targets.to_string()),
            ("seasonal_amplitude", self.seasonal_amplitude.to_string()),
            ("daily_amplitude", self.daily_amplitude.to_string()),
            ("station_offsets", join(&self.station_offsets)),
            ("sigma_base", self.sigma_base.to_string()),
            ("sigma_amp", self.sigma_amp.to_string()),
            ("anomaly_phi", self.anomaly_phi.to_string()),
            ("anomaly_std", self.anomaly_std.to_string()),
            ("nwp_bias", self.nwp_bias.to_string()),
            ("nwp_noise", self.nwp_noise.to_string()),
            ("block_rate", self.block_rate.to_string()),
            ("local_rate", self.local_rate.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("hidden_sizes", join(&self.hidden_sizes)),
            ("embed_dim_station", self.embed_dim_station.to_string()),
            ("embed_dim_time", self.embed_dim_time.to_string()),
            ("min_variance", self.min_variance.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("validation_interval", self.validation_interval.to_string()),
            ("early_stop_tolerance", self.early_stop_tolerance.to_string()),
            ("loss", self.loss.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("ensemble_size", self.ensemble_size.to_string()),
            ("mask_nwp", mask(self.mask_nwp)),
            ("mask_obs", mask(self.mask_obs)),
            ("z", self.z.to_string()),
            ("variance_mode", self.variance_mode.to_string()),
            ("records", path_or_empty(&self.records)),
            ("truth", path_or_empty(&self.truth)),
            ("data_dir", path_or_empty(&self.data_dir)),
            ("test_data", path_or_empty(&self.test_data)),
            (
                "members",
                self.members
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("forecast", path_or_empty(&self.forecast)),
        ])
    }

    /// The resolved configuration in the same format [`apply_file`] reads.
    ///
    /// [`apply_file`]: RunConfig::apply_file
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            dates: self.dates,
            stations: self.stations,
            history_len: self.history_len,
            horizon: self.horizon,
            n_obs: self.n_obs,
            n_nwp: self.n_nwp,
            n_targets: self.n_targets,
            seasonal_amplitude: self.seasonal_amplitude,
            daily_amplitude: self.daily_amplitude,
            station_offsets: self.station_offsets.clone(),
            sigma_base: self.sigma_base,
            sigma_amp: self.sigma_amp,
            anomaly_phi: self.anomaly_phi,
            anomaly_std: self.anomaly_std,
            nwp_bias: self.nwp_bias,
            nwp_noise: self.nwp_noise,
            seed: self.seed,
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train_fraction,
            val: self.val_fraction,
        }
    }

    pub fn mask(&self) -> Result<Option<Mask>> {
        match (self.mask_nwp, self.mask_obs) {
            (true, true) => Err(anyhow!(Usage("mask_nwp and mask_obs cannot both be set".into()))),
            (true, false) => Ok(Some(Mask::Nwp)),
            (false, true) => Ok(Some(Mask::Observations)),
            (false, false) => Ok(None),
        }
    }

    /// Training settings for ensemble member `member`, whose seed is offset
    /// by its index.
    pub fn train(&self, member: usize) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_iterations: self.max_iterations,
            validation_interval: self.validation_interval,
            early_stop_tolerance: self.early_stop_tolerance,
            loss: self.loss,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed: self.seed + member as u64,
        }
    }

    pub fn model(&self, template: &ModelConfig, member: usize) -> ModelConfig {
        ModelConfig {
            hidden_sizes: self.hidden_sizes.clone(),
            embed_dim_station: self.embed_dim_station,
            embed_dim_time: self.embed_dim_time,
            min_variance: self.min_variance,
            seed: self.seed + member as u64,
            ..template.clone()
        }
    }
}
