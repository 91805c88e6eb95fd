#![allow(dead_code)]

use std::collections::BTreeMap;

use duq_core::data::{mask_channel, DatasetTensors, Mask};
use duq_core::infer::{ensemble_predict_batch, forecast_rows, EnsembleVariance};
use duq_core::loss::LossKind;
use duq_core::metrics::{CellForecast, CellKey};
use duq_core::model::{Batch, ModelConfig, ModelParams};
use duq_core::pipeline::{forecast_cells, preprocess, truth_cells, SplitFractions, Splits};
use duq_core::synth::{generate, SynthConfig, SynthTruth};
use duq_core::train::{loss_and_gradients, train, TrainConfig, TrainHistory};

/// Relative tolerance with an absolute floor, as used by every gradcheck.
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error among gradients above the absolute floor.
    pub worst_rel: f64,
    pub max_abs: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares every analytic parameter gradient with a central difference.
pub fn gradcheck(params: &ModelParams, batch: &Batch, loss: LossKind, h: f64) -> GradCheck {
    let (_, grads) = loss_and_gradients(params, batch, loss).unwrap();
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut report = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        max_abs: 0.0,
        worst: String::new(),
        failures: Vec::new(),
    };
    let mut p = params.clone();
    for (k, name) in names.iter().enumerate() {
        for j in 0..grads[k].len() {
            let orig = p.tensors_mut()[k].data()[j];
            p.tensors_mut()[k].data_mut()[j] = orig + h;
            let up = loss_and_gradients(&p, batch, loss).unwrap().0;
            p.tensors_mut()[k].data_mut()[j] = orig - h;
            let down = loss_and_gradients(&p, batch, loss).unwrap().0;
            p.tensors_mut()[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[k].data()[j];
            let diff = (numeric - analytic).abs();
            let rel = diff / numeric.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
            report.checked += 1;
            report.max_abs = report.max_abs.max(diff);
            if numeric.abs().max(analytic.abs()) > GRAD_ABS_FLOOR && rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst = format!("{name}[{j}]: analytic {analytic:.6e}, numeric {numeric:.6e}");
            }
            if diff > GRAD_ABS_FLOOR && rel > GRAD_REL_TOL {
                report
                    .failures
                    .push(format!("{name}[{j}]: analytic {analytic:.6e}, numeric {numeric:.6e}"));
            }
        }
    }
    report
}

/// Data and model of the small gradcheck setup: T_E=4, T_D=3, S=2, N1=3,
/// NWP width 2, embeddings of width 2.
pub fn gradcheck_setup(hidden: Vec<usize>, seed: u64) -> (ModelParams, Batch) {
    let cfg = SynthConfig {
        dates: 12,
        stations: 2,
        history_len: 4,
        horizon: 3,
        n_obs: 3,
        n_nwp: 2,
        n_targets: 2,
        seed,
        ..SynthConfig::default()
    };
    let splits = synth_splits(&cfg);
    let config = ModelConfig::for_tensors(&splits.train, hidden, seed);
    let params = ModelParams::init(&config).unwrap();
    let samples = splits.train.all_samples();
    let batch = Batch::from_samples(&config, &samples[..4]).unwrap();
    (params, batch)
}

pub fn synth_splits(cfg: &SynthConfig) -> Splits {
    let (records, _) = generate(cfg).unwrap();
    preprocess(&records, SplitFractions::default()).unwrap()
}

pub fn synth_splits_with_truth(cfg: &SynthConfig) -> (Splits, SynthTruth) {
    let (records, truth) = generate(cfg).unwrap();
    (preprocess(&records, SplitFractions::default()).unwrap(), truth)
}

pub fn masked(splits: &Splits, mask: Mask) -> Splits {
    Splits {
        train: mask_channel(&splits.train, mask),
        val: mask_channel(&splits.val, mask),
        test: mask_channel(&splits.test, mask),
        dropped_dates: splits.dropped_dates.clone(),
    }
}

pub fn fit(splits: &Splits, hidden: Vec<usize>, seed: u64, config: &TrainConfig) -> (ModelParams, TrainHistory) {
    let mc = ModelConfig::for_tensors(&splits.train, hidden, seed);
    let params = ModelParams::init(&mc).unwrap();
    train(
        params,
        &splits.train,
        &splits.val,
        &TrainConfig { seed, ..config.clone() },
    )
    .unwrap()
}

pub fn small_train_config(loss: LossKind, batch_size: usize, max_iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        max_iterations,
        validation_interval: 50,
        early_stop_tolerance: 10,
        loss,
        ..TrainConfig::default()
    }
}

/// Physical-unit forecasts of every held-out cell.
pub fn held_out_forecasts(members: &[ModelParams], test: &DatasetTensors, z: f64) -> BTreeMap<CellKey, CellForecast> {
    let samples = test.all_samples();
    let iv = ensemble_predict_batch(members, &samples, z, test.spec(), EnsembleVariance::Mean).unwrap();
    forecast_cells(&forecast_rows(&samples, &iv)).unwrap()
}

/// Pooled RMSE of the point forecasts over every held-out cell.
pub fn held_out_rmse(members: &[ModelParams], test: &DatasetTensors) -> f64 {
    let f = held_out_forecasts(members, test, 0.1);
    let truths = truth_cells(test).unwrap();
    let (y, p): (Vec<f64>, Vec<f64>) = f.iter().map(|(k, c)| (truths[k], c.point)).unzip();
    duq_core::metrics::rmse(&y, &p).unwrap()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
