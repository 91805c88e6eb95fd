//! Mini-batch training with periodic validation and early stopping.

use std::path::Path;

use duq_diff::{ParamId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, DatasetTensors};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::loss::LossKind;
use crate::model::{forward_batch, forward_tape, Batch, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iterations: usize,
    pub validation_interval: usize,
    pub early_stop_tolerance: usize,
    pub loss: LossKind,
    pub adam: AdamConfig,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            max_iterations: 10_000,
            validation_interval: 50,
            early_stop_tolerance: 10,
            loss: LossKind::Nle,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.validation_interval == 0 || self.early_stop_tolerance == 0 {
            return bad("validation_interval and early_stop_tolerance must be at least 1");
        }
        if self.max_iterations < self.validation_interval {
            return bad("max_iterations must be at least validation_interval");
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0)
        {
            return bad("adam: need learning_rate > 0, betas in [0, 1), epsilon > 0");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.t += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t);
        let bias2 = 1.0 - c.beta2.powi(self.t);
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Loss of a batch and the gradient of every parameter, in
/// [`ModelParams::named_tensors`] order.
pub fn loss_and_gradients(params: &ModelParams, batch: &Batch, loss: LossKind) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let out = forward_tape(&mut tape, params, batch)?;
    let y = tape.leaf(batch.targets.clone());
    let l = loss.on_tape(&mut tape, out.mean, out.variance, y)?;
    let value = tape.value(l).item().expect("loss is scalar");
    let mut grads = tape.backward(l)?.into_params();
    let n = params.named_tensors().len();
    let grads = (0..n)
        .map(|k| grads.remove(&ParamId(k)).expect("every parameter is on the tape"))
        .collect();
    Ok((value, grads))
}

/// Mean per-sample loss over every `(date, station)` pair, in date-major order.
pub fn validate(params: &ModelParams, data: &DatasetTensors, loss: LossKind) -> Result<f64> {
    let samples = data.all_samples();
    if samples.is_empty() {
        return Err(Error::Degenerate("validation set is empty".into()));
    }
    let dists = forward_batch(params, &samples)?;
    let cfg = &params.config;
    let mut total = 0.0;
    for (s, d) in samples.iter().zip(&dists) {
        let y: Vec<f64> = (0..cfg.horizon).flat_map(|t| s.target_row(t).iter().copied()).collect();
        let y = Tensor::new(vec![cfg.horizon, cfg.n_targets], y)?;
        total += loss.sample_loss(&d.mean, &d.variance, &y)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationEvent {
    pub iteration: usize,
    pub loss: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub events: Vec<ValidationEvent>,
    /// Iterations actually run (`ti`).
    pub total_iterations: usize,
    pub validation_interval: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Number of validation events (`vt`).
    pub fn validation_times(&self) -> usize {
        self.events.len()
    }

    pub fn best(&self) -> Option<&ValidationEvent> {
        self.events.iter().rev().find(|e| e.is_best)
    }

    /// `iter,val_loss,is_best`, one line per validation event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,val_loss,is_best\n");
        for e in &self.events {
            out += &format!("{},{},{}\n", e.iteration, e.loss, e.is_best);
        }
        out
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Patience counter: stops after `tolerance` consecutive validations that do
/// not strictly improve on the best loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    tolerance: usize,
    best: Option<f64>,
    misses: usize,
}

impl EarlyStopping {
    pub fn new(tolerance: usize) -> Self {
        Self {
            tolerance,
            best: None,
            misses: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let improved = loss.is_finite() && self.best.is_none_or(|b| loss < b);
        if improved {
            self.best = Some(loss);
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        (improved, self.misses >= self.tolerance)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// The optimisation loop with the batch step and validation supplied by the
/// caller. `step` returns the training loss of one iteration.
pub fn run_loop(
    mut params: ModelParams,
    config: &TrainConfig,
    mut step: impl FnMut(&mut ModelParams, usize) -> Result<f64>,
    mut validate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    let mut stopper = EarlyStopping::new(config.early_stop_tolerance);
    let mut best: Option<ModelParams> = None;
    let mut events = Vec::new();
    let mut stopped_early = false;
    let mut iteration = 0;
    while iteration < config.max_iterations {
        iteration += 1;
        let loss = step(&mut params, iteration)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        if iteration % config.validation_interval == 0 {
            let val = validate(&params)?;
            let (improved, stop) = stopper.observe(val);
            if improved {
                best = Some(params.clone());
            }
            events.push(ValidationEvent {
                iteration,
                loss: val,
                is_best: improved,
            });
            if stop {
                stopped_early = true;
                break;
            }
        }
    }
    let history = TrainHistory {
        events,
        total_iterations: iteration,
        validation_interval: config.validation_interval,
        stopped_early,
    };
    Ok((best.unwrap_or(params), history))
}

/// Trains `params` on `train` and returns the snapshot with the lowest
/// validation loss on `val`.
pub fn train(
    params: ModelParams,
    train: &DatasetTensors,
    val: &DatasetTensors,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    params.config.check_tensors(train)?;
    params.config.check_tensors(val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, &params);
    let step = |p: &mut ModelParams, _iteration: usize| {
        let samples = sample_batch(train, config.batch_size, &mut rng);
        let batch = Batch::from_samples(&p.config, &samples)?;
        let (loss, mut grads) = loss_and_gradients(p, &batch, config.loss)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        if let Some(max) = config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        adam.step(p, &grads);
        Ok(loss)
    };
    run_loop(params, config, step, |p| validate(p, val, config.loss))
}
