//! GRU encoder-decoder with station/time embeddings and a mean-variance head.

use std::path::Path;

use duq_diff::{ParamId, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::container::{read_container, write_container, Magic};
use crate::data::{DatasetTensors, TrainingSample, STATION_ID_COLUMN, TIME_ID_COLUMN};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_VARIANCE: f64 = 1e-6;
const EMBED_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// One entry per GRU layer, shared by encoder and decoder.
    pub hidden_sizes: Vec<usize>,
    pub embed_dim_station: usize,
    pub embed_dim_time: usize,
    pub n_obs: usize,
    pub n_nwp: usize,
    pub n_targets: usize,
    pub history_len: usize,
    pub horizon: usize,
    pub stations: usize,
    pub min_variance: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Config whose input extents match `tensors`, with embedding size 2.
    pub fn for_tensors(tensors: &DatasetTensors, hidden_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            hidden_sizes,
            embed_dim_station: 2,
            embed_dim_time: 2,
            n_obs: tensors.n_obs(),
            n_nwp: tensors.n_nwp(),
            n_targets: tensors.n_targets(),
            history_len: tensors.history_len(),
            horizon: tensors.horizon(),
            stations: tensors.stations(),
            min_variance: DEFAULT_MIN_VARIANCE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return bad("hidden_sizes must be a non-empty list of positive sizes");
        }
        if self.embed_dim_station == 0 || self.embed_dim_time == 0 {
            return bad("embedding dimensions must be at least 1");
        }
        if !(self.min_variance > 0.0 && self.min_variance.is_finite()) {
            return bad("min_variance must be positive");
        }
        if self.history_len == 0 {
            return bad("history_len (T_E) must be at least 1");
        }
        if self.horizon == 0 || self.stations == 0 || self.n_obs == 0 || self.n_targets == 0 {
            return bad("horizon, stations, n_obs and n_targets must be at least 1");
        }
        Ok(())
    }

    pub fn decoder_input_width(&self) -> usize {
        self.embed_dim_station + self.embed_dim_time + self.n_nwp
    }

    fn top_hidden(&self) -> usize {
        *self.hidden_sizes.last().expect("validated non-empty")
    }

    /// Checks that `tensors` has the extents this model was built for.
    /// Station ids are checked per batch.
    pub fn check_tensors(&self, tensors: &DatasetTensors) -> Result<()> {
        let got = (
            tensors.n_obs(),
            tensors.n_nwp(),
            tensors.n_targets(),
            tensors.history_len(),
            tensors.horizon(),
        );
        let want = (self.n_obs, self.n_nwp, self.n_targets, self.history_len, self.horizon);
        if got != want {
            return Err(Error::Shape(format!(
                "model expects (n_obs, n_nwp, n_targets, T_E, T_D) = {want:?}, tensors have {got:?}"
            )));
        }
        Ok(())
    }
}

/// Weights of one GRU layer, gate blocks ordered `[update | reset | candidate]`.
///
/// * `w`: `(input, 3H)`
/// * `u`: `(H, 3H)`
/// * `b`: `(1, 3H)`
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl GruLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[input, 3 * hidden]),
            u: Tensor::zeros(&[hidden, 3 * hidden]),
            b: Tensor::zeros(&[1, 3 * hidden]),
        }
    }

    fn glorot(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: glorot(input, 3 * hidden, rng),
            u: glorot(hidden, 3 * hidden, rng),
            b: Tensor::zeros(&[1, 3 * hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[0]
    }

    /// One step on plain tensors: `x` is `(B, input)`, `h` is `(B, H)`.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rows = x.shape().first().copied().unwrap_or(1);
        let layer = bind_layer(&mut tape, self, &mut 0, rows)?;
        let (xv, hv) = (tape.leaf(x.clone()), tape.leaf(h.clone()));
        let out = gru_step(&mut tape, &layer, xv, hv)?;
        Ok(tape.value(out).clone())
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-limit..limit))
}

fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-limit..limit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<GruLayer>,
    pub decoder: Vec<GruLayer>,
    /// `(S, embed_dim_station)`
    pub station_embed: Tensor,
    /// `(T_D, embed_dim_time)`
    pub time_embed: Tensor,
    /// `(H_top, 2 * N3)`: mean columns first, then variance pre-activations.
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, embeddings uniform in ±0.05,
    /// seeded by `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with_rng(config, &mut rng)
    }

    pub fn init_with_rng(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        let mut enc_in = config.n_obs;
        let mut dec_in = config.decoder_input_width();
        for &h in &config.hidden_sizes {
            encoder.push(GruLayer::glorot(enc_in, h, rng));
            decoder.push(GruLayer::glorot(dec_in, h, rng));
            enc_in = h;
            dec_in = h;
        }
        Ok(Self {
            station_embed: uniform(config.stations, config.embed_dim_station, EMBED_INIT, rng),
            time_embed: uniform(config.horizon, config.embed_dim_time, EMBED_INIT, rng),
            head_w: glorot(config.top_hidden(), 2 * config.n_targets, rng),
            head_b: Tensor::zeros(&[1, 2 * config.n_targets]),
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(config)?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    /// Parameters in a fixed order; the position is the tape [`ParamId`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (side, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (l, layer) in layers.iter().enumerate() {
                out.push((format!("{side}.{l}.w"), &layer.w));
                out.push((format!("{side}.{l}.u"), &layer.u));
                out.push((format!("{side}.{l}.b"), &layer.b));
            }
        }
        out.push(("station_embed".into(), &self.station_embed));
        out.push(("time_embed".into(), &self.time_embed));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layers in [&mut self.encoder, &mut self.decoder] {
            for layer in layers.iter_mut() {
                out.push(&mut layer.w);
                out.push(&mut layer.u);
                out.push(&mut layer.b);
            }
        }
        out.push(&mut self.station_embed);
        out.push(&mut self.time_embed);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let named = self.named_tensors();
        let entries: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_container(path.as_ref(), Magic::Params, &meta, &entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = read_container(path, Magic::Params)?;
        let bad = |message: String| Error::Container {
            path: path.to_path_buf(),
            message,
        };
        let config: ModelConfig = serde_json::from_str(&c.meta).map_err(|e| bad(format!("model config: {e}")))?;
        let mut params = Self::zeros(&config).map_err(|e| bad(e.to_string()))?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = c.take(name).ok_or_else(|| bad(format!("missing parameter `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(bad(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some((name, _)) = c.entries.first() {
            return Err(bad(format!("unexpected entry `{name}`")));
        }
        Ok(params)
    }
}

/// Model inputs of a batch of samples, one matrix per time step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `T_E` matrices of `(B, N1)`.
    pub encoder: Vec<Tensor>,
    /// `T_D` matrices of `(B, nwp)`.
    pub nwp: Vec<Tensor>,
    pub station_ids: Vec<usize>,
    /// Per decoder step, per sample.
    pub time_ids: Vec<Vec<usize>>,
    /// `(B, T_D * N3)` normalised targets, column `t * N3 + o`.
    pub targets: Tensor,
}

fn parse_id(v: f64, what: &'static str, size: usize) -> Result<usize> {
    if v.fract() == 0.0 && v >= 0.0 && (v as usize) < size {
        Ok(v as usize)
    } else {
        Err(Error::IdOutOfRange { what, id: v, size })
    }
}

impl Batch {
    pub fn from_samples(config: &ModelConfig, samples: &[TrainingSample<'_>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for s in samples {
            config.check_tensors(s.tensors())?;
        }
        let b = samples.len();
        let encoder = (0..config.history_len)
            .map(|t| {
                let data = samples.iter().flat_map(|s| s.encoder_row(t).iter().copied()).collect();
                Tensor::new(vec![b, config.n_obs], data)
            })
            .collect::<std::result::Result<_, _>>()?;
        let nwp = (0..config.horizon)
            .map(|t| {
                let data = samples.iter().flat_map(|s| s.nwp_row(t).iter().copied()).collect();
                Tensor::new(vec![b, config.n_nwp], data)
            })
            .collect::<std::result::Result<_, _>>()?;
        let station_ids = samples
            .iter()
            .map(|s| parse_id(s.decoder_row(0)[STATION_ID_COLUMN], "station id", config.stations))
            .collect::<Result<_>>()?;
        let time_ids = (0..config.horizon)
            .map(|t| {
                samples
                    .iter()
                    .map(|s| parse_id(s.decoder_row(t)[TIME_ID_COLUMN], "time id", config.horizon))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut targets = Vec::with_capacity(b * config.horizon * config.n_targets);
        for s in samples {
            for t in 0..config.horizon {
                targets.extend_from_slice(s.target_row(t));
            }
        }
        Ok(Self {
            encoder,
            nwp,
            station_ids,
            time_ids,
            targets: Tensor::new(vec![b, config.horizon * config.n_targets], targets)?,
        })
    }

    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }
}

/// GRU weights recorded on a tape, with the recurrent matrix pre-split and
/// the bias pre-tiled to the batch size.
pub struct BoundLayer {
    w: Var,
    u_gates: Var,
    u_cand: Var,
    b: Var,
    hidden: usize,
}

pub struct BoundParams {
    pub encoder: Vec<BoundLayer>,
    pub decoder: Vec<BoundLayer>,
    station_embed: Var,
    time_embed: Var,
    head_w: Var,
    head_b: Var,
    min_variance: f64,
    n_targets: usize,
    rows: usize,
}

fn bind_layer(tape: &mut Tape, layer: &GruLayer, next: &mut usize, rows: usize) -> Result<BoundLayer> {
    let h = layer.hidden();
    let w = tape.param(ParamId(*next), layer.w.clone());
    let u = tape.param(ParamId(*next + 1), layer.u.clone());
    let b = tape.param(ParamId(*next + 2), layer.b.clone());
    *next += 3;
    Ok(BoundLayer {
        w,
        u_gates: tape.slice(u, 1, 0, 2 * h)?,
        u_cand: tape.slice(u, 1, 2 * h, h)?,
        b: tape.tile_rows(b, rows)?,
        hidden: h,
    })
}

/// Records every parameter on `tape` with ids in [`ModelParams::named_tensors`]
/// order, prepared for batches of `rows` samples.
pub fn bind(tape: &mut Tape, params: &ModelParams, rows: usize) -> Result<BoundParams> {
    let mut next = 0;
    let mut encoder = Vec::new();
    for layer in &params.encoder {
        encoder.push(bind_layer(tape, layer, &mut next, rows)?);
    }
    let mut decoder = Vec::new();
    for layer in &params.decoder {
        decoder.push(bind_layer(tape, layer, &mut next, rows)?);
    }
    let station_embed = tape.param(ParamId(next), params.station_embed.clone());
    let time_embed = tape.param(ParamId(next + 1), params.time_embed.clone());
    let head_w = tape.param(ParamId(next + 2), params.head_w.clone());
    let b = tape.param(ParamId(next + 3), params.head_b.clone());
    let head_b = tape.tile_rows(b, rows)?;
    Ok(BoundParams {
        encoder,
        decoder,
        station_embed,
        time_embed,
        head_w,
        head_b,
        min_variance: params.config.min_variance,
        n_targets: params.config.n_targets,
        rows,
    })
}

/// `h' = h + z * (h~ - h)`, i.e. `(1 - z) h + z h~`.
pub fn gru_step(tape: &mut Tape, layer: &BoundLayer, x: Var, h: Var) -> Result<Var> {
    let hs = layer.hidden;
    let xw = tape.matmul(x, layer.w)?;
    let xw = tape.add(xw, layer.b)?;
    let x_gates = tape.slice(xw, 1, 0, 2 * hs)?;
    let x_cand = tape.slice(xw, 1, 2 * hs, hs)?;
    let h_gates = tape.matmul(h, layer.u_gates)?;
    let pre = tape.add(x_gates, h_gates)?;
    let gates = tape.sigmoid(pre)?;
    let z = tape.slice(gates, 1, 0, hs)?;
    let r = tape.slice(gates, 1, hs, hs)?;
    let rh = tape.mul(r, h)?;
    let rh_u = tape.matmul(rh, layer.u_cand)?;
    let cand_pre = tape.add(x_cand, rh_u)?;
    let cand = tape.tanh(cand_pre)?;
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    Ok(tape.add(h, step)?)
}

fn run_stack(tape: &mut Tape, layers: &[BoundLayer], inputs: Vec<Var>, init: Vec<Var>) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut seq = inputs;
    let mut finals = Vec::with_capacity(layers.len());
    for (layer, mut h) in layers.iter().zip(init) {
        let mut out = Vec::with_capacity(seq.len());
        for &x in &seq {
            h = gru_step(tape, layer, x, h)?;
            out.push(h);
        }
        finals.push(h);
        seq = out;
    }
    Ok((seq, finals))
}

/// Final hidden state of each encoder layer.
pub fn encode(tape: &mut Tape, bound: &BoundParams, batch: &Batch) -> Result<Vec<Var>> {
    if batch.encoder.is_empty() {
        return Err(Error::Config("encoder needs at least one time step".into()));
    }
    let inputs = batch.encoder.iter().map(|x| tape.leaf(x.clone())).collect();
    let init = bound
        .encoder
        .iter()
        .map(|l| tape.leaf(Tensor::zeros(&[bound.rows, l.hidden])))
        .collect();
    Ok(run_stack(tape, &bound.encoder, inputs, init)?.1)
}

/// Head outputs for every decoder step, each `(B, T_D * N3)`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub mean: Var,
    pub variance: Var,
}

pub fn decode(tape: &mut Tape, bound: &BoundParams, context: Vec<Var>, batch: &Batch) -> Result<ForwardVars> {
    if context.len() != bound.decoder.len() {
        return Err(Error::Shape(format!(
            "{} context states for {} decoder layers",
            context.len(),
            bound.decoder.len()
        )));
    }
    let station = tape.gather_rows(bound.station_embed, &batch.station_ids)?;
    let mut inputs = Vec::with_capacity(batch.nwp.len());
    for (nwp, ids) in batch.nwp.iter().zip(&batch.time_ids) {
        let time = tape.gather_rows(bound.time_embed, ids)?;
        let nwp = tape.leaf(nwp.clone());
        inputs.push(tape.concat(&[station, time, nwp], 1)?);
    }
    let (outputs, _) = run_stack(tape, &bound.decoder, inputs, context)?;
    let n3 = bound.n_targets;
    let mut means = Vec::with_capacity(outputs.len());
    let mut variances = Vec::with_capacity(outputs.len());
    for h in outputs {
        let raw = tape.matmul(h, bound.head_w)?;
        let raw = tape.add(raw, bound.head_b)?;
        means.push(tape.slice(raw, 1, 0, n3)?);
        let pre = tape.slice(raw, 1, n3, n3)?;
        let sp = tape.softplus(pre)?;
        variances.push(tape.affine(sp, 1.0, bound.min_variance)?);
    }
    Ok(ForwardVars {
        mean: tape.concat(&means, 1)?,
        variance: tape.concat(&variances, 1)?,
    })
}

/// Binds `params` and runs encoder and decoder over `batch`.
pub fn forward_tape(tape: &mut Tape, params: &ModelParams, batch: &Batch) -> Result<ForwardVars> {
    let bound = bind(tape, params, batch.len())?;
    let context = encode(tape, &bound, batch)?;
    decode(tape, &bound, context, batch)
}

/// Predicted mean and variance of one sample in normalised space, `(T_D, N3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    pub mean: Tensor,
    pub variance: Tensor,
}

/// Samples per forward pass when evaluating many samples.
pub const EVAL_CHUNK: usize = 256;

pub fn forward_batch(params: &ModelParams, samples: &[TrainingSample<'_>]) -> Result<Vec<ForecastDistribution>> {
    let cfg = &params.config;
    let cells = cfg.horizon * cfg.n_targets;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = Batch::from_samples(cfg, chunk)?;
        let mut tape = Tape::new();
        let vars = forward_tape(&mut tape, params, &batch)?;
        let (mean, var) = (tape.value(vars.mean).data(), tape.value(vars.variance).data());
        for b in 0..chunk.len() {
            let row = b * cells..(b + 1) * cells;
            out.push(ForecastDistribution {
                mean: Tensor::new(vec![cfg.horizon, cfg.n_targets], mean[row.clone()].to_vec())?,
                variance: Tensor::new(vec![cfg.horizon, cfg.n_targets], var[row].to_vec())?,
            });
        }
    }
    Ok(out)
}

pub fn forward(params: &ModelParams, sample: &TrainingSample<'_>) -> Result<ForecastDistribution> {
    Ok(forward_batch(params, std::slice::from_ref(sample))?.remove(0))
}
