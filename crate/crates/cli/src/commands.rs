use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use duq_core::data::{load_records, mask_channel, save_records, DatasetTensors, Mask};
use duq_core::fsutil::write_atomic;
use duq_core::infer::{
    ensemble_predict_batch, forecast_rows, lambda_from_z, read_forecast_csv, target_index, write_forecast_csv,
};
use duq_core::metrics::{build_report, paired_t_test, Alternative, CellForecast, CellKey, MetricsReport, TTest};
use duq_core::model::{ModelConfig, ModelParams};
use duq_core::pipeline::{forecast_cells, nwp_cells, point_cells, preprocess, truth_cells};
use duq_core::synth::{generate, inject_missing, read_truth_csv};
use duq_core::train::train;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Usage;

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!(duq_core::Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input file does not exist"),
        });
    }
    Ok(())
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_config(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    Ok(write_atomic(
        out.join(format!("{command}.config")),
        cfg.to_text().as_bytes(),
    )?)
}

fn mask_name(m: Option<Mask>) -> &'static str {
    match m {
        None => "none",
        Some(Mask::Nwp) => "nwp",
        Some(Mask::Observations) => "obs",
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (clean, truth) = generate(&cfg.synth())?;
    let records = inject_missing(&clean, cfg.block_rate, cfg.local_rate, cfg.seed)?;
    ensure_dir(out)?;
    save_records(out.join("records.csv"), &records)?;
    truth.write_csv(out.join("truth.csv"))?;
    write_config(out, "synth", cfg)?;
    println!(
        "synth: {} dates x {} stations, {} missing values -> {}",
        records.dates(),
        cfg.stations,
        records.missing_count(),
        out.join("records.csv").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PreprocessSummary {
    dropped_dates: Vec<usize>,
    train_dates: usize,
    val_dates: usize,
    test_dates: usize,
}

pub fn preprocess_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = cfg.records.clone().unwrap_or_else(|| out.join("records.csv"));
    require(&path)?;
    let records = load_records(&path, &cfg.synth().schema())?;
    let splits = preprocess(&records, cfg.fractions())?;
    ensure_dir(out)?;
    splits.train.save(out.join("train.bin"))?;
    splits.val.save(out.join("val.bin"))?;
    splits.test.save(out.join("test.bin"))?;
    let summary = PreprocessSummary {
        dropped_dates: splits.dropped_dates.clone(),
        train_dates: splits.train.dates(),
        val_dates: splits.val.dates(),
        test_dates: splits.test.dates(),
    };
    write_json(&out.join("preprocess.json"), &summary)?;
    write_config(out, "preprocess", cfg)?;
    println!(
        "preprocess: dropped {} dates, train/val/test = {}/{}/{} dates",
        summary.dropped_dates.len(),
        summary.train_dates,
        summary.val_dates,
        summary.test_dates
    );
    Ok(())
}

/// Written next to each checkpoint as `<name>.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub loss: String,
    pub mask: String,
    pub seed: u64,
    pub total_iterations: usize,
    pub validation_times: usize,
    pub validation_interval: usize,
    pub stopped_early: bool,
    pub best_iteration: Option<usize>,
    pub best_val_loss: Option<f64>,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn load_tensors(path: &Path) -> Result<DatasetTensors> {
    require(path)?;
    Ok(DatasetTensors::load(path)?)
}

fn apply_mask(t: DatasetTensors, mask: Option<Mask>) -> DatasetTensors {
    match mask {
        Some(m) => mask_channel(&t, m),
        None => t,
    }
}

pub fn train_cmd(cfg: &RunConfig, out: &Path, name: &str) -> Result<()> {
    if cfg.ensemble_size == 0 {
        bail!(Usage("ensemble_size must be at least 1".into()));
    }
    let mask = cfg.mask()?;
    let dir = cfg.data_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let train_t = apply_mask(load_tensors(&dir.join("train.bin"))?, mask);
    let val_t = apply_mask(load_tensors(&dir.join("val.bin"))?, mask);
    let template = ModelConfig::for_tensors(&train_t, cfg.hidden_sizes.clone(), cfg.seed);
    let mut jobs = Vec::new();
    for m in 0..cfg.ensemble_size {
        let mc = cfg.model(&template, m);
        mc.validate()?;
        let tc = cfg.train(m);
        tc.validate()?;
        jobs.push((mc, tc));
    }
    ensure_dir(out)?;
    write_config(out, "train", cfg)?;
    for (m, (mc, tc)) in jobs.into_iter().enumerate() {
        let stem = if cfg.ensemble_size == 1 {
            name.to_string()
        } else {
            format!("{name}-{m}")
        };
        let params = ModelParams::init(&mc)?;
        let (best, history) = train(params, &train_t, &val_t, &tc)?;
        let checkpoint = out.join(format!("{stem}.bin"));
        best.save(&checkpoint)?;
        history.write_log(out.join(format!("{stem}.log.csv")))?;
        let meta = CheckpointMeta {
            loss: tc.loss.to_string(),
            mask: mask_name(mask).into(),
            seed: tc.seed,
            total_iterations: history.total_iterations,
            validation_times: history.validation_times(),
            validation_interval: history.validation_interval,
            stopped_early: history.stopped_early,
            best_iteration: history.best().map(|e| e.iteration),
            best_val_loss: history.best().map(|e| e.loss),
        };
        write_json(&meta_path(&checkpoint), &meta)?;
        println!(
            "train {stem}: ti = vt x vi = {} x {} = {}{}, best {} loss {} at iteration {}",
            meta.validation_times,
            meta.validation_interval,
            meta.validation_times * meta.validation_interval,
            if meta.stopped_early {
                " (early stop)"
            } else {
                " (iteration cap)"
            },
            meta.loss,
            meta.best_val_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
            meta.best_iteration.map_or("n/a".into(), |i| i.to_string()),
        );
    }
    Ok(())
}

/// Written next to the forecast CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForecastMeta {
    pub z: f64,
    pub lambda: f64,
    pub variance_mode: String,
    pub mask: String,
    pub members: Vec<PathBuf>,
}

fn test_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.test_data.clone().unwrap_or_else(|| {
        cfg.data_dir
            .clone()
            .unwrap_or_else(|| out.to_path_buf())
            .join("test.bin")
    })
}

pub fn predict_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let members = if cfg.members.is_empty() {
        vec![out.join("model.bin")]
    } else {
        cfg.members.clone()
    };
    let lambda = lambda_from_z(cfg.z).map_err(|e| anyhow!(Usage(e.to_string())))?;
    let mut params = Vec::new();
    let mut masks = Vec::new();
    for path in &members {
        require(path)?;
        params.push(ModelParams::load(path)?);
        let meta = meta_path(path);
        let mask = if meta.exists() {
            let text = std::fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
            let m: CheckpointMeta =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", meta.display()))?;
            m.mask
        } else {
            "none".into()
        };
        masks.push(mask);
    }
    masks.dedup();
    if masks.len() > 1 {
        bail!(Usage(format!(
            "ensemble members were trained with different masks: {masks:?}"
        )));
    }
    let mask = match masks[0].as_str() {
        "none" => None,
        other => Some(other.parse::<Mask>()?),
    };
    let test = apply_mask(load_tensors(&test_path(cfg, out))?, mask);
    let samples = test.all_samples();
    let intervals = ensemble_predict_batch(&params, &samples, cfg.z, test.spec(), cfg.variance_mode)?;
    ensure_dir(out)?;
    let path = cfg.forecast.clone().unwrap_or_else(|| out.join("forecast.csv"));
    write_forecast_csv(&path, &forecast_rows(&samples, &intervals))?;
    let meta = ForecastMeta {
        z: cfg.z,
        lambda,
        variance_mode: cfg.variance_mode.to_string(),
        mask: mask_name(mask).into(),
        members,
    };
    write_json(&path.with_extension("json"), &meta)?;
    write_config(out, "predict", cfg)?;
    println!(
        "predict: {} samples from {} member(s), z = {} (lambda {:.4}) -> {}",
        samples.len(),
        params.len(),
        cfg.z,
        lambda,
        path.display()
    );
    Ok(())
}

pub enum EvalSource {
    Forecast,
    Nwp,
    Oracle,
}

fn oracle_cells(cfg: &RunConfig, out: &Path, keys: &BTreeMap<CellKey, f64>) -> Result<BTreeMap<CellKey, CellForecast>> {
    let path = cfg.truth.clone().unwrap_or_else(|| out.join("truth.csv"));
    require(&path)?;
    let lambda = lambda_from_z(cfg.z).map_err(|e| anyhow!(Usage(e.to_string())))?;
    let mut all = BTreeMap::new();
    for row in read_truth_csv(&path)? {
        let target =
            target_index(&row.target).ok_or_else(|| anyhow!("{}: bad target {}", path.display(), row.target))?;
        let key = CellKey {
            date_idx: row.date_idx,
            station_id: row.station_id,
            step: row.step,
            target,
        };
        all.insert(key, (row.mu_star, row.sigma_star));
    }
    keys.keys()
        .map(|k| {
            let (m, s) = all
                .get(k)
                .copied()
                .ok_or_else(|| duq_core::Error::Misaligned(format!("truth file has no cell {k:?}")))?;
            Ok((
                *k,
                CellForecast {
                    point: m,
                    lower: m - lambda * s,
                    upper: m + lambda * s,
                },
            ))
        })
        .collect()
}

pub fn evaluate_cmd(cfg: &RunConfig, out: &Path, source: EvalSource, name: &str) -> Result<()> {
    let test = load_tensors(&test_path(cfg, out))?;
    let truths = truth_cells(&test)?;
    let nwp = nwp_cells(&test)?;
    let mut z = cfg.z;
    let forecasts = match source {
        EvalSource::Forecast => {
            let path = cfg.forecast.clone().unwrap_or_else(|| out.join("forecast.csv"));
            require(&path)?;
            let meta = path.with_extension("json");
            if meta.exists() {
                let text = std::fs::read_to_string(&meta).with_context(|| format!("reading {}", meta.display()))?;
                let m: ForecastMeta =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", meta.display()))?;
                z = m.z;
            }
            forecast_cells(&read_forecast_csv(&path)?)?
        }
        EvalSource::Nwp => point_cells(&nwp),
        EvalSource::Oracle => oracle_cells(cfg, out, &truths)?,
    };
    let report = build_report(&forecasts, &truths, &nwp, z)?;
    ensure_dir(out)?;
    report.write_csv(out.join(format!("{name}.csv")))?;
    report.write_json(out.join(format!("{name}.json")))?;
    write_config(out, "evaluate", cfg)?;
    println!(
        "evaluate: {} days, rmse_avg {:.4}, ss_avg {:.4}, picp_avg {:.4} (per target {:?})",
        report.days,
        report.rmse_avg,
        report.ss_avg,
        report.picp_avg,
        report
            .picp_obj_avg
            .iter()
            .map(|p| (p * 10_000.0).round() / 10_000.0)
            .collect::<Vec<_>>()
    );
    Ok(())
}

#[derive(Serialize)]
struct TTestReport {
    a: PathBuf,
    b: PathBuf,
    days: usize,
    /// a has lower daily RMSE than b.
    rmse_day: TTest,
    /// a has higher daily skill than b.
    ss_day: TTest,
}

pub fn ttest_cmd(out: &Path, a: &Path, b: &Path) -> Result<()> {
    require(a)?;
    require(b)?;
    let (ra, rb) = (MetricsReport::read_json(a)?, MetricsReport::read_json(b)?);
    let days = |r: &MetricsReport| r.per_day.iter().map(|d| d.date_idx).collect::<Vec<_>>();
    if days(&ra) != days(&rb) {
        bail!(duq_core::Error::Misaligned(format!(
            "{} and {} cover different days",
            a.display(),
            b.display()
        )));
    }
    let report = TTestReport {
        a: a.to_path_buf(),
        b: b.to_path_buf(),
        days: ra.days,
        rmse_day: paired_t_test(&ra.daily_rmse(), &rb.daily_rmse(), Alternative::Less)?,
        ss_day: paired_t_test(&ra.daily_ss(), &rb.daily_ss(), Alternative::Greater)?,
    };
    ensure_dir(out)?;
    write_json(&out.join("ttest.json"), &report)?;
    println!(
        "ttest over {} days: rmse_day t = {:.4}, p = {:.4}; ss_day t = {:.4}, p = {:.4}",
        report.days, report.rmse_day.t, report.rmse_day.p, report.ss_day.t, report.ss_day.p
    );
    Ok(())
}
