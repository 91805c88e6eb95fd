//! `duq`: synth, preprocess, train, predict and evaluate from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use duq_core::infer::EnsembleVariance;
use duq_core::loss::LossKind;

use commands::EvalSource;
use config::RunConfig;

/// Marks an error as caused by the invocation rather than the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(
    name = "duq",
    version,
    about = "Multi-station weather forecasting with prediction intervals"
)]
struct Cli {
    /// File of `key = value` settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` setting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs, and default location of inputs.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out: PathBuf,
    /// Overrides one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic station records and the truth sidecar.
    Synth,
    /// Repair, split and normalise records into tensor files.
    Preprocess {
        /// Records CSV; defaults to OUT/records.csv.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Train one model or an ensemble.
    Train {
        /// Directory holding train.bin and val.bin; defaults to OUT.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Zero out a channel: `nwp`, `obs` or `none`.
        #[arg(long)]
        mask: Option<String>,
        /// Hidden sizes per layer, e.g. `32,32`.
        #[arg(long)]
        hidden: Option<String>,
        /// Number of members, seeded seed, seed+1, ...
        #[arg(long)]
        ensemble: Option<usize>,
        /// Checkpoint file stem.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Forecast the test set with one checkpoint or an ensemble.
    Predict {
        #[arg(long, num_args = 1..)]
        members: Vec<PathBuf>,
        /// Test tensor file; defaults to OUT/test.bin.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        z: Option<f64>,
        /// `mean` or `mixture`.
        #[arg(long)]
        variance: Option<EnsembleVariance>,
        /// Output CSV; defaults to OUT/forecast.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a forecast, the NWP channel or the generator oracle; or compare
    /// two reports with a paired t-test.
    Evaluate {
        #[arg(long, conflicts_with_all = ["nwp", "oracle", "ttest"])]
        forecast: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the NWP channel as if it were a model.
        #[arg(long, conflicts_with_all = ["oracle", "ttest"])]
        nwp: bool,
        /// Score intervals built from the true mean and spread in TRUTH
        /// (defaults to OUT/truth.csv).
        #[arg(long, num_args = 0..=1, value_name = "TRUTH", conflicts_with = "ttest")]
        oracle: Option<Option<PathBuf>>,
        /// Two metrics JSON files: is A better than B?
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        ttest: Vec<PathBuf>,
        #[arg(long)]
        z: Option<f64>,
        /// Report file stem.
        #[arg(long, default_value = "metrics")]
        name: String,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(anyhow!(Usage(format!("config file {} does not exist", path.display()))));
        }
        cfg.apply_file(path)?;
    }
    for s in &cli.set {
        cfg.apply_assignment(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    let out = cli.out.clone();
    match cli.command {
        Command::Synth => commands::synth(&cfg, &out),
        Command::Preprocess { records } => {
            if records.is_some() {
                cfg.records = records;
            }
            commands::preprocess_cmd(&cfg, &out)
        }
        Command::Train {
            data,
            loss,
            mask,
            hidden,
            ensemble,
            name,
        } => {
            if data.is_some() {
                cfg.data_dir = data;
            }
            if let Some(l) = loss {
                cfg.loss = l;
            }
            if let Some(m) = mask {
                let (nwp, obs) = match m.as_str() {
                    "none" => (false, false),
                    "nwp" => (true, false),
                    "obs" | "observations" => (false, true),
                    other => return Err(anyhow!(Usage(format!("unknown mask `{other}` (none, nwp or obs)")))),
                };
                cfg.mask_nwp = nwp;
                cfg.mask_obs = obs;
            }
            if let Some(h) = hidden {
                cfg.set("hidden_sizes", &h)?;
            }
            if let Some(k) = ensemble {
                cfg.ensemble_size = k;
            }
            commands::train_cmd(&cfg, &out, &name)
        }
        Command::Predict {
            members,
            data,
            z,
            variance,
            output,
        } => {
            if !members.is_empty() {
                cfg.members = members;
            }
            if data.is_some() {
                cfg.test_data = data;
            }
            if let Some(z) = z {
                cfg.z = z;
            }
            if let Some(v) = variance {
                cfg.variance_mode = v;
            }
            if output.is_some() {
                cfg.forecast = output;
            }
            commands::predict_cmd(&cfg, &out)
        }
        Command::Evaluate {
            forecast,
            data,
            nwp,
            oracle,
            ttest,
            z,
            name,
        } => {
            if let [a, b] = &ttest[..] {
                return commands::ttest_cmd(&out, a, b);
            }
            if forecast.is_some() {
                cfg.forecast = forecast;
            }
            if data.is_some() {
                cfg.test_data = data;
            }
            if let Some(z) = z {
                cfg.z = z;
            }
            let source = match (nwp, oracle) {
                (true, _) => EvalSource::Nwp,
                (false, Some(truth)) => {
                    if truth.is_some() {
                        cfg.truth = truth;
                    }
                    EvalSource::Oracle
                }
                (false, None) => EvalSource::Forecast,
            };
            commands::evaluate_cmd(&cfg, &out, source, &name)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match e.chain().find_map(|c| c.downcast_ref::<duq_core::Error>()) {
        Some(duq_core::Error::Diverged { .. }) => 3,
        Some(duq_core::Error::Config(_) | duq_core::Error::InvalidZ(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
