use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sparsenn_cli::experiment::{self, CHECKPOINT};
use sparsenn_cli::{exit_code, ExperimentConfig};
use sparsenn_core::{InferenceMode, PredictorMode};

#[derive(Parser)]
#[command(name = "sparsenn", version, about = "Train, evaluate and simulate networks with low-rank output-sparsity predictors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Predictor training mode: end_to_end or svd_static.
        #[arg(long, value_parser = parse_predictor_mode)]
        mode: Option<PredictorMode>,
    },
    /// Float and fixed-point test error of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.spnn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Float gating used for evaluation: end_to_end or svd_static.
        #[arg(long, value_parser = parse_predictor_mode)]
        mode: Option<PredictorMode>,
    },
    /// Cycle-level simulation of a checkpoint.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inference mode(s): uv_on, uv_off. Repeatable; defaults to the config.
        #[arg(long, value_parser = parse_inference_mode)]
        mode: Vec<InferenceMode>,
    },
    /// Train across ranks and predictor modes.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize the artifacts of a run directory as markdown.
    Report {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_predictor_mode(s: &str) -> Result<PredictorMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown predictor mode {s:?}"))
}

fn parse_inference_mode(s: &str) -> Result<InferenceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown inference mode {s:?}"))
}

fn load(common: &Common) -> Result<(ExperimentConfig, String, PathBuf)> {
    let (mut cfg, text) = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, text, out))
}

fn checkpoint_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| out.join(CHECKPOINT))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, mode } => {
            let (mut cfg, text, out) = load(&common)?;
            if let Some(mode) = mode {
                cfg.train.predictor_mode = mode;
            }
            let outcome = experiment::cmd_train(&cfg, &text, &out)?;
            if let Some(last) = outcome.report.last() {
                println!("epoch {} loss {:.4} TER {:.2}%", last.epoch, last.loss, last.ter);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval { common, checkpoint, mode } => {
            let (cfg, text, out) = load(&common)?;
            let ckpt = checkpoint_path(checkpoint, &out);
            let mode = mode.unwrap_or(cfg.train.predictor_mode);
            let r = experiment::cmd_eval(&cfg, &text, &ckpt, &out, mode).context("eval")?;
            println!("float TER {:.2}%", r.float_ter);
            for (m, ter) in &r.fixed_point_ter {
                println!("fixed-point {} TER {:.2}%", m.as_str(), ter);
            }
        }
        Command::Simulate { common, checkpoint, mode } => {
            let (cfg, text, out) = load(&common)?;
            let ckpt = checkpoint_path(checkpoint, &out);
            let modes = if mode.is_empty() { cfg.simulate.modes.clone() } else { mode };
            match experiment::cmd_simulate(&cfg, &text, &ckpt, &out, &modes)? {
                Some(s) => println!(
                    "{} samples: cycle reduction {:.1}%, power ratio {:.3}",
                    s.samples,
                    100.0 * s.total.cycle_reduction,
                    s.total.power_ratio
                ),
                None => println!("wrote {}", out.display()),
            }
        }
        Command::Sweep { common } => {
            let (cfg, text, out) = load(&common)?;
            let path = experiment::cmd_sweep(&cfg, &text, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Report { out } => {
            print!("{}", experiment::cmd_report(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
