use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dsnt_core::checkpoint;
use dsnt_core::data::{self, Dataset};
use dsnt_core::gradcheck::{self, GradcheckConfig, Scope};
use dsnt_core::harness::{
    evaluate_splits, resolution_sweep, rows_to_csv, spatialgen_config, spatialgen_experiment, train, ExperimentConfig,
    MetricsReport, SPATIALGEN_HEADS,
};
use dsnt_core::model::HeadKind;

const REPORT: &str = "report.csv";
const CONFIG_ECHO: &str = "config.echo.json";
const CHECKPOINT: &str = "model.ckpt";
const TIMING: &str = "timing.json";

#[derive(Parser)]
#[command(name = "dsnt", version, about = "Coordinate regression experiments with DSNT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the experiment seed (initialization, shuffling, augmentation).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the configured splits.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the head: hm, fc, dsnt or dsntr.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the configured splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all-ops, dsnt-only or losses.
        #[arg(long, default_value = "all-ops")]
        scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Train every head at several heatmap resolutions.
    SweepResolution {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "hm,fc,dsnt,dsntr")]
        heads: Vec<String>,
    },
    /// Train on left-half coordinates, test on both halves.
    Spatialgen {
        #[command(flatten)]
        common: Common,
    },
    /// Generate the configured training set and write it to `dataset.bin`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn prepare_out(dir: &Path, config: &impl serde::Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_ECHO), serde_json::to_string_pretty(config)? + "\n")?;
    Ok(())
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, head, epochs } => {
            let mut config = load_config(&common)?;
            if let Some(h) = head {
                config.head = HeadKind::from_label(&h)?;
            }
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.validate()?;
            prepare_out(&common.out, &config)?;
            let outcome = train(&config)?;
            write(&common.out, REPORT, &outcome.report.to_csv()?)?;
            checkpoint::save(&outcome.model, &common.out.join(CHECKPOINT))?;
            write(
                &common.out,
                TIMING,
                &serde_json::json!({ "wall_clock_seconds": outcome.wall_clock_seconds }).to_string(),
            )?;
            for s in &outcome.report.splits {
                println!("{} mean error {:.4} pck {:?}", s.split, s.mean_error, s.pck);
            }
        }
        Command::Eval { common, checkpoint: path } => {
            let config = load_config(&common)?;
            config.validate()?;
            let model = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if model.spec() != &config.model_spec() {
                anyhow::bail!(dsnt_core::Error::InvalidConfig(
                    "checkpoint architecture does not match the config".into()
                ));
            }
            prepare_out(&common.out, &config)?;
            let report = MetricsReport {
                head: config.head.label().to_string(),
                epoch_losses: Vec::new(),
                splits: evaluate_splits(&model, &config)?,
            };
            write(&common.out, REPORT, &report.to_csv()?)?;
            for s in &report.splits {
                println!("{} mean error {:.4} pck {:?}", s.split, s.mean_error, s.pck);
            }
        }
        Command::Gradcheck { scope, out, seeds } => {
            let scope: Scope = scope.parse()?;
            let cfg = GradcheckConfig {
                seeds,
                ..GradcheckConfig::default()
            };
            let report = gradcheck::run(scope, &cfg)?;
            print!("{report}");
            println!("worst relative error {:.3e}", report.worst());
            if let Some(dir) = out {
                prepare_out(&dir, &cfg)?;
                write(&dir, REPORT, &rows_to_csv(&report.cases)?)?;
            }
            return Ok(report.passed());
        }
        Command::SweepResolution {
            common,
            resolutions,
            heads,
        } => {
            let config = load_config(&common)?;
            config.validate()?;
            let heads = heads
                .iter()
                .map(|h| HeadKind::from_label(h))
                .collect::<dsnt_core::Result<Vec<_>>>()?;
            prepare_out(&common.out, &config)?;
            let rows = resolution_sweep(&config, &resolutions, &heads)?;
            let csv = rows_to_csv(&rows)?;
            write(&common.out, REPORT, &csv)?;
            print!("{csv}");
        }
        Command::Spatialgen { common } => {
            let config = load_config(&common)?;
            for head in SPATIALGEN_HEADS {
                spatialgen_config(&config, head()).validate()?;
            }
            prepare_out(&common.out, &config)?;
            let rows = spatialgen_experiment(&config)?;
            let csv = rows_to_csv(&rows)?;
            write(&common.out, REPORT, &csv)?;
            print!("{csv}");
        }
        Command::GenData { common } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = common.seed {
                config.dataset.seed = seed;
            }
            config.dataset.validate()?;
            prepare_out(&common.out, &config)?;
            let ds = data::generate(&config.dataset)?;
            ds.save(&common.out.join("dataset.bin"))?;
            let reread = Dataset::load(&common.out.join("dataset.bin"))?;
            println!("wrote {} samples", reread.len());
        }
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dsnt_core::Error>() {
        Some(dsnt_core::Error::Divergence { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
