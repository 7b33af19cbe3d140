//! `cdr`: dataset preparation, training, evaluation, η sweeps, poisonous
//! imputation analysis and verification suites.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cdr_core::experiment::{
    evaluate_checkpoint, prepare_dataset, prepare_synthetic, run_analyze_poisonous, run_sweep_eta, run_train,
    results_csv, run_verify, CellOutcome, ExperimentConfig, PrepareSpec, RawFormat, Suite, SyntheticSpec,
};
use cdr_core::models::LossKind;
use cdr_core::simulator::WorldConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdr", version, about = "Conservative doubly robust debiased recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw logs (or generate a synthetic world) into a dataset directory.
    Prepare(PrepareArgs),
    /// Train one method per configured seed.
    Train(RunArgs),
    /// Score saved checkpoints on a test file.
    Evaluate(EvaluateArgs),
    /// Train with the CDR filter at every η of the sweep grid.
    SweepEta(RunArgs),
    /// Poisonous-imputation ratios with and without the filter.
    AnalyzePoisonous(RunArgs),
    /// Run a Monte Carlo verification suite.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 30×30, mean propensity 0.05 (estimator studies).
    Default,
    /// 40×40, mean propensity 0.2 (η sweeps).
    Sweep,
    /// 20×20, mean propensity 0.3, strong bias (method comparisons).
    Small,
}

#[derive(Args)]
struct PrepareArgs {
    /// Biased training log.
    #[arg(long, required_unless_present = "synthetic")]
    train: Option<PathBuf>,
    /// Unbiased log, split into validation and test.
    #[arg(long, required_unless_present = "synthetic")]
    test: Option<PathBuf>,
    #[arg(long, default_value = "triplets")]
    format: String,
    #[arg(long, default_value = "dataset")]
    name: String,
    /// Ratings strictly above this value become positive labels.
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Generate a synthetic world instead of reading logs.
    #[arg(long, value_enum, conflicts_with_all = ["train", "test"])]
    synthetic: Option<Preset>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Recommendation-model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Imputation-model checkpoint; adds the poisonous ratio.
    #[arg(long)]
    imputation: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "BCE")]
    loss: String,
    /// Directory for `metrics.json`; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// formulas, lemma1, tailbound or corollary.
    #[arg(long)]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Directory for `verify-<suite>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Marks an error as a usage problem (exit 1).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A suite ran but some check failed (exit 2).
#[derive(Debug)]
struct VerificationFailed;

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return 2;
    }
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cdr_core::Error>() {
            return match e {
                cdr_core::Error::Config(_) | cdr_core::Error::InvalidArgument(_) => 1,
                cdr_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<VerificationFailed>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => {
            let outcomes = run_train(&load_config(&a)?)?;
            print_outcomes(&outcomes);
            Ok(())
        }
        Command::Evaluate(a) => evaluate(a),
        Command::SweepEta(a) => {
            let outcomes = run_sweep_eta(&load_config(&a)?)?;
            print_outcomes(&outcomes);
            Ok(())
        }
        Command::AnalyzePoisonous(a) => {
            let outcomes = run_analyze_poisonous(&load_config(&a)?)?;
            print_outcomes(&outcomes);
            Ok(())
        }
        Command::Verify(a) => verify(a),
    }
}

fn load_config(a: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    if !a.config.is_file() {
        return Err(Usage(format!("config file {} not found", a.config.display())).into());
    }
    let mut cfg = ExperimentConfig::load(&a.config).with_context(|| format!("loading {}", a.config.display()))?;
    if let Some(seed) = a.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &a.out {
        cfg.run.output = out.clone();
    }
    if let Some(w) = a.workers {
        cfg.run.workers = w;
    }
    if let Some(k) = a.k {
        cfg.run.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcomes(outcomes: &[CellOutcome]) {
    print!("{}", results_csv(outcomes));
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let d = match a.synthetic {
        Some(preset) => {
            let spec = match preset {
                Preset::Default => SyntheticSpec {
                    world: WorldConfig::new(30, 30, a.seed, 1.5),
                    unbiased_fraction: 0.35,
                    validation_fraction: a.validation_fraction,
                },
                Preset::Sweep => SyntheticSpec::sweep_world(a.seed),
                Preset::Small => SyntheticSpec::small_biased_world(a.seed),
            };
            prepare_synthetic(&spec, &a.out)?
        }
        None => {
            let format: RawFormat = a.format.parse().map_err(Usage)?;
            let (Some(train), Some(test)) = (a.train, a.test) else {
                bail!(Usage("--train and --test are required".into()));
            };
            let spec = PrepareSpec {
                name: a.name,
                train,
                test,
                format,
                threshold: a.threshold,
                validation_fraction: a.validation_fraction,
                seed: a.seed,
            };
            prepare_dataset(&spec, &a.out)?
        }
    };
    println!(
        "{}: {} users, {} items; train {}, validation {}, test {} -> {}",
        d.meta.name,
        d.meta.num_users,
        d.meta.num_items,
        d.meta.train,
        d.meta.validation,
        d.meta.test,
        a.out.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    if a.k == 0 {
        bail!(Usage("--k must be >= 1".into()));
    }
    let loss: LossKind = a.loss.parse().map_err(|e: String| Usage(e))?;
    let report = evaluate_checkpoint(&a.checkpoint, a.imputation.as_deref(), &a.test, a.k, loss)
        .with_context(|| format!("evaluating {}", a.checkpoint.display()))?;
    let json = serde_json_pretty(&report);
    match a.out {
        Some(dir) => write_file(&dir, "metrics.json", &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> anyhow::Result<()> {
    let suite: Suite = a.suite.parse().map_err(Usage)?;
    let report = run_verify(suite, a.seed, a.workers)?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        write_file(dir, &format!("verify-{}.json", a.suite.to_ascii_lowercase()), &serde_json_pretty(&report))?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(VerificationFailed.into())
    }
}

fn serde_json_pretty<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write_file(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))
}
