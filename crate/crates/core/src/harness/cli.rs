//! Command-line front end. Exit codes: 0 success, 1 validation error,
//! 2 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use super::{
    evaluate_with, sweep, write_eval_csv, write_sweep_csv, DataSource, EvalOptions, SweepAxis,
};
use crate::alignment::AlignmentConfig;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::classifier::{predict_with, InferenceConfig, Refinement};
use crate::episodes::{self, Dataset, EpisodeSpec, Family, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{train_prototypes_with_history, LossConfig, Sample};

#[derive(Debug, Parser)]
#[command(
    name = "ata",
    version,
    about = "Appearance and temporal alignment for few-shot sequence classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into a feature container.
    GenData {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a prototype bank on a base container.
    Train(TrainArgs),
    /// Episodic evaluation with a 95% confidence interval.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Paired sweep over one hyperparameter.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "mixed", value_parser = parse_family)]
    family: Family,
    #[arg(long, default_value_t = 10)]
    num_classes: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Channels per frame.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[arg(long, default_value_t = 1)]
    jitter: usize,
    #[arg(long, default_value_t = 20)]
    samples_per_class: usize,
    #[arg(long = "data-seed", default_value_t = 0)]
    data_seed: u64,
}

impl SynthArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            family: self.family,
            num_classes: self.num_classes,
            m: self.frames,
            c: self.channels,
            noise_std: self.noise_std,
            jitter: self.jitter,
            samples_per_class: self.samples_per_class,
            seed: self.data_seed,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Feature container; synthetic data is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `id,label` CSV overriding container labels.
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, DataSource)> {
        match &self.data {
            Some(path) => {
                let ds = episodes::load_features_with_labels(path, self.labels.as_ref())?;
                let source = DataSource::Container {
                    path: path.display().to_string(),
                    labels: self.labels.as_ref().map(|p| p.display().to_string()),
                };
                Ok((ds, source))
            }
            None => {
                let spec = self.synth.spec();
                Ok((episodes::generate(&spec)?, DataSource::Synthetic(spec)))
            }
        }
    }

    /// Temporal weight default: 0 for order-insensitive data, 0.5 otherwise.
    fn default_beta(&self) -> f64 {
        if self.data.is_none() && self.synth.family == Family::OrderInsensitive {
            0.0
        } else {
            0.5
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long = "queries", default_value_t = 15)]
    queries_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Mixture weight of the temporal prediction.
    #[arg(long)]
    beta: Option<f64>,
    /// Temporal-term weight of the inductive refinement objective.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Entropy-term weight of the inductive refinement objective.
    #[arg(long, default_value_t = 0.0)]
    nu: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value = "none", value_parser = parse_refine)]
    refine: Refinement,
    #[arg(long, default_value_t = 10)]
    refine_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    inductive_lr: f64,
    #[arg(long, default_value_t = 50)]
    inductive_steps: usize,
    /// Episode sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
    /// Include every episode's accuracy in the report.
    #[arg(long)]
    per_episode: bool,
    /// Record wall time in the report (makes output run-dependent).
    #[arg(long)]
    timing: bool,
    /// Worker threads (overrides ATA_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

impl EvalArgs {
    fn configs(&self, default_beta: f64) -> (EpisodeSpec, InferenceConfig, AlignmentConfig) {
        let espec = EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            queries_per_class: self.queries_per_class,
            num_episodes: self.episodes,
            seed: self.seed,
        };
        let icfg = InferenceConfig {
            beta: self.beta.unwrap_or(default_beta),
            refine: self.refine,
            refine_iters: self.refine_iters,
            inductive_lr: self.inductive_lr,
            inductive_steps: self.inductive_steps,
            inductive_alpha: self.alpha,
            inductive_nu: self.nu,
        };
        let acfg = AlignmentConfig {
            lambda: self.lambda,
            sigma: self.sigma,
            ..AlignmentConfig::default()
        };
        (espec, icfg, acfg)
    }

    fn options(&self, data: DataSource) -> EvalOptions {
        EvalOptions {
            workers: self.workers,
            keep_per_episode: self.per_episode,
            data,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Base-set feature container.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    /// Checkpoint path; settings go to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    nu: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    checkpoint: String,
    config: LossConfig,
    alignment: AlignmentConfig,
    num_classes: usize,
    samples: usize,
    initial_loss: f64,
    final_loss: f64,
    accepted_epochs: usize,
    rejected_epochs: usize,
    final_learning_rate: f64,
    train_accuracy: f64,
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_refine(s: &str) -> std::result::Result<Refinement, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => io::stdout()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let ds = episodes::load_features_with_labels(&args.data, args.labels.as_ref())?;
    let lcfg = LossConfig {
        alpha: args.alpha,
        nu: args.nu,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let acfg = AlignmentConfig {
        lambda: args.lambda,
        sigma: args.sigma,
        ..AlignmentConfig::default()
    };
    acfg.validate()?;
    let samples: Vec<Sample<'_>> = ds
        .sequences
        .iter()
        .map(|s| (s.features(), s.label.expect("dataset is labelled")))
        .collect();
    let outcome = train_prototypes_with_history(&samples, ds.num_classes(), &lcfg, &acfg)?;

    let aligner = crate::alignment::Aligner::new(acfg, ds.m)?;
    let mut hits = 0;
    for &(x, y) in &samples {
        let p = predict_with(x, &outcome.bank, 0.0, &aligner)?;
        hits += usize::from(crate::linalg::argmax(&p) == y);
    }

    let meta = CheckpointMeta {
        seed: args.seed,
        alpha: args.alpha,
        nu: args.nu,
        lambda: args.lambda,
        sigma: args.sigma,
        epochs: args.epochs,
    };
    save_checkpoint(&args.out, &outcome.bank, &meta)?;
    let summary = TrainSummary {
        checkpoint: args.out.display().to_string(),
        config: lcfg,
        alignment: acfg,
        num_classes: ds.num_classes(),
        samples: samples.len(),
        initial_loss: outcome.loss_history[0].total,
        final_loss: outcome
            .loss_history
            .last()
            .expect("history starts non-empty")
            .total,
        accepted_epochs: outcome.loss_history.len() - 1,
        rejected_epochs: outcome.rejected_epochs,
        final_learning_rate: outcome.final_learning_rate,
        train_accuracy: hits as f64 / samples.len() as f64,
    };
    write_output(None, &to_json(&summary)?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { synth, out } => {
            let ds = episodes::generate(&synth.spec())?;
            episodes::save_dataset(&out, &ds)?;
            eprintln!(
                "wrote {} sequences ({} classes, M={}, C={}) to {}",
                ds.len(),
                ds.num_classes(),
                ds.m,
                ds.c,
                out.display()
            );
            Ok(())
        }
        Command::Train(args) => run_train(&args),
        Command::Eval { data, eval } => {
            let (espec, icfg, acfg) = eval.configs(data.default_beta());
            let (ds, source) = data.load()?;
            let mut report = evaluate_with(&ds, &espec, &icfg, &acfg, &eval.options(source))?;
            if !eval.timing {
                report = report.without_timing();
            }
            let bytes = if eval.format == "csv" {
                let mut buf = Vec::new();
                write_eval_csv(&mut buf, &report)?;
                buf
            } else {
                to_json(&report)?
            };
            write_output(eval.out.as_deref(), &bytes)
        }
        Command::Ablate {
            data,
            eval,
            axis,
            values,
        } => {
            let (espec, icfg, acfg) = eval.configs(data.default_beta());
            let (ds, source) = data.load()?;
            let mut report = sweep(
                axis,
                &values,
                &ds,
                &espec,
                &icfg,
                &acfg,
                &eval.options(source),
            )?;
            if !eval.timing {
                for p in &mut report.points {
                    p.report.wall_time_seconds = None;
                }
            }
            let bytes = if eval.format == "csv" {
                let mut buf = Vec::new();
                write_sweep_csv(&mut buf, &report)?;
                buf
            } else {
                to_json(&report)?
            };
            write_output(eval.out.as_deref(), &bytes)
        }
    }
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn bad_flags_are_validation_errors() {
        assert_eq!(run(["ata", "eval", "--refine", "sometimes"]), 1);
        assert_eq!(run(["ata", "frobnicate"]), 1);
        assert_eq!(run(["ata", "eval", "--episodes", "2", "--beta", "2.0"]), 1);
    }
}
