//! Episodic evaluation, hyperparameter sweeps, and their reports.

pub mod cli;

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::classifier::{classify_episode, InferenceConfig, Refinement};
use crate::episodes::{Dataset, EpisodeSampler, EpisodeSpec, SyntheticSpec};
use crate::error::{Error, Result};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "ATA_WORKERS";

/// Where the evaluated sequences came from, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    InMemory,
    Synthetic(SyntheticSpec),
    Container {
        path: String,
        labels: Option<String>,
    },
}

/// Full configuration behind a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub data: DataSource,
    pub episodes: EpisodeSpec,
    pub inference: InferenceConfig,
    pub alignment: AlignmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// `1.96 * sample_std / sqrt(episodes)`.
    pub ci95_halfwidth: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_episode_accuracies: Option<Vec<f64>>,
}

impl EvalReport {
    /// `(lower, upper)` of the 95% interval, clipped to `[0, 1]` for display.
    pub fn display_interval(&self) -> (f64, f64) {
        (
            (self.mean_accuracy - self.ci95_halfwidth).clamp(0.0, 1.0),
            (self.mean_accuracy + self.ci95_halfwidth).clamp(0.0, 1.0),
        )
    }

    /// Same report without timing, for byte-stable output.
    pub fn without_timing(mut self) -> Self {
        self.wall_time_seconds = None;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    Alpha,
    Nu,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Nu => "nu",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "alpha" => Ok(SweepAxis::Alpha),
            "nu" => Ok(SweepAxis::Nu),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Worker threads; `None` reads `ATA_WORKERS`, then falls back to all cores.
    pub workers: Option<usize>,
    pub keep_per_episode: bool,
    pub data: DataSource,
}

pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn resolve_workers(opts: &EvalOptions) -> usize {
    opts.workers
        .or_else(workers_from_env)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Mean and 95% half-width of per-episode accuracies.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Per-episode accuracies, in episode-index order.
pub fn episode_accuracies(
    ds: &Dataset,
    espec: &EpisodeSpec,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
    workers: usize,
) -> Result<Vec<f64>> {
    icfg.validate()?;
    acfg.validate()?;
    let sampler = EpisodeSampler::new(ds, *espec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        (0..espec.num_episodes)
            .into_par_iter()
            .map(|i| {
                let ep = sampler.episode(i);
                classify_episode(&ep, icfg, acfg).map(|c| c.accuracy(&ep.query_labels))
            })
            .collect()
    })
}

pub fn evaluate(
    ds: &Dataset,
    espec: &EpisodeSpec,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
) -> Result<EvalReport> {
    evaluate_with(ds, espec, icfg, acfg, &EvalOptions::default())
}

pub fn evaluate_with(
    ds: &Dataset,
    espec: &EpisodeSpec,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if espec.num_episodes == 0 {
        return Err(Error::InvalidConfig(
            "at least one episode is required".into(),
        ));
    }
    let start = Instant::now();
    let acc = episode_accuracies(ds, espec, icfg, acfg, resolve_workers(opts))?;
    let (mean, half) = mean_and_ci95(&acc);
    Ok(EvalReport {
        config: ReportConfig {
            data: opts.data.clone(),
            episodes: *espec,
            inference: *icfg,
            alignment: *acfg,
        },
        episodes: acc.len(),
        mean_accuracy: mean,
        ci95_halfwidth: half,
        wall_time_seconds: Some(start.elapsed().as_secs_f64()),
        per_episode_accuracies: opts.keep_per_episode.then_some(acc),
    })
}

/// Applies one axis value to the inference config. The alpha and nu axes
/// weight the extra terms of the inductive refinement objective, so they
/// need `refine = inductive`.
pub fn apply_axis(axis: SweepAxis, value: f64, icfg: &InferenceConfig) -> Result<InferenceConfig> {
    let mut out = *icfg;
    match axis {
        SweepAxis::Beta => out.beta = value,
        SweepAxis::Alpha | SweepAxis::Nu => {
            if icfg.refine != Refinement::Inductive {
                return Err(Error::InvalidConfig(format!(
                    "{axis} sweeps act on the inductive refinement objective; use refine = inductive"
                )));
            }
            if axis == SweepAxis::Alpha {
                out.inductive_alpha = value;
            } else {
                out.inductive_nu = value;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// One evaluation per axis value over the same episodes.
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    ds: &Dataset,
    espec: &EpisodeSpec,
    icfg: &InferenceConfig,
    acfg: &AlignmentConfig,
    opts: &EvalOptions,
) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig(
            "a sweep needs at least two values".into(),
        ));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "sweep values must be strictly increasing".into(),
        ));
    }
    let configs = values
        .iter()
        .map(|&v| apply_axis(axis, v, icfg))
        .collect::<Result<Vec<_>>>()?;
    let points = values
        .iter()
        .zip(&configs)
        .map(|(&value, cfg)| {
            evaluate_with(ds, espec, cfg, acfg, opts).map(|report| SweepPoint { value, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { axis, points })
}

const CSV_HEADER: [&str; 18] = [
    "n_way",
    "k_shot",
    "queries_per_class",
    "episodes",
    "seed",
    "beta",
    "refine",
    "refine_iters",
    "inductive_lr",
    "inductive_steps",
    "alpha",
    "nu",
    "lambda",
    "sigma",
    "mean_accuracy",
    "ci95_halfwidth",
    "ci95_lower",
    "ci95_upper",
];

fn csv_row(r: &EvalReport) -> Vec<String> {
    let (lo, hi) = r.display_interval();
    let c = &r.config;
    vec![
        c.episodes.n_way.to_string(),
        c.episodes.k_shot.to_string(),
        c.episodes.queries_per_class.to_string(),
        r.episodes.to_string(),
        c.episodes.seed.to_string(),
        c.inference.beta.to_string(),
        c.inference.refine.to_string(),
        c.inference.refine_iters.to_string(),
        c.inference.inductive_lr.to_string(),
        c.inference.inductive_steps.to_string(),
        c.inference.inductive_alpha.to_string(),
        c.inference.inductive_nu.to_string(),
        c.alignment.lambda.to_string(),
        c.alignment.sigma.to_string(),
        r.mean_accuracy.to_string(),
        r.ci95_halfwidth.to_string(),
        lo.to_string(),
        hi.to_string(),
    ]
}

fn csv_error(e: impl fmt::Display) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn write_eval_csv<W: Write>(out: W, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    w.write_record(csv_row(report)).map_err(csv_error)?;
    w.flush().map_err(csv_error)
}

/// One row per sweep point, prefixed by the axis and its value.
pub fn write_sweep_csv<W: Write>(out: W, report: &SweepReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["axis", "value"];
    header.extend(CSV_HEADER);
    w.write_record(&header).map_err(csv_error)?;
    for p in &report.points {
        let mut row = vec![report.axis.to_string(), p.value.to_string()];
        row.extend(csv_row(&p.report));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush().map_err(csv_error)
}
