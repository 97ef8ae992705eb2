use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "tgpst",
    version,
    about = "Gaussian-process regression on image tensors"
)]
pub struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic 25x25x3 dataset.
    Simulate(SimulateArgs),
    /// Fit a model on the training part of a dataset.
    Train(TrainArgs),
    /// Predictive means and variances from a fitted model.
    Predict(PredictArgs),
    /// Score predictions: RMSE, R2, MSLL, TSS.
    Evaluate(EvaluateArgs),
    /// Explained-variation tables and active feature maps.
    Explain(ExplainArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pixel standard deviation (default sqrt(0.3)).
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Mean of the signal block pixels.
    #[arg(long, default_value_t = 4.0)]
    pub signal_mean: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Fraction of samples used for training.
    #[arg(long, default_value_t = 0.75)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    pub fn check(&self) -> Result<(), CliError> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(CliError::invalid(format!(
                "--train-fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub tensors: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,

    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Comma-separated candidates; selects lambda by k-fold CV.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Latent dims h,w (ignored by --baseline-gp).
    #[arg(long, value_parser = parse_pair, default_value = "3,3")]
    pub latent: (usize, usize),
    /// Kernel ranks r1,r2,r3 (default: full, or 3,3,C for the baseline).
    #[arg(long, value_parser = parse_triple)]
    pub ranks: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub step_init: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol_param: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_loss: f64,
    /// Seeds random initialization and the CV folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_backtrack: bool,
    #[arg(long)]
    pub no_warm_start: bool,
    #[arg(long, default_value_t = tgpst::optim::WARM_START_SWEEPS)]
    pub als_sweeps: usize,
    /// Plain tensor GP: A and B frozen at the identity, no penalty.
    #[arg(long)]
    pub baseline_gp: bool,
}

impl TrainArgs {
    pub fn check(&self) -> Result<(), CliError> {
        self.split.check()?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CliError::invalid(format!(
                "--lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if let Some(grid) = &self.lambda_grid {
            if self.baseline_gp {
                return Err(CliError::invalid(
                    "--lambda-grid has no effect with --baseline-gp",
                ));
            }
            if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                return Err(CliError::invalid(
                    "--lambda-grid values must be finite and nonnegative",
                ));
            }
            if self.folds < 2 {
                return Err(CliError::invalid(format!(
                    "--folds must be at least 2, got {}",
                    self.folds
                )));
            }
        }
        if self.max_iter == 0 {
            return Err(CliError::invalid("--max-iter must be positive"));
        }
        for (flag, v) in [
            ("--step-init", self.step_init),
            ("--tol-param", self.tol_param),
            ("--tol-loss", self.tol_loss),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::invalid(format!(
                    "{flag} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Tensors the GP is conditioned on.
    #[arg(long)]
    pub tensors: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// split.csv from `train`: condition on its train rows, predict its test rows.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Predict these tensors instead of the split's test rows.
    #[arg(long)]
    pub test_tensors: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl PredictArgs {
    pub fn check(&self) -> Result<(), CliError> {
        if self.split.is_none() && self.test_tensors.is_none() {
            return Err(CliError::invalid("predict needs --split or --test-tensors"));
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// predictions.csv from `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Labels indexed by the prediction rows' `index` column.
    #[arg(long)]
    pub labels: PathBuf,
    /// Model whose noise scale enters MSLL.
    #[arg(long)]
    pub model: PathBuf,
    /// Class boundary for TSS.
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f64,
    /// Also write metrics.csv and a manifest here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl EvaluateArgs {
    pub fn check(&self) -> Result<(), CliError> {
        if !self.threshold.is_finite() {
            return Err(CliError::invalid("--threshold must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tensors: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Restrict to the train rows of this split.csv.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Smallest absolute pixel weight of a reported feature map.
    #[arg(long, default_value_t = 5e-3)]
    pub threshold: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl ExplainArgs {
    pub fn check(&self) -> Result<(), CliError> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(CliError::invalid(
                "--threshold must be finite and nonnegative",
            ));
        }
        Ok(())
    }
}

fn parse_list(s: &str, len: usize) -> Result<Vec<usize>, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != len {
        return Err(format!(
            "expected {len} comma-separated integers, got {}",
            parts.len()
        ));
    }
    if parts.contains(&0) {
        return Err("dimensions must be positive".into());
    }
    Ok(parts)
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let v = parse_list(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize), String> {
    let v = parse_list(s, 3)?;
    Ok((v[0], v[1], v[2]))
}
