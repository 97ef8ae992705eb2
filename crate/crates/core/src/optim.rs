//! Alternating proximal gradient fitting of [`ModelParams`].
//!
//! One iteration updates `A` (gradient step + TV prox), then `B` with the new
//! `A`, rescales so that `‖A‖_F = 1`, takes a joint gradient step on
//! `U₁, U₂, U₃` and finally on `log σ`. Each block either takes the fixed
//! step `step_init` or backtracks from it, halving until the penalized loss
//! passes the sufficient-decrease test.

use nalgebra::{DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    neg_log_likelihood, neg_log_likelihood_latent, ContractionFactors, Dataset, Evaluation,
    KernelFactors, ModelParams, NoisyGram,
};
use crate::metrics::rmse;
use crate::predict::predict;
use crate::tensor::{
    contract, inner, mode_product, unfold_product, vectorize, Matrix, Mode, Tensor3,
};
use crate::tv::{fused_penalty, prox_tv};

/// Default alternating least-squares sweeps run by [`warm_start`] after the
/// spectral initialization. Sweeps interpolate pixel noise on small noisy
/// samples but sharpen the start on clean low-rank data.
pub const WARM_START_SWEEPS: usize = 0;
/// Ridge damping of the warm-start regressions, relative to the mean feature energy.
pub const WARM_START_RIDGE: f64 = 1e-6;
/// Maximum number of step halvings per block before the block is left unchanged.
pub const MAX_HALVINGS: usize = 60;

/// Hyperparameters of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lambda: f64,
    pub latent_dims: (usize, usize),
    pub ranks: (usize, usize, usize),
    pub max_iter: usize,
    pub step_init: f64,
    pub tol_param: f64,
    pub tol_loss: f64,
    pub seed: u64,
    pub backtrack: bool,
    pub warm_start: bool,
    /// ALS sweeps of the warm-start tensor regression.
    #[serde(default)]
    pub als_sweeps: usize,
    /// Freeze `A = I_H`, `B = I_W` and drop the penalty: a plain tensor GP.
    pub baseline_gp: bool,
}

impl FitConfig {
    /// Defaults with full ranks `(h, w, channels)`.
    pub fn new(latent_dims: (usize, usize), channels: usize) -> Self {
        FitConfig {
            lambda: 1.0,
            latent_dims,
            ranks: (latent_dims.0, latent_dims.1, channels),
            max_iter: 500,
            step_init: 2e-5,
            tol_param: 1e-4,
            tol_loss: 1e-8,
            seed: 0,
            backtrack: true,
            warm_start: true,
            als_sweeps: WARM_START_SWEEPS,
            baseline_gp: false,
        }
    }

    /// Tensor-GP baseline on `(H, W, C)` inputs with the given kernel ranks.
    pub fn baseline(input_dims: (usize, usize, usize), ranks: (usize, usize, usize)) -> Self {
        FitConfig {
            lambda: 0.0,
            ranks,
            baseline_gp: true,
            ..FitConfig::new((input_dims.0, input_dims.1), input_dims.2)
        }
    }

    /// Penalty strength actually applied (zero for the baseline).
    pub fn effective_lambda(&self) -> f64 {
        if self.baseline_gp {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn validate(&self, input_dims: (usize, usize, usize)) -> Result<()> {
        let (big_h, big_w, c) = input_dims;
        let (h, w) = self.latent_dims;
        let (r1, r2, r3) = self.ranks;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if h == 0 || w == 0 || h > big_h || w > big_w {
            return Err(Error::config(format!(
                "latent dims ({h}, {w}) must lie in 1..=({big_h}, {big_w})"
            )));
        }
        if self.baseline_gp && (h, w) != (big_h, big_w) {
            return Err(Error::config(format!(
                "the GP baseline needs latent dims equal to the input dims ({big_h}, {big_w}), got ({h}, {w})"
            )));
        }
        if r1 == 0 || r2 == 0 || r3 == 0 || r1 > h || r2 > w || r3 > c {
            return Err(Error::config(format!(
                "ranks ({r1}, {r2}, {r3}) must lie in 1..=({h}, {w}, {c})"
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter must be positive"));
        }
        for (name, v) in [
            ("step_init", self.step_init),
            ("tol_param", self.tol_param),
            ("tol_loss", self.tol_loss),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Accepted step sizes of one iteration (0 when a block was left unchanged or frozen).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockSteps {
    pub a: f64,
    pub b: f64,
    pub u: f64,
    pub log_sigma: f64,
}

/// Trace of a [`fit`] run. `loss_history[0]` is the penalized loss at the
/// initial point; entry `k` is the loss after iteration `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loss_history: Vec<f64>,
    pub param_delta_history: Vec<f64>,
    pub step_sizes: Vec<BlockSteps>,
    pub iterations_run: usize,
    pub converged: bool,
    pub frozen_contraction: bool,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self
            .loss_history
            .last()
            .expect("history holds the initial loss")
    }
}

/// `A ← A/c`, `B ← B·c` with `c = ‖A‖_F`; unchanged when `A = 0`.
pub fn rescale(p: &ModelParams) -> ModelParams {
    let c = p.contraction.a.norm();
    let mut out = p.clone();
    if c > 0.0 {
        out.contraction.a /= c;
        out.contraction.b *= c;
    }
    out
}

/// Penalized objective `ℓ + λ·R(A, B)`.
pub fn penalized_loss(d: &Dataset, p: &ModelParams, lambda: f64) -> Result<f64> {
    Ok(neg_log_likelihood(d, p)? + lambda * fused_penalty(&p.contraction.a, &p.contraction.b))
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Ridge regression `argmin ‖y − Fβ‖² + ρ‖β‖²` with `ρ` relative to the mean
/// column energy of `F`, solved in primal or dual form by size.
fn ridge(features: &Matrix, y: &DVector<f64>) -> DVector<f64> {
    let (n, p) = features.shape();
    let energy = features.norm_squared() / p as f64;
    let rho = WARM_START_RIDGE * if energy > 0.0 { energy } else { 1.0 };
    let solve = |mut m: Matrix, rhs: DVector<f64>| {
        for i in 0..m.nrows() {
            m[(i, i)] += rho;
        }
        match m.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => m
                .lu()
                .solve(&rhs)
                .unwrap_or_else(|| DVector::zeros(rhs.len())),
        }
    };
    if p <= n {
        solve(features.transpose() * features, features.transpose() * y)
    } else {
        features.transpose() * solve(features * features.transpose(), y.clone())
    }
}

/// Leading eigenvectors (as columns) and eigenvalues of a symmetric matrix.
fn top_eigen(m: Matrix, k: usize) -> (Matrix, Vec<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let n = eig.eigenvectors.nrows();
    let mut vecs = Matrix::zeros(n, k);
    let mut vals = Vec::with_capacity(k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // sign convention: largest-magnitude entry positive
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.neg_mut();
        }
        vecs.set_column(col, &v);
        vals.push(eig.eigenvalues[idx].max(0.0));
    }
    (vecs, vals)
}

/// Bilinear tensor regression `yᵢ ≈ ⟨Xᵢ, T ×₁ Aᵀ ×₂ Bᵀ⟩ = ⟨Xᵢ ×₁ A ×₂ B, T⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRegression {
    pub a: Matrix,
    pub b: Matrix,
    pub core: Tensor3,
}

impl TensorRegression {
    pub fn predict(&self, x: &Tensor3) -> Result<f64> {
        inner(&contract(x, &self.a, &self.b)?, &self.core)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Matrix {
    let p = rows.first().map_or(0, |r| r.len());
    Matrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

fn fit_core(d: &Dataset, a: &Matrix, b: &Matrix, y: &DVector<f64>) -> Result<Tensor3> {
    let rows = d
        .tensors()
        .iter()
        .map(|x| Ok(contract(x, a, b)?.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let beta = ridge(&rows_to_matrix(&rows), y);
    Tensor3::from_vec((a.nrows(), b.nrows(), d.dims().2), beta.as_slice().to_vec())
}

/// [`TensorRegression`] with latent dims `(h, w)`: `A` and `B` start from the
/// leading singular vectors of the mode-1 and mode-2 unfoldings of `Σ yᵢXᵢ`,
/// the core is a ridge fit, and `sweeps` alternating least-squares passes
/// follow.
pub fn tensor_regression(
    d: &Dataset,
    latent_dims: (usize, usize),
    sweeps: usize,
) -> Result<TensorRegression> {
    let (big_h, big_w, c) = d.dims();
    let (h, w) = latent_dims;
    if h == 0 || w == 0 || h > big_h || w > big_w {
        return Err(Error::config(format!(
            "latent dims ({h}, {w}) must lie in 1..=({big_h}, {big_w})"
        )));
    }
    let y = d.label_vector();
    let mut moment = Tensor3::zeros(big_h, big_w, c);
    let mut acc = vec![0.0; moment.len()];
    for (x, yi) in d.tensors().iter().zip(d.labels()) {
        for (s, v) in acc.iter_mut().zip(x.as_slice()) {
            *s += yi * v;
        }
    }
    moment = Tensor3::from_vec(moment.dims(), acc)?;
    let mut a = top_eigen(unfold_product(&moment, &moment, Mode::Rows)?, h)
        .0
        .transpose();
    let mut b = top_eigen(unfold_product(&moment, &moment, Mode::Cols)?, w)
        .0
        .transpose();
    let mut core = fit_core(d, &a, &b, &y)?;
    for _ in 0..sweeps {
        let rows = d
            .tensors()
            .iter()
            .map(|x| {
                Ok(
                    unfold_product(&core, &mode_product(x, &b, Mode::Cols)?, Mode::Rows)?
                        .as_slice()
                        .to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        a = Matrix::from_column_slice(h, big_h, ridge(&rows_to_matrix(&rows), &y).as_slice());
        let rows = d
            .tensors()
            .iter()
            .map(|x| {
                Ok(
                    unfold_product(&core, &mode_product(x, &a, Mode::Rows)?, Mode::Cols)?
                        .as_slice()
                        .to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        b = Matrix::from_column_slice(w, big_w, ridge(&rows_to_matrix(&rows), &y).as_slice());
        let norm = a.norm();
        if norm > 0.0 {
            a /= norm;
            b *= norm;
        }
        core = fit_core(d, &a, &b, &y)?;
    }
    Ok(TensorRegression { a, b, core })
}

/// Truncated higher-order SVD: `Uₖ = diag(top singular values)·(left singular vectors)ᵀ`,
/// plus the multilinear projection of `t` onto the retained subspaces.
fn hosvd_factors(t: &Tensor3, ranks: (usize, usize, usize)) -> Result<(KernelFactors, Tensor3)> {
    let mut factors = Vec::with_capacity(3);
    let mut projected = t.clone();
    for (mode, r) in Mode::ALL.into_iter().zip([ranks.0, ranks.1, ranks.2]) {
        let (vecs, vals) = top_eigen(unfold_product(t, t, mode)?, r);
        let scales = DVector::from_iterator(r, vals.iter().map(|v| v.sqrt()));
        factors.push(Matrix::from_diagonal(&scales) * vecs.transpose());
        projected = mode_product(&projected, &(&vecs * vecs.transpose()), mode)?;
    }
    let u3 = factors.pop().expect("three modes");
    let u2 = factors.pop().expect("three modes");
    let u1 = factors.pop().expect("three modes");
    Ok((KernelFactors { u1, u2, u3 }, projected))
}

/// Data-driven initialization: tensor regression for `(A, B)`, truncated HOSVD
/// of its core for `U₁, U₂, U₃`, and the residual scale for `σ`.
pub fn warm_start(d: &Dataset, cfg: &FitConfig) -> Result<ModelParams> {
    cfg.validate(d.dims())?;
    if d.len() < 2 {
        return Err(Error::config("warm start needs at least two samples"));
    }
    let (big_h, big_w, _) = d.dims();
    let reg = if cfg.baseline_gp {
        let (a, b) = (
            Matrix::identity(big_h, big_h),
            Matrix::identity(big_w, big_w),
        );
        let core = fit_core(d, &a, &b, &d.label_vector())?;
        TensorRegression { a, b, core }
    } else {
        tensor_regression(d, cfg.latent_dims, cfg.als_sweeps)?
    };
    let (mut kernels, projected) = hosvd_factors(&reg.core, cfg.ranks)?;
    let latent: Vec<Tensor3> = d
        .tensors()
        .iter()
        .map(|x| contract(x, &reg.a, &reg.b))
        .collect::<Result<_>>()?;
    let residuals = latent
        .iter()
        .zip(d.labels())
        .map(|(z, y)| Ok(y - inner(z, &projected)?))
        .collect::<Result<Vec<f64>>>()?;
    let label_sd = std_dev(d.labels());
    let sigma0 = std_dev(&residuals).max(0.05 * label_sd).max(1e-3);

    let u = crate::gp::u_tilde_from_latent(&latent, &kernels)?;
    let mean_diag = u.norm_squared() / d.len() as f64;
    let label_var = label_sd * label_sd;
    let target = (label_var - sigma0 * sigma0).max(0.1 * label_var);
    if mean_diag > 0.0 && target > 0.0 {
        let s = (target / mean_diag).powf(1.0 / 6.0);
        kernels.u1 *= s;
        kernels.u2 *= s;
        kernels.u3 *= s;
    }
    Ok(ModelParams {
        contraction: ContractionFactors { a: reg.a, b: reg.b },
        kernels,
        log_sigma: sigma0.ln(),
    })
}

/// Seeded initialization with entries uniform on `[-0.1, 0.1]`.
pub fn random_init(d: &Dataset, cfg: &FitConfig) -> Result<ModelParams> {
    cfg.validate(d.dims())?;
    let (big_h, big_w, c) = d.dims();
    let (h, w) = cfg.latent_dims;
    let (r1, r2, r3) = cfg.ranks;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-0.1..=0.1));
    let (a, b) = if cfg.baseline_gp {
        (
            Matrix::identity(big_h, big_h),
            Matrix::identity(big_w, big_w),
        )
    } else {
        (draw(h, big_h), draw(w, big_w))
    };
    let kernels = KernelFactors {
        u1: draw(r1, h),
        u2: draw(r2, w),
        u3: draw(r3, c),
    };
    Ok(ModelParams {
        contraction: ContractionFactors { a, b },
        kernels,
        log_sigma: std_dev(d.labels()).max(1e-3).ln(),
    })
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    for m in [
        &p.contraction.a,
        &p.contraction.b,
        &p.kernels.u1,
        &p.kernels.u2,
        &p.kernels.u3,
    ] {
        v.extend_from_slice(m.as_slice());
    }
    v.push(p.log_sigma);
    v
}

fn relative_change(old: &ModelParams, new: &ModelParams) -> f64 {
    let (o, n) = (flatten(old), flatten(new));
    let diff = o
        .iter()
        .zip(&n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let base = o.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / base.max(f64::MIN_POSITIVE)
}

/// One block update proposal at step `eta`: candidate point, its penalty,
/// `⟨∇, Δ⟩` and `‖Δ‖²`.
struct Proposal {
    params: ModelParams,
    penalty: f64,
    linear: f64,
    sq_dist: f64,
}

struct BlockSearch<'a> {
    iteration: usize,
    block: &'static str,
    smooth: f64,
    penalty: f64,
    step: f64,
    backtrack: bool,
    propose: &'a dyn Fn(f64) -> Result<Proposal>,
    evaluate: &'a dyn Fn(&ModelParams) -> Result<f64>,
}

/// Outcome: accepted point with its smooth loss and penalty, and the step.
type Accepted = Option<(ModelParams, f64, f64, f64)>;

impl BlockSearch<'_> {
    fn run(&self) -> Result<Accepted> {
        if !self.backtrack {
            let prop = (self.propose)(self.step)?;
            let value = match (self.evaluate)(&prop.params) {
                Ok(v) => v,
                Err(Error::Numerical { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !(value + prop.penalty).is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: self.iteration,
                    block: self.block,
                    value: value + prop.penalty,
                });
            }
            return Ok(Some((prop.params, value, prop.penalty, self.step)));
        }
        let current = self.smooth + self.penalty;
        let mut eta = self.step;
        for _ in 0..=MAX_HALVINGS {
            let prop = (self.propose)(eta)?;
            let value = match (self.evaluate)(&prop.params) {
                Ok(v) => v,
                Err(Error::Numerical { .. }) => f64::NAN,
                Err(e) => return Err(e),
            };
            let majorizer = self.smooth + prop.linear + prop.sq_dist / (2.0 * eta);
            if value.is_finite() && value <= majorizer && value + prop.penalty <= current {
                return Ok(Some((prop.params, value, prop.penalty, eta)));
            }
            eta *= 0.5;
        }
        Ok(None)
    }
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Fits from the configured initialization ([`warm_start`] or [`random_init`]).
pub fn fit(d: &Dataset, cfg: &FitConfig) -> Result<(ModelParams, FitReport)> {
    let init = if cfg.warm_start {
        warm_start(d, cfg)?
    } else {
        random_init(d, cfg)?
    };
    fit_from(d, cfg, init)
}

/// Runs the alternating proximal gradient iterations from `init`.
pub fn fit_from(
    d: &Dataset,
    cfg: &FitConfig,
    init: ModelParams,
) -> Result<(ModelParams, FitReport)> {
    cfg.validate(d.dims())?;
    init.validate()?;
    if init.input_dims() != d.dims()
        || init.latent_dims() != cfg.latent_dims
        || init.kernels.ranks() != cfg.ranks
    {
        return Err(Error::shape(
            "initial parameters do not match the configuration",
        ));
    }
    let lambda = cfg.effective_lambda();
    let frozen = cfg.baseline_gp;
    let y = d.label_vector();
    let penalty_of = |p: &ModelParams| {
        if lambda > 0.0 {
            lambda * fused_penalty(&p.contraction.a, &p.contraction.b)
        } else {
            0.0
        }
    };

    let mut p = init;
    let mut eval = Evaluation::new(d, &p)?;
    let mut smooth = eval.value();
    let mut penalty = penalty_of(&p);
    let mut report = FitReport {
        loss_history: vec![smooth + penalty],
        param_delta_history: Vec::new(),
        step_sizes: Vec::new(),
        iterations_run: 0,
        converged: false,
        frozen_contraction: frozen,
        warnings: Vec::new(),
    };

    for iteration in 1..=cfg.max_iter {
        let start = p.clone();
        let start_loss = smooth + penalty;
        let mut taken = BlockSteps::default();

        if !frozen {
            // A block
            let grad = eval.grad_a()?;
            let base = p.clone();
            let propose = |eta: f64| {
                let cand = &base.contraction.a - &grad * eta;
                let a = prox_tv(&cand, &base.contraction.b, lambda, eta)?;
                let delta = &a - &base.contraction.a;
                let mut params = base.clone();
                params.contraction.a = a;
                Ok(Proposal {
                    penalty: penalty_of(&params),
                    linear: dot(&grad, &delta),
                    sq_dist: delta.norm_squared(),
                    params,
                })
            };
            let evaluate = |q: &ModelParams| neg_log_likelihood(d, q);
            let search = BlockSearch {
                iteration,
                block: "A",
                smooth,
                penalty,
                step: cfg.step_init,
                backtrack: cfg.backtrack,
                propose: &propose,
                evaluate: &evaluate,
            };
            if let Some((q, s, pen, eta)) = search.run()? {
                (p, smooth, penalty, taken.a) = (q, s, pen, eta);
            }

            // B block, using the updated A
            eval = Evaluation::new(d, &p)?;
            let grad = eval.grad_b()?;
            let base = p.clone();
            let propose = |eta: f64| {
                let cand = &base.contraction.b - &grad * eta;
                let b = prox_tv(&cand, &base.contraction.a, lambda, eta)?;
                let delta = &b - &base.contraction.b;
                let mut params = base.clone();
                params.contraction.b = b;
                Ok(Proposal {
                    penalty: penalty_of(&params),
                    linear: dot(&grad, &delta),
                    sq_dist: delta.norm_squared(),
                    params,
                })
            };
            let search = BlockSearch {
                iteration,
                block: "B",
                smooth,
                penalty,
                step: cfg.step_init,
                backtrack: cfg.backtrack,
                propose: &propose,
                evaluate: &evaluate,
            };
            if let Some((q, _, pen, eta)) = search.run()? {
                (p, penalty, taken.b) = (q, pen, eta);
            }

            if p.contraction.a.norm() > 0.0 {
                p = rescale(&p);
                penalty = penalty_of(&p);
            } else if !report
                .warnings
                .iter()
                .any(|w| w.starts_with("contraction collapsed"))
            {
                report.warnings.push(format!(
                    "contraction collapsed (A = 0) at iteration {iteration}; rescaling skipped"
                ));
            }
        }

        // joint U block; the contraction is fixed so the latent tensors are reused
        eval = Evaluation::new(d, &p)?;
        let grads = [eval.grad_u1()?, eval.grad_u2()?, eval.grad_u3()?];
        let latent = eval.latent().to_vec();
        let base = p.clone();
        let propose = |eta: f64| {
            let mut params = base.clone();
            params.kernels.u1 -= &grads[0] * eta;
            params.kernels.u2 -= &grads[1] * eta;
            params.kernels.u3 -= &grads[2] * eta;
            let sq: f64 = grads.iter().map(|g| g.norm_squared()).sum();
            Ok(Proposal {
                penalty,
                linear: -eta * sq,
                sq_dist: eta * eta * sq,
                params,
            })
        };
        let sigma2 = p.sigma2();
        let evaluate = |q: &ModelParams| neg_log_likelihood_latent(&latent, &q.kernels, sigma2, &y);
        let search = BlockSearch {
            iteration,
            block: "U",
            smooth: eval.value(),
            penalty,
            step: cfg.step_init,
            backtrack: cfg.backtrack,
            propose: &propose,
            evaluate: &evaluate,
        };
        if let Some((q, _, _, eta)) = search.run()? {
            (p, taken.u) = (q, eta);
        }

        // log σ block
        eval = Evaluation::new(d, &p)?;
        let grad = eval.grad_log_sigma();
        let u_tilde = eval.u_tilde().clone();
        let base = p.clone();
        let propose = |eta: f64| {
            let mut params = base.clone();
            params.log_sigma -= eta * grad;
            Ok(Proposal {
                penalty,
                linear: -eta * grad * grad,
                sq_dist: (eta * grad).powi(2),
                params,
            })
        };
        let evaluate =
            |q: &ModelParams| NoisyGram::new(&u_tilde, q.sigma2())?.neg_log_likelihood(&y);
        let search = BlockSearch {
            iteration,
            block: "log_sigma",
            smooth: eval.value(),
            penalty,
            step: cfg.step_init,
            backtrack: cfg.backtrack,
            propose: &propose,
            evaluate: &evaluate,
        };
        smooth = eval.value();
        if let Some((q, s, _, eta)) = search.run()? {
            (p, smooth, taken.log_sigma) = (q, s, eta);
        }

        let loss = smooth + penalty;
        let delta = relative_change(&start, &p);
        report.loss_history.push(loss);
        report.param_delta_history.push(delta);
        report.step_sizes.push(taken);
        report.iterations_run = iteration;
        let loss_change = (start_loss - loss).abs() / start_loss.abs().max(f64::MIN_POSITIVE);
        if delta < cfg.tol_param || loss_change < cfg.tol_loss {
            report.converged = true;
            break;
        }
        eval = Evaluation::new(d, &p)?;
    }
    Ok((p, report))
}

/// Validation errors of a λ grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub lambdas: Vec<f64>,
    /// `fold_rmse[l][f]`: validation RMSE of λ index `l` on fold `f`.
    pub fold_rmse: Vec<Vec<f64>>,
    pub mean_rmse: Vec<f64>,
    pub best_lambda: f64,
}

/// Assigns each sample to one of `folds` folds after a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// k-fold cross-validation of `cfg` over `lambdas`; picks the lowest mean RMSE.
pub fn cross_validate(
    d: &Dataset,
    cfg: &FitConfig,
    lambdas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<CvReport> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::config(
            "lambda grid must be non-empty, finite and nonnegative",
        ));
    }
    if folds < 2 || folds > d.len() {
        return Err(Error::config(format!(
            "fold count {folds} must lie in 2..={}",
            d.len()
        )));
    }
    cfg.validate(d.dims())?;
    let assignment = fold_assignment(d.len(), folds, seed);
    let jobs: Vec<(usize, usize)> = (0..lambdas.len())
        .flat_map(|l| (0..folds).map(move |f| (l, f)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(l, f)| {
            let train: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] != f).collect();
            let valid: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] == f).collect();
            let train = d.subset(&train)?;
            let valid = d.subset(&valid)?;
            let fold_cfg = FitConfig {
                lambda: lambdas[l],
                ..cfg.clone()
            };
            let (params, _) = fit(&train, &fold_cfg)?;
            let pred = predict(&train, valid.tensors(), &params)?;
            rmse(valid.labels(), pred.mean.as_slice())
        })
        .collect::<Result<Vec<f64>>>()?;
    let fold_rmse: Vec<Vec<f64>> = scores.chunks(folds).map(|c| c.to_vec()).collect();
    let mean_rmse: Vec<f64> = fold_rmse
        .iter()
        .map(|r| r.iter().sum::<f64>() / folds as f64)
        .collect();
    let best = mean_rmse.iter().enumerate().fold(
        0,
        |best, (i, v)| if *v < mean_rmse[best] { i } else { best },
    );
    Ok(CvReport {
        lambdas: lambdas.to_vec(),
        fold_rmse,
        mean_rmse,
        best_lambda: lambdas[best],
    })
}

/// Cross-validates λ, then refits on all of `d` with the selected value.
pub fn fit_cv(
    d: &Dataset,
    cfg: &FitConfig,
    lambdas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(ModelParams, FitReport, CvReport)> {
    let cv = cross_validate(d, cfg, lambdas, folds, seed)?;
    let final_cfg = FitConfig {
        lambda: cv.best_lambda,
        ..cfg.clone()
    };
    let (params, report) = fit(d, &final_cfg)?;
    Ok((params, report, cv))
}

/// Vectorized latent tensor of each sample, exposed for diagnostics.
pub fn latent_features(d: &Dataset, p: &ModelParams) -> Result<Vec<DVector<f64>>> {
    d.tensors()
        .iter()
        .map(|x| Ok(vectorize(&contract(x, &p.contraction.a, &p.contraction.b)?)))
        .collect()
}
