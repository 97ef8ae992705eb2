//! Tensor-GP likelihood with a learned spatial contraction.
//!
//! Every covariate `X` is contracted to `Z = X ×₁ A ×₂ B` and then compared
//! with the multi-linear kernel `vec(Zᵢ)ᵀ (K₃ ⊗ K₂ ⊗ K₁) vec(Zⱼ)` where
//! `Kₘ = UₘᵀUₘ`. Stacking `vec(Zᵢ ×₁ U₁ ×₂ U₂ ×₃ U₃)` row by row gives the
//! `N × R` feature matrix `Ũ` with `K = ŨŨᵀ`, so the noisy Gram matrix
//! `Q = ŨŨᵀ + σ²I` is always handled through the `R × R` capacitance
//! `σ²I + ŨᵀŨ` when `R ≤ N` (Woodbury identity and determinant lemma), and by
//! a direct `N × N` Cholesky otherwise.
//!
//! Block gradients go through `∂ℓ/∂Ũ = Q⁻¹Ũ − ααᵀŨ` (`α = Q⁻¹y`) and are
//! pulled back to each factor with mode products, never forming Kronecker
//! matrices.

use nalgebra::{Cholesky, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{contract, inner, mode_product, unfold_product, Matrix, Mode, Tensor3};

/// Jitter added to the diagonal when a Cholesky factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Spatial contraction factors: `a` is `h × H`, `b` is `w × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionFactors {
    pub a: Matrix,
    pub b: Matrix,
}

/// Kernel Gram factors: `u1` is `r1 × h`, `u2` is `r2 × w`, `u3` is `r3 × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactors {
    pub u1: Matrix,
    pub u2: Matrix,
    pub u3: Matrix,
}

impl KernelFactors {
    pub fn k1(&self) -> Matrix {
        self.u1.transpose() * &self.u1
    }

    pub fn k2(&self) -> Matrix {
        self.u2.transpose() * &self.u2
    }

    pub fn k3(&self) -> Matrix {
        self.u3.transpose() * &self.u3
    }

    pub fn ranks(&self) -> (usize, usize, usize) {
        (self.u1.nrows(), self.u2.nrows(), self.u3.nrows())
    }

    pub fn feature_len(&self) -> usize {
        self.u1.nrows() * self.u2.nrows() * self.u3.nrows()
    }
}

/// Full trainable state. The noise scale is stored as `log σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub contraction: ContractionFactors,
    pub kernels: KernelFactors,
    pub log_sigma: f64,
}

impl ModelParams {
    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }

    /// `(H, W, C)` of the covariates this model accepts.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        (
            self.contraction.a.ncols(),
            self.contraction.b.ncols(),
            self.kernels.u3.ncols(),
        )
    }

    /// `(h, w)` of the contracted tensors.
    pub fn latent_dims(&self) -> (usize, usize) {
        (self.contraction.a.nrows(), self.contraction.b.nrows())
    }

    /// Checks every shape relation and the finiteness of all entries.
    pub fn validate(&self) -> Result<()> {
        let ContractionFactors { a, b } = &self.contraction;
        let KernelFactors { u1, u2, u3 } = &self.kernels;
        let (h, w) = self.latent_dims();
        let (big_h, big_w, c) = self.input_dims();
        if h == 0 || w == 0 || c == 0 || big_h == 0 || big_w == 0 {
            return Err(Error::shape("model factors must have positive dimensions"));
        }
        if h > big_h || w > big_w {
            return Err(Error::shape(format!(
                "latent dims ({h}, {w}) exceed input dims ({big_h}, {big_w})"
            )));
        }
        if u1.ncols() != h || u2.ncols() != w {
            return Err(Error::shape(format!(
                "kernel factors U1 {}x{} and U2 {}x{} do not match latent dims ({h}, {w})",
                u1.nrows(),
                u1.ncols(),
                u2.nrows(),
                u2.ncols()
            )));
        }
        let (r1, r2, r3) = self.kernels.ranks();
        if r1 == 0 || r2 == 0 || r3 == 0 || r1 > h || r2 > w || r3 > c {
            return Err(Error::shape(format!(
                "ranks ({r1}, {r2}, {r3}) must lie in 1..=({h}, {w}, {c})"
            )));
        }
        let finite = [a, b, u1, u2, u3]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite || !self.log_sigma.is_finite() {
            return Err(Error::Numerical {
                what: "model parameter",
                value: f64::NAN,
            });
        }
        Ok(())
    }
}

/// Aligned covariate tensors and scalar labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tensors: Vec<Tensor3>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(tensors: Vec<Tensor3>, labels: Vec<f64>) -> Result<Self> {
        if tensors.is_empty() {
            return Err(Error::shape("a dataset needs at least one sample"));
        }
        if tensors.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} tensors but {} labels",
                tensors.len(),
                labels.len()
            )));
        }
        let dims = tensors[0].dims();
        if let Some((i, t)) = tensors.iter().enumerate().find(|(_, t)| t.dims() != dims) {
            return Err(Error::shape(format!(
                "tensor {i} has dims {:?}, expected {dims:?}",
                t.dims()
            )));
        }
        if let Some(i) = labels.iter().position(|y| !y.is_finite()) {
            return Err(Error::Numerical {
                what: "label",
                value: labels[i],
            });
        }
        Ok(Dataset { tensors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.tensors[0].dims()
    }

    pub fn tensors(&self) -> &[Tensor3] {
        &self.tensors
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let tensors = indices.iter().map(|&i| self.tensors[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(tensors, labels)
    }

    fn check_model(&self, p: &ModelParams) -> Result<()> {
        if self.dims() != p.input_dims() {
            return Err(Error::shape(format!(
                "dataset dims {:?} do not match model input dims {:?}",
                self.dims(),
                p.input_dims()
            )));
        }
        Ok(())
    }
}

/// `vec(z_i)ᵀ (K₃ ⊗ K₂ ⊗ K₁) vec(z_j)`.
pub fn latent_kernel(z_i: &Tensor3, z_j: &Tensor3, k: &KernelFactors) -> Result<f64> {
    let (h, w, c) = z_i.dims();
    if (k.u1.ncols(), k.u2.ncols(), k.u3.ncols()) != (h, w, c) {
        return Err(Error::shape(format!(
            "latent tensor dims {:?} do not match kernel factors",
            z_i.dims()
        )));
    }
    if z_j.dims() != z_i.dims() {
        return Err(Error::shape(format!(
            "latent tensors with dims {:?} and {:?}",
            z_i.dims(),
            z_j.dims()
        )));
    }
    // ⟨f(zᵢ), f(zⱼ)⟩ with f(z) = z ×₁ U₁ ×₂ U₂ ×₃ U₃, exactly symmetric in (i, j).
    inner(&kernel_features(z_i, k)?, &kernel_features(z_j, k)?)
}

/// Kernel on raw covariates: contract both with `(A, B)`, then [`latent_kernel`].
pub fn full_kernel(x_i: &Tensor3, x_j: &Tensor3, p: &ModelParams) -> Result<f64> {
    let ContractionFactors { a, b } = &p.contraction;
    latent_kernel(&contract(x_i, a, b)?, &contract(x_j, a, b)?, &p.kernels)
}

/// Contracts every covariate with `(A, B)`.
pub fn latent_tensors(tensors: &[Tensor3], c: &ContractionFactors) -> Result<Vec<Tensor3>> {
    tensors
        .par_iter()
        .map(|x| contract(x, &c.a, &c.b))
        .collect()
}

/// `vec(z ×₁ U₁ ×₂ U₂ ×₃ U₃)`, one row of `Ũ`.
pub fn kernel_features(z: &Tensor3, k: &KernelFactors) -> Result<Tensor3> {
    mode_product(
        &mode_product(&mode_product(z, &k.u1, Mode::Rows)?, &k.u2, Mode::Cols)?,
        &k.u3,
        Mode::Channels,
    )
}

/// Stacks the kernel features of already-contracted tensors into `Ũ` (`N × R`).
pub fn u_tilde_from_latent(latent: &[Tensor3], k: &KernelFactors) -> Result<Matrix> {
    let rows: Vec<Tensor3> = latent
        .par_iter()
        .map(|z| kernel_features(z, k))
        .collect::<Result<_>>()?;
    let r = k.feature_len();
    let mut u = Matrix::zeros(rows.len(), r);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.as_slice().iter().enumerate() {
            u[(i, j)] = *v;
        }
    }
    Ok(u)
}

/// The `N × R` factor `Ũ` with `ŨŨᵀ` equal to the pairwise [`full_kernel`] Gram.
pub fn build_u_tilde(d: &Dataset, p: &ModelParams) -> Result<Matrix> {
    d.check_model(p)?;
    let latent = latent_tensors(d.tensors(), &p.contraction)?;
    u_tilde_from_latent(&latent, &p.kernels)
}

fn cholesky_with_jitter(mut m: Matrix, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let mut jitter = CHOLESKY_JITTER;
    while jitter <= 1e-4 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m.clone()) {
            return Ok(ch);
        }
        jitter *= 100.0;
    }
    Err(Error::Numerical {
        what,
        value: m.diagonal().min(),
    })
}

enum Factor {
    /// Cholesky of the capacitance `σ²I_R + ŨᵀŨ`.
    Capacitance(Cholesky<f64, Dyn>),
    /// Cholesky of the full `ŨŨᵀ + σ²I_N`.
    Dense(Cholesky<f64, Dyn>),
}

/// Factorized noisy Gram matrix `Q = ŨŨᵀ + σ²I`.
pub struct NoisyGram<'a> {
    u: &'a Matrix,
    sigma2: f64,
    factor: Factor,
}

impl<'a> NoisyGram<'a> {
    pub fn new(u: &'a Matrix, sigma2: f64) -> Result<Self> {
        if sigma2.is_nan() || sigma2 <= 0.0 || !sigma2.is_finite() {
            return Err(Error::Numerical {
                what: "noise variance",
                value: sigma2,
            });
        }
        let (n, r) = u.shape();
        let factor = if r <= n {
            let mut cap = u.transpose() * u;
            for i in 0..r {
                cap[(i, i)] += sigma2;
            }
            Factor::Capacitance(cholesky_with_jitter(cap, "capacitance matrix pivot")?)
        } else {
            let mut q = u * u.transpose();
            for i in 0..n {
                q[(i, i)] += sigma2;
            }
            Factor::Dense(cholesky_with_jitter(q, "Gram matrix pivot")?)
        };
        Ok(NoisyGram { u, sigma2, factor })
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn log_det(&self) -> f64 {
        let (n, r) = self.u.shape();
        match &self.factor {
            Factor::Capacitance(ch) => (n as f64 - r as f64) * self.sigma2.ln() + chol_log_det(ch),
            Factor::Dense(ch) => chol_log_det(ch),
        }
    }

    /// `Q⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Capacitance(ch) => {
                let inner = ch.solve(&(self.u.transpose() * v));
                (v - self.u * inner) / self.sigma2
            }
            Factor::Dense(ch) => ch.solve(v),
        }
    }

    /// `Q⁻¹ Ũ`.
    pub fn solve_u(&self) -> Matrix {
        match &self.factor {
            // Q⁻¹Ũ = Ũ(σ²I + ŨᵀŨ)⁻¹
            Factor::Capacitance(ch) => ch.solve(&self.u.transpose()).transpose(),
            Factor::Dense(ch) => ch.solve(self.u),
        }
    }

    /// `tr(Q⁻¹)`.
    pub fn trace_inverse(&self) -> f64 {
        let (n, r) = self.u.shape();
        match &self.factor {
            Factor::Capacitance(ch) => (n as f64 - r as f64) / self.sigma2 + ch.inverse().trace(),
            Factor::Dense(ch) => ch.inverse().trace(),
        }
    }

    /// Negative log marginal likelihood of `y`, including `(N/2)·log 2π`.
    pub fn neg_log_likelihood(&self, y: &DVector<f64>) -> Result<f64> {
        let alpha = self.solve(y);
        let quad = y.dot(&alpha);
        let n = self.n() as f64;
        let value = 0.5 * self.log_det() + 0.5 * quad + 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        if !value.is_finite() {
            return Err(Error::Numerical {
                what: "negative log-likelihood",
                value,
            });
        }
        Ok(value)
    }

    /// Predictive mean and covariance (noise included) at test features `u_star`.
    pub fn predictive(&self, u_star: &Matrix, y: &DVector<f64>) -> (DVector<f64>, Matrix) {
        let m = u_star.nrows();
        let alpha = self.solve(y);
        let mean = u_star * (self.u.transpose() * &alpha);
        let mut cov = match &self.factor {
            // Σ* = σ²(I + Ũ*(σ²I + ŨᵀŨ)⁻¹Ũ*ᵀ)
            Factor::Capacitance(ch) => {
                let inner = ch.solve(&u_star.transpose());
                let mut cov = u_star * inner * self.sigma2;
                for i in 0..m {
                    cov[(i, i)] += self.sigma2;
                }
                cov
            }
            Factor::Dense(ch) => {
                let cross = u_star * self.u.transpose();
                let reduced = ch.solve(&cross.transpose());
                let mut cov = u_star * u_star.transpose() - &cross * reduced;
                for i in 0..m {
                    cov[(i, i)] += self.sigma2;
                }
                cov
            }
        };
        let sym = (&cov + cov.transpose()) * 0.5;
        cov.copy_from(&sym);
        (mean, cov)
    }
}

fn chol_log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `ℓ = ½log|ŨŨᵀ + σ²I| + ½yᵀ(ŨŨᵀ + σ²I)⁻¹y + (N/2)log 2π`.
pub fn neg_log_likelihood(d: &Dataset, p: &ModelParams) -> Result<f64> {
    let u = build_u_tilde(d, p)?;
    NoisyGram::new(&u, p.sigma2())?.neg_log_likelihood(&d.label_vector())
}

/// [`neg_log_likelihood`] for already-contracted tensors.
pub fn neg_log_likelihood_latent(
    latent: &[Tensor3],
    kernels: &KernelFactors,
    sigma2: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    let u = u_tilde_from_latent(latent, kernels)?;
    NoisyGram::new(&u, sigma2)?.neg_log_likelihood(y)
}

/// `∂ℓ/∂Ũ = Q⁻¹Ũ − α(αᵀŨ)` with `α = Q⁻¹y`.
pub fn grad_u_tilde(u_tilde: &Matrix, y: &DVector<f64>, sigma: f64) -> Result<Matrix> {
    if y.len() != u_tilde.nrows() {
        return Err(Error::shape(format!(
            "Ũ has {} rows but y has {} entries",
            u_tilde.nrows(),
            y.len()
        )));
    }
    let gram = NoisyGram::new(u_tilde, sigma * sigma)?;
    Ok(grad_from_gram(&gram, y))
}

fn grad_from_gram(gram: &NoisyGram<'_>, y: &DVector<f64>) -> Matrix {
    let alpha = gram.solve(y);
    let proj = alpha.transpose() * gram.u;
    gram.solve_u() - alpha * proj
}

/// Parameter blocks of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    A,
    B,
    U1,
    U2,
    U3,
    LogSigma,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::A,
        Block::B,
        Block::U1,
        Block::U2,
        Block::U3,
        Block::LogSigma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::A => "A",
            Block::B => "B",
            Block::U1 => "U1",
            Block::U2 => "U2",
            Block::U3 => "U3",
            Block::LogSigma => "log_sigma",
        }
    }
}

/// Gradient of one block: a matrix for factor blocks, a scalar for `log σ`.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockGradient {
    Matrix(Matrix),
    Scalar(f64),
}

impl BlockGradient {
    pub fn into_matrix(self) -> Option<Matrix> {
        match self {
            BlockGradient::Matrix(m) => Some(m),
            BlockGradient::Scalar(_) => None,
        }
    }

    pub fn into_scalar(self) -> Option<f64> {
        match self {
            BlockGradient::Scalar(s) => Some(s),
            BlockGradient::Matrix(_) => None,
        }
    }
}

/// Likelihood evaluated at one parameter point, with everything the block
/// gradients share (contracted tensors, `Ũ`, `∂ℓ/∂Ũ`) computed once.
pub struct Evaluation<'d> {
    data: &'d Dataset,
    params: ModelParams,
    latent: Vec<Tensor3>,
    u_tilde: Matrix,
    value: f64,
    grad_u: Matrix,
    sigma2_grad: f64,
}

impl<'d> Evaluation<'d> {
    pub fn new(data: &'d Dataset, params: &ModelParams) -> Result<Self> {
        data.check_model(params)?;
        let latent = latent_tensors(data.tensors(), &params.contraction)?;
        let u_tilde = u_tilde_from_latent(&latent, &params.kernels)?;
        let y = data.label_vector();
        let (value, grad_u, sigma2_grad) = {
            let gram = NoisyGram::new(&u_tilde, params.sigma2())?;
            let value = gram.neg_log_likelihood(&y)?;
            let grad_u = grad_from_gram(&gram, &y);
            let alpha = gram.solve(&y);
            // ∂ℓ/∂σ² = ½tr(Q⁻¹) − ½‖α‖²
            let sigma2_grad = 0.5 * gram.trace_inverse() - 0.5 * alpha.norm_squared();
            (value, grad_u, sigma2_grad)
        };
        Ok(Evaluation {
            data,
            params: params.clone(),
            latent,
            u_tilde,
            value,
            grad_u,
            sigma2_grad,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Contracted tensors `Zᵢ = Xᵢ ×₁ A ×₂ B`.
    pub fn latent(&self) -> &[Tensor3] {
        &self.latent
    }

    pub fn u_tilde(&self) -> &Matrix {
        &self.u_tilde
    }

    pub fn grad_u_tilde(&self) -> &Matrix {
        &self.grad_u
    }

    pub fn grad_sigma2(&self) -> f64 {
        self.sigma2_grad
    }

    /// Row `i` of `∂ℓ/∂Ũ` reshaped to `r1 × r2 × r3`.
    fn grad_core(&self, i: usize) -> Tensor3 {
        let dims = self.params.kernels.ranks();
        let row: Vec<f64> = self.grad_u.row(i).iter().copied().collect();
        Tensor3::from_vec(dims, row).expect("gradient row length equals r1·r2·r3")
    }

    /// `∂ℓ/∂Zᵢ = Gᵢ ×₁ U₁ᵀ ×₂ U₂ᵀ ×₃ U₃ᵀ`.
    fn grad_latent(&self, i: usize) -> Result<Tensor3> {
        let k = &self.params.kernels;
        mode_product(
            &mode_product(
                &mode_product(&self.grad_core(i), &k.u1.transpose(), Mode::Rows)?,
                &k.u2.transpose(),
                Mode::Cols,
            )?,
            &k.u3.transpose(),
            Mode::Channels,
        )
    }

    fn sum_over_samples(
        &self,
        f: impl Fn(usize) -> Result<Matrix> + Sync + Send,
    ) -> Result<Matrix> {
        let parts: Vec<Matrix> = (0..self.data.len())
            .into_par_iter()
            .map(f)
            .collect::<Result<_>>()?;
        let mut iter = parts.into_iter();
        let mut acc = iter.next().expect("dataset is non-empty");
        for m in iter {
            acc += m;
        }
        Ok(acc)
    }

    pub fn grad_a(&self) -> Result<Matrix> {
        let b_t = self.params.contraction.b.transpose();
        self.sum_over_samples(|i| {
            let y = mode_product(&self.grad_latent(i)?, &b_t, Mode::Cols)?;
            unfold_product(&y, &self.data.tensors()[i], Mode::Rows)
        })
    }

    pub fn grad_b(&self) -> Result<Matrix> {
        let a_t = self.params.contraction.a.transpose();
        self.sum_over_samples(|i| {
            let y = mode_product(&self.grad_latent(i)?, &a_t, Mode::Rows)?;
            unfold_product(&y, &self.data.tensors()[i], Mode::Cols)
        })
    }

    pub fn grad_u1(&self) -> Result<Matrix> {
        let k = &self.params.kernels;
        self.sum_over_samples(|i| {
            let z = mode_product(
                &mode_product(&self.latent[i], &k.u2, Mode::Cols)?,
                &k.u3,
                Mode::Channels,
            )?;
            unfold_product(&self.grad_core(i), &z, Mode::Rows)
        })
    }

    pub fn grad_u2(&self) -> Result<Matrix> {
        let k = &self.params.kernels;
        self.sum_over_samples(|i| {
            let z = mode_product(
                &mode_product(&self.latent[i], &k.u1, Mode::Rows)?,
                &k.u3,
                Mode::Channels,
            )?;
            unfold_product(&self.grad_core(i), &z, Mode::Cols)
        })
    }

    pub fn grad_u3(&self) -> Result<Matrix> {
        let k = &self.params.kernels;
        self.sum_over_samples(|i| {
            let z = mode_product(
                &mode_product(&self.latent[i], &k.u1, Mode::Rows)?,
                &k.u2,
                Mode::Cols,
            )?;
            unfold_product(&self.grad_core(i), &z, Mode::Channels)
        })
    }

    /// `∂ℓ/∂log σ = 2σ²·∂ℓ/∂σ²`.
    pub fn grad_log_sigma(&self) -> f64 {
        2.0 * self.params.sigma2() * self.sigma2_grad
    }

    pub fn grad_block(&self, block: Block) -> Result<BlockGradient> {
        Ok(match block {
            Block::A => BlockGradient::Matrix(self.grad_a()?),
            Block::B => BlockGradient::Matrix(self.grad_b()?),
            Block::U1 => BlockGradient::Matrix(self.grad_u1()?),
            Block::U2 => BlockGradient::Matrix(self.grad_u2()?),
            Block::U3 => BlockGradient::Matrix(self.grad_u3()?),
            Block::LogSigma => BlockGradient::Scalar(self.grad_log_sigma()),
        })
    }
}

/// Gradient of `ℓ` (no penalty) with respect to one parameter block.
pub fn grad_block(d: &Dataset, p: &ModelParams, block: Block) -> Result<BlockGradient> {
    Evaluation::new(d, p)?.grad_block(block)
}
