//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops or dense linear algebra and
//! never calls the factorized code paths under test.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tgpst::{ContractionFactors, Dataset, KernelFactors, Matrix, ModelParams, Tensor3};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_tensor(rng: &mut ChaCha20Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Random parameters with the given input dims, latent dims and ranks.
pub fn rand_params(
    rng: &mut ChaCha20Rng,
    dims: (usize, usize, usize),
    latent: (usize, usize),
    ranks: (usize, usize, usize),
) -> ModelParams {
    ModelParams {
        contraction: ContractionFactors {
            a: rand_matrix(rng, latent.0, dims.0),
            b: rand_matrix(rng, latent.1, dims.1),
        },
        kernels: KernelFactors {
            u1: rand_matrix(rng, ranks.0, latent.0),
            u2: rand_matrix(rng, ranks.1, latent.1),
            u3: rand_matrix(rng, ranks.2, dims.2),
        },
        log_sigma: rng.random_range(-1.0..0.5),
    }
}

pub fn rand_dataset(rng: &mut ChaCha20Rng, n: usize, dims: (usize, usize, usize)) -> Dataset {
    let tensors = (0..n)
        .map(|_| rand_tensor(rng, dims.0, dims.1, dims.2))
        .collect();
    let labels = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Dataset::new(tensors, labels).unwrap()
}

/// Kronecker product by its defining double loop.
pub fn kron_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Matrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Mode-1-fastest vectorization by index arithmetic.
pub fn vec_loop(t: &Tensor3) -> DVector<f64> {
    let (h, w, c) = t.dims();
    let mut v = DVector::zeros(h * w * c);
    for k in 0..c {
        for j in 0..w {
            for i in 0..h {
                v[i + h * j + h * w * k] = t.get(i, j, k);
            }
        }
    }
    v
}

/// `Σ_{i,j} A(s,i) B(t,j) X(i,j,k)` by explicit summation.
pub fn contract_loop(x: &Tensor3, a: &Matrix, b: &Matrix) -> Tensor3 {
    let (h_in, w_in, c) = x.dims();
    Tensor3::from_fn(a.nrows(), b.nrows(), c, |s, t, k| {
        let mut acc = 0.0;
        for i in 0..h_in {
            for j in 0..w_in {
                acc += a[(s, i)] * b[(t, j)] * x.get(i, j, k);
            }
        }
        acc
    })
}

/// `vec(zᵢ)ᵀ (K₃ ⊗ K₂ ⊗ K₁) vec(zⱼ)` with the Kronecker matrix materialized.
pub fn dense_latent_kernel(z_i: &Tensor3, z_j: &Tensor3, k: &KernelFactors) -> f64 {
    let k1 = k.u1.transpose() * &k.u1;
    let k2 = k.u2.transpose() * &k.u2;
    let k3 = k.u3.transpose() * &k.u3;
    let big = kron_loop(&k3, &kron_loop(&k2, &k1));
    (vec_loop(z_i).transpose() * big * vec_loop(z_j))[(0, 0)]
}

/// `vec(Xᵢ)ᵀ (K₃ ⊗ BᵀK₂B ⊗ AᵀK₁A) vec(Xⱼ)` in the input space.
pub fn dense_full_kernel(x_i: &Tensor3, x_j: &Tensor3, p: &ModelParams) -> f64 {
    let (a, b) = (&p.contraction.a, &p.contraction.b);
    let k = &p.kernels;
    let k1 = a.transpose() * k.u1.transpose() * &k.u1 * a;
    let k2 = b.transpose() * k.u2.transpose() * &k.u2 * b;
    let k3 = k.u3.transpose() * &k.u3;
    let big = kron_loop(&k3, &kron_loop(&k2, &k1));
    (vec_loop(x_i).transpose() * big * vec_loop(x_j))[(0, 0)]
}

pub fn dense_gram(d: &Dataset, p: &ModelParams) -> Matrix {
    let t = d.tensors();
    Matrix::from_fn(t.len(), t.len(), |i, j| dense_full_kernel(&t[i], &t[j], p))
}

/// `½log|K + σ²I| + ½yᵀ(K + σ²I)⁻¹y + (N/2)log 2π` via LU.
pub fn dense_nll_from_gram(k: &Matrix, sigma2: f64, y: &DVector<f64>) -> f64 {
    let n = k.nrows();
    let q = k + Matrix::identity(n, n) * sigma2;
    let lu = q.clone().lu();
    let inv = lu.try_inverse().expect("noisy Gram is invertible");
    let det = q.lu().determinant();
    0.5 * det.ln()
        + 0.5 * (y.transpose() * inv * y)[(0, 0)]
        + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn dense_nll(d: &Dataset, p: &ModelParams) -> f64 {
    dense_nll_from_gram(&dense_gram(d, p), p.sigma2(), &d.label_vector())
}

/// Dense GP conditional `(μ*, Σ*)` with an explicit inverse.
pub fn dense_predictive(
    train: &Dataset,
    test: &[Tensor3],
    p: &ModelParams,
) -> (DVector<f64>, Matrix) {
    let n = train.len();
    let k = dense_gram(train, p) + Matrix::identity(n, n) * p.sigma2();
    let inv = k.lu().try_inverse().unwrap();
    let ks = Matrix::from_fn(test.len(), n, |i, j| {
        dense_full_kernel(&test[i], &train.tensors()[j], p)
    });
    let kss = Matrix::from_fn(test.len(), test.len(), |i, j| {
        dense_full_kernel(&test[i], &test[j], p)
    }) + Matrix::identity(test.len(), test.len()) * p.sigma2();
    let mean = &ks * &inv * train.label_vector();
    let cov = kss - &ks * inv * ks.transpose();
    (mean, cov)
}

/// Central difference of `f` along every entry of `m`.
pub fn finite_diff_matrix(m: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    let mut probe = m.clone();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + step;
            let up = f(&probe);
            probe[(i, j)] = orig - step;
            let down = f(&probe);
            probe[(i, j)] = orig;
            out[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    out
}

/// `‖got − want‖ / max(‖want‖, floor)`.
pub fn rel_err(got: &Matrix, want: &Matrix, floor: f64) -> f64 {
    (got - want).norm() / want.norm().max(floor)
}

/// `Σ_{s,t} ‖αₛᵀβₜ‖_TV` with every feature map built and differenced by hand.
pub fn feature_map_tv_sum(a: &Matrix, b: &Matrix) -> f64 {
    let (h, big_h) = a.shape();
    let (w, big_w) = b.shape();
    let mut total = Neumaier::default();
    for s in 0..h {
        for t in 0..w {
            let map = DMatrix::from_fn(big_h, big_w, |i, j| a[(s, i)] * b[(t, j)]);
            for i in 0..big_h {
                for j in 0..big_w {
                    if i + 1 < big_h {
                        total.add((map[(i + 1, j)] - map[(i, j)]).abs());
                    }
                    if j + 1 < big_w {
                        total.add((map[(i, j + 1)] - map[(i, j)]).abs());
                    }
                }
            }
        }
    }
    total.value()
}

/// Compensated summation, so long oracle sums stay accurate to a few ulps.
#[derive(Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Row-wise fused lasso `min ½‖m − c‖² + a·Σ|m_{j+1} − m_j| + b·‖m‖₁` solved
/// through its box-constrained dual with accelerated projected gradient.
pub fn fused_lasso_dual(c: &[f64], tv: f64, l1: f64, iters: usize) -> Vec<f64> {
    let n = c.len();
    let m_diff = n.saturating_sub(1);
    let (mut u, mut v) = (vec![0.0; m_diff], vec![0.0; n]);
    let (mut u_prev, mut v_prev) = (u.clone(), v.clone());
    let (mut yu, mut yv) = (u.clone(), v.clone());
    let primal = |u: &[f64], v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let left = if j > 0 { u[j - 1] } else { 0.0 };
                let right = if j < m_diff { u[j] } else { 0.0 };
                c[j] - (left - right) - v[j]
            })
            .collect()
    };
    let step = 1.0 / 5.0;
    let mut t = 1.0f64;
    for _ in 0..iters {
        let x = primal(&yu, &yv);
        for k in 0..m_diff {
            let g = x[k] - x[k + 1];
            u[k] = (yu[k] - step * g).clamp(-tv, tv);
        }
        for j in 0..n {
            v[j] = (yv[j] + step * x[j]).clamp(-l1, l1);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        for k in 0..m_diff {
            yu[k] = u[k] + mom * (u[k] - u_prev[k]);
        }
        for j in 0..n {
            yv[j] = v[j] + mom * (v[j] - v_prev[j]);
        }
        u_prev.clone_from(&u);
        v_prev.clone_from(&v);
        t = t_next;
    }
    primal(&u, &v)
}

pub fn fused_lasso_objective(m: &[f64], c: &[f64], tv: f64, l1: f64) -> f64 {
    let fit: f64 = m.iter().zip(c).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
    let diff: f64 = m.windows(2).map(|p| (p[1] - p[0]).abs()).sum();
    fit + tv * diff + l1 * m.iter().map(|v| v.abs()).sum::<f64>()
}

fn l1(m: &Matrix) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

fn grad_x_l1(m: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols().saturating_sub(1) {
            s += (m[(i, j + 1)] - m[(i, j)]).abs();
        }
    }
    s
}

/// Prox of `η·λ·R(·, partner)` computed row by row with the dual solver.
pub fn prox_oracle(
    candidate: &Matrix,
    partner: &Matrix,
    lambda: f64,
    eta: f64,
    iters: usize,
) -> Matrix {
    let tv = eta * lambda * l1(partner);
    let l1w = eta * lambda * grad_x_l1(partner);
    let mut out = Matrix::zeros(candidate.nrows(), candidate.ncols());
    for i in 0..candidate.nrows() {
        let row: Vec<f64> = candidate.row(i).iter().copied().collect();
        for (j, v) in fused_lasso_dual(&row, tv, l1w, iters)
            .into_iter()
            .enumerate()
        {
            out[(i, j)] = v;
        }
    }
    out
}

/// Objective minimized by the prox, with the penalty written out by hand.
pub fn prox_objective_oracle(
    m: &Matrix,
    candidate: &Matrix,
    partner: &Matrix,
    lambda: f64,
    eta: f64,
) -> f64 {
    let fit = (m - candidate).norm_squared() / (2.0 * eta);
    fit + lambda * (grad_x_l1(partner) * l1(m) + l1(partner) * grad_x_l1(m))
}

/// Relative error of every analytic block gradient against central
/// differences (step 1e-6) of the dense likelihood oracle.
pub fn gradient_errors(d: &Dataset, p: &ModelParams) -> Vec<(tgpst::Block, f64)> {
    use tgpst::gp::grad_block;
    use tgpst::Block;
    const STEP: f64 = 1e-6;
    let with = |block: Block, m: &Matrix| {
        let mut q = p.clone();
        match block {
            Block::A => q.contraction.a.copy_from(m),
            Block::B => q.contraction.b.copy_from(m),
            Block::U1 => q.kernels.u1.copy_from(m),
            Block::U2 => q.kernels.u2.copy_from(m),
            Block::U3 => q.kernels.u3.copy_from(m),
            Block::LogSigma => q.log_sigma = m[(0, 0)],
        }
        dense_nll(d, &q)
    };
    Block::ALL
        .iter()
        .map(|&block| {
            let current = match block {
                Block::A => p.contraction.a.clone(),
                Block::B => p.contraction.b.clone(),
                Block::U1 => p.kernels.u1.clone(),
                Block::U2 => p.kernels.u2.clone(),
                Block::U3 => p.kernels.u3.clone(),
                Block::LogSigma => Matrix::from_element(1, 1, p.log_sigma),
            };
            let numeric = finite_diff_matrix(&current, STEP, |m| with(block, m));
            let analytic = match grad_block(d, p, block).unwrap() {
                tgpst::BlockGradient::Matrix(m) => m,
                tgpst::BlockGradient::Scalar(s) => Matrix::from_element(1, 1, s),
            };
            (block, rel_err(&analytic, &numeric, 1e-8))
        })
        .collect()
}

/// Verifies `(candidate − out)/η ∈ λ·∂R(out, partner)` row by row by building
/// an explicit dual certificate and checking every coordinate's subgradient
/// interval. The certificate comes from the TV-only smoothing of each row.
pub fn prox_certificate(
    c: &Matrix,
    p: &Matrix,
    lambda: f64,
    eta: f64,
    out: &Matrix,
) -> Result<(), String> {
    use tgpst::tv::tv1d_denoise;
    let tv = eta * lambda * l1(p);
    let l1w = eta * lambda * grad_x_l1(p);
    let tol = 1e-9 * (1.0 + tv + l1w + c.amax());
    for i in 0..c.nrows() {
        let row: Vec<f64> = c.row(i).iter().copied().collect();
        let m: Vec<f64> = out.row(i).iter().copied().collect();
        let z = tv1d_denoise(&row, tv);
        let n = row.len();
        // l1 part: v_j = z_j - m_j must lie in l1w * d|m_j|.
        for j in 0..n {
            let v = z[j] - m[j];
            if v.abs() > l1w + tol || (m[j] != 0.0 && (v - l1w * m[j].signum()).abs() > tol) {
                return Err(format!(
                    "row {i} coord {j}: l1 multiplier {v} outside the interval for {}",
                    m[j]
                ));
            }
        }
        // TV part: partial sums of c - z are the difference multipliers.
        let mut s = 0.0;
        for k in 0..n {
            s += row[k] - z[k];
            if k + 1 == n {
                if s.abs() > tol {
                    return Err(format!("row {i}: residuals sum to {s}"));
                }
                break;
            }
            let d = m[k + 1] - m[k];
            if s.abs() > tv + tol || (d != 0.0 && (-s - tv * d.signum()).abs() > tol) {
                return Err(format!(
                    "row {i} diff {k}: TV multiplier {} outside the interval for {d}",
                    -s
                ));
            }
        }
    }
    Ok(())
}
