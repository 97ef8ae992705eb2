//! Seeded simulation study: 25×25×3 tensors of three types and labels drawn
//! from the ground-truth tensor GP.
//!
//! Each sample has one signal channel (its type) containing a 5×5 block of
//! elevated mean, placed at the image center for type 2 and in a uniformly
//! chosen corner for types 1 and 3. Sample `i` draws from ChaCha20 stream `i`
//! of the seed; labels come from stream `u64::MAX`.

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{build_u_tilde, ContractionFactors, Dataset, KernelFactors, ModelParams};
use crate::tensor::{Matrix, Tensor3};

pub const SIM_DIMS: (usize, usize, usize) = (25, 25, 3);
pub const SIM_LATENT: (usize, usize) = (3, 3);
const BLOCK: usize = 5;
const LABEL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of every pixel.
    pub noise_sd: f64,
    /// Mean of the pixels inside the signal block.
    pub signal_mean: f64,
}

impl SimConfig {
    /// Background `N(0, 0.3)` and signal `N(4, 0.3)`, with `0.3` a variance.
    pub fn new(n: usize, seed: u64) -> Self {
        SimConfig {
            n,
            seed,
            noise_sd: 0.3f64.sqrt(),
            signal_mean: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) || !self.signal_mean.is_finite() {
            return Err(Error::config(
                "noise_sd must be finite and nonnegative, signal_mean finite",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub a_star: Matrix,
    pub b_star: Matrix,
    pub k1_star: Matrix,
    pub k2_star: Matrix,
    pub k3_star: Matrix,
    pub sigma_star: f64,
    /// Type of each generated sample, in `1..=3`.
    pub type_labels: Vec<u8>,
}

impl GroundTruth {
    /// The truth as model parameters, with `Uₖ = chol(Kₖ)ᵀ`.
    pub fn params(&self) -> Result<ModelParams> {
        let factor = |k: &Matrix| -> Result<Matrix> {
            Cholesky::new(k.clone())
                .map(|c| c.l().transpose())
                .ok_or(Error::Numerical {
                    what: "ground-truth kernel pivot",
                    value: k.min(),
                })
        };
        Ok(ModelParams {
            contraction: ContractionFactors {
                a: self.a_star.clone(),
                b: self.b_star.clone(),
            },
            kernels: KernelFactors {
                u1: factor(&self.k1_star)?,
                u2: factor(&self.k2_star)?,
                u3: factor(&self.k3_star)?,
            },
            log_sigma: self.sigma_star.ln(),
        })
    }
}

/// Banded averaging factor: row `s` holds `0.2` on columns `10s..10s+5`.
fn banded() -> Matrix {
    Matrix::from_fn(SIM_LATENT.0, SIM_DIMS.0, |s, j| {
        if (10 * s..10 * s + BLOCK).contains(&j) {
            0.2
        } else {
            0.0
        }
    })
}

/// Fixed ground-truth factors; `type_labels` is empty.
pub fn true_kernels() -> GroundTruth {
    let spatial = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.3 });
    GroundTruth {
        a_star: banded(),
        b_star: banded(),
        k1_star: spatial.clone(),
        k2_star: spatial,
        k3_star: Matrix::from_row_slice(3, 3, &[2.0, -1.0, 1.9, -1.0, 2.0, -1.0, 1.9, -1.0, 2.0]),
        sigma_star: 0.5,
        type_labels: Vec::new(),
    }
}

fn sample_tensor(cfg: &SimConfig, index: usize) -> (Tensor3, u8) {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let kind: u8 = rng.random_range(1..=3);
    let (r0, c0) = if kind == 2 {
        (10, 10)
    } else {
        let far = SIM_DIMS.0 - BLOCK;
        match rng.random_range(0..4) {
            0 => (0, 0),
            1 => (0, far),
            2 => (far, 0),
            _ => (far, far),
        }
    };
    let signal = (kind - 1) as usize;
    let (h, w, c) = SIM_DIMS;
    let mut data = Vec::with_capacity(h * w * c);
    for k in 0..c {
        for j in 0..w {
            for i in 0..h {
                let z: f64 = rng.sample(StandardNormal);
                let inside =
                    k == signal && (r0..r0 + BLOCK).contains(&i) && (c0..c0 + BLOCK).contains(&j);
                data.push(if inside { cfg.signal_mean } else { 0.0 } + cfg.noise_sd * z);
            }
        }
    }
    (
        Tensor3::from_vec(SIM_DIMS, data).expect("fixed simulation dims"),
        kind,
    )
}

/// Covariates and their types.
pub fn generate_tensors(cfg: &SimConfig) -> Result<(Vec<Tensor3>, Vec<u8>)> {
    cfg.validate()?;
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| sample_tensor(cfg, i))
        .unzip())
}

/// `K* + σ*²I` over the given tensors.
pub fn label_covariance(tensors: &[Tensor3], truth: &GroundTruth) -> Result<Matrix> {
    let p = truth.params()?;
    let placeholder = Dataset::new(tensors.to_vec(), vec![0.0; tensors.len()])?;
    let u = build_u_tilde(&placeholder, &p)?;
    let mut cov = &u * u.transpose();
    for i in 0..cov.nrows() {
        cov[(i, i)] += truth.sigma_star * truth.sigma_star;
    }
    Ok(cov)
}

/// One joint draw `y ~ N(0, K* + σ*²I)` from the label stream of `seed`.
pub fn sample_labels(tensors: &[Tensor3], truth: &GroundTruth, seed: u64) -> Result<Vec<f64>> {
    let cov = label_covariance(tensors, truth)?;
    let chol = Cholesky::new(cov).ok_or(Error::Numerical {
        what: "label covariance pivot",
        value: f64::NAN,
    })?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(LABEL_STREAM);
    let z = DVector::from_fn(tensors.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((chol.l() * z).as_slice().to_vec())
}

/// Full simulated dataset and the ground truth that produced it.
pub fn generate(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    let (tensors, types) = generate_tensors(cfg)?;
    let mut truth = true_kernels();
    let labels = sample_labels(&tensors, &truth, cfg.seed)?;
    truth.type_labels = types;
    Ok((Dataset::new(tensors, labels)?, truth))
}
