//! Anisotropic total-variation penalty on rank-1 feature maps and its proximal
//! operator.
//!
//! For feature maps `W_{s,t} = αₛᵀβₜ` built from the rows of `A` and `B`, the
//! summed anisotropic TV norm factorizes into a fused-lasso penalty
//!
//! ```text
//! R(A, B) = ‖∇ₓB‖₁‖A‖₁ + ‖B‖₁‖∇ₓA‖₁
//! ```
//!
//! With the partner factor held fixed, `R` is separable over the rows of the
//! free factor, and each row is a 1-D fused lasso signal approximation. Its
//! proximal map is a 1-D TV denoise followed by soft thresholding.

use crate::error::{Error, Result};
use crate::tensor::{horizontal_gradient, Matrix};

/// Weights of the row-wise fused lasso problem
/// `½‖α − v‖² + tv_weight·Σ|α_{j+1} − α_j| + l1_weight·‖α‖₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxWeights {
    pub tv_weight: f64,
    pub l1_weight: f64,
}

impl ProxWeights {
    pub fn new(tv_weight: f64, l1_weight: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(tv_weight) || !ok(l1_weight) {
            return Err(Error::config(format!(
                "prox weights must be finite and nonnegative, got tv={tv_weight}, l1={l1_weight}"
            )));
        }
        Ok(ProxWeights {
            tv_weight,
            l1_weight,
        })
    }

    /// Weights for the prox of `η·λ·R(·, partner)`.
    pub fn for_partner(partner: &Matrix, lambda: f64, eta: f64) -> Result<Self> {
        let scale = lambda * eta;
        ProxWeights::new(
            scale * l1_norm(partner),
            scale * l1_norm(&horizontal_gradient(partner)),
        )
    }
}

pub fn l1_norm(m: &Matrix) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Sum of absolute vertical and horizontal first differences.
pub fn tv_norm_anisotropic(w: &Matrix) -> f64 {
    let (rows, cols) = w.shape();
    let mut total = 0.0;
    for j in 0..cols {
        for i in 0..rows {
            if i + 1 < rows {
                total += (w[(i + 1, j)] - w[(i, j)]).abs();
            }
            if j + 1 < cols {
                total += (w[(i, j + 1)] - w[(i, j)]).abs();
            }
        }
    }
    total
}

/// Closed-form fused-lasso penalty `‖∇ₓB‖₁‖A‖₁ + ‖B‖₁‖∇ₓA‖₁`.
///
/// Equals `Σ_{s,t} ‖αₛᵀβₜ‖_TV` over all feature maps.
pub fn fused_penalty(a: &Matrix, b: &Matrix) -> f64 {
    l1_norm(&horizontal_gradient(b)) * l1_norm(a) + l1_norm(b) * l1_norm(&horizontal_gradient(a))
}

/// Exact minimizer of `½‖x − signal‖² + weight·Σ|x_{j+1} − x_j|`.
///
/// Direct forward sweep over the taut-string segments (Condat's algorithm);
/// linear time in practice and exact up to rounding.
pub fn tv1d_denoise(signal: &[f64], weight: f64) -> Vec<f64> {
    let n = signal.len();
    if n <= 1 || weight <= 0.0 {
        return signal.to_vec();
    }
    let lambda = weight;
    let mut out = vec![0.0; n];

    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let mut umin = lambda;
    let mut umax = -lambda;
    let mut vmin = signal[0] - lambda;
    let mut vmax = signal[0] + lambda;

    loop {
        while k == n - 1 {
            if umin < 0.0 {
                // segment ends at its lower bound
                while k0 <= kminus {
                    out[k0] = vmin;
                    k0 += 1;
                }
                k = k0;
                kminus = k0;
                vmin = signal[k0];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                while k0 <= kplus {
                    out[k0] = vmax;
                    k0 += 1;
                }
                k = k0;
                kplus = k0;
                vmax = signal[k0];
                umax = -lambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                while k0 <= k {
                    out[k0] = vmin;
                    k0 += 1;
                }
                return out;
            }
        }

        umin += signal[k + 1] - vmin;
        if umin < -lambda {
            while k0 <= kminus {
                out[k0] = vmin;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmin = signal[k0];
            vmax = vmin + 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        umax += signal[k + 1] - vmax;
        if umax > lambda {
            while k0 <= kplus {
                out[k0] = vmax;
                k0 += 1;
            }
            k = k0;
            kminus = k0;
            kplus = k0;
            vmax = signal[k0];
            vmin = vmax - 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        k += 1;
        if umin >= lambda {
            kminus = k;
            vmin += (umin - lambda) / (k - k0 + 1) as f64;
            umin = lambda;
        }
        if umax <= -lambda {
            kplus = k;
            vmax += (umax + lambda) / (k - k0 + 1) as f64;
            umax = -lambda;
        }
    }
}

#[inline]
pub fn soft_threshold_scalar(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Elementwise `sign(x)·max(|x| − t, 0)`.
pub fn soft_threshold(m: &Matrix, t: f64) -> Matrix {
    m.map(|x| soft_threshold_scalar(x, t))
}

/// Row-wise fused lasso prox: TV denoise each row, then soft threshold.
pub fn prox_rows(candidate: &Matrix, weights: ProxWeights) -> Matrix {
    let (rows, cols) = candidate.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut row = vec![0.0; cols];
    for i in 0..rows {
        for (j, r) in row.iter_mut().enumerate() {
            *r = candidate[(i, j)];
        }
        let smoothed = tv1d_denoise(&row, weights.tv_weight);
        for (j, v) in smoothed.into_iter().enumerate() {
            out[(i, j)] = soft_threshold_scalar(v, weights.l1_weight);
        }
    }
    out
}

/// Exact minimizer of
/// `(1/2η)‖M − candidate‖²_F + λ·(‖∇ₓpartner‖₁‖M‖₁ + ‖partner‖₁‖∇ₓM‖₁)`.
pub fn prox_tv(candidate: &Matrix, partner: &Matrix, lambda: f64, eta: f64) -> Result<Matrix> {
    if eta.is_nan() || eta <= 0.0 || !eta.is_finite() {
        return Err(Error::config(format!(
            "prox step must be positive, got {eta}"
        )));
    }
    let weights = ProxWeights::for_partner(partner, lambda, eta)?;
    Ok(prox_rows(candidate, weights))
}

/// Value of the prox objective minimized by [`prox_tv`].
pub fn prox_objective(
    m: &Matrix,
    candidate: &Matrix,
    partner: &Matrix,
    lambda: f64,
    eta: f64,
) -> f64 {
    (m - candidate).norm_squared() / (2.0 * eta) + lambda * fused_penalty(m, partner)
}
