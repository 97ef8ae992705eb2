//! GP posterior predictions and the explained-variation decomposition.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{
    build_u_tilde, latent_tensors, u_tilde_from_latent, Dataset, ModelParams, NoisyGram,
};
use crate::tensor::{kron, Matrix, Tensor3};

/// Predictive mean and covariance of noisy test labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    /// Includes the noise variance `σ̂²` on the diagonal.
    pub covariance: Matrix,
}

impl PredictiveDistribution {
    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }
}

/// Conditions the fitted GP on `train` and predicts at `test`.
pub fn predict(
    train: &Dataset,
    test: &[Tensor3],
    p: &ModelParams,
) -> Result<PredictiveDistribution> {
    if let Some((i, t)) = test
        .iter()
        .enumerate()
        .find(|(_, t)| t.dims() != p.input_dims())
    {
        return Err(Error::shape(format!(
            "test tensor {i} has dims {:?}, model expects {:?}",
            t.dims(),
            p.input_dims()
        )));
    }
    let u = build_u_tilde(train, p)?;
    let latent = latent_tensors(test, &p.contraction)?;
    let u_star = if test.is_empty() {
        Matrix::zeros(0, p.kernels.feature_len())
    } else {
        u_tilde_from_latent(&latent, &p.kernels)?
    };
    let gram = NoisyGram::new(&u, p.sigma2())?;
    let (mean, covariance) = gram.predictive(&u_star, &train.label_vector());
    if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            what: "predictive moment",
            value: f64::NAN,
        });
    }
    Ok(PredictiveDistribution { mean, covariance })
}

/// Shares of the label variance attributed to channel pairs and feature-map
/// pairs, in percent. Off-diagonal entries hold the summed `(i, j)` and
/// `(j, i)` contributions; diagonal entries the single term.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedVariation {
    pub per_channel_pair: Matrix,
    /// Indexed by feature map `f = s + h·t`.
    pub per_feature_map_pair: Matrix,
    /// Denominator of the percentages.
    pub total_variance: f64,
    /// `mean_i k(Xᵢ, Xᵢ) + σ̂²`.
    pub model_variance: f64,
    /// `σ̂² / model_variance`, as a fraction.
    pub noise_share: f64,
}

fn symmetrized_percent(contrib: &Matrix, total: f64) -> Matrix {
    let n = contrib.nrows();
    Matrix::from_fn(n, n, |i, j| {
        let v = if i == j {
            contrib[(i, j)]
        } else {
            contrib[(i, j)] + contrib[(j, i)]
        };
        100.0 * v / total
    })
}

/// Plug-in decomposition of `Var(y)` over the training inputs.
///
/// Percentages use the empirical label variance (population form) and fall
/// back to the model variance when the labels are constant.
pub fn explained_variation(train: &Dataset, p: &ModelParams) -> Result<ExplainedVariation> {
    let latent = latent_tensors(train.tensors(), &p.contraction)?;
    let (h, w) = p.latent_dims();
    let c = p.input_dims().2;
    let hw = h * w;
    let k3 = p.kernels.k3();
    let k12 = kron(&p.kernels.k2(), &p.kernels.k1());
    let maps = |z: &Tensor3| Matrix::from_column_slice(hw, c, z.as_slice());
    let (channel_sum, map_sum) = latent
        .par_iter()
        .map(|z| {
            let m = maps(z);
            (m.transpose() * &k12 * &m, &m * &k3 * m.transpose())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(
            (Matrix::zeros(c, c), Matrix::zeros(hw, hw)),
            |(a, b), (x, y)| (a + x, b + y),
        );
    let n = train.len() as f64;
    let channel = k3.component_mul(&channel_sum) / n;
    let feature = k12.component_mul(&map_sum) / n;

    let mean_k = channel.sum();
    let sigma2 = p.sigma2();
    let model_variance = mean_k + sigma2;
    let labels = train.labels();
    let mean_y = labels.iter().sum::<f64>() / n;
    let empirical = labels.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n;
    let total_variance = if empirical > 0.0 {
        empirical
    } else {
        model_variance
    };
    Ok(ExplainedVariation {
        per_channel_pair: symmetrized_percent(&channel, total_variance),
        per_feature_map_pair: symmetrized_percent(&feature, total_variance),
        total_variance,
        model_variance,
        noise_share: sigma2 / model_variance,
    })
}
