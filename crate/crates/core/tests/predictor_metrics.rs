mod common;

use common::*;
use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use rand::Rng;
use tgpst::gp::full_kernel;
use tgpst::metrics::*;
use tgpst::predict::*;
use tgpst::tensor::kron;
use tgpst::{Dataset, Error, Matrix, ModelParams, Tensor3};

/// `½log(2π) ≈ 0.918938`.
fn ln_2pi_half() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn instance(seed: u64, n: usize) -> (Dataset, Vec<Tensor3>, ModelParams) {
    let mut r = rng(seed);
    let d = rand_dataset(&mut r, n, (5, 4, 3));
    let test = (0..4).map(|_| rand_tensor(&mut r, 5, 4, 3)).collect();
    let p = rand_params(&mut r, (5, 4, 3), (2, 3), (2, 2, 3));
    (d, test, p)
}

#[test]
fn predictive_matches_dense_oracle() {
    // R = 12 < N = 15 exercises the capacitance path, R = 12 > N = 8 the dense one.
    for (seed, n) in [(50, 15), (51, 8)] {
        let (d, test, p) = instance(seed, n);
        let pred = predict(&d, &test, &p).unwrap();
        let (mean, cov) = dense_predictive(&d, &test, &p);
        assert!((&pred.mean - mean).amax() < 1e-8);
        assert!((&pred.covariance - cov).amax() < 1e-8);
    }
}

#[test]
fn zero_test_tensor_gives_noise_only() {
    let (d, _, p) = instance(52, 15);
    let pred = predict(&d, &[Tensor3::zeros(5, 4, 3)], &p).unwrap();
    assert_eq!(pred.mean[0], 0.0);
    assert!((pred.variances()[0] - p.sigma2()).abs() < 1e-12);
}

#[test]
fn duplicate_training_point_interpolates_for_tiny_noise() {
    let (d, _, mut p) = instance(53, 10);
    p.log_sigma = 1e-4f64.ln();
    let pred = predict(&d, &d.tensors()[3..4], &p).unwrap();
    assert!(
        (pred.mean[0] - d.labels()[3]).abs() < 1e-2,
        "{} vs {}",
        pred.mean[0],
        d.labels()[3]
    );
}

#[test]
fn predict_rejects_mismatched_dims() {
    let (d, _, p) = instance(54, 6);
    assert!(matches!(
        predict(&d, &[Tensor3::zeros(4, 4, 3)], &p),
        Err(Error::Shape(_))
    ));
}

#[test]
fn rmse_and_r_squared_cases() {
    let y = [1.0, -2.0, 0.5, 3.0];
    assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
    let m = y.iter().sum::<f64>() / 4.0;
    assert_eq!(r_squared(&y, &[m; 4]).unwrap(), 0.0);
    assert_eq!(rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert!(matches!(
        r_squared(&[1.0, 1.0], &[0.0, 2.0]),
        Err(Error::UndefinedMetric(_))
    ));
}

#[test]
fn msll_cases() {
    assert_eq!(
        msll(&[0.3, -1.0], &[0.3, -1.0], 1.0).unwrap(),
        ln_2pi_half()
    );
    assert_eq!(msll(&[1.0], &[0.0], 1.0).unwrap(), ln_2pi_half() + 0.5);
    assert!(msll(&[1.0], &[0.0], -1.0).is_err());
}

#[test]
fn tss_cases() {
    let y = [1.0, 2.0, -1.0, -3.0];
    assert_eq!(tss(&y, &y, 0.0).unwrap(), 1.0);
    assert_eq!(tss(&y, &[1.0; 4], 0.0).unwrap(), 0.0);
    let truth = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
    let pred = [1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0];
    assert_eq!(tss(&truth, &pred, 0.0).unwrap(), 0.5);
    assert!(matches!(
        tss(&[1.0, 2.0], &[1.0, -1.0], 0.0),
        Err(Error::UndefinedMetric(_))
    ));
}

/// Contribution of every (channel pair, feature pair) by explicit loops over
/// `K₃(c, c')·K₁₂(f, f')·mean_i Zᵢ(f, c) Zᵢ(f', c')`.
fn decomposition_oracle(d: &Dataset, p: &ModelParams) -> (Matrix, Matrix) {
    let (h, w) = p.latent_dims();
    let c = p.input_dims().2;
    let hw = h * w;
    let k = &p.kernels;
    let k1 = k.u1.transpose() * &k.u1;
    let k2 = k.u2.transpose() * &k.u2;
    let k3 = k.u3.transpose() * &k.u3;
    let k12 = kron_loop(&k2, &k1);
    let z: Vec<Tensor3> = d
        .tensors()
        .iter()
        .map(|x| contract_loop(x, &p.contraction.a, &p.contraction.b))
        .collect();
    let n = d.len() as f64;
    let mut channel = Matrix::zeros(c, c);
    let mut feature = Matrix::zeros(hw, hw);
    for c1 in 0..c {
        for c2 in 0..c {
            for f1 in 0..hw {
                for f2 in 0..hw {
                    let m: f64 = z
                        .iter()
                        .map(|zi| zi.get(f1 % h, f1 / h, c1) * zi.get(f2 % h, f2 / h, c2))
                        .sum::<f64>()
                        / n;
                    let v = k3[(c1, c2)] * k12[(f1, f2)] * m;
                    channel[(c1, c2)] += v;
                    feature[(f1, f2)] += v;
                }
            }
        }
    }
    (channel, feature)
}

fn symmetrize(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            m[(i, j)]
        } else {
            m[(i, j)] + m[(j, i)]
        }
    })
}

#[test]
fn explained_variation_reconstructs_decomposition() {
    let (d, _, p) = instance(55, 12);
    let ev = explained_variation(&d, &p).unwrap();
    let (channel, feature) = decomposition_oracle(&d, &p);
    let scale = 100.0 / ev.total_variance;
    assert!((&ev.per_channel_pair - symmetrize(&channel) * scale).amax() < 1e-8);
    assert!((&ev.per_feature_map_pair - symmetrize(&feature) * scale).amax() < 1e-8);

    // Σ pairs + noise equals mean_i k(Xᵢ, Xᵢ) + σ̂², for both groupings.
    let t = d.tensors();
    let mean_k = t.iter().map(|x| dense_full_kernel(x, x, &p)).sum::<f64>() / t.len() as f64;
    let model = mean_k + p.sigma2();
    let upper = |m: &Matrix| {
        (0..m.nrows())
            .flat_map(|i| (i..m.ncols()).map(move |j| (i, j)))
            .map(|ij| m[ij])
            .sum::<f64>()
    };
    let noise_pct = 100.0 * p.sigma2() / ev.total_variance;
    let model_pct = 100.0 * model / ev.total_variance;
    assert!((upper(&ev.per_channel_pair) + noise_pct - model_pct).abs() < 1e-8);
    assert!((upper(&ev.per_feature_map_pair) + noise_pct - model_pct).abs() < 1e-8);
    assert!((ev.model_variance - model).abs() < 1e-8);
    assert!((ev.noise_share - p.sigma2() / model).abs() < 1e-12);
    let labels = d.labels();
    let my = labels.iter().sum::<f64>() / labels.len() as f64;
    let var = labels.iter().map(|y| (y - my).powi(2)).sum::<f64>() / labels.len() as f64;
    assert!((ev.total_variance - var).abs() < 1e-14);
    assert_eq!(ev.per_channel_pair, ev.per_channel_pair.transpose());
}

#[test]
fn explained_variation_special_cases() {
    let (d, _, mut p) = instance(56, 8);
    p.kernels.u3 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 0.5, 2.0]));
    let ev = explained_variation(&d, &p).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert_eq!(ev.per_channel_pair[(i, j)], 0.0);
            }
        }
    }
    p.contraction.a.fill(0.0);
    let ev = explained_variation(&d, &p).unwrap();
    assert!(ev
        .per_channel_pair
        .iter()
        .chain(ev.per_feature_map_pair.iter())
        .all(|v| *v == 0.0));
    assert_eq!(ev.noise_share, 1.0);
    // constant labels fall back to the model variance
    let flat = Dataset::new(d.tensors().to_vec(), vec![2.0; d.len()]).unwrap();
    let ev = explained_variation(&flat, &p).unwrap();
    assert_eq!(ev.total_variance, ev.model_variance);
    let _ = kron(&Matrix::identity(1, 1), &Matrix::identity(1, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn predictive_covariance_is_psd_and_bounded(seed in any::<u64>(), n in 2usize..20) {
        let (d, test, p) = instance(seed, n);
        let pred = predict(&d, &test, &p).unwrap();
        let cov = &pred.covariance;
        prop_assert!((cov - cov.transpose()).amax() <= 1e-10);
        prop_assert!(SymmetricEigen::new(cov.clone()).eigenvalues.min() >= -1e-8);
        for (i, x) in test.iter().enumerate() {
            let prior = full_kernel(x, x, &p).unwrap() + p.sigma2();
            prop_assert!(cov[(i, i)] <= prior + 1e-8);
            prop_assert!(cov[(i, i)] >= p.sigma2() - 1e-10);
        }
    }

    #[test]
    fn msll_minimized_at_mean_squared_residual(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..30),
    ) {
        let (y, m): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mse = y.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        prop_assume!(mse > 1e-6);
        let s = mse.sqrt();
        let h = 1e-5 * s;
        let slope = (msll(&y, &m, s + h).unwrap() - msll(&y, &m, s - h).unwrap()) / (2.0 * h);
        prop_assert!(slope.abs() < 1e-5 / s, "slope {slope}");
        let at = msll(&y, &m, s).unwrap();
        prop_assert!(at <= msll(&y, &m, 1.1 * s).unwrap() && at <= msll(&y, &m, 0.9 * s).unwrap());
    }

    #[test]
    fn tss_invariant_under_doubling(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..40)) {
        let (y, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|v| *v >= 0.0) && y.iter().any(|v| *v < 0.0));
        let doubled: Vec<f64> = pred.iter().map(|v| 2.0 * v).collect();
        prop_assert_eq!(tss(&y, &pred, 0.0).unwrap(), tss(&y, &doubled, 0.0).unwrap());
    }
}

#[test]
fn random_labels_metrics_are_finite() {
    let mut r = rng(57);
    let y: Vec<f64> = (0..50).map(|_| r.random_range(-1.0..1.0)).collect();
    let m: Vec<f64> = (0..50).map(|_| r.random_range(-1.0..1.0)).collect();
    assert!(rmse(&y, &m).unwrap().is_finite());
    assert!(r_squared(&y, &m).unwrap() < 1.0);
}
