mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use tgpst::tv::*;
use tgpst::Matrix;

fn tv1d_objective(x: &[f64], y: &[f64], w: f64) -> f64 {
    fused_lasso_objective(x, y, w, 0.0)
}

#[test]
fn tv_norm_cases() {
    assert_eq!(tv_norm_anisotropic(&Matrix::from_element(4, 2, -0.7)), 0.0);
    assert_eq!(
        tv_norm_anisotropic(&Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0])),
        2.0
    );
    let m = rand_matrix(&mut rng(10), 5, 4);
    let mut want = 0.0;
    for i in 0..5 {
        for j in 0..4 {
            if i + 1 < 5 {
                want += (m[(i + 1, j)] - m[(i, j)]).abs();
            }
            if j + 1 < 4 {
                want += (m[(i, j + 1)] - m[(i, j)]).abs();
            }
        }
    }
    assert!((tv_norm_anisotropic(&m) - want).abs() < 1e-14);
}

#[test]
fn penalty_cases() {
    let mut r = rng(11);
    let a = rand_matrix(&mut r, 3, 10);
    let b = rand_matrix(&mut r, 3, 8);
    assert_eq!(fused_penalty(&Matrix::zeros(3, 10), &b), 0.0);
    assert_eq!(fused_penalty(&a, &Matrix::zeros(3, 8)), 0.0);
    let ones = Matrix::from_element(1, 2, 1.0);
    assert_eq!(fused_penalty(&ones, &ones), 0.0);
    assert!((fused_penalty(&a, &b) - feature_map_tv_sum(&a, &b)).abs() < 1e-10);
}

#[test]
fn tv1d_cases() {
    let x = [0.3, -1.0, 2.0, 2.0, 0.1];
    assert_eq!(tv1d_denoise(&x, 0.0), x.to_vec());
    assert_eq!(tv1d_denoise(&[1.25; 6], 3.0), vec![1.25; 6]);
    let two = tv1d_denoise(&[1.0, 0.0], 0.2);
    assert!((two[0] - 0.8).abs() < 1e-14 && (two[1] - 0.2).abs() < 1e-14);
    let oracle = fused_lasso_dual(&[1.0, 0.0], 0.2, 0.0, 20_000);
    assert!((oracle[0] - 0.8).abs() < 1e-8 && (oracle[1] - 0.2).abs() < 1e-8);
    assert_eq!(tv1d_denoise(&[], 1.0), Vec::<f64>::new());
    assert_eq!(tv1d_denoise(&[4.0], 1.0), vec![4.0]);
}

#[test]
fn tv1d_matches_dual_oracle() {
    let mut r = rng(12);
    for _ in 0..30 {
        let n = r.random_range(2..25);
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let w = r.random_range(0.0..1.5);
        let got = tv1d_denoise(&y, w);
        let oracle = fused_lasso_dual(&y, w, 0.0, 50_000);
        assert!(tv1d_objective(&got, &y, w) <= tv1d_objective(&oracle, &y, w) + 1e-9);
    }
}

#[test]
fn soft_threshold_cases() {
    let m = Matrix::from_row_slice(1, 3, &[1.2, -0.3, 0.0]);
    assert_eq!(soft_threshold(&m, 0.0), m);
    let out = soft_threshold(&m, 0.5);
    assert!((out[(0, 0)] - 0.7).abs() < 1e-15);
    assert_eq!(out[(0, 1)], 0.0);
    assert_eq!(
        soft_threshold(&Matrix::zeros(2, 2), 0.4),
        Matrix::zeros(2, 2)
    );
}

#[test]
fn prox_trivial_cases() {
    let mut r = rng(13);
    let c = rand_matrix(&mut r, 3, 10);
    let p = rand_matrix(&mut r, 2, 7);
    assert_eq!(prox_tv(&c, &p, 0.0, 0.3).unwrap(), c);
    assert_eq!(prox_tv(&c, &Matrix::zeros(2, 7), 2.0, 0.3).unwrap(), c);
    assert!(prox_tv(&c, &p, 1.0, 0.0).is_err());
    assert!(prox_tv(&c, &p, -1.0, 0.1).is_err());
}

#[test]
fn prox_matches_oracle_on_example() {
    let mut r = rng(14);
    let c = rand_matrix(&mut r, 3, 10);
    let p = rand_matrix(&mut r, 3, 8);
    let got = prox_tv(&c, &p, 0.5, 0.1).unwrap();
    let oracle = prox_oracle(&c, &p, 0.5, 0.1, 100_000);
    let f_got = prox_objective_oracle(&got, &c, &p, 0.5, 0.1);
    assert!(f_got <= prox_objective_oracle(&oracle, &c, &p, 0.5, 0.1) + 1e-6);
    assert!((prox_objective(&got, &c, &p, 0.5, 0.1) - f_got).abs() < 1e-12);
}

#[test]
fn single_column_candidate_only_thresholds() {
    let c = Matrix::from_column_slice(3, 1, &[1.0, -0.2, 0.5]);
    let p = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 2.0]);
    let eta = 0.5;
    let weights = ProxWeights::for_partner(&p, 1.0, eta).unwrap();
    let got = prox_tv(&c, &p, 1.0, eta).unwrap();
    assert_eq!(got, soft_threshold(&c, weights.l1_weight));
}

#[test]
fn prox_subgradient_conditions() {
    let mut r = rng(15);
    for _ in 0..50 {
        let (rows, cols) = (r.random_range(1..5), r.random_range(1..15));
        let c = rand_matrix(&mut r, rows, cols);
        let (pr, pc) = (r.random_range(1..4), r.random_range(1..12));
        let p = rand_matrix(&mut r, pr, pc);
        let (lambda, eta) = (r.random_range(0.0..2.0), r.random_range(0.01..1.0));
        let out = prox_tv(&c, &p, lambda, eta).unwrap();
        prox_certificate(&c, &p, lambda, eta, &out).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tv_identity(seed in any::<u64>(), h in 1usize..=5, w in 1usize..=5, big_h in 1usize..=30, big_w in 1usize..=30) {
        let mut r = rng(seed);
        let a = rand_matrix(&mut r, h, big_h);
        let b = rand_matrix(&mut r, w, big_w);
        prop_assert!((fused_penalty(&a, &b) - feature_map_tv_sum(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn tv1d_descends_and_preserves_mean(y in prop::collection::vec(-3.0f64..3.0, 1..40), w in 0.0f64..2.0) {
        let x = tv1d_denoise(&y, w);
        prop_assert_eq!(x.len(), y.len());
        prop_assert!(tv1d_objective(&x, &y, w) <= tv1d_objective(&y, &y, w) + 1e-12);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&x) - mean(&y)).abs() < 1e-10);
    }

    #[test]
    fn tv1d_is_non_expansive(pair in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40), w in 0.0f64..2.0) {
        let (x, y): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let (px, py) = (tv1d_denoise(&x, w), tv1d_denoise(&y, w));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist(&px, &py) <= dist(&x, &y) + 1e-10);
    }

    #[test]
    fn prox_matches_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (rows, cols) = (r.random_range(1..4), r.random_range(2..12));
        let c = rand_matrix(&mut r, rows, cols);
        let (pr, pc) = (r.random_range(1..4), r.random_range(2..10));
        let p = rand_matrix(&mut r, pr, pc);
        let (lambda, eta) = (r.random_range(0.0..1.0), r.random_range(0.01..0.5));
        let got = prox_tv(&c, &p, lambda, eta).unwrap();
        let oracle = prox_oracle(&c, &p, lambda, eta, 20_000);
        let (f_got, f_oracle) = (
            prox_objective_oracle(&got, &c, &p, lambda, eta),
            prox_objective_oracle(&oracle, &c, &p, lambda, eta),
        );
        prop_assert!((f_got - f_oracle).abs() < 1e-6 * (1.0 + f_oracle.abs()), "{f_got} vs {f_oracle}");
    }
}
