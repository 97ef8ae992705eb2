//! Regression and classification scores plus the loss-curve decay diagnostic.

use crate::error::{Error, Result};

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<()> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "metric inputs need equal non-zero lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let sse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

/// `1 − SSE/SST`; undefined for constant `y_true`.
pub fn r_squared(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let m = mean(y_true);
    let sst: f64 = y_true.iter().map(|y| (y - m).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::UndefinedMetric("R² of a constant target"));
    }
    let sse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok(1.0 - sse / sst)
}

/// Mean standardized log loss under one noise scale:
/// `mean(½log(2πσ̂²) + (y − ŷ)²/(2σ̂²))`.
pub fn msll(y_true: &[f64], mean_pred: &[f64], sigma_hat: f64) -> Result<f64> {
    check_pair(y_true, mean_pred)?;
    if !(sigma_hat > 0.0 && sigma_hat.is_finite()) {
        return Err(Error::config(format!(
            "sigma_hat must be positive, got {sigma_hat}"
        )));
    }
    let s2 = sigma_hat * sigma_hat;
    let norm = 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    Ok(mean(
        &y_true
            .iter()
            .zip(mean_pred)
            .map(|(y, m)| norm + (y - m).powi(2) / (2.0 * s2))
            .collect::<Vec<_>>(),
    ))
}

/// True skill statistic `TP/(TP+FN) − FP/(FP+TN)`; a value is positive when
/// it is at or above `threshold`.
pub fn tss(y_true: &[f64], y_pred: &[f64], threshold: f64) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    let (mut tp, mut fn_, mut fp, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (t, p) in y_true.iter().zip(y_pred) {
        match (*t >= threshold, *p >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    if tp + fn_ == 0 || fp + tn == 0 {
        return Err(Error::UndefinedMetric(
            "TSS needs both classes in the target",
        ));
    }
    Ok(tp as f64 / (tp + fn_) as f64 - fp as f64 / (fp + tn) as f64)
}

/// Least-squares fit of `f(k) = a + b/(c + k)`, `k = 1..=K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDecayFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_squared: f64,
}

/// Optimal `(a, b, sse)` for a fixed `c`.
fn linear_fit(values: &[f64], c: f64) -> (f64, f64, f64) {
    let x: Vec<f64> = (1..=values.len()).map(|k| 1.0 / (c + k as f64)).collect();
    let mx = mean(&x);
    let my = mean(values);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(values).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let sse = x
        .iter()
        .zip(values)
        .map(|(u, v)| (v - a - b * u).powi(2))
        .sum::<f64>();
    (a, b, sse)
}

/// Fits `a + b/(c + k)` to a loss curve by grid search over `c > −1`
/// (log-spaced in `c + 1`) refined with golden-section search.
pub fn fit_inverse_decay(values: &[f64]) -> Result<InverseDecayFit> {
    if values.len() < 3 {
        return Err(Error::config("decay fit needs at least three points"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            what: "loss history entry",
            value: f64::NAN,
        });
    }
    let to_c = |t: f64| t.exp() - 1.0;
    let sse_at = |t: f64| linear_fit(values, to_c(t)).2;
    let (lo, hi, steps) = (1e-4f64.ln(), 1e6f64.ln(), 400);
    let grid: Vec<f64> = (0..=steps)
        .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
        .collect();
    let best = (0..grid.len())
        .min_by(|&i, &j| sse_at(grid[i]).total_cmp(&sse_at(grid[j])))
        .expect("non-empty grid");
    let (mut x0, mut x1) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let m1 = x1 - phi * (x1 - x0);
        let m2 = x0 + phi * (x1 - x0);
        if sse_at(m1) <= sse_at(m2) {
            x1 = m2;
        } else {
            x0 = m1;
        }
    }
    let t = 0.5 * (x0 + x1);
    let c = to_c(t);
    let (a, b, sse) = linear_fit(values, c);
    let my = mean(values);
    let sst: f64 = values.iter().map(|v| (v - my).powi(2)).sum();
    let r_squared = if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    Ok(InverseDecayFit { a, b, c, r_squared })
}
