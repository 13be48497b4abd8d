//! Brute-force reference implementations for the test suite. Nothing here
//! calls into the library's numerical code.
#![allow(dead_code)]

use std::f64::consts::PI;

/// A reference value together with how it was judged.
#[derive(Debug, Clone)]
pub struct OracleResult<T> {
    pub value: T,
    pub tolerance: f64,
    pub error: f64,
    pub pass: bool,
}

impl<T> OracleResult<T> {
    pub fn judge(value: T, error: f64, tolerance: f64) -> Self {
        Self {
            value,
            tolerance,
            error,
            pass: error < tolerance,
        }
    }
}

pub const DFT_MAX_SIDE: usize = 8;

/// Direct double-sum DFT of one real plane, `F[u][v] = sum x[m][n] e^{-2 pi i (um/H + vn/W)}`,
/// as `(re, im)` pairs.
pub fn dft_oracle(x: &[Vec<f64>]) -> Result<Vec<Vec<(f64, f64)>>, String> {
    let h = x.len();
    let w = x.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || x.iter().any(|r| r.len() != w) {
        return Err("input must be a nonempty rectangle".into());
    }
    if h > DFT_MAX_SIDE || w > DFT_MAX_SIDE {
        return Err(format!(
            "{h}x{w} input exceeds the {DFT_MAX_SIDE}x{DFT_MAX_SIDE} oracle limit"
        ));
    }
    let mut out = vec![vec![(0.0, 0.0); w]; h];
    for (u, row) in out.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (m, xr) in x.iter().enumerate() {
                for (n, &val) in xr.iter().enumerate() {
                    let theta = -2.0 * PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    re += val * theta.cos();
                    im += val * theta.sin();
                }
            }
            *cell = (re, im);
        }
    }
    Ok(out)
}

/// Direct inverse DFT of a complex plane, returning `(re, im)` per pixel.
pub fn idft_oracle(f: &[Vec<(f64, f64)>]) -> Result<Vec<Vec<(f64, f64)>>, String> {
    let h = f.len();
    let w = f.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || h > DFT_MAX_SIDE || w > DFT_MAX_SIDE {
        return Err(format!("{h}x{w} input outside oracle limits"));
    }
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![vec![(0.0, 0.0); w]; h];
    for (m, row) in out.iter_mut().enumerate() {
        for (n, cell) in row.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (u, fr) in f.iter().enumerate() {
                for (v, &(a, b)) in fr.iter().enumerate() {
                    let theta = 2.0 * PI * ((u * m) as f64 / h as f64 + (v * n) as f64 / w as f64);
                    re += a * theta.cos() - b * theta.sin();
                    im += a * theta.sin() + b * theta.cos();
                }
            }
            *cell = (re * scale, im * scale);
        }
    }
    Ok(out)
}

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Central differences of `loss` at `params`, one coordinate at a time.
pub fn finite_difference_gradient(
    loss: impl Fn(&[f64]) -> f64,
    params: &[f64],
    step: f64,
) -> Result<Vec<f64>, String> {
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = loss(&p);
        p[i] = orig - step;
        let minus = loss(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(format!("non-finite loss while probing coordinate {i}"));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish.
pub fn normwise_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares an analytic gradient with central differences at the default
/// step and tolerance.
pub fn check_gradient(
    loss: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
) -> OracleResult<Vec<f64>> {
    let numeric = finite_difference_gradient(loss, params, FD_STEP).expect("finite loss");
    let err = normwise_relative_error(analytic, &numeric);
    OracleResult::judge(numeric, err, FD_TOLERANCE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub mcc: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Metrics from raw label lists over classes `0..k`.
///
/// MCC uses the covariance of one-hot indicator vectors, summed pairwise over
/// samples. Balanced accuracy averages recall over classes present in the
/// truth; macro-F1 averages `2PR / (P + R)` over all `k` classes, scoring 0
/// wherever precision or recall is undefined or both are zero.
pub fn metric_oracle(truth: &[usize], predicted: &[usize], k: usize) -> MetricValues {
    assert!(!truth.is_empty() && truth.len() == predicted.len());
    let n = truth.len() as f64;
    let onehot = |labels: &[usize]| -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| (0..k).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let (x, y) = (onehot(truth), onehot(predicted));
    let mean = |m: &[Vec<f64>], c: usize| m.iter().map(|r| r[c]).sum::<f64>() / n;
    let cov = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for c in 0..k {
            let (ma, mb) = (mean(a, c), mean(b, c));
            for i in 0..a.len() {
                s += (a[i][c] - ma) * (b[i][c] - mb);
            }
        }
        s / n
    };
    let denom = (cov(&x, &x) * cov(&y, &y)).sqrt();
    let mcc = if denom == 0.0 {
        0.0
    } else {
        cov(&x, &y) / denom
    };

    let count = |f: &dyn Fn(usize) -> bool| (0..truth.len()).filter(|&i| f(i)).count() as f64;
    let accuracy = count(&|i| truth[i] == predicted[i]) / n;
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = count(&|i| truth[i] == c && predicted[i] == c);
        let actual = count(&|i| truth[i] == c);
        let guessed = count(&|i| predicted[i] == c);
        if actual > 0.0 {
            recalls.push(tp / actual);
        }
        let f1 = if actual == 0.0 || guessed == 0.0 {
            0.0
        } else {
            let (p, r) = (tp / guessed, tp / actual);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        f1s.push(f1);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    MetricValues {
        mcc,
        balanced_accuracy: avg(&recalls),
        macro_f1: avg(&f1s),
        accuracy,
    }
}
