//! Scalar and row kernels shared by the tape operations and the checked
//! vector-level entry points.

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU: `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of one row with max subtraction.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Writes the normalised row into `xhat` and returns `1/sqrt(var + eps)`.
/// A zero-variance row with `eps = 0` normalises to zeros.
pub(crate) fn normalize_row(x: &[f64], xhat: &mut [f64], eps: f64) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var + eps;
    let inv_std = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    for (h, v) in xhat.iter_mut().zip(x) {
        *h = (v - mean) * inv_std;
    }
    inv_std
}

/// Probability vector from arbitrary finite scores.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Invalid("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::Invalid("softmax input contains NaN".into()));
    }
    let mut out = v.to_vec();
    softmax_row(&mut out);
    Ok(out)
}

/// Layer normalisation of a single vector with the biased variance estimator.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Invalid("layer_norm of an empty vector".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape(format!(
            "layer_norm input {} with gain {} and bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if !(eps >= 0.0) {
        return Err(Error::Invalid(format!("layer_norm eps must be nonnegative, got {eps}")));
    }
    let mut out = vec![0.0; x.len()];
    normalize_row(x, &mut out, eps);
    for ((o, g), b) in out.iter_mut().zip(gain).zip(bias) {
        *o = *o * g + b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layer_norm_constant_collapses_to_bias() {
        let y = layer_norm(&[3.0; 3], &[1.0; 3], &[0.0; 3], LAYER_NORM_EPS).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_hand_values() {
        // mean 2, biased variance 2/3
        let y = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        let s = 1.5f64.sqrt();
        for (a, b) in y.iter().zip([-s, 0.0, s]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let bias = [0.3, -1.0, 2.5, 7.0];
        let y = layer_norm(&[9.0, -4.0, 0.1, 2.0], &[0.0; 4], &bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(y, bias);
    }

    #[test]
    fn layer_norm_rejects_empty() {
        assert!(layer_norm(&[], &[], &[], LAYER_NORM_EPS).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        for k in [-100.0, 0.0, 3.7, 1e3] {
            let p = softmax(&[5.0 + k, 5.0 + k, 5.0 + k]).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(40.0) - 40.0).abs() < 1e-12);
        assert!(gelu(-40.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-2.0, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50f64..50.0, 1..16), c in -100f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_shift_invariant(v in prop::collection::vec(-2f64..2.0, 2..24), c in -5f64..5.0) {
            let n = v.len();
            let g = vec![1.0; n];
            let b = vec![0.0; n];
            let y = layer_norm(&v, &g, &b, LAYER_NORM_EPS).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let z = layer_norm(&shifted, &g, &b, LAYER_NORM_EPS).unwrap();
            for (a, b) in y.iter().zip(&z) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
