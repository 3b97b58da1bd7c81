//! Small numeric helpers shared across modules.

/// log(exp(a) + exp(b)) without overflow; handles -inf endpoints.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// log sum exp over a slice; returns -inf for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Sample mean and unbiased (Bessel-corrected) variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 2, "variance needs at least two samples");
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_exp_matches_direct() {
        let a: f64 = -1.3;
        let b: f64 = -4.2;
        let direct = (a.exp() + b.exp()).ln();
        assert!((log_add_exp(a, b) - direct).abs() < 1e-14);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, b), b);
        assert_eq!(log_add_exp(a, f64::NEG_INFINITY), a);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[1e-6, 0.25, 0.5, 0.75, 1.0 - 1e-6] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
