//! Scalar numeric kernels shared across the crate.
//!
//! Reductions and transcendental steps run in f64 even where surrounding
//! storage is f32; that keeps loss sums and probability tails stable enough
//! for the gradient checks in the test suite.

use crate::error::{Error, Result};

/// Temperature softmax with max-subtraction.
///
/// `tau` must be strictly positive. Equal inputs map to an exactly uniform
/// output because every shifted exponent is exp(0) = 1.
pub fn softmax(values: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("values", "softmax of an empty slice"));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-way softmax expressed through the logistic of the logit gap.
/// Agrees with `softmax(&[a, b], tau)` and is exact at ties.
pub fn softmax_pair(a: f64, b: f64, tau: f64) -> (f64, f64) {
    let p0 = sigmoid((a - b) / tau);
    (p0, 1.0 - p0)
}

/// Index of the larger component; ties resolve to 0.
pub fn argmax_pair(a: f64, b: f64) -> usize {
    if a >= b {
        0
    } else {
        1
    }
}

/// log softmax(values)[index], stable for any finite logits.
pub fn log_softmax_at(values: &[f64], index: usize) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    values[index] - lse
}

/// Median of a sample; even lengths average the two central order statistics.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Central finite differences of `f` around `params`.
///
/// Each coordinate is nudged to the nearest f32 values of `p ± h` and the
/// quotient uses the realized gap between those f32 points, so the only
/// residual error is truncation, not rounding of the step itself.
pub fn finite_diff_grad<F>(mut f: F, params: &[f32], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f32]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("step must be > 0, got {h}")));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = params[i] as f64;
        let plus = (base + h) as f32;
        let minus = (base - h) as f32;
        let gap = plus as f64 - minus as f64;
        if gap == 0.0 {
            return Err(Error::invalid(
                "h",
                format!("step vanished at coordinate {i} (|p| too large for h = {h})"),
            ));
        }
        work[i] = plus;
        let f_plus = f(&work)?;
        work[i] = minus;
        let f_minus = f(&work)?;
        work[i] = params[i];
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::non_finite_at("finite-difference objective", i));
        }
        grad.push((f_plus - f_minus) / gap);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_recovers_known_ratios() {
        let p = softmax(&[3.0_f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12, "p = {p:?}");
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_saturates() {
        let p = softmax(&[2.0, -2.0], 0.1).unwrap();
        assert!(p[0] >= 1.0 - 1e-15, "p0 = {}", p[0]);
    }

    #[test]
    fn equal_logits_give_exactly_uniform() {
        let p = softmax(&[1.3, 1.3, 1.3, 1.3], 1.0).unwrap();
        for v in p {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        for tau in [0.0, -1.0] {
            let err = softmax(&[0.0, 1.0], tau).unwrap_err();
            assert!(err.to_string().contains("tau"), "got: {err}");
        }
    }

    #[test]
    fn pair_softmax_matches_general_softmax() {
        for (a, b, tau) in [(0.4, -1.2, 1.0), (3.0, 3.0, 0.5), (-7.0, 2.0, 2.0)] {
            let (p0, p1) = softmax_pair(a, b, tau);
            let p = softmax(&[a, b], tau).unwrap();
            assert!((p0 - p[0]).abs() < 1e-14);
            assert!((p1 - p[1]).abs() < 1e-14);
            assert_eq!(p0 + p1, 1.0);
        }
        assert_eq!(softmax_pair(2.0, 2.0, 1.0).0, 0.5);
    }

    #[test]
    fn argmax_breaks_ties_toward_first() {
        assert_eq!(argmax_pair(1.0, 1.0), 0);
        assert_eq!(argmax_pair(2.0, 1.0), 0);
        assert_eq!(argmax_pair(1.0, 2.0), 1);
    }

    #[test]
    fn log_softmax_is_consistent_with_softmax() {
        let logits = [0.3, -1.1, 2.4, 0.0];
        let p = softmax(&logits, 1.0).unwrap();
        for i in 0..logits.len() {
            assert!((log_softmax_at(&logits, i) - p[i].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn median_handles_both_parities() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn finite_diff_recovers_square_gradient() {
        let g = finite_diff_grad(|p| Ok((p[0] as f64).powi(2)), &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6, "got {}", g[0]);
    }

    #[test]
    fn finite_diff_recovers_product_gradient() {
        let g = finite_diff_grad(|p| Ok(p[0] as f64 * p[1] as f64), &[2.0, -5.0], 1e-3).unwrap();
        assert!((g[0] + 5.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_names_the_offending_coordinate() {
        let f = |p: &[f32]| Ok(((3.0 - p[1] as f64).sqrt()) + p[0] as f64);
        let err = finite_diff_grad(f, &[0.0, 3.0], 1e-3).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "got: {err}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let err = finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).unwrap_err();
        assert!(err.to_string().contains("`h`"), "got: {err}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_shift_invariant(
                values in proptest::collection::vec(-20.0_f64..20.0, 1..8),
                shift in -10.0_f64..10.0,
                tau in 0.05_f64..5.0,
            ) {
                let p = softmax(&values, tau).unwrap();
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
                let q = softmax(&shifted, tau).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
