//! Shift-stabilized exponential sums shared by aggregation and loss code.

use crate::real::Real;

/// Max-shifted log-sum-exp. Never overflows for finite inputs; an empty slice
/// yields negative infinity (the log of an empty sum).
pub fn logsumexp<T: Real>(vals: &[T]) -> T {
    let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        // empty slice, or all terms -inf
        return m;
    }
    let sum: T = vals.iter().map(|&v| (v - m).exp()).sum();
    m + sum.ln()
}

/// Max-shifted softmax. Returns an empty vector for empty input.
pub fn softmax<T: Real>(vals: &[T]) -> Vec<T> {
    if vals.is_empty() {
        return Vec::new();
    }
    let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = vals.iter().map(|&v| (v - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values below were computed with a 50-digit decimal library
    // and truncated to f64.

    #[test]
    fn logsumexp_matches_high_precision_reference() {
        let got = logsumexp(&[1.0_f64, 0.5, -0.2, 0.3]);
        let want = 1.877263033065564574063904;
        assert!(
            (got - want).abs() < 1e-14,
            "logsumexp off: got {got}, want {want}"
        );
    }

    #[test]
    fn logsumexp_of_zeros_is_ln_count() {
        let got = logsumexp(&[0.0_f64; 4]);
        assert!((got - 4.0_f64.ln()).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn logsumexp_singleton_is_identity_bitwise() {
        for v in [-3.25_f64, 0.0, 1e-9, 42.5] {
            assert_eq!(logsumexp(&[v]).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn logsumexp_no_overflow_at_large_magnitudes() {
        let got = logsumexp(&[700.0_f64, 699.0, 698.0]);
        let want = 700.4076059644443803044829;
        assert!(got.is_finite());
        assert!((got - want).abs() < 1e-11, "got {got}, want {want}");
        assert!(logsumexp(&[-700.0_f64, -699.0]).is_finite());
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        let got = softmax(&[1.0_f64, 0.5, -0.2, 0.3]);
        let want = [
            0.4159197137810538460160713,
            0.252268058387112260514717,
            0.1252726104110331748463824,
            0.2065396174208007186228293,
        ];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-15, "got {g}, want {w}");
        }
        let total: f64 = got.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = [0.4_f64, -1.1, 2.3, 0.0];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.5).collect();
        let a = softmax(&base);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inputs_degenerate_cleanly() {
        assert_eq!(logsumexp::<f64>(&[]), f64::NEG_INFINITY);
        assert!(softmax::<f64>(&[]).is_empty());
    }
}
