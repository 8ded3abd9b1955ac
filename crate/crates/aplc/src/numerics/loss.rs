//! Log-domain probability primitives.
//!
//! Every probability in the engine lives as a log-probability until the last
//! possible moment; these helpers keep the intermediate quantities finite for
//! logits far outside the [-30, 30] range where naive formulas saturate.

use super::{NumericsError, Scalar};

/// log(sigmoid(z)) = -softplus(-z), stable for any finite z.
pub fn log_sigmoid<T: Scalar>(z: T) -> T {
    // softplus(x) = log(1 + e^x); split at 0 so the exponent is never positive.
    if z >= T::zero() {
        -((-z).exp().ln_1p())
    } else {
        z - z.exp().ln_1p()
    }
}

/// log(1 - e^x) for x <= 0, using the two-branch split at -ln 2.
///
/// For x very close to 0 the naive `ln(1 - exp(x))` cancels catastrophically;
/// for x very negative `exp(x)` underflows inside `expm1`. Splitting keeps
/// both tails accurate to full precision.
pub fn log1mexp<T: Scalar>(x: T) -> T {
    debug_assert!(x <= T::zero(), "log1mexp domain is x <= 0");
    let ln2 = T::from_f64(std::f64::consts::LN_2);
    if x < -ln2 {
        (-x.exp()).ln_1p()
    } else {
        (-x.exp_m1()).ln()
    }
}

/// Binary cross entropy of one label given log p, without ever forming p.
///
/// target = 1 contributes -log p, target = 0 contributes -log(1 - p).
pub fn bce_from_log_prob<T: Scalar>(log_p: T, target: bool) -> Result<T, NumericsError> {
    if log_p > T::zero() {
        return Err(NumericsError::PositiveLogProb(log_p.widen()));
    }
    let loss = if target { -log_p } else { -log1mexp(log_p) };
    Ok(loss)
}

/// sigmoid(z), via the log-domain form so both tails round correctly.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    log_sigmoid(z).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_matches_direct_formula_on_grid() {
        // Oracle: for moderate z the naive formula is exact enough to
        // compare against at 1e-12.
        let mut z = -30.0f64;
        while z <= 30.0 {
            let naive = (1.0 / (1.0 + (-z).exp())).ln();
            assert!(
                (log_sigmoid(z) - naive).abs() < 1e-12,
                "z={z}: {} vs {}",
                log_sigmoid(z),
                naive
            );
            z += 0.25;
        }
    }

    #[test]
    fn log_sigmoid_is_finite_at_extreme_logits() {
        assert!(log_sigmoid(1e4f64).is_finite());
        assert!(log_sigmoid(-1e4f64).is_finite());
        // Deep negative tail: log sigmoid(z) ~ z.
        assert!((log_sigmoid(-1e4f64) + 1e4).abs() < 1e-6);
        // Deep positive tail: log sigmoid(z) ~ -e^-z. At z = 1e4 that is
        // below f64's underflow threshold and correctly flushes to -0.0;
        // at z = 500 it is still representable and must stay negative.
        assert!(log_sigmoid(1e4f64) <= 0.0);
        assert!(log_sigmoid(500.0f64) < 0.0);
        assert!(log_sigmoid(500.0f64) > -1e-200);
    }

    #[test]
    fn log1mexp_matches_naive_where_naive_is_safe() {
        let mut x = -20.0f64;
        while x <= -1e-3 {
            let naive = (1.0 - x.exp()).ln();
            assert!(
                (log1mexp(x) - naive).abs() < 1e-10,
                "x={x}: {} vs {}",
                log1mexp(x),
                naive
            );
            x += 0.0917;
        }
    }

    #[test]
    fn log1mexp_near_zero_stays_finite() {
        // 1 - e^x ~ -x for x -> 0-, so log1mexp(-1e-12) ~ ln(1e-12).
        let v = log1mexp(-1e-12f64);
        assert!(v.is_finite());
        assert!((v - (1e-12f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn log1mexp_complements_log_sigmoid() {
        // 1 - sigmoid(z) = sigmoid(-z), so
        // log1mexp(log_sigmoid(z)) == log_sigmoid(-z).
        for &z in &[-15.0f64, -3.0, -0.5, 0.0, 0.5, 3.0, 15.0] {
            let lhs = log1mexp(log_sigmoid(z));
            let rhs = log_sigmoid(-z);
            assert!((lhs - rhs).abs() < 1e-9, "z={z}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn bce_recovers_textbook_values() {
        // -ln 0.8 for a positive with p = 0.8.
        let loss = bce_from_log_prob(0.8f64.ln(), true).unwrap();
        assert!((loss - (-(0.8f64.ln()))).abs() < 1e-12);
        // -ln(1 - 0.3) for a negative with p = 0.3.
        let loss = bce_from_log_prob(0.3f64.ln(), false).unwrap();
        assert!((loss - (-(0.7f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_positive_log_prob() {
        assert!(matches!(
            bce_from_log_prob(0.25f64, true),
            Err(NumericsError::PositiveLogProb(_))
        ));
    }

    #[test]
    fn bce_finite_for_very_confident_wrong_predictions() {
        // Positive label, p ~ sigmoid(-40): loss ~ 40, finite.
        let lp = log_sigmoid(-40.0f64);
        let loss = bce_from_log_prob(lp, true).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 40.0).abs() < 1e-6);
        // Negative label, p ~ sigmoid(40): loss ~ 40, finite.
        let lp = log_sigmoid(40.0f64);
        let loss = bce_from_log_prob(lp, false).unwrap();
        assert!(loss.is_finite());
        assert!((loss - 40.0).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        for &z in &[-8.0f64, -1.0, 0.3, 2.5, 9.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-12);
        }
    }
}
