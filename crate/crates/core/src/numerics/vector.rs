use crate::error::{Error, Result};

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

pub fn l2_norm(v: &[f64]) -> f64 {
    // Scale first so tiny or huge components do not under/overflow when squared.
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateVector {
            norm,
            threshold: MIN_NORM,
        });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `max + ln Σ exp(v − max)`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(Error::invalid("logsumexp of an empty slice"));
    }
    if !max.is_finite() {
        return Err(Error::Numeric("logsumexp input is not finite".into()));
    }
    Ok(max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

/// Softmax weights of `values`, consistent with [`logsumexp`].
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|v| (v - lse).exp()).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
        assert!(matches!(
            l2_normalize(&[1e-300, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        // Extended-precision reference: ln(e^0.1 + e^0.7 + e^-2) = 1.1799645719446870...
        let direct = (0.1f64.exp() + 0.7f64.exp() + (-2.0f64).exp()).ln();
        let v = logsumexp(&[0.1, 0.7, -2.0]).unwrap();
        assert!((v - direct).abs() < 1e-14);
        assert!((v - 1.179_964_571_944_687).abs() < 1e-14);
        assert!(matches!(logsumexp(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(20.0) - (1.0 - 2.061e-9)).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((softplus(-20.0) - 2.0611536e-9).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    proptest! {
        #[test]
        fn normalized_vectors_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let u = l2_normalize(&v).unwrap();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn logsumexp_shift_invariance(
            v in prop::collection::vec(-50f64..50.0, 1..20),
            c in -100f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
