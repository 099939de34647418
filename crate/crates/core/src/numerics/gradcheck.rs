use super::rng::SeededRng;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Relative error of an analytic derivative against a numeric reference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` against
/// central differences with step `h` at `n_probes` random coordinates (all
/// coordinates when `n_probes >= params.len()`). Returns the worst relative
/// error.
pub fn gradient_check<F>(
    mut loss_fn: F,
    params: &[f64],
    h: f64,
    n_probes: usize,
    rng: &mut SeededRng,
) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let probes: Vec<usize> = if n_probes >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut idx = rng.permutation(params.len());
        idx.truncate(n_probes);
        idx
    };
    let mut point = params.to_vec();
    let mut worst = 0.0_f64;
    for i in probes {
        let orig = point[i];
        point[i] = orig + h;
        let (plus, _) = loss_fn(&point);
        point[i] = orig - h;
        let (minus, _) = loss_fn(&point);
        point[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = SeededRng::new(0);
        let err = gradient_check(|x| (0.5 * x[0] * x[0], vec![x[0]]), &[3.0], 1e-5, 1, &mut rng);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut rng = SeededRng::new(0);
        let err = gradient_check(
            |x| (0.5 * x[0] * x[0], vec![2.0 * x[0]]),
            &[3.0],
            1e-5,
            1,
            &mut rng,
        );
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }
}
