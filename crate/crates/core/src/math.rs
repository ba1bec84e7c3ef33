//! Small numerical helpers used across the sampler and the variational
//! updates.

/// log(Σ exp(x_i)), stabilized by factoring out the maximum.
///
/// Returns `-inf` for an empty slice (the empty sum).
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// σ(x) = 1 / (1 + e^{-x}), evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Median of consecutive differences of a strictly increasing grid.
///
/// Defined as 1.0 for grids with fewer than two points so callers always get
/// a positive step.
pub fn median_step(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 1.0;
    }
    let mut dx: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    dx.sort_by(|a, b| a.partial_cmp(b).expect("finite steps"));
    let n = dx.len();
    if n % 2 == 1 {
        dx[n / 2]
    } else {
        0.5 * (dx[n / 2 - 1] + dx[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_matches_direct_sum_at_small_scale() {
        let xs = [0.3f64, -1.2, 0.9];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(logsumexp(&xs), direct, max_relative = 1e-12);
    }

    #[test]
    fn logsumexp_survives_large_magnitudes() {
        let xs = [-1200.0, -1201.0];
        let expected = -1200.0 + (1.0 + (-1.0f64).exp()).ln();
        assert_relative_eq!(logsumexp(&xs), expected, max_relative = 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn sigmoid_is_symmetric_and_bounded() {
        for &x in &[-800.0, -3.0, 0.0, 3.0, 800.0] {
            let p = sigmoid(x);
            assert!((0.0..=1.0).contains(&p));
            assert_relative_eq!(p + sigmoid(-x), 1.0, max_relative = 1e-12);
        }
        assert_relative_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn median_step_even_and_odd() {
        assert_relative_eq!(median_step(&[0.0, 1.0, 3.0]), 1.5);
        assert_relative_eq!(median_step(&[0.0, 1.0, 2.0, 4.0]), 1.0);
        assert_relative_eq!(median_step(&[5.0]), 1.0);
    }
}
