use rand::seq::index::sample;

use crate::rng;

const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are judged by absolute error instead.
const FLOOR: f64 = 1e-2;
const FULL_CHECK_LIMIT: usize = 10_000;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare the analytic gradient returned by `f` against central differences.
///
/// `f` maps a flat parameter vector to `(loss, gradient)`. Every coordinate is
/// checked up to 10⁴ parameters; above that a fixed-seed random subset of 10⁴
/// coordinates is used. Returns the maximum relative error.
pub fn grad_check<F>(f: F, params: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_subset(f, params, FULL_CHECK_LIMIT, 0)
}

pub fn grad_check_subset<F>(mut f: F, params: &[f64], max_coords: usize, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must equal parameter count");
    let coords: Vec<usize> = if params.len() <= max_coords {
        (0..params.len()).collect()
    } else {
        let mut r = rng::stream(seed, &[0x6772_6164]);
        let mut idx = sample(&mut r, params.len(), max_coords).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut theta = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = theta[i];
        theta[i] = orig + STEP;
        let (up, _) = f(&theta);
        theta[i] = orig - STEP;
        let (down, _) = f(&theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(w: &[f64]) -> (f64, Vec<f64>) {
        (0.5 * w.iter().map(|v| v * v).sum::<f64>(), w.to_vec())
    }

    #[test]
    fn quadratic_is_nearly_exact() {
        let w: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) * 0.37).collect();
        assert!(grad_check(quadratic, &w) < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let w: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) * 0.37).collect();
        let err = grad_check(
            |w| {
                let (l, mut g) = quadratic(w);
                g[3] *= 1.1;
                (l, g)
            },
            &w,
        );
        assert!(err > 1e-2);
    }

    #[test]
    fn large_problems_use_a_subset() {
        let w = vec![0.01; 20_000];
        let mut calls = 0usize;
        let err = grad_check_subset(
            |w| {
                calls += 1;
                quadratic(w)
            },
            &w,
            100,
            1,
        );
        assert!(err < 1e-8);
        assert_eq!(calls, 1 + 2 * 100);
    }
}
