//! Weight initialization.

use crate::matrix::Matrix2D;
use crate::rng::SeededRng;

/// Kaiming uniform: entries i.i.d. from `U(-b, b)` with `b = sqrt(6 / fan_in)`.
/// Fan-in is the row count, i.e. the input dimension of a matrix used as
/// `x . W`.
pub fn kaiming_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix2D {
    assert!(rows > 0 && cols > 0, "kaiming_uniform needs positive dims");
    let bound = (6.0 / rows as f64).sqrt();
    let mut m = Matrix2D::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    m
}

/// Matrix with i.i.d. `N(0, std^2)` entries.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix2D {
    let mut m = Matrix2D::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal() * std;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_is_one_for_fan_in_six() {
        // sqrt(6/6) = 1, so every entry lies in (-1, 1).
        let mut rng = SeededRng::new(1);
        let m = kaiming_uniform(6, 1, &mut rng);
        assert!(m.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn fixed_seed_reproduces_matrix() {
        let a = kaiming_uniform(5, 3, &mut SeededRng::new(9));
        let b = kaiming_uniform(5, 3, &mut SeededRng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn monte_carlo_bound_and_mean() {
        // 24x4 has bound sqrt(6/24) = 0.5; over 10^4 samples the empirical
        // mean must sit within +-0.02 of zero and no entry may exceed the bound.
        let mut rng = SeededRng::new(123);
        let bound = (6.0_f64 / 24.0).sqrt();
        assert_eq!(bound, 0.5);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut max_abs = 0.0_f64;
        while count < 10_000 {
            let m = kaiming_uniform(24, 4, &mut rng);
            for &v in m.data() {
                sum += v;
                max_abs = max_abs.max(v.abs());
            }
            count += m.len();
        }
        let mean = sum / count as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!(max_abs <= bound, "max |entry| {max_abs} exceeds {bound}");
    }
}
