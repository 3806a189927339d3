//! Normal distribution helpers.

use statrs::distribution::{ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    standard().cdf(z)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// Two-sided p-value of a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    (2.0 * standard().sf(z.abs())).min(1.0)
}

/// Critical value `z_{1 - (1 - level)/2}` for a two-sided interval.
pub fn critical_value(level: f64) -> f64 {
    normal_quantile(1.0 - (1.0 - level) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Taylor series of the normal CDF around zero, summed in extended
    /// precision style with many terms; accurate for |z| <= 6.
    fn series_cdf(z: f64) -> f64 {
        // Phi(z) = 1/2 + phi(0) * sum_k (-1)^k z^(2k+1) / (2^k k! (2k+1))
        let mut term = z;
        let mut sum = z;
        for k in 1..400 {
            let k = k as f64;
            term *= -z * z / (2.0 * k);
            sum += term / (2.0 * k + 1.0);
            if term.abs() < 1e-300 {
                break;
            }
        }
        0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn cdf_matches_series_oracle() {
        let mut z = -5.0;
        while z <= 5.0 {
            let err = (normal_cdf(z) - series_cdf(z)).abs();
            assert!(err <= 1e-7, "z = {z}: error {err}");
            z += 0.01;
        }
    }

    #[test]
    fn critical_value_95() {
        assert!((critical_value(0.95) - 1.959964).abs() < 5e-7);
        assert!((two_sided_p(1.959964) - 0.05).abs() < 1e-6);
        assert_eq!(two_sided_p(0.0), 1.0);
    }
}
