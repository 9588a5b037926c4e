//! Chi-square quantiles and Fisher's combining function.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("p-value {0} is outside (0, 1]")]
    InvalidP(f64),
    #[error("cannot combine an empty set of p-values")]
    Empty,
}

/// Fisher's combining function, `-2 * sum(ln p)`.
pub fn fisher_statistic(p_values: &[f64]) -> Result<f64, StatsError> {
    if p_values.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut total = 0.0;
    for &p in p_values {
        if !(p > 0.0 && p <= 1.0) {
            return Err(StatsError::InvalidP(p));
        }
        total += fisher_term(p);
    }
    Ok(total)
}

/// One constituency's contribution to the Fisher statistic.
pub fn fisher_term(p: f64) -> f64 {
    -2.0 * p.ln()
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma function P(a, x).
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        1.0 - upper_continued_fraction(a, x, log_prefix)
    }
}

/// Q(a, x) by modified Lentz evaluation of the continued fraction.
fn upper_continued_fraction(a: f64, x: f64, log_prefix: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (log_prefix.exp() * h).clamp(0.0, 1.0)
}

pub fn chi2_cdf(x: f64, df: u32) -> f64 {
    regularized_gamma_p(df as f64 / 2.0, x / 2.0)
}

/// The `q` quantile of the chi-square distribution with `df` degrees of
/// freedom, found by bisecting the regularized incomplete gamma function.
///
/// Returns 0 for `q <= 0` and infinity for `q >= 1`.
pub fn chi2_quantile(df: u32, q: f64) -> f64 {
    assert!(df > 0, "degrees of freedom must be positive");
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return f64::INFINITY;
    }
    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while chi2_cdf(hi, df) < q {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(mid, df) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fisher_examples() {
        assert_eq!(fisher_statistic(&[1.0, 1.0]).unwrap(), 0.0);
        let x = fisher_statistic(&[0.01, 0.04]).unwrap();
        assert!((x - 15.648).abs() < 5e-4, "{x}");
        let single = fisher_statistic(&[0.05]).unwrap();
        assert!((single - 5.9915).abs() < 5e-5);
        assert!((single - chi2_quantile(2, 0.95)).abs() < 1e-9);
    }

    #[test]
    fn fisher_rejects_bad_inputs() {
        assert_eq!(fisher_statistic(&[]), Err(StatsError::Empty));
        assert_eq!(fisher_statistic(&[0.5, 0.0]), Err(StatsError::InvalidP(0.0)));
        assert_eq!(fisher_statistic(&[1.5]), Err(StatsError::InvalidP(1.5)));
        assert!(fisher_statistic(&[f64::NAN]).is_err());
    }

    #[test]
    fn ln_gamma_at_integers() {
        let mut fact = 1.0f64;
        for n in 1..30u32 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-10, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn quantile_table_values() {
        assert!((chi2_quantile(2, 0.95) - 5.991465).abs() < 1e-6);
        assert!((chi2_quantile(4, 0.95) - 9.487729).abs() < 1e-6);
        assert!((chi2_quantile(1, 0.95) - 3.841459).abs() < 1e-6);
    }

    #[test]
    fn quantile_edges() {
        assert_eq!(chi2_quantile(4, 0.0), 0.0);
        assert!(chi2_quantile(4, 1e-12) < 1e-4);
        assert!(chi2_quantile(2, 1.0).is_infinite());
    }

    #[test]
    fn cdf_inverts_quantile() {
        for df in [1, 2, 3, 10, 58, 200, 600] {
            for q in [0.001, 0.05, 0.5, 0.95, 0.999] {
                let x = chi2_quantile(df, q);
                assert!((chi2_cdf(x, df) - q).abs() < 1e-10, "df={df} q={q}");
            }
        }
    }
}
