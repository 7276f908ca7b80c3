//! Log-gamma, digamma and trigamma on the positive real axis.

use super::TensorError;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

fn check_positive(op: &'static str, x: f64) -> Result<(), TensorError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Domain {
            op,
            detail: format!("argument must be finite and > 0, got {x}"),
        })
    }
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine coefficients).
pub fn lgamma(x: f64) -> Result<f64, TensorError> {
    check_positive("lgamma", x)?;
    Ok(lgamma_unchecked(x))
}

pub(crate) fn lgamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - lgamma_unchecked(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_TWO_PI + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma `ψ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64, TensorError> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli tail: -Σ B_2k / (2k x^2k)
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 * inv - tail
}

/// Trigamma `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64, TensorError> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 10.0 {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * inv
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    shift + inv + 0.5 * inv2 + series
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn lgamma_known_values() {
        assert_abs_diff_eq!(lgamma(1.0).unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(lgamma(0.5).unwrap(), 0.5 * std::f64::consts::PI.ln(), epsilon = 1e-13);
        assert_abs_diff_eq!(lgamma(5.0).unwrap(), 24f64.ln(), epsilon = 1e-13);
        assert_abs_diff_eq!(lgamma(2.0).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn lgamma_factorials_up_to_170() {
        let mut log_fact = 0.0f64;
        for n in 1..170u32 {
            // lgamma(n + 1) = ln n!
            log_fact += (n as f64).ln();
            let got = lgamma(n as f64 + 1.0).unwrap();
            assert!((got - log_fact).abs() < 1e-12 * log_fact.max(1.0), "n={n}");
        }
    }

    #[test]
    fn digamma_known_values() {
        assert_abs_diff_eq!(digamma(1.0).unwrap(), -EULER, epsilon = 1e-12);
        assert_abs_diff_eq!(
            digamma(0.5).unwrap(),
            -EULER - 2.0 * 2f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(digamma(2.0).unwrap(), 1.0 - EULER, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(3.0).unwrap(), 1.5 - EULER, epsilon = 1e-12);
    }

    #[test]
    fn trigamma_known_values() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert_abs_diff_eq!(trigamma(1.0).unwrap(), pi2 / 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(trigamma(0.5).unwrap(), pi2 / 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(trigamma(2.0).unwrap(), pi2 / 6.0 - 1.0, epsilon = 1e-10);
    }

    #[test]
    fn domain_errors() {
        for f in [lgamma, digamma, trigamma] {
            assert!(f(0.0).is_err());
            assert!(f(-1.5).is_err());
            assert!(f(f64::NAN).is_err());
        }
    }

    #[test]
    fn recurrences() {
        let mut x = 0.1;
        while x <= 100.0 {
            let lg = lgamma(x + 1.0).unwrap() - lgamma(x).unwrap() - x.ln();
            assert!(lg.abs() < 1e-10, "lgamma recurrence at {x}: {lg}");
            let dg = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            assert!(dg.abs() < 1e-10, "digamma recurrence at {x}: {dg}");
            let tg = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap() - 1.0 / (x * x);
            assert!(tg.abs() < 1e-8, "trigamma recurrence at {x}: {tg}");
            x += 0.37;
        }
    }

    #[test]
    fn matches_statrs_reference() {
        // independent implementation (different Lanczos set, different digamma series)
        let mut x = 1e-3;
        while x < 1e3 {
            let lg = lgamma(x).unwrap();
            let reference = statrs::function::gamma::ln_gamma(x);
            assert!((lg - reference).abs() < 1e-12 * reference.abs().max(1.0), "lgamma {x}");
            let dg = digamma(x).unwrap();
            let reference = statrs::function::gamma::digamma(x);
            assert!((dg - reference).abs() < 1e-10 * reference.abs().max(1.0), "digamma {x}");
            x *= 1.17;
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        let mut x = 1e-2;
        while x < 1e3 {
            let h = 1e-5 * x;
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            let tg = trigamma(x).unwrap();
            assert!((fd - tg).abs() < 1e-6 * tg.abs().max(1.0), "x={x}: {fd} vs {tg}");
            x *= 1.5;
        }
    }
}
