//! Log-gamma and digamma.
//!
//! `ln_gamma` uses the Lanczos approximation with g = 7 and nine
//! coefficients; arguments below 0.5 go through the reflection formula.
//! `digamma` lifts its argument above 6 with the recurrence
//! `psi(x) = psi(x + 1) - 1/x` and then applies the asymptotic series.

use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEFFICIENTS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_7e-7,
];

/// 0.5 * ln(2 pi)
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of |Gamma(x)|. Returns `+inf` at the poles (non-positive integers).
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.5 {
        if x == x.floor() {
            return f64::INFINITY;
        }
        let s = (PI * x).sin();
        return (PI / s.abs()).ln() - ln_gamma(1.0 - x);
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEFFICIENTS[0];
    for (i, c) in LANCZOS_COEFFICIENTS.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_2PI + (z + 0.5) * t.ln() - t + acc.ln()
}

/// Digamma function, the derivative of `ln_gamma`.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::NAN;
        }
        return digamma(1.0 - x) - PI / (PI * x).tan();
    }
    let mut x = x;
    let mut result = 0.0;
    while x < 6.0 {
        result -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    result + x.ln() - 0.5 * inv - series
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn ln_gamma_matches_statrs_on_working_range() {
        let mut x = 0.5;
        while x <= 50.0 {
            let want = statrs::function::gamma::ln_gamma(x);
            assert!(
                (ln_gamma(x) - want).abs() < 1e-10,
                "x={x}: {} vs {want}",
                ln_gamma(x)
            );
            x += 0.037;
        }
    }

    #[test]
    fn ln_gamma_closed_forms() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - 0.5 * PI.ln()).abs() < 1e-13);
        assert!((ln_gamma(1.5) - (PI.sqrt() / 2.0).ln()).abs() < 1e-13);
        // 10! = 3628800
        assert!((ln_gamma(11.0) - 3_628_800f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn ln_gamma_reflection_branch() {
        // Gamma(-0.5) = -2 sqrt(pi)
        assert!((ln_gamma(-0.5) - (2.0 * PI.sqrt()).ln()).abs() < 1e-12);
        assert!((ln_gamma(0.25) - statrs::function::gamma::ln_gamma(0.25)).abs() < 1e-12);
        assert!(ln_gamma(0.0).is_infinite());
        assert!(ln_gamma(-3.0).is_infinite());
    }

    #[test]
    fn digamma_closed_forms() {
        assert!((digamma(1.0) + EULER_GAMMA).abs() < 1e-12);
        assert!((digamma(2.0) - (1.0 - EULER_GAMMA)).abs() < 1e-12);
        assert!((digamma(0.5) + EULER_GAMMA + 2.0 * 2f64.ln()).abs() < 1e-12);
        // psi(1 - x) - psi(x) = pi cot(pi x)
        let x = 0.3;
        let lhs = digamma(1.0 - x) - digamma(x);
        assert!((lhs - PI / (PI * x).tan()).abs() < 1e-10);
    }

    #[test]
    fn digamma_is_derivative_of_ln_gamma() {
        let mut x: f64 = 0.6;
        while x < 40.0 {
            let h = 1e-5 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((digamma(x) - fd).abs() < 1e-8, "x={x}");
            x += 0.41;
        }
    }

    #[test]
    fn digamma_matches_statrs() {
        for &x in &[0.7, 1.3, 3.9, 5.99, 6.0, 12.5, 48.0] {
            let want = statrs::function::gamma::digamma(x);
            assert!((digamma(x) - want).abs() < 1e-8, "x={x}");
        }
    }
}
