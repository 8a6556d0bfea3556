//! Standard normal and log-gamma helpers shared by the model families and
//! the simulator.

use std::f64::consts::SQRT_2;

use statrs::function::erf::erfc_inv;

/// 1/sqrt(2*pi)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, evaluated through `erfc` so the lower tail keeps
/// full relative precision.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal quantile. `p` must lie in (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0, "quantile argument {p} outside (0,1)");
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// log(y!) for a non-negative (integer-valued) count.
pub fn ln_factorial(y: f64) -> f64 {
    if y < 2.0 {
        return 0.0;
    }
    ln_gamma(y + 1.0)
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return f64::NAN;
    }
    2.0 * norm_cdf(-z.abs())
}
