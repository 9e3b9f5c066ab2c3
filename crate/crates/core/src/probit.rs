//! Standard-normal CDF helpers for the probit terms.
//!
//! Below `-8` the CDF underflows relative precision through `erfc`, so both
//! `log Φ` and the ratio `φ/Φ` switch to a continued fraction for the Mills
//! ratio `R(u) = (1 - Φ(u)) / φ(u)`, `u = -x`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const TAIL_SWITCH: f64 = -8.0;
const CF_DEPTH: usize = 64;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Continued fraction `1/R(u) = u + 1/(u + 2/(u + 3/(u + ...)))`, valid for
/// large positive `u`.
fn inv_mills_tail(u: f64) -> f64 {
    let mut tail = u;
    for k in (1..=CF_DEPTH).rev() {
        tail = u + k as f64 / tail;
    }
    tail
}

/// `log Φ(x)`, finite for every finite `x`.
pub fn log_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        -0.5 * x * x - 0.5 * (2.0 * PI).ln() - inv_mills_tail(-x).ln()
    } else if x > 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        cdf(x).ln()
    }
}

/// `φ(x) / Φ(x)`.
pub fn pdf_over_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        inv_mills_tail(-x)
    } else {
        pdf(x) / cdf(x)
    }
}

/// Probit weight `w = s φ(η) / Φ(s η)` with `s = 2y - 1`. This is the shift of
/// the mean of `N(η, 1)` truncated to the half-line selected by `y`.
pub fn probit_weight(eta: f64, label: f64) -> f64 {
    let s = 2.0 * label - 1.0;
    s * pdf_over_cdf(s * eta)
}
