//! Special functions used by the nearest-neighbor entropy estimators.
//!
//! `digamma` shifts its argument with ψ(x+1) = ψ(x) + 1/x until x ≥ 10 and
//! then evaluates the asymptotic (Bernoulli) series. `ln_gamma` is a Lanczos
//! approximation. Unit-ball volumes are available in log space so that very
//! high dimensions never form Γ(d/2 + 1) directly.

#![allow(clippy::excessive_precision)]

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Euler–Mascheroni constant γ.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_606_512_090_082_402_43;

const DIGAMMA_SHIFT: f64 = 10.0;

/// ψ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("digamma requires finite x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < DIGAMMA_SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // -Σ B_2k / (2k x^2k), k = 1..7, Horner form in 1/x².
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 * (1.0 / 12.0)))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
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

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("ln_gamma requires finite x > 0, got {x}")));
    }
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx); sin(πx) > 0 on (0, 0.5).
        return Ok(PI.ln() - (PI * x).sin().ln() - ln_gamma(1.0 - x)?);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    Ok(0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln())
}

/// log V_d, the log-volume of the d-dimensional Euclidean unit ball.
pub fn log_unit_ball_volume(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("unit ball volume needs d >= 1".into()));
    }
    let half = d as f64 / 2.0;
    Ok(half * PI.ln() - ln_gamma(half + 1.0)?)
}

/// V_d = π^{d/2} / Γ(d/2 + 1).
///
/// Uses the exact recurrence V_d = 2π/d · V_{d-2} up to d = 100 and the
/// log-space route beyond. Fails when the volume underflows to a
/// non-normal float; use [`log_unit_ball_volume`] in that regime.
pub fn unit_ball_volume(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("unit ball volume needs d >= 1".into()));
    }
    if d <= 100 {
        let mut v = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
        let mut m = if d.is_multiple_of(2) { 2 } else { 3 };
        while m <= d {
            v *= 2.0 * PI / m as f64;
            m += 2;
        }
        return Ok(v);
    }
    let v = log_unit_ball_volume(d)?.exp();
    if v.is_normal() {
        Ok(v)
    } else {
        Err(Error::Domain(format!(
            "unit ball volume for d={d} is not representable as f64; use the log form"
        )))
    }
}
