//! Expected improvement and upper-confidence-bound acquisition.

use serde::{Deserialize, Serialize};

use super::gp::GpSurrogate;
use crate::error::{CoreError, Result};

pub const DEFAULT_XI: f64 = 0.01;
pub const DEFAULT_BETA_BASE: f64 = 2.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Acquisition {
    Ei,
    Ucb,
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form EI for maximization: `(μ − best − ξ)·Φ(z) + σ·φ(z)`.
pub fn expected_improvement(mu: f64, sigma: f64, best: f64, xi: f64) -> f64 {
    let gain = mu - best - xi;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

pub fn acquisition_ei(gp: &GpSurrogate, x: &[f64], best: f64, xi: f64) -> Result<f64> {
    let (mu, sigma) = gp.predict(x)?;
    Ok(expected_improvement(mu, sigma, best, xi))
}

pub fn acquisition_ucb(gp: &GpSurrogate, x: &[f64], beta: f64) -> Result<f64> {
    let (mu, sigma) = gp.predict(x)?;
    Ok(mu + beta * sigma)
}

/// `β_t = β_base·(1 + γ·uncertainty_t)`.
pub fn adaptive_beta(beta_base: f64, gamma: f64, uncertainty: f64) -> Result<f64> {
    if beta_base < 0.0 || gamma < 0.0 || !(0.0..=1.0).contains(&uncertainty) {
        return Err(CoreError::Config(format!(
            "adaptive β needs β_base, γ ≥ 0 and uncertainty in [0, 1], got {beta_base}, {gamma}, {uncertainty}"
        )));
    }
    Ok(beta_base * (1.0 + gamma * uncertainty))
}
