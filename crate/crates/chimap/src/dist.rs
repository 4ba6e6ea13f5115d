//! Chi, noncentral-chi, and Gaussian log-densities plus the nc-χ mean.
//!
//! The noise on reconstructed multi-coil magnitude images is modelled as
//! noncentral chi with `nu` degrees of freedom and per-channel variance
//! `sigma2`; the background (zero signal) reduces to central chi, and a
//! Gaussian baseline with the same `sigma2` is provided so the fitting
//! code can switch families uniformly.

use crate::error::{Error, Result};
use crate::special::{laguerre_half, ln_gamma, log_bessel_i};
use serde::{Deserialize, Serialize};

const LN_2: f64 = std::f64::consts::LN_2;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Noise distribution family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Chi,
    NcChi,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Gaussian => write!(f, "gaussian"),
            Family::Chi => write!(f, "chi"),
            Family::NcChi => write!(f, "ncchi"),
        }
    }
}

/// A fitted noise model: family tag, degrees of freedom and variance.
///
/// `nu` is ignored by the Gaussian family but kept so models can be
/// converted between families without losing the estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub family: Family,
    pub nu: f64,
    pub sigma2: f64,
}

impl NoiseModel {
    pub fn new(family: Family, nu: f64, sigma2: f64) -> Result<Self> {
        let m = NoiseModel { family, nu, sigma2 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0) || !self.nu.is_finite() {
            return Err(Error::invalid(format!(
                "noise model: nu must be positive, got {}",
                self.nu
            )));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::invalid(format!(
                "noise model: sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Same parameters under a different family tag.
    pub fn with_family(&self, family: Family) -> Self {
        NoiseModel { family, ..*self }
    }
}

/// Log-pdf of the central chi distribution with parameters from `model`.
///
/// `p(x | nu, sigma) = 2^{1-nu/2} x^{nu-1} exp(-x^2/(2 sigma^2)) / (sigma^nu Gamma(nu/2))`.
/// At `x = 0` the log-density limit is returned (`-inf` for nu > 1, `+inf`
/// for nu < 1, the half-normal value for nu = 1); negative `x` is an error.
pub fn chi_logpdf(x: f64, model: &NoiseModel) -> Result<f64> {
    model.validate()?;
    if x < 0.0 || !x.is_finite() {
        return Err(Error::domain(format!("chi_logpdf: x must be >= 0, got {x}")));
    }
    let nu = model.nu;
    let sigma2 = model.sigma2;
    if x == 0.0 {
        return Ok(match nu {
            n if n > 1.0 => f64::NEG_INFINITY,
            n if n < 1.0 => f64::INFINITY,
            _ => 0.5 * LN_2 - 0.5 * sigma2.ln() - ln_gamma(0.5),
        });
    }
    Ok((1.0 - 0.5 * nu) * LN_2 + (nu - 1.0) * x.ln() - x * x / (2.0 * sigma2)
        - 0.5 * nu * sigma2.ln()
        - ln_gamma(0.5 * nu))
}

/// Log-pdf of the noncentral chi distribution.
///
/// `ln p = -(x^2+mu^2)/(2 sigma^2) + (nu/2) ln x + (1-nu/2) ln mu - ln sigma^2
///         + ln I_{nu/2-1}(mu x / sigma^2)`.
///
/// For `mu x / sigma^2 < 1e-6` the small-argument expansion of the Bessel
/// term is substituted analytically, which removes the `ln mu` singularity
/// and makes the function continuous in `mu` down to `mu = 0`, where it
/// equals [`chi_logpdf`].
pub fn ncchi_logpdf(x: f64, mu: f64, model: &NoiseModel) -> Result<f64> {
    model.validate()?;
    if x < 0.0 || !x.is_finite() {
        return Err(Error::domain(format!(
            "ncchi_logpdf: x must be >= 0, got {x}"
        )));
    }
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::domain(format!(
            "ncchi_logpdf: mu must be >= 0, got {mu}"
        )));
    }
    let nu = model.nu;
    let sigma2 = model.sigma2;
    if x == 0.0 {
        return Ok(match nu {
            n if n > 1.0 => f64::NEG_INFINITY,
            n if n < 1.0 => f64::INFINITY,
            _ => 0.5 * LN_2 - 0.5 * sigma2.ln() - ln_gamma(0.5) - mu * mu / (2.0 * sigma2),
        });
    }
    let z = mu * x / sigma2;
    if z < 1e-6 {
        // Chi limit with the leading Bessel correction ln(1 + z^2/(2 nu)).
        let chi = chi_logpdf(x, &model.with_family(Family::Chi))?;
        return Ok(chi - mu * mu / (2.0 * sigma2) + (z * z / (2.0 * nu)).ln_1p());
    }
    let order = 0.5 * nu - 1.0;
    Ok(-(x * x + mu * mu) / (2.0 * sigma2) + 0.5 * nu * x.ln() + (1.0 - 0.5 * nu) * mu.ln()
        - sigma2.ln()
        + log_bessel_i(order, z)?)
}

/// Mean of the noncentral chi distribution with noise-free signal `mu`:
/// `sigma sqrt(pi/2) L_{1/2}^{(nu/2-1)}(-mu^2 / (2 sigma^2))`.
///
/// Always at least `mu`, approaching it from above as `mu/sigma` grows.
pub fn ncchi_mean(model: &NoiseModel, mu: f64) -> Result<f64> {
    model.validate()?;
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::domain(format!("ncchi_mean: mu must be >= 0, got {mu}")));
    }
    let sigma = model.sigma();
    let alpha = 0.5 * model.nu - 1.0;
    let arg = -mu * mu / (2.0 * model.sigma2);
    Ok(sigma * (std::f64::consts::PI / 2.0).sqrt() * laguerre_half(alpha, arg)?)
}

/// Gaussian log-pdf with mean `mu` and variance `sigma2`.
pub fn gaussian_logpdf(x: f64, mu: f64, sigma2: f64) -> f64 {
    debug_assert!(sigma2 > 0.0);
    let d = x - mu;
    -0.5 * (LN_2PI + sigma2.ln()) - d * d / (2.0 * sigma2)
}
