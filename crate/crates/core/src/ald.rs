//! Check loss and the asymmetric Laplace distribution.
//!
//! The asymmetric Laplace law with location `mu`, scale `sigma` and skewness
//! `tau` has density `tau (1 - tau) / sigma * exp(-rho_tau((y - mu) / sigma))`,
//! where `rho_tau` is the quantile check loss. Its location is the `tau`-th
//! quantile, which is what makes it the working likelihood for quantile
//! regression.
//!
//! The law is also a normal/exponential mixture: with `v ~ Exponential(mean
//! sigma)` and `y | v ~ Normal(mu + theta v, psi2 sigma v)` the marginal of `y`
//! is asymmetric Laplace. [`MixtureConstants`] carries `theta` and `psi2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidQuantile(tau))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// The level mirrored around the median, `1 - tau`.
    pub fn mirrored(self) -> Self {
        Self(1.0 - self.0)
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(tau: QuantileLevel) -> f64 {
        tau.0
    }
}

impl std::fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parameters of one asymmetric Laplace law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AldParams {
    pub mu: f64,
    sigma: f64,
    pub tau: QuantileLevel,
}

impl AldParams {
    pub fn new(mu: f64, sigma: f64, tau: QuantileLevel) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "asymmetric Laplace scale must be positive, got {sigma}"
            )));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "asymmetric Laplace location must be finite, got {mu}"
            )));
        }
        Ok(Self { mu, sigma, tau })
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Constants of the normal/exponential mixture representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConstants {
    pub theta: f64,
    pub psi2: f64,
}

/// `rho_tau(u) = u (tau - 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: QuantileLevel) -> f64 {
    let tau = tau.value();
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

#[inline]
pub fn ald_log_density(y: f64, p: &AldParams) -> f64 {
    let tau = p.tau.value();
    (tau * (1.0 - tau) / p.sigma).ln() - check_loss((y - p.mu) / p.sigma, p.tau)
}

pub fn ald_mean(p: &AldParams) -> f64 {
    p.mu + p.sigma * mixture_constants(p.tau).theta
}

pub fn ald_variance(p: &AldParams) -> f64 {
    p.sigma * p.sigma * variance_factor(p.tau)
}

/// `T(tau) = (1 - 2 tau + 2 tau^2) / ((1 - tau)^2 tau^2)`, so that
/// `Var(Y) = sigma^2 T(tau)`.
pub fn variance_factor(tau: QuantileLevel) -> f64 {
    let t = tau.value();
    let q = (1.0 - t) * t;
    (1.0 - 2.0 * t + 2.0 * t * t) / (q * q)
}

pub fn mixture_constants(tau: QuantileLevel) -> MixtureConstants {
    let t = tau.value();
    let q = t * (1.0 - t);
    MixtureConstants {
        theta: (1.0 - 2.0 * t) / q,
        psi2: 2.0 / q,
    }
}
