//! Gibbs sampler for Bayesian quantile regression under the asymmetric
//! Laplace working likelihood, using its normal/exponential mixture form.
//!
//! With `theta`, `psi2` the mixture constants of `tau`, the augmented model is
//!
//! ```text
//! y_i | beta, sigma, v_i ~ Normal(x_i' beta + theta v_i, psi2 sigma v_i)
//! v_i | sigma            ~ Exponential(mean sigma)
//! beta                   ~ Normal(b0, B0)
//! sigma                  ~ InverseGamma(a0, r0)
//! ```
//!
//! and every block has a closed-form full conditional:
//!
//! ```text
//! v_i   | .  ~ GIG(1/2, delta_i^2 = (y_i - x_i' beta)^2 / (psi2 sigma),
//!                     zeta^2    = 2 / sigma + theta^2 / (psi2 sigma))
//! beta  | .  ~ Normal(V (B0^-1 b0 + sum_i x_i (y_i - theta v_i) / (psi2 sigma v_i)), V)
//!              V^-1 = B0^-1 + sum_i x_i x_i' / (psi2 sigma v_i)
//! sigma | .  ~ InverseGamma(a0 + 3n/2,
//!                           r0 + sum_i (y_i - x_i' beta - theta v_i)^2 / (2 psi2 v_i) + sum_i v_i)
//! ```
//!
//! A sweep updates the blocks in the fixed order v, beta, sigma.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ald::{mixture_constants, MixtureConstants, QuantileLevel};
use crate::data::Dataset;
use crate::dists::{sample_gig_half, sample_inverse_gamma, sample_mvn_precision, GigHalfParams, RngStream};
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 3000;
pub const DEFAULT_BURN_IN: usize = 1000;
pub const DEFAULT_THIN: usize = 1;
pub const DEFAULT_BETA_VARIANCE: f64 = 100.0;
pub const DEFAULT_SIGMA_SHAPE: f64 = 1.5;
pub const DEFAULT_SIGMA_RATE: f64 = 0.05;
/// Smallest number of retained draws a configuration may produce.
pub const MIN_RETAINED: usize = 100;

/// Normal prior on the coefficients and inverse gamma prior on the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    beta_mean: DVector<f64>,
    beta_cov: DMatrix<f64>,
    beta_precision: DMatrix<f64>,
    sigma_shape: f64,
    sigma_rate: f64,
}

impl PriorSpec {
    pub fn new(
        beta_mean: DVector<f64>,
        beta_cov: DMatrix<f64>,
        sigma_shape: f64,
        sigma_rate: f64,
    ) -> Result<Self> {
        let p = beta_mean.len();
        if beta_cov.shape() != (p, p) {
            return Err(Error::InvalidParameter(format!(
                "prior covariance is {:?}, expected ({p}, {p})",
                beta_cov.shape()
            )));
        }
        if (&beta_cov - beta_cov.transpose()).amax() > 1e-12 * beta_cov.amax().max(1.0) {
            return Err(Error::InvalidParameter("prior covariance is not symmetric".into()));
        }
        let beta_precision = beta_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("prior covariance is not positive definite".into()))?
            .inverse();
        if !(sigma_shape > 0.0 && sigma_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "inverse gamma prior needs positive shape and rate, got ({sigma_shape}, {sigma_rate})"
            )));
        }
        Ok(Self {
            beta_mean,
            beta_cov,
            beta_precision,
            sigma_shape,
            sigma_rate,
        })
    }

    /// `beta ~ Normal(0, beta_var I)`, `sigma ~ InverseGamma(shape, rate)`.
    pub fn isotropic(p: usize, beta_var: f64, sigma_shape: f64, sigma_rate: f64) -> Result<Self> {
        if !(beta_var > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "prior coefficient variance must be positive, got {beta_var}"
            )));
        }
        Self::new(
            DVector::zeros(p),
            DMatrix::identity(p, p) * beta_var,
            sigma_shape,
            sigma_rate,
        )
    }

    /// `Normal(0, 100 I)` and `InverseGamma(3/2, 0.1/2)`.
    pub fn default_for(p: usize) -> Self {
        Self::isotropic(p, DEFAULT_BETA_VARIANCE, DEFAULT_SIGMA_SHAPE, DEFAULT_SIGMA_RATE)
            .expect("default prior is valid")
    }

    pub fn dim(&self) -> usize {
        self.beta_mean.len()
    }

    pub fn beta_mean(&self) -> &DVector<f64> {
        &self.beta_mean
    }

    pub fn beta_cov(&self) -> &DMatrix<f64> {
        &self.beta_cov
    }

    pub fn sigma_shape(&self) -> f64 {
        self.sigma_shape
    }

    pub fn sigma_rate(&self) -> f64 {
        self.sigma_rate
    }
}

/// Everything one chain needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub tau: QuantileLevel,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Substream of `seed` the chain draws from.
    pub stream: u64,
    pub prior: PriorSpec,
}

impl FitConfig {
    /// Default chain settings (3000 iterations, 1000 burn-in, no thinning).
    pub fn new(tau: QuantileLevel, prior: PriorSpec) -> Self {
        Self {
            tau,
            iterations: DEFAULT_ITERATIONS,
            burn_in: DEFAULT_BURN_IN,
            thin: DEFAULT_THIN,
            seed: 0,
            stream: 0,
            prior,
        }
    }

    pub fn with_chain(mut self, iterations: usize, burn_in: usize, thin: usize) -> Self {
        self.iterations = iterations;
        self.burn_in = burn_in;
        self.thin = thin;
        self
    }

    pub fn with_seed(mut self, seed: u64, stream: u64) -> Self {
        self.seed = seed;
        self.stream = stream;
        self
    }

    /// Number of draws kept after burn-in and thinning.
    pub fn retained(&self) -> usize {
        (self.iterations.saturating_sub(self.burn_in)) / self.thin.max(1)
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.iterations == 0 || self.thin == 0 {
            return Err(Error::InvalidParameter(
                "iterations and thin must be positive".into(),
            ));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::InvalidParameter(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.retained() < MIN_RETAINED {
            return Err(Error::InvalidParameter(format!(
                "(iterations - burn_in) / thin = {} retained draws, need at least {MIN_RETAINED}",
                self.retained()
            )));
        }
        if self.prior.dim() != p {
            return Err(Error::InvalidParameter(format!(
                "prior has dimension {}, design has {p} columns",
                self.prior.dim()
            )));
        }
        Ok(())
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorChains {
    pub tau: QuantileLevel,
    pub column_names: Vec<String>,
    /// M x p, one draw per row.
    beta: DMatrix<f64>,
    sigma: Vec<f64>,
    /// M x n, column-major so each observation's chain is contiguous.
    latent: DMatrix<f64>,
}

impl PosteriorChains {
    /// Builds chains from raw draws. `latent[i]` is the chain of observation `i`.
    pub fn from_draws(
        tau: QuantileLevel,
        column_names: Vec<String>,
        beta: DMatrix<f64>,
        sigma: Vec<f64>,
        latent: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = sigma.len();
        if beta.nrows() != m || beta.ncols() != column_names.len() {
            return Err(Error::InvalidParameter(format!(
                "beta draws are {:?}, expected ({m}, {})",
                beta.shape(),
                column_names.len()
            )));
        }
        if latent.iter().any(|c| c.len() != m) {
            return Err(Error::InvalidParameter(format!(
                "every latent chain must have {m} draws"
            )));
        }
        let n = latent.len();
        let flat: Vec<f64> = latent.into_iter().flatten().collect();
        Ok(Self {
            tau,
            column_names,
            beta,
            sigma,
            latent: DMatrix::from_vec(m, n, flat),
        })
    }

    /// Retained draw count M.
    pub fn retained(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_obs(&self) -> usize {
        self.latent.ncols()
    }

    pub fn n_coef(&self) -> usize {
        self.beta.ncols()
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn beta_chain(&self, k: usize) -> &[f64] {
        let m = self.retained();
        &self.beta.as_slice()[k * m..(k + 1) * m]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn latent(&self) -> &DMatrix<f64> {
        &self.latent
    }

    /// Retained draws of the latent variable of observation `i`.
    pub fn latent_chain(&self, i: usize) -> &[f64] {
        let m = self.retained();
        &self.latent.as_slice()[i * m..(i + 1) * m]
    }

    pub fn beta_mean(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_coef(),
            (0..self.n_coef()).map(|k| mean(self.beta_chain(k))),
        )
    }

    pub fn sigma_mean(&self) -> f64 {
        mean(&self.sigma)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Row-major copy of the design plus per-sweep scratch.
struct Workspace {
    n: usize,
    p: usize,
    rows: Vec<f64>,
    y: Vec<f64>,
}

impl Workspace {
    fn new(data: &Dataset) -> Self {
        let (n, p) = data.x().shape();
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            rows.extend(data.x().row(i).iter());
        }
        Self {
            n,
            p,
            rows,
            y: data.y().iter().copied().collect(),
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    fn fitted(&self, i: usize, beta: &[f64]) -> f64 {
        self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    /// Lower Cholesky factor of the beta precision and the conditional mean.
    fn beta_conditional(
        &self,
        v: &[f64],
        sigma: f64,
        mc: MixtureConstants,
        prior: &PriorSpec,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.p;
        let mut precision = prior.beta_precision.clone();
        let mut rhs = &prior.beta_precision * &prior.beta_mean;
        for i in 0..self.n {
            let w = 1.0 / (mc.psi2 * sigma * v[i]);
            let xi = self.row(i);
            let target = w * (self.y[i] - mc.theta * v[i]);
            for a in 0..p {
                rhs[a] += xi[a] * target;
                let wa = w * xi[a];
                for b in 0..=a {
                    precision[(a, b)] += wa * xi[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                precision[(b, a)] = precision[(a, b)];
            }
        }
        let chol = precision.cholesky().ok_or_else(|| {
            let (v_min, v_max) = v
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            Error::NotPositiveDefinite { v_min, v_max, sigma }
        })?;
        let mean = chol.solve(&rhs);
        Ok((mean, chol.l()))
    }

    fn sigma_conditional(
        &self,
        beta: &[f64],
        v: &[f64],
        mc: MixtureConstants,
        prior: &PriorSpec,
    ) -> (f64, f64) {
        let mut rate = prior.sigma_rate;
        for i in 0..self.n {
            let e = self.y[i] - self.fitted(i, beta) - mc.theta * v[i];
            rate += e * e / (2.0 * mc.psi2 * v[i]) + v[i];
        }
        (prior.sigma_shape + 1.5 * self.n as f64, rate)
    }
}

/// Mean and covariance of `beta | v, sigma, y`.
pub fn full_conditional_beta(
    data: &Dataset,
    v: &[f64],
    sigma: f64,
    config: &FitConfig,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_latent(data, v, sigma)?;
    let ws = Workspace::new(data);
    let (mean, l) = ws.beta_conditional(v, sigma, mixture_constants(config.tau), &config.prior)?;
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(ws.p, ws.p))
        .expect("Cholesky factor has a positive diagonal");
    let covariance = l_inv.transpose() * l_inv;
    Ok((mean, covariance))
}

/// Shape and rate of the inverse gamma conditional `sigma | beta, v, y`.
pub fn full_conditional_sigma_params(
    data: &Dataset,
    beta: &[f64],
    v: &[f64],
    config: &FitConfig,
) -> Result<(f64, f64)> {
    if v.len() != data.n_obs() || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidParameter(
            "latent values must be positive, one per observation".into(),
        ));
    }
    let ws = Workspace::new(data);
    Ok(ws.sigma_conditional(beta, v, mixture_constants(config.tau), &config.prior))
}

/// GIG parameters of `v_i | beta, sigma, y_i`.
pub fn full_conditional_v_params(
    y_i: f64,
    x_i: &[f64],
    beta: &[f64],
    sigma: f64,
    tau: QuantileLevel,
) -> Result<GigHalfParams> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let residual = y_i - x_i.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
    let (delta2, zeta2) = latent_params(residual, sigma, mixture_constants(tau));
    GigHalfParams::new(delta2, zeta2)
}

#[inline]
fn latent_params(residual: f64, sigma: f64, mc: MixtureConstants) -> (f64, f64) {
    let scale = mc.psi2 * sigma;
    (residual * residual / scale, 2.0 / sigma + mc.theta * mc.theta / scale)
}

fn check_latent(data: &Dataset, v: &[f64], sigma: f64) -> Result<()> {
    if v.len() != data.n_obs() || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidParameter(
            "latent values must be positive, one per observation".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Runs one chain. Deterministic given `config.seed` and `config.stream`.
///
/// Starts from the least-squares fit: `sigma` is the mean absolute residual
/// and `v_i = max(|r_i|, 0.01)`.
pub fn run_gibbs(data: &Dataset, config: &FitConfig) -> Result<PosteriorChains> {
    config.validate(data.n_coef())?;
    let ws = Workspace::new(data);
    let (n, p) = (ws.n, ws.p);
    let mc = mixture_constants(config.tau);
    let mut rng = RngStream::new(config.seed, config.stream);

    let mut beta: Vec<f64> = data.least_squares().iter().copied().collect();
    let residuals: Vec<f64> = (0..n).map(|i| ws.y[i] - ws.fitted(i, &beta)).collect();
    let mut sigma = (residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64).max(1e-8);
    let mut v: Vec<f64> = residuals.iter().map(|r| r.abs().max(0.01)).collect();

    let m = config.retained();
    let mut beta_draws = DMatrix::zeros(m, p);
    let mut sigma_draws = Vec::with_capacity(m);
    let mut latent_draws = DMatrix::zeros(m, n);

    let mut kept = 0;
    for sweep in 0..config.iterations {
        for i in 0..n {
            let (delta2, zeta2) = latent_params(ws.y[i] - ws.fitted(i, &beta), sigma, mc);
            v[i] = sample_gig_half(GigHalfParams::new_unchecked(delta2, zeta2), &mut rng);
        }

        let (mean, factor) = ws
            .beta_conditional(&v, sigma, mc, &config.prior)
            .map_err(|e| Error::Sweep {
                sweep,
                source: Box::new(e),
            })?;
        let draw = sample_mvn_precision(&mean, &factor, &mut rng);
        beta.copy_from_slice(draw.as_slice());

        let (shape, rate) = ws.sigma_conditional(&beta, &v, mc, &config.prior);
        sigma = sample_inverse_gamma(shape, rate, &mut rng);

        if sweep >= config.burn_in && (sweep - config.burn_in + 1) % config.thin == 0 && kept < m {
            for k in 0..p {
                beta_draws[(kept, k)] = beta[k];
            }
            sigma_draws.push(sigma);
            for i in 0..n {
                latent_draws[(kept, i)] = v[i];
            }
            kept += 1;
        }
    }
    debug_assert_eq!(kept, m);

    Ok(PosteriorChains {
        tau: config.tau,
        column_names: data.column_names().to_vec(),
        beta: beta_draws,
        sigma: sigma_draws,
        latent: latent_draws,
    })
}

/// Point and interval summary of one scalar chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub tau: QuantileLevel,
    pub credible_level: f64,
    pub beta: Vec<ParamSummary>,
    pub sigma: ParamSummary,
}

/// Empirical quantile by linear interpolation of order statistics
/// (Hyndman-Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean, median and equal-tailed interval of a chain.
pub fn summarize_draws(name: &str, draws: &[f64], credible_level: f64) -> ParamSummary {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - credible_level) / 2.0;
    ParamSummary {
        name: name.to_string(),
        mean: mean(draws),
        median: quantile_sorted(&sorted, 0.5),
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
    }
}

pub fn summarize_chains(chains: &PosteriorChains, credible_level: f64) -> Result<ChainSummary> {
    if chains.retained() == 0 {
        return Err(Error::InvalidParameter("cannot summarize an empty chain".into()));
    }
    if !(credible_level > 0.0 && credible_level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "credible level must lie in (0, 1), got {credible_level}"
        )));
    }
    let beta = (0..chains.n_coef())
        .map(|k| summarize_draws(&chains.column_names[k], chains.beta_chain(k), credible_level))
        .collect();
    Ok(ChainSummary {
        tau: chains.tau,
        credible_level,
        beta,
        sigma: summarize_draws("sigma", chains.sigma(), credible_level),
    })
}
