//! Seeded random streams and the samplers the Gibbs sweep draws from.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed and positioned
//! on one of its 2^64 independent streams, so a single master seed fans out to
//! per-chain and per-replication substreams without coordination.
//!
//! The latent-variable update needs a generalized inverse Gaussian draw with
//! index one half. That law is the reciprocal of an inverse Gaussian, which is
//! drawn with the Michael, Schucany and Haas transformation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

use crate::ald::{mixture_constants, AldParams};
use crate::error::{Error, Result};

/// A reproducible, single-owner random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on [low, high).
    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Exponential draw parameterized by its mean.
    #[inline]
    pub fn exponential_mean(&mut self, mean: f64) -> f64 {
        let e: f64 = Exp1.sample(&mut self.inner);
        mean * e
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Parameters of the generalized inverse Gaussian law with index 1/2,
/// density proportional to `v^{-1/2} exp(-(delta2 / v + zeta2 v) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigHalfParams {
    delta2: f64,
    zeta2: f64,
}

impl GigHalfParams {
    pub fn new(delta2: f64, zeta2: f64) -> Result<Self> {
        if !(delta2 >= 0.0 && delta2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "GIG delta^2 must be finite and non-negative, got {delta2}"
            )));
        }
        if !(zeta2 > 0.0 && zeta2.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "GIG zeta^2 must be finite and positive, got {zeta2}"
            )));
        }
        Ok(Self { delta2, zeta2 })
    }

    pub(crate) fn new_unchecked(delta2: f64, zeta2: f64) -> Self {
        debug_assert!(delta2 >= 0.0 && zeta2 > 0.0);
        Self { delta2, zeta2 }
    }

    pub fn delta2(&self) -> f64 {
        self.delta2
    }

    pub fn zeta2(&self) -> f64 {
        self.zeta2
    }

    /// `(delta / zeta)(1 + 1 / (delta zeta))`, from the half-integer Bessel
    /// ratio `K_{3/2}(z) / K_{1/2}(z) = 1 + 1/z`.
    pub fn mean(&self) -> f64 {
        let zeta = self.zeta2.sqrt();
        self.delta2.sqrt() / zeta + 1.0 / self.zeta2
    }
}

/// Gamma draw with the given shape and rate, retried until strictly positive.
pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    let gamma = Gamma::new(shape, 1.0 / rate).expect("gamma parameters must be positive");
    loop {
        let x: f64 = gamma.sample(rng);
        if x > 0.0 && x.is_finite() {
            return x;
        }
    }
}

pub fn sample_gig_half(params: GigHalfParams, rng: &mut RngStream) -> f64 {
    if params.delta2 == 0.0 {
        return sample_gamma(0.5, params.zeta2 / 2.0, rng);
    }
    // 1/v ~ InverseGaussian(mean = zeta / delta, shape = zeta^2)
    let mean = (params.zeta2 / params.delta2).sqrt();
    loop {
        let v = 1.0 / sample_inverse_gaussian(mean, params.zeta2, rng);
        if v > 0.0 && v.is_finite() {
            return v;
        }
    }
}

/// Michael/Schucany/Haas transformation. The smaller root is evaluated in a
/// subtraction-free form so that extreme `mean / shape` ratios stay accurate.
pub fn sample_inverse_gaussian(mean: f64, shape: f64, rng: &mut RngStream) -> f64 {
    debug_assert!(mean > 0.0 && shape > 0.0);
    loop {
        let z = rng.standard_normal();
        let w = mean * z * z;
        // x = mean + mean/(2 shape) (w - sqrt(4 shape w + w^2)), rationalized
        let x = if w == 0.0 {
            mean
        } else {
            let root = w + (w * (w + 4.0 * shape)).sqrt();
            4.0 * mean * shape * w / (root * root)
        };
        let out = if rng.uniform() * (mean + x) <= mean {
            x
        } else {
            mean * mean / x
        };
        if out > 0.0 && out.is_finite() {
            return out;
        }
    }
}

/// Inverse gamma draw, density proportional to `x^{-shape-1} exp(-rate / x)`.
pub fn sample_inverse_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> f64 {
    loop {
        let x = 1.0 / sample_gamma(shape, rate, rng);
        if x.is_finite() {
            return x;
        }
    }
}

/// `mean + factor * z` with `z` standard normal; `factor` is a lower
/// Cholesky factor of the covariance.
pub fn sample_mvn(mean: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut RngStream) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.standard_normal());
    mean + factor * z
}

/// Draw from `Normal(mean, P^{-1})` given the lower Cholesky factor `L` of the
/// precision `P = L L^T`: solves `L^T x = z`.
pub fn sample_mvn_precision(
    mean: &DVector<f64>,
    precision_factor: &DMatrix<f64>,
    rng: &mut RngStream,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.standard_normal());
    let x = precision_factor
        .tr_solve_lower_triangular(&z)
        .unwrap_or_else(|| DVector::zeros(mean.len()));
    mean + x
}

/// Inverse-CDF draw from the asymmetric Laplace law.
pub fn sample_ald(p: &AldParams, rng: &mut RngStream) -> f64 {
    let tau = p.tau.value();
    loop {
        let u = rng.uniform();
        if u <= 0.0 {
            continue;
        }
        return if u <= tau {
            p.mu + p.sigma() / (1.0 - tau) * (u / tau).ln()
        } else {
            p.mu - p.sigma() / tau * ((1.0 - u) / (1.0 - tau)).ln()
        };
    }
}

/// Asymmetric Laplace draw through the normal/exponential mixture.
pub fn sample_ald_mixture(p: &AldParams, rng: &mut RngStream) -> f64 {
    let mc = mixture_constants(p.tau);
    let v = rng.exponential_mean(p.sigma());
    p.mu + mc.theta * v + (mc.psi2 * p.sigma() * v).sqrt() * rng.standard_normal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ald::QuantileLevel;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn same_stream_replays() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let xa: Vec<f64> = (0..100).map(|_| sample_inverse_gaussian(2.0, 1.0, &mut a)).collect();
        let xb: Vec<f64> = (0..100).map(|_| sample_inverse_gaussian(2.0, 1.0, &mut b)).collect();
        assert_eq!(xa, xb);
        let mut c = RngStream::new(42, 4);
        let xc: Vec<f64> = (0..100).map(|_| sample_inverse_gaussian(2.0, 1.0, &mut c)).collect();
        assert_ne!(xa, xc);
    }

    #[test]
    fn gig_params_validation() {
        assert!(GigHalfParams::new(0.0, 1.0).is_ok());
        assert!(GigHalfParams::new(-1.0, 1.0).is_err());
        assert!(GigHalfParams::new(1.0, 0.0).is_err());
        assert!(GigHalfParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn gig_half_means() {
        let mut rng = RngStream::new(7, 0);
        for (d2, z2, expected) in [(1.0, 1.0, 2.0), (4.0, 1.0, 3.0), (1.0, 4.0, 0.75)] {
            let p = GigHalfParams::new(d2, z2).unwrap();
            assert!((p.mean() - expected).abs() < 1e-12);
            let xs: Vec<f64> = (0..100_000).map(|_| sample_gig_half(p, &mut rng)).collect();
            let (m, _) = moments(&xs);
            assert!((m / expected - 1.0).abs() < 0.02, "({d2}, {z2}): {m}");
        }
    }

    #[test]
    fn gig_zero_delta_is_gamma_half() {
        let mut rng = RngStream::new(8, 0);
        let p = GigHalfParams::new(0.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| sample_gig_half(p, &mut rng)).collect();
        assert!(xs.iter().all(|&x| x > 0.0 && x.is_finite()));
        // Gamma(1/2, rate 1): mean 1/2, variance 1/2
        let (m, v) = moments(&xs);
        assert!((m - 0.5).abs() < 0.01, "{m}");
        assert!((v - 0.5).abs() < 0.03, "{v}");
    }

    #[test]
    fn inverse_gaussian_degenerate_limit() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..1000 {
            let x = sample_inverse_gaussian(1.0, 1e6, &mut rng);
            assert!((x - 1.0).abs() < 0.02, "{x}");
        }
    }

    #[test]
    fn inverse_gaussian_moments() {
        let mut rng = RngStream::new(10, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_inverse_gaussian(2.0, 1.0, &mut rng)).collect();
        let (m, v) = moments(&xs);
        assert!((m / 2.0 - 1.0).abs() < 0.02, "{m}");
        assert!((v / 8.0 - 1.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn inverse_gamma_mean() {
        let mut rng = RngStream::new(11, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_inverse_gamma(3.0, 4.0, &mut rng)).collect();
        let (m, _) = moments(&xs);
        assert!((m / 2.0 - 1.0).abs() < 0.02, "{m}");
        let x = sample_inverse_gamma(1.5, 0.05, &mut rng);
        assert!(x > 0.0 && x.is_finite());
    }

    #[test]
    fn mvn_identity_and_degenerate() {
        let mut rng = RngStream::new(12, 0);
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(sample_mvn(&mean, &zero, &mut rng), mean);

        let id = DMatrix::identity(3, 3);
        let m0 = DVector::zeros(3);
        let draws: Vec<DVector<f64>> = (0..50_000).map(|_| sample_mvn(&m0, &id, &mut rng)).collect();
        for k in 0..3 {
            let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            let (m, v) = moments(&xs);
            assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.03, "{k}: {m} {v}");
        }
    }

    #[test]
    fn mvn_covariance() {
        let mut rng = RngStream::new(13, 0);
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cov.clone().cholesky().unwrap().l();
        let m0 = DVector::zeros(2);
        let draws: Vec<DVector<f64>> = (0..100_000).map(|_| sample_mvn(&m0, &l, &mut rng)).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / n;
        let mut emp = DMatrix::zeros(2, 2);
        for d in &draws {
            let c = d - &mean;
            emp += &c * c.transpose();
        }
        emp /= n - 1.0;
        for (e, c) in emp.iter().zip(cov.iter()) {
            assert!((e / c - 1.0).abs() < 0.05, "{e} vs {c}");
        }
    }

    #[test]
    fn mvn_precision_route_matches_covariance() {
        let mut rng = RngStream::new(14, 0);
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let prec = cov.clone().try_inverse().unwrap();
        let l = prec.cholesky().unwrap().l();
        let m0 = DVector::zeros(2);
        let draws: Vec<DVector<f64>> = (0..100_000)
            .map(|_| sample_mvn_precision(&m0, &l, &mut rng))
            .collect();
        let n = draws.len() as f64;
        let mut emp = DMatrix::zeros(2, 2);
        for d in &draws {
            emp += d * d.transpose();
        }
        emp /= n;
        for (e, c) in emp.iter().zip(cov.iter()) {
            assert!((e / c - 1.0).abs() < 0.05, "{e} vs {c}");
        }
    }

    #[test]
    fn extreme_parameters_stay_in_support() {
        let mut rng = RngStream::new(15, 0);
        for (d2, z2) in [(1e-12, 1e6), (1e6, 1e-12), (1e-12, 1e-12), (1e6, 1e6)] {
            let p = GigHalfParams::new(d2, z2).unwrap();
            for _ in 0..250_000 {
                let v = sample_gig_half(p, &mut rng);
                assert!(v > 0.0 && v.is_finite(), "({d2}, {z2}) -> {v}");
            }
        }
    }

    #[test]
    fn ald_direct_sampler_hits_location_quantile() {
        let mut rng = RngStream::new(16, 0);
        let tau = QuantileLevel::new(0.2).unwrap();
        let p = AldParams::new(3.0, 2.0, tau).unwrap();
        let n = 200_000;
        let below = (0..n).filter(|_| sample_ald(&p, &mut rng) < 3.0).count();
        assert!((below as f64 / n as f64 - 0.2).abs() < 0.005);
    }
}
