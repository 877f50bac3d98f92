//! Outlier measures built from the posterior draws of the latent variables.
//!
//! An observation whose residual is extreme for the fitted quantile has a
//! latent posterior pushed away from zero. Two scores compare each latent
//! chain with the others:
//!
//! * the exceedance probability `P(O_i = 1) = 1/(n-1) sum_{j != i} P(v_i > v_j | y)`,
//!   estimated either from aligned draws or with the conservative rule that
//!   counts draws of `v_i` above the largest draw of `v_j`;
//! * the Kullback-Leibler divergence `K(f_i, f_j)` between normal-kernel
//!   density estimates of the two chains, integrated with the trapezoidal
//!   rule, and its average over `j`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::error::{Error, Result};
use crate::gibbs::{quantile_sorted, PosteriorChains};

pub const DEFAULT_FLAG_THRESHOLD: f64 = 0.10;
pub const DEFAULT_GRID_POINTS: usize = 512;
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-12;
/// Lower end of the evaluation grid for latent chains, which live on (0, inf).
pub const LATENT_SUPPORT_FLOOR: f64 = 1e-12;
const MIN_GRID_POINTS: usize = 64;
const MAX_DENSITY_FLOOR: f64 = 1e-8;
/// Kernel weights are dropped beyond this many bandwidths.
const KERNEL_REACH: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbRule {
    /// Aligned draws: `1/M sum_l 1[v_i^(l) > v_j^(l)]`.
    Pairwise,
    /// `1/M sum_l 1[v_i^(l) > max_k v_j^(k)]`.
    #[default]
    MaxRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    AllOthers,
    SingleReference(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BandwidthRule {
    /// `0.9 min(sd, IQR / 1.34) M^(-1/5)`.
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeSpec {
    pub bandwidth_rule: BandwidthRule,
    pub grid_points: usize,
    pub density_floor: f64,
}

impl Default for KdeSpec {
    fn default() -> Self {
        Self {
            bandwidth_rule: BandwidthRule::Silverman,
            grid_points: DEFAULT_GRID_POINTS,
            density_floor: DEFAULT_DENSITY_FLOOR,
        }
    }
}

impl KdeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_points < MIN_GRID_POINTS {
            return Err(Error::InvalidParameter(format!(
                "KDE grid needs at least {MIN_GRID_POINTS} points, got {}",
                self.grid_points
            )));
        }
        if !(self.density_floor > 0.0 && self.density_floor <= MAX_DENSITY_FLOOR) {
            return Err(Error::InvalidParameter(format!(
                "density floor must lie in (0, {MAX_DENSITY_FLOOR}], got {}",
                self.density_floor
            )));
        }
        if let BandwidthRule::Fixed(h) = self.bandwidth_rule {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "fixed bandwidth must be positive, got {h}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub tau: QuantileLevel,
    pub prob_rule: ProbRule,
    /// `P(O_i = 1)` per observation.
    pub prob: Vec<f64>,
    /// `KL(f_i)` per observation.
    pub kl: Vec<f64>,
    /// Set when divergences were taken against one observation only.
    pub kl_reference: Option<usize>,
    pub threshold: f64,
    /// `prob[i] > threshold`.
    pub flagged: Vec<bool>,
}

impl OutlierReport {
    pub fn flagged_indices(&self) -> Vec<usize> {
        (0..self.flagged.len()).filter(|&i| self.flagged[i]).collect()
    }
}

fn check_index(chains: &PosteriorChains, i: usize) -> Result<()> {
    if i >= chains.n_obs() {
        return Err(Error::InvalidParameter(format!(
            "observation index {i} out of range (n = {})",
            chains.n_obs()
        )));
    }
    Ok(())
}

fn check_pair(chains: &PosteriorChains, i: usize, j: usize) -> Result<()> {
    check_index(chains, i)?;
    check_index(chains, j)?;
    if i == j {
        return Err(Error::InvalidParameter(format!(
            "observation {i} cannot be compared with itself"
        )));
    }
    Ok(())
}

/// Fraction of aligned draws with `a[l] > b[l]`.
pub fn aligned_exceedance(a: &[f64], b: &[f64]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x > y).count();
    hits as f64 / a.len() as f64
}

/// Fraction of `a` strictly above the maximum of `b`.
pub fn max_exceedance(a: &[f64], b: &[f64]) -> f64 {
    let top = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    a.iter().filter(|&&x| x > top).count() as f64 / a.len() as f64
}

pub fn exceedance_probability_pairwise(chains: &PosteriorChains, i: usize) -> Result<f64> {
    check_index(chains, i)?;
    let n = chains.n_obs();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "exceedance probability needs at least two observations".into(),
        ));
    }
    let vi = chains.latent_chain(i);
    let total: f64 = (0..n)
        .filter(|&j| j != i)
        .map(|j| aligned_exceedance(vi, chains.latent_chain(j)))
        .sum();
    Ok(total / (n - 1) as f64)
}

pub fn exceedance_probability_maxrule(chains: &PosteriorChains, i: usize, j: usize) -> Result<f64> {
    check_pair(chains, i, j)?;
    Ok(max_exceedance(chains.latent_chain(i), chains.latent_chain(j)))
}

/// Max-rule terms averaged over every `j != i`.
fn maxrule_probabilities(chains: &PosteriorChains) -> Vec<f64> {
    let n = chains.n_obs();
    let m = chains.retained() as f64;
    let maxima: Vec<f64> = (0..n)
        .map(|j| chains.latent_chain(j).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sorted = chains.latent_chain(i).to_vec();
            sorted.sort_by(f64::total_cmp);
            let total: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let at_or_below = sorted.partition_point(|&x| x <= maxima[j]);
                    (sorted.len() - at_or_below) as f64 / m
                })
                .sum();
            total / (n - 1) as f64
        })
        .collect()
}

pub fn silverman_bandwidth(draws: &[f64]) -> Option<f64> {
    let m = draws.len();
    if m < 2 {
        return None;
    }
    let mean = draws.iter().sum::<f64>() / m as f64;
    let sd = (draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return None;
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Some(0.9 * spread * (m as f64).powf(-0.2))
}

/// Uniform evaluation grid.
#[derive(Debug, Clone, Copy)]
struct Grid {
    lo: f64,
    step: f64,
    points: usize,
}

/// Normal-kernel density of `draws` on `grid`, computed by linear binning
/// followed by a discrete convolution with the kernel, and rescaled so that
/// its trapezoidal integral over the grid is one.
fn kde_on_grid(draws: &[f64], bandwidth: f64, grid: Grid) -> Vec<f64> {
    let g = grid.points;
    let mut weights = vec![0.0; g];
    for &x in draws {
        let t = ((x - grid.lo) / grid.step).clamp(0.0, (g - 1) as f64);
        let k = (t.floor() as usize).min(g - 2);
        let frac = t - k as f64;
        weights[k] += 1.0 - frac;
        weights[k + 1] += frac;
    }
    let reach = ((KERNEL_REACH * bandwidth / grid.step).ceil() as usize).min(g - 1);
    let norm = 1.0 / (draws.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=reach)
        .map(|d| {
            let u = d as f64 * grid.step / bandwidth;
            norm * (-0.5 * u * u).exp()
        })
        .collect();
    let mut density = vec![0.0; g];
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let first = k.saturating_sub(reach);
        let last = (k + reach).min(g - 1);
        for (slot, out) in density[first..=last].iter_mut().enumerate() {
            *out += w * kernel[(first + slot).abs_diff(k)];
        }
    }
    let mass = trapezoid(&density, grid.step);
    if mass > 0.0 {
        density.iter_mut().for_each(|d| *d /= mass);
    }
    density
}

fn trapezoid(values: &[f64], step: f64) -> f64 {
    let inner: f64 = values.iter().sum();
    step * (inner - 0.5 * (values[0] + values[values.len() - 1]))
}

/// Which side of a pair had no spread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegenerateSide {
    First,
    Second,
}

/// `K(f, g)` between normal-kernel density estimates of two samples.
///
/// Both estimates share one grid spanning both samples plus three of the
/// larger bandwidth on each side, truncated below at `support_floor` when
/// given. `g` is clamped below by the density floor.
pub fn kl_divergence_draws(
    first: &[f64],
    second: &[f64],
    spec: &KdeSpec,
    support_floor: Option<f64>,
) -> std::result::Result<f64, DegenerateSide> {
    let bandwidth = |draws: &[f64], side| {
        let spread = draws.iter().any(|&x| x != draws[0]);
        if !spread {
            return Err(side);
        }
        match spec.bandwidth_rule {
            BandwidthRule::Silverman => silverman_bandwidth(draws).ok_or(side),
            BandwidthRule::Fixed(h) => Ok(h),
        }
    };
    let h_first = bandwidth(first, DegenerateSide::First)?;
    let h_second = bandwidth(second, DegenerateSide::Second)?;
    let reach = 3.0 * h_first.max(h_second);
    let (lo, hi) = first
        .iter()
        .chain(second)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let mut lo = lo - reach;
    if let Some(floor) = support_floor {
        lo = lo.max(floor);
    }
    let hi = hi + reach;
    let grid = Grid {
        lo,
        step: (hi - lo) / (spec.grid_points - 1) as f64,
        points: spec.grid_points,
    };
    let f = kde_on_grid(first, h_first, grid);
    let g = kde_on_grid(second, h_second, grid);
    let integrand: Vec<f64> = f
        .iter()
        .zip(&g)
        .map(|(&fi, &gi)| {
            if fi > 0.0 {
                fi * (fi / gi.max(spec.density_floor)).ln()
            } else {
                0.0
            }
        })
        .collect();
    Ok(trapezoid(&integrand, grid.step).max(0.0))
}

/// `K(f_i, f_j)` for the latent posteriors of observations `i` and `j`.
pub fn kl_divergence_kde(chains: &PosteriorChains, i: usize, j: usize, spec: &KdeSpec) -> Result<f64> {
    check_pair(chains, i, j)?;
    spec.validate()?;
    latent_kl(chains, i, j, spec)
}

fn latent_kl(chains: &PosteriorChains, i: usize, j: usize, spec: &KdeSpec) -> Result<f64> {
    kl_divergence_draws(
        chains.latent_chain(i),
        chains.latent_chain(j),
        spec,
        Some(LATENT_SUPPORT_FLOOR),
    )
    .map_err(|side| match side {
        DegenerateSide::First => Error::DegenerateChain(i),
        DegenerateSide::Second => Error::DegenerateChain(j),
    })
}

/// `KL(f_i)`: the average of `K(f_i, f_j)` over `j != i`, or the divergence
/// from a single reference observation.
pub fn mean_kl(chains: &PosteriorChains, i: usize, mode: KlMode, spec: &KdeSpec) -> Result<f64> {
    check_index(chains, i)?;
    spec.validate()?;
    match mode {
        KlMode::AllOthers => {
            let n = chains.n_obs();
            if n < 2 {
                return Err(Error::InvalidParameter(
                    "divergence average needs at least two observations".into(),
                ));
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                total += latent_kl(chains, i, j, spec)?;
            }
            Ok(total / (n - 1) as f64)
        }
        KlMode::SingleReference(r) => kl_divergence_kde(chains, i, r, spec),
    }
}

/// Scores every observation. Observations with probability above
/// `threshold` are flagged.
pub fn build_report(
    chains: &PosteriorChains,
    prob_rule: ProbRule,
    kl_mode: KlMode,
    spec: &KdeSpec,
    threshold: f64,
) -> Result<OutlierReport> {
    spec.validate()?;
    let n = chains.n_obs();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "outlier report needs at least two observations".into(),
        ));
    }
    let prob = match prob_rule {
        ProbRule::Pairwise => (0..n)
            .into_par_iter()
            .map(|i| exceedance_probability_pairwise(chains, i))
            .collect::<Result<Vec<_>>>()?,
        ProbRule::MaxRule => maxrule_probabilities(chains),
    };
    let kl = match kl_mode {
        KlMode::AllOthers => (0..n)
            .into_par_iter()
            .map(|i| mean_kl(chains, i, kl_mode, spec))
            .collect::<Result<Vec<_>>>()?,
        KlMode::SingleReference(r) => {
            check_index(chains, r)?;
            (0..n)
                .into_par_iter()
                .map(|i| if i == r { Ok(0.0) } else { latent_kl(chains, i, r, spec) })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let flagged = prob.iter().map(|&p| p > threshold).collect();
    Ok(OutlierReport {
        tau: chains.tau,
        prob_rule,
        prob,
        kl,
        kl_reference: match kl_mode {
            KlMode::AllOthers => None,
            KlMode::SingleReference(r) => Some(r),
        },
        threshold,
        flagged,
    })
}
