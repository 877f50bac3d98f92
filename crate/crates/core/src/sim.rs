//! Replicated simulation studies on a four-coefficient linear design with up
//! to two planted outliers.
//!
//! Base data: `y = b0 + b1 x1 + b2 x2 + b3 x3 + e` with `x_k ~ Uniform(0, 10)`
//! and `e ~ Normal(0, noise_sd^2)`. The planted rows use the base column means
//! `m_k`:
//!
//! ```text
//! ast  : y = 30, x = (m1, 20, m3)
//! star : y = 0,  x = (20, m2, m3)
//! ```
//!
//! Scenarios: 1 = none, 2 = star, 3 = both, 4 = ast.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::data::Dataset;
use crate::dists::RngStream;
use crate::error::{Error, Result};
use crate::gibbs::{quantile_sorted, run_gibbs, FitConfig, PriorSpec, DEFAULT_BURN_IN, DEFAULT_ITERATIONS, DEFAULT_THIN};
use crate::outlier::{build_report, kl_divergence_kde, KdeSpec, KlMode, ProbRule, DEFAULT_FLAG_THRESHOLD};

pub const TRUE_BETAS: [f64; 4] = [0.0, 1.0, -1.0, 2.0];
pub const NOISE_SD: f64 = 2.0;
pub const OUTLIER_TAUS: [f64; 3] = [0.1, 0.5, 0.9];
pub const CALIBRATION_TAUS: [f64; 3] = [0.25, 0.5, 0.75];
pub const CALIBRATION_SIZES: [usize; 2] = [100, 300];
pub const FULL_REPLICATIONS: usize = 250;
/// Largest tolerated share of failed replications.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

const AST_Y: f64 = 30.0;
const AST_X2: f64 = 20.0;
const STAR_Y: f64 = 0.0;
const STAR_X1: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            burn_in: DEFAULT_BURN_IN,
            thin: DEFAULT_THIN,
        }
    }
}

/// Which planted observation a record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Ast,
    Star,
}

impl Target {
    pub fn label(self) -> &'static str {
        match self {
            Target::Ast => "ast",
            Target::Star => "star",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n: usize,
    pub betas: [f64; 4],
    pub noise_sd: f64,
    pub include_star: bool,
    pub include_ast: bool,
    pub taus: Vec<QuantileLevel>,
    pub replications: usize,
    pub master_seed: u64,
    pub chain: ChainSettings,
    pub prob_rule: ProbRule,
    pub kde: KdeSpec,
}

impl ScenarioSpec {
    /// One of the four outlier scenarios at `n = 100` with the outlier-study
    /// quantiles and module defaults for everything else.
    pub fn scenario(number: u8, replications: usize, master_seed: u64) -> Result<Self> {
        let (include_ast, include_star) = match number {
            1 => (false, false),
            2 => (false, true),
            3 => (true, true),
            4 => (true, false),
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "scenario must be 1, 2, 3 or 4, got {number}"
                )))
            }
        };
        Ok(Self {
            n: 100,
            betas: TRUE_BETAS,
            noise_sd: NOISE_SD,
            include_star,
            include_ast,
            taus: OUTLIER_TAUS.iter().map(|&t| QuantileLevel::new(t).unwrap()).collect(),
            replications,
            master_seed,
            chain: ChainSettings::default(),
            prob_rule: ProbRule::default(),
            kde: KdeSpec::default(),
        })
    }

    pub fn scenario_number(&self) -> u8 {
        match (self.include_ast, self.include_star) {
            (false, false) => 1,
            (false, true) => 2,
            (true, true) => 3,
            (true, false) => 4,
        }
    }

    pub fn targets(&self) -> Vec<Target> {
        let mut out = Vec::new();
        if self.include_ast {
            out.push(Target::Ast);
        }
        if self.include_star {
            out.push(Target::Star);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 5 {
            return Err(Error::InvalidParameter(format!("sample size too small: {}", self.n)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise standard deviation must be non-negative, got {}",
                self.noise_sd
            )));
        }
        if self.taus.is_empty() || self.replications == 0 {
            return Err(Error::InvalidParameter(
                "a study needs at least one quantile and one replication".into(),
            ));
        }
        self.kde.validate()
    }

    fn fit_config(&self, tau: QuantileLevel, stream: u64) -> FitConfig {
        FitConfig::new(tau, PriorSpec::default_for(4))
            .with_chain(self.chain.iterations, self.chain.burn_in, self.chain.thin)
            .with_seed(self.master_seed, stream)
    }
}

/// Row indices of the planted observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InjectedRows {
    pub ast: Option<usize>,
    pub star: Option<usize>,
}

impl InjectedRows {
    pub fn row(&self, target: Target) -> Option<usize> {
        match target {
            Target::Ast => self.ast,
            Target::Star => self.star,
        }
    }
}

pub fn generate_base_data(spec: &ScenarioSpec, rng: &mut RngStream) -> Result<Dataset> {
    let n = spec.n;
    let mut cols = vec![Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.0, 10.0));
        let eta = spec.betas[0] + spec.betas[1] * x[0] + spec.betas[2] * x[1] + spec.betas[3] * x[2];
        let noise = rng.standard_normal();
        y.push(eta + spec.noise_sd * noise);
        for (col, v) in cols.iter_mut().zip(x) {
            col.push(v);
        }
    }
    let columns = cols
        .into_iter()
        .enumerate()
        .map(|(k, c)| (format!("x{}", k + 1), c))
        .collect();
    Dataset::from_columns(y, columns, true)
}

/// Appends the planted rows the scenario asks for (ast first).
pub fn inject_outliers(data: &Dataset, spec: &ScenarioSpec) -> (Dataset, InjectedRows) {
    let n = data.n_obs();
    let means: Vec<f64> = (0..4).map(|k| data.x().column(k).mean()).collect();
    let mut out = data.clone();
    let mut rows = InjectedRows::default();
    if spec.include_ast {
        rows.ast = Some(out.n_obs());
        out.push_row(AST_Y, &[1.0, means[1], AST_X2, means[3]]);
    }
    if spec.include_star {
        rows.star = Some(out.n_obs());
        out.push_row(STAR_Y, &[1.0, STAR_X1, means[2], means[3]]);
    }
    debug_assert_eq!(out.n_obs(), n + spec.targets().len());
    (out, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub target: Target,
    pub row: usize,
    pub probability: f64,
    /// `K(f_target, f_reference)`.
    pub kl: f64,
    /// `kl` divided by the mean divergence of the non-planted rows from the reference.
    pub relative_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub tau: QuantileLevel,
    /// Base row used as the divergence reference.
    pub reference: usize,
    /// Probabilities of the base (non-planted) rows.
    pub base_probabilities: Vec<f64>,
    pub targets: Vec<TargetRecord>,
    /// Posterior mean of the coefficients.
    pub beta_hat: Vec<f64>,
}

impl ReplicationRecord {
    pub fn base_mean_probability(&self) -> f64 {
        self.base_probabilities.iter().sum::<f64>() / self.base_probabilities.len() as f64
    }

    pub fn base_max_probability(&self) -> f64 {
        self.base_probabilities.iter().copied().fold(0.0, f64::max)
    }

    pub fn target(&self, target: Target) -> Option<&TargetRecord> {
        self.targets.iter().find(|t| t.target == target)
    }
}

/// Mean, median and central 95% range of one quantity across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: quantile_sorted(&sorted, 0.5),
            q025: quantile_sorted(&sorted, 0.025),
            q975: quantile_sorted(&sorted, 0.975),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Probability,
    RelativeKl,
    /// Mean probability over the base rows of a replication.
    BaseMeanProbability,
    /// Largest probability among the base rows of a replication.
    BaseMaxProbability,
}

impl Measure {
    pub fn label(self) -> &'static str {
        match self {
            Measure::Probability => "probability",
            Measure::RelativeKl => "relative_kl",
            Measure::BaseMeanProbability => "base_mean_probability",
            Measure::BaseMaxProbability => "base_max_probability",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: u8,
    pub tau: QuantileLevel,
    /// `ast`, `star`, or `base` for the calibration measures.
    pub target: String,
    pub measure: Measure,
    pub spread: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub spec: ScenarioSpec,
    pub rows: Vec<SummaryRow>,
    /// Successful replications, ordered by (replication, tau).
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<(usize, String)>,
}

impl ReplicationSummary {
    pub fn row(&self, tau: f64, target: &str, measure: Measure) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.tau.value() == tau && r.target == target && r.measure == measure)
    }

    /// Posterior-mean estimates of coefficient `k` across replications.
    pub fn beta_hat(&self, tau: f64, k: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.tau.value() == tau)
            .map(|r| r.beta_hat[k])
            .collect()
    }
}

fn data_stream(replication: usize) -> u64 {
    (replication as u64) << 16
}

fn fit_stream(replication: usize, tau_index: usize) -> u64 {
    data_stream(replication) | (tau_index as u64 + 1)
}

/// Builds the planted dataset of one replication and its divergence reference.
pub fn replication_data(spec: &ScenarioSpec, replication: usize) -> Result<(Dataset, InjectedRows, usize)> {
    let mut rng = RngStream::new(spec.master_seed, data_stream(replication));
    let base = generate_base_data(spec, &mut rng)?;
    let reference = rng.index(spec.n);
    let (data, rows) = inject_outliers(&base, spec);
    Ok((data, rows, reference))
}

fn run_replication(spec: &ScenarioSpec, replication: usize) -> Result<Vec<ReplicationRecord>> {
    let (data, rows, reference) = replication_data(spec, replication)?;
    let n = spec.n;
    let targets = spec.targets();
    let mut out = Vec::with_capacity(spec.taus.len());
    for (k, &tau) in spec.taus.iter().enumerate() {
        let chains = run_gibbs(&data, &spec.fit_config(tau, fit_stream(replication, k)))?;
        let report = build_report(
            &chains,
            spec.prob_rule,
            KlMode::SingleReference(reference),
            &spec.kde,
            DEFAULT_FLAG_THRESHOLD,
        )?;
        let mut target_records = Vec::with_capacity(targets.len());
        if !targets.is_empty() {
            let baseline = (0..n)
                .filter(|&i| i != reference)
                .map(|i| report.kl[i])
                .sum::<f64>()
                / (n - 1) as f64;
            for &target in &targets {
                let row = rows.row(target).expect("target rows exist for their scenario");
                let kl = kl_divergence_kde(&chains, row, reference, &spec.kde)?;
                target_records.push(TargetRecord {
                    target,
                    row,
                    probability: report.prob[row],
                    kl,
                    relative_kl: kl / baseline,
                });
            }
        }
        out.push(ReplicationRecord {
            replication,
            tau,
            reference,
            base_probabilities: report.prob[..n].to_vec(),
            targets: target_records,
            beta_hat: chains.beta_mean().iter().copied().collect(),
        });
    }
    Ok(out)
}

/// Runs every replication (in parallel, reduced in replication order) and
/// aggregates probabilities, relative divergences and calibration measures.
pub fn run_study(spec: &ScenarioSpec) -> Result<ReplicationSummary> {
    spec.validate()?;
    let outcomes: Vec<Result<Vec<ReplicationRecord>>> = (0..spec.replications)
        .into_par_iter()
        .map(|r| run_replication(spec, r))
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(recs) => records.extend(recs),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_SHARE * spec.replications as f64 {
        return Err(Error::StudyAborted {
            failed: failures.len(),
            total: spec.replications,
            first: failures[0].1.clone(),
        });
    }

    let scenario = spec.scenario_number();
    let mut rows = Vec::new();
    for &tau in &spec.taus {
        let at_tau: Vec<&ReplicationRecord> = records.iter().filter(|r| r.tau == tau).collect();
        if at_tau.is_empty() {
            continue;
        }
        for target in spec.targets() {
            let pick = |f: fn(&TargetRecord) -> f64| -> Vec<f64> {
                at_tau.iter().filter_map(|r| r.target(target)).map(f).collect()
            };
            for (measure, values) in [
                (Measure::Probability, pick(|t| t.probability)),
                (Measure::RelativeKl, pick(|t| t.relative_kl)),
            ] {
                rows.push(SummaryRow {
                    scenario,
                    tau,
                    target: target.label().to_string(),
                    measure,
                    spread: Spread::of(&values),
                });
            }
        }
        for (measure, values) in [
            (
                Measure::BaseMeanProbability,
                at_tau.iter().map(|r| r.base_mean_probability()).collect::<Vec<_>>(),
            ),
            (
                Measure::BaseMaxProbability,
                at_tau.iter().map(|r| r.base_max_probability()).collect(),
            ),
        ] {
            rows.push(SummaryRow {
                scenario,
                tau,
                target: "base".to_string(),
                measure,
                spread: Spread::of(&values),
            });
        }
    }

    Ok(ReplicationSummary {
        spec: spec.clone(),
        rows,
        records,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCell {
    pub n: usize,
    pub tau: QuantileLevel,
    /// Distribution across replications of the per-replication mean probability.
    pub mean_probability: Spread,
    /// Distribution across replications of the per-replication maximum.
    pub max_probability: Spread,
    /// Share of replications whose largest probability is below the flag threshold.
    pub share_max_below_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub cells: Vec<CalibrationCell>,
    pub studies: Vec<ReplicationSummary>,
    /// Replication whose per-observation probabilities are reported in full.
    pub example_replication: usize,
}

impl CalibrationSummary {
    pub fn cell(&self, n: usize, tau: f64) -> Option<&CalibrationCell> {
        self.cells.iter().find(|c| c.n == n && c.tau.value() == tau)
    }

    /// Per-observation probabilities of the example replication.
    pub fn example_probabilities(&self, n: usize, tau: f64) -> Option<&[f64]> {
        self.studies
            .iter()
            .find(|s| s.spec.n == n)?
            .records
            .iter()
            .find(|r| r.replication == self.example_replication && r.tau.value() == tau)
            .map(|r| r.base_probabilities.as_slice())
    }
}

/// The no-outlier study: one scenario-1 run per sample size.
pub fn run_calibration_study(
    n_values: &[usize],
    taus: &[QuantileLevel],
    replications: usize,
    master_seed: u64,
    chain: ChainSettings,
    prob_rule: ProbRule,
) -> Result<CalibrationSummary> {
    let mut studies = Vec::with_capacity(n_values.len());
    let mut cells = Vec::new();
    for &n in n_values {
        let spec = ScenarioSpec {
            n,
            taus: taus.to_vec(),
            chain,
            prob_rule,
            ..ScenarioSpec::scenario(1, replications, master_seed)?
        };
        let study = run_study(&spec)?;
        for &tau in taus {
            let recs: Vec<&ReplicationRecord> = study.records.iter().filter(|r| r.tau == tau).collect();
            let means: Vec<f64> = recs.iter().map(|r| r.base_mean_probability()).collect();
            let maxes: Vec<f64> = recs.iter().map(|r| r.base_max_probability()).collect();
            let below = maxes.iter().filter(|&&m| m < DEFAULT_FLAG_THRESHOLD).count();
            cells.push(CalibrationCell {
                n,
                tau,
                mean_probability: Spread::of(&means),
                max_probability: Spread::of(&maxes),
                share_max_below_threshold: below as f64 / maxes.len() as f64,
            });
        }
        studies.push(study);
    }
    let example_replication = RngStream::new(master_seed, u64::MAX).index(replications);
    Ok(CalibrationSummary {
        cells,
        studies,
        example_replication,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(number: u8, reps: usize) -> ScenarioSpec {
        ScenarioSpec {
            chain: ChainSettings {
                iterations: 600,
                burn_in: 200,
                thin: 1,
            },
            ..ScenarioSpec::scenario(number, reps, 11).unwrap()
        }
    }

    #[test]
    fn scenario_encoding() {
        for (k, ast, star) in [(1, false, false), (2, false, true), (3, true, true), (4, true, false)] {
            let s = ScenarioSpec::scenario(k, 1, 0).unwrap();
            assert_eq!((s.include_ast, s.include_star), (ast, star));
            assert_eq!(s.scenario_number(), k);
        }
        assert!(ScenarioSpec::scenario(5, 1, 0).is_err());
    }

    #[test]
    fn noiseless_data_is_linear_predictor() {
        let spec = ScenarioSpec { noise_sd: 0.0, ..quick(1, 1) };
        let d = generate_base_data(&spec, &mut RngStream::new(1, 0)).unwrap();
        for i in 0..d.n_obs() {
            let x = d.x().row(i);
            let eta = x[1] - x[2] + 2.0 * x[3];
            assert!((d.y()[i] - eta).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_columns_center_on_five() {
        let spec = ScenarioSpec { n: 100_000, ..quick(1, 1) };
        let d = generate_base_data(&spec, &mut RngStream::new(2, 0)).unwrap();
        for k in 1..4 {
            let m = d.x().column(k).mean();
            assert!((m - 5.0).abs() < 0.05, "{k}: {m}");
            assert!(d.x().column(k).iter().all(|&v| (0.0..10.0).contains(&v)));
        }
    }

    #[test]
    fn injection_layout() {
        let spec = quick(3, 1);
        let base = generate_base_data(&spec, &mut RngStream::new(3, 0)).unwrap();
        let (d, rows) = inject_outliers(&base, &spec);
        assert_eq!(d.n_obs(), 102);
        assert_eq!(rows, InjectedRows { ast: Some(100), star: Some(101) });
        let means: Vec<f64> = (0..4).map(|k| base.x().column(k).mean()).collect();
        assert_eq!(d.y()[100], 30.0);
        assert_eq!(d.x().row(100).iter().copied().collect::<Vec<_>>(), vec![1.0, means[1], 20.0, means[3]]);
        assert_eq!(d.y()[101], 0.0);
        assert_eq!(d.x().row(101).iter().copied().collect::<Vec<_>>(), vec![1.0, 20.0, means[2], means[3]]);
        // the first n rows are untouched
        for k in 0..4 {
            let head = d.x().column(k).rows(0, 100).mean();
            assert_eq!(head, means[k]);
        }

        let (same, none) = inject_outliers(&base, &quick(1, 1));
        assert_eq!(same, base);
        assert_eq!(none, InjectedRows::default());
        let (_, only_star) = inject_outliers(&base, &quick(2, 1));
        assert_eq!(only_star.star, Some(100));
    }

    #[test]
    fn median_fit_recovers_design_coefficients() {
        let spec = ScenarioSpec { n: 300, ..quick(1, 1) };
        let d = generate_base_data(&spec, &mut RngStream::new(3, 0)).unwrap();
        let cfg = FitConfig::new(QuantileLevel::new(0.5).unwrap(), PriorSpec::default_for(4)).with_seed(4, 1);
        let b = run_gibbs(&d, &cfg).unwrap().beta_mean();
        assert!(b[0].abs() < 0.2, "{b}");
        for k in 1..4 {
            assert!((b[k] - TRUE_BETAS[k]).abs() < 0.1, "{b}");
        }
    }

    #[test]
    fn study_is_deterministic_and_targets_planted_rows() {
        let spec = ScenarioSpec {
            taus: vec![QuantileLevel::new(0.5).unwrap()],
            ..quick(3, 3)
        };
        let a = run_study(&spec).unwrap();
        let b = run_study(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.failures.is_empty());
        for r in &a.records {
            assert_eq!(r.target(Target::Ast).unwrap().row, 100);
            assert_eq!(r.target(Target::Star).unwrap().row, 101);
            assert!(r.reference < 100);
            assert_eq!(r.base_probabilities.len(), 100);
        }
        for row in &a.rows {
            assert!(row.spread.q025 <= row.spread.median && row.spread.median <= row.spread.q975);
        }
        assert!(a.row(0.5, "ast", Measure::Probability).is_some());
        assert!(a.row(0.5, "base", Measure::BaseMaxProbability).is_some());
    }

    #[test]
    fn scenario_one_has_only_base_rows() {
        let spec = ScenarioSpec {
            taus: vec![QuantileLevel::new(0.5).unwrap()],
            ..quick(1, 2)
        };
        let s = run_study(&spec).unwrap();
        assert!(s.rows.iter().all(|r| r.target == "base"));
        assert!(s.records.iter().all(|r| r.targets.is_empty()));
    }

    #[test]
    fn spread_is_ordered() {
        let s = Spread::of(&[3.0, 1.0, 2.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert!(s.q025 <= s.median && s.median <= s.q975);
    }
}
