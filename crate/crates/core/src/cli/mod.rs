//! Command-line front end: `fit`, `diagnose`, `simulate` and `calibrate`.
//!
//! Every command writes its tables as CSV into `--out` together with a
//! `manifest.json` recording the settings it ran with.

pub mod io;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gibbs::{
    run_gibbs, summarize_chains, FitConfig, PosteriorChains, PriorSpec, DEFAULT_BETA_VARIANCE, DEFAULT_BURN_IN,
    DEFAULT_ITERATIONS, DEFAULT_SIGMA_RATE, DEFAULT_SIGMA_SHAPE, DEFAULT_THIN,
};
use crate::outlier::{build_report, KdeSpec, KlMode, ProbRule, DEFAULT_FLAG_THRESHOLD};
use crate::sim::{
    run_calibration_study, run_study, ChainSettings, ReplicationSummary, ScenarioSpec, CALIBRATION_SIZES,
    CALIBRATION_TAUS, OUTLIER_TAUS,
};
use io::{fmt_num, load_csv, prepare_output_dir, tau_file_name, write_json, CsvTable};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BQR_THREADS";
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_CREDIBLE_LEVEL: f64 = 0.95;

#[derive(Debug, Parser)]
#[command(name = "bqr", version, about = "Bayesian quantile regression and latent-variable outlier diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Fit,
    Diagnose,
    Simulate,
    Calibrate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one chain per quantile and summarize the coefficients and scale.
    Fit(Options),
    /// Fit and score every observation as a potential outlier.
    Diagnose(Options),
    /// Run the planted-outlier simulation study for one scenario.
    Simulate(Options),
    /// Run the no-outlier calibration study.
    Calibrate(Options),
}

impl Command {
    pub fn kind(&self) -> CommandKind {
        match self {
            Command::Fit(_) => CommandKind::Fit,
            Command::Diagnose(_) => CommandKind::Diagnose,
            Command::Simulate(_) => CommandKind::Simulate,
            Command::Calibrate(_) => CommandKind::Calibrate,
        }
    }

    pub fn options(&self) -> &Options {
        match self {
            Command::Fit(o) | Command::Diagnose(o) | Command::Simulate(o) | Command::Calibrate(o) => o,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbRuleArg {
    Pairwise,
    Maxrule,
}

impl From<ProbRuleArg> for ProbRule {
    fn from(a: ProbRuleArg) -> Self {
        match a {
            ProbRuleArg::Pairwise => ProbRule::Pairwise,
            ProbRuleArg::Maxrule => ProbRule::MaxRule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlModeArg {
    All,
    Single,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Options {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Name of the response column.
    #[arg(long)]
    pub response: Option<String>,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long = "burnin", default_value_t = DEFAULT_BURN_IN)]
    pub burn_in: usize,
    #[arg(long, default_value_t = DEFAULT_THIN)]
    pub thin: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BETA_VARIANCE)]
    pub prior_beta_var: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_SHAPE)]
    pub prior_sigma_shape: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_RATE)]
    pub prior_sigma_rate: f64,
    #[arg(long, value_enum, default_value_t = ProbRuleArg::Maxrule)]
    pub prob_rule: ProbRuleArg,
    #[arg(long, value_enum, default_value_t = KlModeArg::All)]
    pub kl_mode: KlModeArg,
    /// 1-based row used as the reference with `--kl-mode single`
    /// (default: the row with the median posterior-mean latent value).
    #[arg(long)]
    pub kl_reference: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_FLAG_THRESHOLD)]
    pub flag_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_CREDIBLE_LEVEL)]
    pub credible_level: f64,
    /// Also write the full draw matrices (`fit` only).
    #[arg(long)]
    pub draws: bool,
    #[arg(long, default_value = "bqr-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4), default_value_t = 4)]
    pub scenario: u8,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    /// Sample sizes for `calibrate`.
    #[arg(long = "sizes", value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
}

/// Fully resolved settings of one invocation; written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: CommandKind,
    pub input_path: Option<PathBuf>,
    pub response: Option<String>,
    pub intercept: bool,
    pub tau_list: Vec<QuantileLevel>,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub prior_beta_var: f64,
    pub prior_sigma_shape: f64,
    pub prior_sigma_rate: f64,
    pub prob_rule: ProbRule,
    pub kl_mode: KlModeArg,
    pub kl_reference: Option<usize>,
    pub flag_threshold: f64,
    pub credible_level: f64,
    pub write_draws: bool,
    pub scenario: Option<u8>,
    pub replications: Option<usize>,
    pub sample_sizes: Option<Vec<usize>>,
    pub kde: KdeSpec,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn from_command(cmd: &Command) -> Result<Self> {
        let kind = cmd.kind();
        let o = cmd.options();
        let default_taus: &[f64] = match kind {
            CommandKind::Fit | CommandKind::Diagnose => &[0.5],
            CommandKind::Simulate => &OUTLIER_TAUS,
            CommandKind::Calibrate => &CALIBRATION_TAUS,
        };
        let raw = o.taus.clone().unwrap_or_else(|| default_taus.to_vec());
        let mut tau_list = Vec::with_capacity(raw.len());
        for (k, &t) in raw.iter().enumerate() {
            if raw[..k].contains(&t) {
                return Err(Error::InvalidParameter(format!("quantile {t} listed twice")));
            }
            tau_list.push(QuantileLevel::new(t)?);
        }
        if tau_list.is_empty() {
            return Err(Error::InvalidParameter("no quantile levels given".into()));
        }
        let needs_data = matches!(kind, CommandKind::Fit | CommandKind::Diagnose);
        if needs_data && (o.input.is_none() || o.response.is_none()) {
            return Err(Error::InvalidParameter(
                "--input and --response are required for fit and diagnose".into(),
            ));
        }
        if !(o.flag_threshold >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "flag threshold must be non-negative, got {}",
                o.flag_threshold
            )));
        }
        if !(o.credible_level > 0.0 && o.credible_level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "credible level must lie in (0, 1), got {}",
                o.credible_level
            )));
        }
        let simulating = matches!(kind, CommandKind::Simulate | CommandKind::Calibrate);
        if simulating && o.reps == 0 {
            return Err(Error::InvalidParameter("--reps must be positive".into()));
        }
        // validates the prior hyperparameters
        PriorSpec::isotropic(1, o.prior_beta_var, o.prior_sigma_shape, o.prior_sigma_rate)?;
        Ok(Self {
            command: kind,
            input_path: if needs_data { o.input.clone() } else { None },
            response: if needs_data { o.response.clone() } else { None },
            intercept: !o.no_intercept,
            tau_list,
            iterations: o.iterations,
            burn_in: o.burn_in,
            thin: o.thin,
            seed: o.seed,
            prior_beta_var: o.prior_beta_var,
            prior_sigma_shape: o.prior_sigma_shape,
            prior_sigma_rate: o.prior_sigma_rate,
            prob_rule: o.prob_rule.into(),
            kl_mode: o.kl_mode,
            kl_reference: o.kl_reference,
            flag_threshold: o.flag_threshold,
            credible_level: o.credible_level,
            write_draws: o.draws,
            scenario: (kind == CommandKind::Simulate).then_some(o.scenario),
            replications: simulating.then_some(o.reps),
            sample_sizes: (kind == CommandKind::Calibrate)
                .then(|| o.sample_sizes.clone().unwrap_or_else(|| CALIBRATION_SIZES.to_vec())),
            kde: KdeSpec::default(),
            output_dir: o.out.clone(),
        })
    }

    fn chain(&self) -> ChainSettings {
        ChainSettings {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thin: self.thin,
        }
    }

    fn fit_config(&self, p: usize, tau_index: usize) -> Result<FitConfig> {
        let prior = PriorSpec::isotropic(p, self.prior_beta_var, self.prior_sigma_shape, self.prior_sigma_rate)?;
        Ok(FitConfig::new(self.tau_list[tau_index], prior)
            .with_chain(self.iterations, self.burn_in, self.thin)
            .with_seed(self.seed, tau_index as u64))
    }

    fn load(&self) -> Result<Dataset> {
        let path = self.input_path.as_deref().expect("checked at construction");
        let response = self.response.as_deref().expect("checked at construction");
        load_csv(path, response, self.intercept)
    }
}

fn thread_pool(default_workers: usize) -> Result<rayon::ThreadPool> {
    let workers = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => default_workers.max(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Fits every quantile of the manifest, fanning out across the pool.
fn fit_all(manifest: &RunManifest, data: &Dataset) -> Result<Vec<PosteriorChains>> {
    let pool = thread_pool(manifest.tau_list.len())?;
    pool.install(|| {
        (0..manifest.tau_list.len())
            .into_par_iter()
            .map(|k| run_gibbs(data, &manifest.fit_config(data.n_coef(), k)?))
            .collect()
    })
}

/// Runs the command and returns the files it wrote.
pub fn run(cmd: &Command) -> Result<Vec<PathBuf>> {
    let manifest = RunManifest::from_command(cmd)?;
    prepare_output_dir(&manifest.output_dir)?;
    match manifest.command {
        CommandKind::Fit => cmd_fit(&manifest),
        CommandKind::Diagnose => cmd_diagnose(&manifest),
        CommandKind::Simulate => cmd_simulate(&manifest),
        CommandKind::Calibrate => cmd_calibrate(&manifest),
    }
}

fn finish(manifest: &RunManifest, mut written: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let path = manifest.output_dir.join("manifest.json");
    write_json(&path, manifest)?;
    written.push(path);
    Ok(written)
}

fn write_table(dir: &Path, name: &str, table: &CsvTable, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    table.write(&path)?;
    written.push(path);
    Ok(())
}

pub fn cmd_fit(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let data = manifest.load()?;
    let fits = fit_all(manifest, &data)?;
    let dir = &manifest.output_dir;
    let mut written = Vec::new();

    let mut beta = CsvTable::new(["tau", "parameter", "mean", "median", "lower", "upper"]);
    let mut sigma = CsvTable::new(["tau", "mean", "median", "lower", "upper"]);
    for chains in &fits {
        let s = summarize_chains(chains, manifest.credible_level)?;
        let tau = fmt_num(s.tau.value());
        for b in &s.beta {
            beta.push(vec![
                tau.clone(),
                b.name.clone(),
                fmt_num(b.mean),
                fmt_num(b.median),
                fmt_num(b.lower),
                fmt_num(b.upper),
            ]);
        }
        let g = &s.sigma;
        sigma.push(vec![tau, fmt_num(g.mean), fmt_num(g.median), fmt_num(g.lower), fmt_num(g.upper)]);
    }
    write_table(dir, "beta_summary.csv", &beta, &mut written)?;
    write_table(dir, "sigma_summary.csv", &sigma, &mut written)?;

    if manifest.write_draws {
        for chains in &fits {
            let mut header = vec!["draw".to_string()];
            header.extend(chains.column_names.iter().cloned());
            header.push("sigma".into());
            let mut table = CsvTable::new(header);
            for l in 0..chains.retained() {
                let mut row = vec![(l + 1).to_string()];
                row.extend(chains.beta().row(l).iter().map(|&b| fmt_num(b)));
                row.push(fmt_num(chains.sigma()[l]));
                table.push(row);
            }
            write_table(dir, &tau_file_name("draws", chains.tau.value()), &table, &mut written)?;
        }
    }
    finish(manifest, written)
}

/// Row whose latent chain has the median posterior mean.
fn typical_row(chains: &PosteriorChains) -> usize {
    let mut means: Vec<(f64, usize)> = (0..chains.n_obs())
        .map(|i| {
            let c = chains.latent_chain(i);
            (c.iter().sum::<f64>() / c.len() as f64, i)
        })
        .collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    means[means.len() / 2].1
}

pub fn cmd_diagnose(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let data = manifest.load()?;
    if let Some(r) = manifest.kl_reference {
        if r == 0 || r > data.n_obs() {
            return Err(Error::InvalidParameter(format!(
                "--kl-reference must be a row between 1 and {}",
                data.n_obs()
            )));
        }
    }
    let fits = fit_all(manifest, &data)?;
    let pool = thread_pool(manifest.tau_list.len())?;
    let reports = pool.install(|| {
        fits.iter()
            .map(|chains| {
                let mode = match manifest.kl_mode {
                    KlModeArg::All => KlMode::AllOthers,
                    KlModeArg::Single => KlMode::SingleReference(
                        manifest.kl_reference.map(|r| r - 1).unwrap_or_else(|| typical_row(chains)),
                    ),
                };
                build_report(chains, manifest.prob_rule, mode, &manifest.kde, manifest.flag_threshold)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut written = Vec::new();
    for report in &reports {
        let mut table = CsvTable::new(["row_index", "probability", "mean_kl", "flagged"]);
        for i in 0..report.prob.len() {
            table.push(vec![
                (i + 1).to_string(),
                fmt_num(report.prob[i]),
                fmt_num(report.kl[i]),
                report.flagged[i].to_string(),
            ]);
        }
        write_table(
            &manifest.output_dir,
            &tau_file_name("outliers", report.tau.value()),
            &table,
            &mut written,
        )?;
    }
    finish(manifest, written)
}

fn spread_cells(s: &crate::sim::Spread) -> [String; 4] {
    [fmt_num(s.mean), fmt_num(s.median), fmt_num(s.q025), fmt_num(s.q975)]
}

fn write_study(dir: &Path, study: &ReplicationSummary, written: &mut Vec<PathBuf>) -> Result<()> {
    let scenario = study.spec.scenario_number().to_string();

    let mut summary = CsvTable::new(["scenario", "tau", "target", "measure", "mean", "median", "q2.5", "q97.5"]);
    for row in &study.rows {
        let mut cells = vec![
            scenario.clone(),
            fmt_num(row.tau.value()),
            row.target.clone(),
            row.measure.label().to_string(),
        ];
        cells.extend(spread_cells(&row.spread));
        summary.push(cells);
    }
    write_table(dir, "summary.csv", &summary, written)?;

    let mut reps = CsvTable::new([
        "scenario",
        "replication",
        "tau",
        "reference_row",
        "base_mean_probability",
        "base_max_probability",
    ]);
    let mut targets = CsvTable::new([
        "scenario",
        "replication",
        "tau",
        "target",
        "row_index",
        "probability",
        "kl",
        "relative_kl",
    ]);
    let mut header = vec!["scenario".to_string(), "replication".into(), "tau".into()];
    header.extend(["intercept", "x1", "x2", "x3"].map(String::from));
    let mut betas = CsvTable::new(header);
    for r in &study.records {
        let rep = (r.replication + 1).to_string();
        let tau = fmt_num(r.tau.value());
        reps.push(vec![
            scenario.clone(),
            rep.clone(),
            tau.clone(),
            (r.reference + 1).to_string(),
            fmt_num(r.base_mean_probability()),
            fmt_num(r.base_max_probability()),
        ]);
        for t in &r.targets {
            targets.push(vec![
                scenario.clone(),
                rep.clone(),
                tau.clone(),
                t.target.label().to_string(),
                (t.row + 1).to_string(),
                fmt_num(t.probability),
                fmt_num(t.kl),
                fmt_num(t.relative_kl),
            ]);
        }
        let mut row = vec![scenario.clone(), rep, tau];
        row.extend(r.beta_hat.iter().map(|&b| fmt_num(b)));
        betas.push(row);
    }
    write_table(dir, "replications.csv", &reps, written)?;
    write_table(dir, "targets.csv", &targets, written)?;
    write_table(dir, "beta_hat.csv", &betas, written)?;

    let mut failures = CsvTable::new(["replication", "error"]);
    for (r, e) in &study.failures {
        failures.push(vec![(r + 1).to_string(), e.clone()]);
    }
    write_table(dir, "failures.csv", &failures, written)
}

pub fn cmd_simulate(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let spec = ScenarioSpec {
        taus: manifest.tau_list.clone(),
        chain: manifest.chain(),
        prob_rule: manifest.prob_rule,
        kde: manifest.kde,
        ..ScenarioSpec::scenario(
            manifest.scenario.expect("set for simulate"),
            manifest.replications.expect("set for simulate"),
            manifest.seed,
        )?
    };
    let pool = thread_pool(manifest.tau_list.len())?;
    let study = pool.install(|| run_study(&spec))?;
    let mut written = Vec::new();
    write_study(&manifest.output_dir, &study, &mut written)?;
    finish(manifest, written)
}

pub fn cmd_calibrate(manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    let sizes = manifest.sample_sizes.clone().expect("set for calibrate");
    let pool = thread_pool(manifest.tau_list.len())?;
    let summary = pool.install(|| {
        run_calibration_study(
            &sizes,
            &manifest.tau_list,
            manifest.replications.expect("set for calibrate"),
            manifest.seed,
            manifest.chain(),
            manifest.prob_rule,
        )
    })?;
    let dir = &manifest.output_dir;
    let mut written = Vec::new();

    let mut cells = CsvTable::new([
        "n",
        "tau",
        "mean_probability_mean",
        "mean_probability_median",
        "mean_probability_q2.5",
        "mean_probability_q97.5",
        "max_probability_mean",
        "max_probability_median",
        "max_probability_q2.5",
        "max_probability_q97.5",
        "share_max_below_threshold",
    ]);
    for c in &summary.cells {
        let mut row = vec![c.n.to_string(), fmt_num(c.tau.value())];
        row.extend(spread_cells(&c.mean_probability));
        row.extend(spread_cells(&c.max_probability));
        row.push(fmt_num(c.share_max_below_threshold));
        cells.push(row);
    }
    write_table(dir, "calibration_summary.csv", &cells, &mut written)?;

    let mut reps = CsvTable::new(["n", "replication", "tau", "mean_probability", "max_probability"]);
    for study in &summary.studies {
        for r in &study.records {
            reps.push(vec![
                study.spec.n.to_string(),
                (r.replication + 1).to_string(),
                fmt_num(r.tau.value()),
                fmt_num(r.base_mean_probability()),
                fmt_num(r.base_max_probability()),
            ]);
        }
    }
    write_table(dir, "calibration_replications.csv", &reps, &mut written)?;

    let mut example = CsvTable::new(["n", "tau", "replication", "row_index", "probability"]);
    for &n in &sizes {
        for tau in &manifest.tau_list {
            if let Some(probs) = summary.example_probabilities(n, tau.value()) {
                for (i, p) in probs.iter().enumerate() {
                    example.push(vec![
                        n.to_string(),
                        fmt_num(tau.value()),
                        (summary.example_replication + 1).to_string(),
                        (i + 1).to_string(),
                        fmt_num(*p),
                    ]);
                }
            }
        }
    }
    write_table(dir, "example_probabilities.csv", &example, &mut written)?;
    finish(manifest, written)
}

/// One-line JSON error record for stderr.
pub fn error_record(err: &Error) -> String {
    serde_json::json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
    })
    .to_string()
}
