//! Reproduction tables: structural-sparsity rates, the model ablation and
//! the regularizer comparison. Each table has a full and a fast budget that
//! differ only in trial, seed and epoch counts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mcc, recovered_sources};
use crate::linalg::mean_var;
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::support::{ss_rate_monte_carlo, ss_source_probability_analytic, RateKind};
use crate::synthetic::{generate, GenMode, GenSpec};
use crate::training::{fit, TrainConfig};
use crate::derive_seed;

/// Trial, seed and epoch counts for one reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub trials: usize,
    pub seeds: usize,
    pub epochs: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Self::full()
    }
}

impl Budget {
    pub fn full() -> Self {
        Self {
            trials: 10_000,
            seeds: 5,
            epochs: ABLATION_EPOCHS,
        }
    }

    pub fn fast() -> Self {
        Self {
            trials: 1_000,
            seeds: 2,
            epochs: 5,
        }
    }
}

/// Grid of undercompleteness ratios `m / n`.
pub const FIG3_RATIOS: [usize; 4] = [1, 2, 3, 4];
pub const FIG3_NS: [usize; 4] = [5, 10, 15, 20];
pub const FIG4_NS: [usize; 4] = [5, 10, 15, 20];
/// Bernoulli density of random supports.
pub const SUPPORT_DENSITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub m: usize,
    pub n: usize,
    pub ratio: usize,
    pub p: f64,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub const RATE_HEADER: &str = "m,n,ratio,p,trials,rate,ci_low,ci_high";

impl RateRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            self.m, self.n, self.ratio, self.p, self.trials, self.rate, self.ci_low, self.ci_high
        )
    }
}

/// Rate of random supports where structural sparsity holds for every source.
pub fn fig3(ns: &[usize], ratios: &[usize], trials: usize, seed: u64) -> Result<Vec<RateRow>> {
    let cells: Vec<(usize, usize)> = ns.iter().flat_map(|&n| ratios.iter().map(move |&r| (n, r))).collect();
    cells
        .into_iter()
        .enumerate()
        .map(|(i, (n, ratio))| {
            let est = ss_rate_monte_carlo(n * ratio, n, SUPPORT_DENSITY, trials, derive_seed(seed, i as u64), RateKind::AllSources)?;
            Ok(RateRow {
                m: n * ratio,
                n,
                ratio,
                p: SUPPORT_DENSITY,
                trials,
                rate: est.rate,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
            })
        })
        .collect()
}

/// Per-source and all-source rates for square supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSourceRow {
    pub n: usize,
    pub trials: usize,
    pub per_source: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub analytic: f64,
    pub all_sources: f64,
}

pub const PER_SOURCE_HEADER: &str = "n,trials,per_source,ci_low,ci_high,analytic,all_sources";

impl PerSourceRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.n, self.trials, self.per_source, self.ci_low, self.ci_high, self.analytic, self.all_sources
        )
    }
}

pub fn fig4(ns: &[usize], trials: usize, seed: u64) -> Result<Vec<PerSourceRow>> {
    ns.iter()
        .enumerate()
        .map(|(i, &n)| {
            let s = derive_seed(seed, 2 * i as u64);
            let per = ss_rate_monte_carlo(n, n, SUPPORT_DENSITY, trials, s, RateKind::MeanPerSource)?;
            let all = ss_rate_monte_carlo(n, n, SUPPORT_DENSITY, trials, derive_seed(seed, 2 * i as u64 + 1), RateKind::AllSources)?;
            Ok(PerSourceRow {
                n,
                trials,
                per_source: per.rate,
                ci_low: per.ci_low,
                ci_high: per.ci_high,
                analytic: ss_source_probability_analytic(n, n),
                all_sources: all.rate,
            })
        })
        .collect()
}

/// Epochs per ablation run.
pub const ABLATION_EPOCHS: usize = 200;
/// Observation noise added to the ablation datasets.
pub const ABLATION_NOISE: f64 = 0.05;
pub const ABLATION_LAMBDAS: [f64; 3] = [0.001, 0.01, 0.1];

/// One training run of an ablation-style study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub mode: GenMode,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub penalty: PenaltyConfig,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub model: GenMode,
    pub n: usize,
    pub penalty: PenaltyKind,
    pub lambda: f64,
    pub mcc: f64,
}

pub const RUN_HEADER: &str = "run,seed,model,n,penalty,lambda,mcc";

fn mode_name(mode: GenMode) -> &'static str {
    match mode {
        GenMode::Ucss => "UCSS",
        GenMode::Mixed => "Mixed",
        GenMode::Grouped => "Grouped",
        GenMode::Base => "Base",
    }
}

fn kind_name(kind: PenaltyKind) -> &'static str {
    match kind {
        PenaltyKind::L1 => "l1",
        PenaltyKind::Scad => "scad",
        PenaltyKind::Mcp => "mcp",
    }
}

impl RunRecord {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6}",
            self.run,
            self.seed,
            mode_name(self.model),
            self.n,
            kind_name(self.penalty),
            self.lambda,
            self.mcc
        )
    }
}

/// Dataset for a run: the seed picks both the support and the sources.
pub fn run_dataset_spec(run: &RunSpec) -> Result<GenSpec> {
    let spec = match run.mode {
        GenMode::Ucss => GenSpec::ucss(run.n, run.m, run.samples, run.seed)?,
        GenMode::Mixed => GenSpec::mixed(run.n, run.m, run.samples, run.seed)?,
        GenMode::Base => GenSpec::base(run.n, run.m, run.samples, run.seed)?,
        GenMode::Grouped => {
            return Err(Error::InvalidParameter("grouped runs need explicit block sizes".into()));
        }
    };
    Ok(spec.with_noise(run.noise_std))
}

/// Generates the dataset, fits the flow and scores the `n` latents that
/// contribute most to the observations against the true sources.
pub fn run_once(run: &RunSpec) -> Result<f64> {
    let spec = run_dataset_spec(run)?;
    let (ds, _) = generate(&spec)?;
    let cfg = TrainConfig {
        epochs: run.epochs,
        penalty: run.penalty,
        seed: run.seed,
        ..TrainConfig::default()
    };
    let fitted = fit(&cfg, &ds)?;
    let est = recovered_sources(&fitted.model, &ds.observations, run.n)?;
    Ok(mcc(&ds.sources, &est)?.mcc)
}

/// Runs every spec in parallel, keeping input order.
pub fn run_all(runs: &[RunSpec]) -> Result<Vec<RunRecord>> {
    runs.par_iter()
        .enumerate()
        .map(|(i, r)| {
            let score = run_once(r)?;
            log::info!("run {i} {} seed {} λ {} → MCC {score:.3}", mode_name(r.mode), r.seed, r.penalty.lambda);
            Ok(RunRecord {
                run: i,
                seed: r.seed,
                model: r.mode,
                n: r.n,
                penalty: r.penalty.kind,
                lambda: r.penalty.lambda,
                mcc: score,
            })
        })
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        (v[k - 1] + v[k]) / 2.0
    }
}

/// Median MCC per `(model, n, penalty)` at the best `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: GenMode,
    pub n: usize,
    pub penalty: PenaltyKind,
    pub best_lambda: f64,
    pub median_mcc: f64,
    pub mean_mcc: f64,
    pub std_mcc: f64,
    pub seeds: usize,
}

pub const SUMMARY_HEADER: &str = "model,n,penalty,best_lambda,median_mcc,mean_mcc,std_mcc,seeds";

impl SummaryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            mode_name(self.model),
            self.n,
            kind_name(self.penalty),
            self.best_lambda,
            self.median_mcc,
            self.mean_mcc,
            self.std_mcc,
            self.seeds
        )
    }
}

/// Groups records by `(model, n, penalty)` and keeps the `λ` with the
/// largest median over seeds.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(GenMode, usize, PenaltyKind)> = Vec::new();
    for r in records {
        let k = (r.model, r.n, r.penalty);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(model, n, penalty)| {
            let mut lambdas: Vec<f64> = Vec::new();
            for r in records.iter().filter(|r| (r.model, r.n, r.penalty) == (model, n, penalty)) {
                if !lambdas.contains(&r.lambda) {
                    lambdas.push(r.lambda);
                }
            }
            let per_lambda: Vec<(f64, Vec<f64>)> = lambdas
                .into_iter()
                .map(|lam| {
                    let scores = records
                        .iter()
                        .filter(|r| (r.model, r.n, r.penalty) == (model, n, penalty) && r.lambda == lam)
                        .map(|r| r.mcc)
                        .collect();
                    (lam, scores)
                })
                .collect();
            let (lam, scores) = per_lambda
                .into_iter()
                .max_by(|a, b| median(&a.1).total_cmp(&median(&b.1)))
                .expect("at least one record per key");
            let (mean, var) = mean_var(&scores);
            SummaryRow {
                model,
                n,
                penalty,
                best_lambda: lam,
                median_mcc: median(&scores),
                mean_mcc: mean,
                std_mcc: var.sqrt(),
                seeds: scores.len(),
            }
        })
        .collect()
}

/// Settings shared by the ablation and the regularizer comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub ns: Vec<usize>,
    pub ratio: usize,
    pub samples: usize,
    pub lambdas: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            ns: vec![2, 4, 6],
            ratio: 2,
            samples: 2000,
            lambdas: ABLATION_LAMBDAS.to_vec(),
            noise_std: ABLATION_NOISE,
            seed: 0,
        }
    }
}

fn study_runs(cfg: &StudyConfig, budget: &Budget, modes: &[GenMode], kinds: &[PenaltyKind]) -> Vec<RunSpec> {
    let mut runs = Vec::new();
    for &n in &cfg.ns {
        for &mode in modes {
            for &kind in kinds {
                for &lam in &cfg.lambdas {
                    for s in 0..budget.seeds as u64 {
                        runs.push(RunSpec {
                            mode,
                            n,
                            m: cfg.ratio * n,
                            samples: cfg.samples,
                            seed: cfg.seed + s,
                            noise_std: cfg.noise_std,
                            penalty: PenaltyConfig::with_default_knob(kind, lam),
                            epochs: budget.epochs,
                        });
                    }
                }
            }
        }
    }
    runs
}

/// UCSS, Mixed and Base runs under the MCP penalty.
pub fn ablation_runs(cfg: &StudyConfig, budget: &Budget) -> Vec<RunSpec> {
    study_runs(cfg, budget, &[GenMode::Ucss, GenMode::Mixed, GenMode::Base], &[PenaltyKind::Mcp])
}

/// UCSS runs under each penalty kind.
pub fn regularizer_runs(cfg: &StudyConfig, budget: &Budget) -> Vec<RunSpec> {
    study_runs(cfg, budget, &[GenMode::Ucss], &[PenaltyKind::L1, PenaltyKind::Scad, PenaltyKind::Mcp])
}

/// Records and their summary as two CSV tables.
pub fn study_csv(records: &[RunRecord]) -> (String, String) {
    let mut runs = String::from(RUN_HEADER);
    for r in records {
        let _ = write!(runs, "\n{}", r.csv());
    }
    runs.push('\n');
    let mut summary = String::from(SUMMARY_HEADER);
    for s in summarize(records) {
        let _ = write!(summary, "\n{}", s.csv());
    }
    summary.push('\n');
    (runs, summary)
}

pub fn rate_csv(rows: &[RateRow]) -> String {
    let mut out = String::from(RATE_HEADER);
    for r in rows {
        let _ = write!(out, "\n{}", r.csv());
    }
    out.push('\n');
    out
}

pub fn per_source_csv(rows: &[PerSourceRow]) -> String {
    let mut out = String::from(PER_SOURCE_HEADER);
    for r in rows {
        let _ = write!(out, "\n{}", r.csv());
    }
    out.push('\n');
    out
}
