//! Ground-truth generators: sources, structured mixings, audits, and the
//! on-disk dataset format.
//!
//! A [`GenSpec`] fixes everything needed to regenerate a dataset: the
//! source layout `[s_I, s_D]`, per-domain parameters of `s_D`, the Jacobian
//! support of the mixing, the mixing architecture and the seed.

mod audit;
mod io;
mod mixing;
mod sources;

pub use audit::{variability_audit, VariabilityReport};
pub use io::{export_dataset, import_dataset, metadata_path, DatasetMetadata, GENERATOR_NAME};
pub use mixing::{
    build_structured_mixing, mix, verify_full_column_rank, verify_support, MixingConfig, MixingNetwork, ObservationMap,
    SUPPORT_RETRY_BUDGET, SUPPORT_TAU,
};
pub use sources::{draw_domain_params, sample_dependent_sources, sample_independent_sources, sample_sources};

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::support::{generic_rank, ss_report, SupportMatrix};
use crate::{derive_seed, seeded_rng};

/// Which assumption set a dataset is generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenMode {
    /// All sources independent; the support satisfies structural sparsity.
    #[serde(rename = "UCSS")]
    Ucss,
    /// Independent `s_I` with a sparse support, plus `s_D` conditionally
    /// independent given `u` and connected to every observation.
    Mixed,
    /// As `Mixed`, with `s_D` split into correlated blocks.
    Grouped,
    /// Independent sources under a dense (all-ones) support.
    Base,
}

impl std::str::FromStr for GenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ucss" => Ok(GenMode::Ucss),
            "mixed" => Ok(GenMode::Mixed),
            "grouped" => Ok(GenMode::Grouped),
            "base" => Ok(GenMode::Base),
            other => Err(Error::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

/// Gaussian parameters of `s_D` under one domain label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub mean: Vec<f64>,
    /// Row-major `n_D × n_D` covariance.
    pub cov: Vec<Vec<f64>>,
}

impl DomainParams {
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(d, d, |i, j| self.cov[i][j])
    }

    pub fn diagonal(mean: Vec<f64>, var: &[f64]) -> Self {
        let d = var.len();
        let cov = (0..d).map(|i| (0..d).map(|j| if i == j { var[i] } else { 0.0 }).collect()).collect();
        Self { mean, cov }
    }
}

/// Complete, reproducible description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub mode: GenMode,
    pub n_i: usize,
    pub n_d: usize,
    /// Sizes of contiguous blocks partitioning the `s_D` indices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<usize>>,
    pub support: SupportMatrix,
    /// Variances of the `s_I` coordinates.
    pub invariant_var: Vec<f64>,
    /// One entry per domain label; `u` indexes this list.
    pub u_values: Vec<DomainParams>,
    pub sample_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub mixing: MixingConfig,
    /// Std of isotropic Gaussian noise added to `x`.
    #[serde(default)]
    pub noise_std: f64,
}

/// Lower end of the variance range for Gaussian sources.
pub const VAR_LOW: f64 = 0.5;
/// Upper end of the variance range for Gaussian sources.
pub const VAR_HIGH: f64 = 3.0;
/// Attempts at drawing a support that meets the mode's requirements.
const SUPPORT_DRAWS: usize = 10_000;

impl GenSpec {
    pub fn n(&self) -> usize {
        self.n_i + self.n_d
    }

    pub fn m(&self) -> usize {
        self.support.rows()
    }

    pub fn domains(&self) -> usize {
        self.u_values.len()
    }

    /// Minimum number of domain labels the mode needs.
    pub fn required_domains(&self) -> usize {
        match self.mode {
            GenMode::Mixed => self.n_d + 1,
            GenMode::Grouped => 2 * self.n_d + 1,
            GenMode::Ucss | GenMode::Base => 1,
        }
    }

    /// Structural sparsity over the sources the mode claims it for.
    pub fn sparsity_holds(&self) -> bool {
        match self.mode {
            GenMode::Ucss => ss_report(&self.support).all_hold,
            GenMode::Mixed | GenMode::Grouped => {
                self.n_i == 0
                    || self
                        .support
                        .restrict_cols(self.n_i)
                        .map(|s| ss_report(&s).all_hold)
                        .unwrap_or(false)
            }
            GenMode::Base => false,
        }
    }

    /// Shape and parameter checks. Sparsity is audited separately via
    /// [`GenSpec::sparsity_holds`].
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidParameter("at least one source is required".into()));
        }
        if self.support.cols() != n {
            return Err(Error::shape(format!("support with {n} columns"), format!("{}", self.support.cols())));
        }
        if self.m() < n {
            return Err(Error::InvalidParameter(format!("m={} < n={n}", self.m())));
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidParameter("sample_count must be ≥ 1".into()));
        }
        if self.invariant_var.len() != self.n_i || self.invariant_var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("invariant_var needs n_I positive entries".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidParameter(format!("noise_std={} must be ≥ 0", self.noise_std)));
        }
        if let Some(groups) = &self.groups {
            if groups.iter().any(|&g| g == 0) || groups.iter().sum::<usize>() != self.n_d {
                return Err(Error::InvalidParameter(format!(
                    "groups {groups:?} do not partition {} dependent sources",
                    self.n_d
                )));
            }
        }
        if matches!(self.mode, GenMode::Ucss | GenMode::Base) && self.n_d != 0 {
            return Err(Error::InvalidParameter(format!("{:?} mode has no dependent sources", self.mode)));
        }
        if self.u_values.is_empty() || self.u_values.len() < self.required_domains() {
            return Err(Error::InvalidParameter(format!(
                "{:?} mode with n_D={} needs ≥ {} domain labels, got {}",
                self.mode,
                self.n_d,
                self.required_domains(),
                self.u_values.len()
            )));
        }
        for (k, p) in self.u_values.iter().enumerate() {
            if p.mean.len() != self.n_d || p.cov.len() != self.n_d || p.cov.iter().any(|r| r.len() != self.n_d) {
                return Err(Error::shape(format!("domain {k} parameters over {} sources", self.n_d), "other"));
            }
            let c = p.cov_matrix();
            if self.n_d > 0 && ((&c - c.transpose()).amax() > 1e-12 || c.clone().cholesky().is_none()) {
                return Err(Error::InvalidParameter(format!("domain {k} covariance is not symmetric positive definite")));
            }
        }
        for i in 0..self.m() {
            if self.support.row_support(i).is_empty() {
                return Err(Error::InvalidParameter(format!("observation {i} has no parent source")));
            }
        }
        self.mixing.validate()
    }

    /// Validation plus the mode's structural assumptions.
    pub fn validate_assumptions(&self) -> Result<()> {
        self.validate()?;
        if matches!(self.mode, GenMode::Base) {
            return Ok(());
        }
        if !self.sparsity_holds() {
            return Err(Error::AssumptionViolated(format!("{:?} support fails structural sparsity", self.mode)));
        }
        if generic_rank(&self.support, self.seed) != self.n() {
            return Err(Error::RankDeficient("support is generically rank deficient".into()));
        }
        Ok(())
    }

    /// Independent sources under a random Bernoulli(0.5) support that
    /// satisfies structural sparsity.
    pub fn ucss(n: usize, m: usize, sample_count: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let support = draw_support(m, n, n, &mut rng)?;
        Ok(Self {
            mode: GenMode::Ucss,
            n_i: n,
            n_d: 0,
            groups: None,
            support,
            invariant_var: draw_variances(n, &mut rng),
            u_values: vec![DomainParams::diagonal(vec![], &[])],
            sample_count,
            seed,
            mixing: MixingConfig::default(),
            noise_std: 0.0,
        })
    }

    /// Independent sources under a dense support.
    pub fn base(n: usize, m: usize, sample_count: usize, seed: u64) -> Result<Self> {
        let mut spec = Self::ucss(n, m, sample_count, seed)?;
        spec.mode = GenMode::Base;
        spec.support = SupportMatrix::ones(m, n)?;
        Ok(spec)
    }

    /// Half independent, half dependent sources (`n_I = ⌈n/2⌉`) with
    /// `2 n_D + 1` domain labels.
    pub fn mixed(n: usize, m: usize, sample_count: usize, seed: u64) -> Result<Self> {
        let n_d = n / 2;
        Self::partial(GenMode::Mixed, n - n_d, vec![1; n_d], m, sample_count, seed)
    }

    /// `n_I` independent sources plus dependent blocks of the given sizes.
    pub fn grouped(n_i: usize, blocks: Vec<usize>, m: usize, sample_count: usize, seed: u64) -> Result<Self> {
        Self::partial(GenMode::Grouped, n_i, blocks, m, sample_count, seed)
    }

    fn partial(mode: GenMode, n_i: usize, blocks: Vec<usize>, m: usize, sample_count: usize, seed: u64) -> Result<Self> {
        let n_d: usize = blocks.iter().sum();
        let n = n_i + n_d;
        let mut rng = seeded_rng(seed);
        let support = draw_support(m, n, n_i, &mut rng)?;
        let invariant_var = draw_variances(n_i, &mut rng);
        let groups = matches!(mode, GenMode::Grouped).then_some(blocks);
        let u_values = draw_domain_params(n_d, groups.as_deref(), 2 * n_d + 1, derive_seed(seed, 0x6475));
        Ok(Self {
            mode,
            n_i,
            n_d,
            groups,
            support,
            invariant_var,
            u_values,
            sample_count,
            seed,
            mixing: MixingConfig::default(),
            noise_std: 0.0,
        })
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    pub fn with_mixing(mut self, mixing: MixingConfig) -> Self {
        self.mixing = mixing;
        self
    }
}

fn draw_variances(n: usize, rng: &mut crate::Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(VAR_LOW..VAR_HIGH)).collect()
}

/// Random support whose first `sparse` columns are Bernoulli(0.5) and
/// satisfy structural sparsity among themselves; remaining columns are
/// all-ones. Every row is nonempty and the support has generic rank `n`.
fn draw_support(m: usize, n: usize, sparse: usize, rng: &mut crate::Rng) -> Result<SupportMatrix> {
    if n == 0 || m < n {
        return Err(Error::InvalidParameter(format!("need 1 ≤ n ≤ m, got n={n}, m={m}")));
    }
    for attempt in 0..SUPPORT_DRAWS {
        let mut s = SupportMatrix::ones(m, n)?;
        for i in 0..m {
            for j in 0..sparse {
                s.set(i, j, rng.random::<bool>());
            }
        }
        if (0..m).any(|i| s.row_support(i).is_empty()) {
            continue;
        }
        if sparse > 0 && !ss_report(&s.restrict_cols(sparse)?).all_hold {
            continue;
        }
        if generic_rank(&s, attempt as u64) == n {
            return Ok(s);
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: SUPPORT_DRAWS,
        reason: format!("no admissible {m}x{n} support found"),
    })
}

/// A sampled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `N × n`, columns `[s_I, s_D]`.
    pub sources: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// `N × m`.
    pub observations: DMatrix<f64>,
    pub spec: GenSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let (n, m, rows) = (self.spec.n(), self.spec.m(), self.labels.len());
        if self.sources.shape() != (rows, n) {
            return Err(Error::shape(format!("sources {rows}x{n}"), format!("{:?}", self.sources.shape())));
        }
        if self.observations.shape() != (rows, m) {
            return Err(Error::shape(format!("observations {rows}x{m}"), format!("{:?}", self.observations.shape())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&u| u >= self.spec.domains()) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.spec.domains() });
        }
        Ok(())
    }
}

/// Builds the mixing of `spec` and samples `spec.sample_count` triples.
pub fn generate(spec: &GenSpec) -> Result<(Dataset, MixingNetwork)> {
    spec.validate()?;
    let net = build_structured_mixing(&spec.support, &spec.mixing, derive_seed(spec.seed, 0x6d6978))?;
    let (sources, labels) = sample_sources(spec, spec.sample_count, derive_seed(spec.seed, 0x737263))?;
    let mut observations = mix(&net, &sources)?;
    if spec.noise_std > 0.0 {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded_rng(derive_seed(spec.seed, 0x6e6f69));
        for v in observations.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += spec.noise_std * e;
        }
    }
    let ds = Dataset {
        sources,
        labels,
        observations,
        spec: spec.clone(),
    };
    ds.check()?;
    Ok((ds, net))
}
