use std::path::{Path, PathBuf};

use ica_core::experiments::{Budget, StudyConfig};
use ica_core::synthetic::{GenMode, GenSpec, MixingConfig};
use ica_core::training::TrainConfig;
use ica_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Dataset recipe for `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub mode: GenMode,
    pub n: usize,
    pub m: usize,
    pub samples: usize,
    pub noise_std: f64,
    /// Dependent block sizes for grouped mode; `n` then counts all sources.
    pub blocks: Option<Vec<usize>>,
    pub mixing: MixingConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: GenMode::Ucss,
            n: 4,
            m: 8,
            samples: 2000,
            noise_std: ica_core::experiments::ABLATION_NOISE,
            blocks: None,
            mixing: MixingConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn spec(&self, seed: u64) -> Result<GenSpec> {
        let spec = match self.mode {
            GenMode::Ucss => GenSpec::ucss(self.n, self.m, self.samples, seed)?,
            GenMode::Mixed => GenSpec::mixed(self.n, self.m, self.samples, seed)?,
            GenMode::Base => GenSpec::base(self.n, self.m, self.samples, seed)?,
            GenMode::Grouped => {
                let blocks = self
                    .blocks
                    .clone()
                    .ok_or_else(|| Error::InvalidParameter("grouped mode needs `blocks`".into()))?;
                let n_d: usize = blocks.iter().sum();
                if n_d > self.n {
                    return Err(Error::InvalidParameter(format!("blocks {blocks:?} exceed n={}", self.n)));
                }
                GenSpec::grouped(self.n - n_d, blocks, self.m, self.samples, seed)?
            }
        };
        Ok(spec.with_noise(self.noise_std).with_mixing(self.mixing.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Figure {
    Fig3,
    Fig4,
    Ablation,
    Reg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproduceConfig {
    pub figure: Figure,
    pub study: StudyConfig,
    /// Overrides the full or fast budget when present.
    pub budget: Option<Budget>,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        Self {
            figure: Figure::Fig3,
            study: StudyConfig::default(),
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n: usize,
    pub m_min: usize,
    pub m_max: usize,
    /// Extra supports (0/1 rows) checked one by one.
    pub supports: Vec<Vec<Vec<u8>>>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            n: 3,
            m_min: 3,
            m_max: 5,
            supports: Vec::new(),
        }
    }
}

/// Everything a command reads. Unused sections are ignored by a command.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generate: GenConfig,
    pub train: TrainConfig,
    /// 0/1 rows for `check-support`.
    pub support: Option<Vec<Vec<u8>>>,
    pub reproduce: ReproduceConfig,
    pub oracle: OracleConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Resolves relative paths against the config file's directory.
    pub fn resolve_paths(&mut self, base: Option<&Path>) {
        let Some(dir) = base.and_then(Path::parent) else {
            return;
        };
        for p in [&mut self.dataset, &mut self.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn support_from_rows(rows: &[Vec<u8>]) -> Result<ica_core::support::SupportMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Parse("support rows have different lengths".into()));
    }
    if rows.iter().flatten().any(|&v| v > 1) {
        return Err(Error::Parse("support entries must be 0 or 1".into()));
    }
    ica_core::support::SupportMatrix::new(rows.len(), cols, rows.iter().flatten().map(|&v| v == 1).collect())
}

/// Parses `"1,0;1,1"` (rows separated by `;`).
pub fn parse_inline_support(text: &str) -> Result<Vec<Vec<u8>>> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<u8>().map_err(|_| Error::Parse(format!("bad support entry `{v}`"))))
                .collect()
        })
        .collect()
}
