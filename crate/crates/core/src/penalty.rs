//! Sparsity penalties on Jacobian entries: L1, SCAD and MCP.
//!
//! Closed forms follow Fan & Li (2001) for SCAD and Zhang (2010) for MCP.
//! MCP and SCAD behave like L1 near zero and become flat for large
//! arguments, which removes the shrinkage bias L1 puts on large entries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::ElementwiseFn;
use crate::error::{Error, Result};

/// Default MCP concavity `γ`.
pub const DEFAULT_MCP_GAMMA: f64 = 2.0;
/// Default SCAD knot multiplier `a`.
pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    L1,
    #[serde(rename = "SCAD")]
    Scad,
    #[serde(rename = "MCP")]
    Mcp,
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(PenaltyKind::L1),
            "scad" => Ok(PenaltyKind::Scad),
            "mcp" => Ok(PenaltyKind::Mcp),
            other => Err(Error::InvalidParameter(format!("unknown penalty kind `{other}`"))),
        }
    }
}

/// A penalty kind with its weight `λ` and concavity knob (`γ` for MCP,
/// `a` for SCAD; ignored by L1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    DEFAULT_MCP_GAMMA
}

impl PenaltyConfig {
    pub fn l1(lambda: f64) -> Self {
        Self {
            kind: PenaltyKind::L1,
            lambda,
            gamma: DEFAULT_MCP_GAMMA,
        }
    }

    pub fn mcp(lambda: f64, gamma: f64) -> Self {
        Self {
            kind: PenaltyKind::Mcp,
            lambda,
            gamma,
        }
    }

    pub fn scad(lambda: f64, a: f64) -> Self {
        Self {
            kind: PenaltyKind::Scad,
            lambda,
            gamma: a,
        }
    }

    /// Default knob for `kind` (γ = 2 for MCP, a = 3.7 for SCAD).
    pub fn with_default_knob(kind: PenaltyKind, lambda: f64) -> Self {
        let gamma = match kind {
            PenaltyKind::Scad => DEFAULT_SCAD_A,
            _ => DEFAULT_MCP_GAMMA,
        };
        Self { kind, lambda, gamma }
    }

    pub fn none() -> Self {
        Self::mcp(0.0, DEFAULT_MCP_GAMMA)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda={} must be ≥ 0", self.lambda)));
        }
        match self.kind {
            PenaltyKind::Mcp if !(self.gamma > 1.0) => {
                Err(Error::InvalidParameter(format!("MCP gamma={} must exceed 1", self.gamma)))
            }
            PenaltyKind::Scad if !(self.gamma > 2.0) => {
                Err(Error::InvalidParameter(format!("SCAD a={} must exceed 2", self.gamma)))
            }
            _ => Ok(()),
        }
    }

    /// Unchecked evaluation; callers validate once up front.
    pub(crate) fn value_unchecked(&self, t: f64) -> f64 {
        let (lam, g, x) = (self.lambda, self.gamma, t.abs());
        match self.kind {
            PenaltyKind::L1 => lam * x,
            PenaltyKind::Mcp => {
                if x <= g * lam {
                    lam * x - x * x / (2.0 * g)
                } else {
                    g * lam * lam / 2.0
                }
            }
            PenaltyKind::Scad => {
                if x <= lam {
                    lam * x
                } else if x <= g * lam {
                    (2.0 * g * lam * x - x * x - lam * lam) / (2.0 * (g - 1.0))
                } else {
                    lam * lam * (g + 1.0) / 2.0
                }
            }
        }
    }

    pub(crate) fn derivative_unchecked(&self, t: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        let (lam, g, x) = (self.lambda, self.gamma, t.abs());
        let mag = match self.kind {
            PenaltyKind::L1 => lam,
            PenaltyKind::Mcp => {
                if x <= g * lam {
                    lam - x / g
                } else {
                    0.0
                }
            }
            PenaltyKind::Scad => {
                if x <= lam {
                    lam
                } else if x <= g * lam {
                    (g * lam - x) / (g - 1.0)
                } else {
                    0.0
                }
            }
        };
        mag * t.signum()
    }
}

impl ElementwiseFn for PenaltyConfig {
    fn value(&self, x: f64) -> f64 {
        self.value_unchecked(x)
    }

    fn derivative(&self, x: f64) -> f64 {
        self.derivative_unchecked(x)
    }
}

/// Penalty of a single entry.
pub fn penalty_value(cfg: &PenaltyConfig, t: f64) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.value_unchecked(t))
}

/// Derivative of the penalty almost everywhere; the subgradient at 0 is
/// resolved to 0.
pub fn penalty_derivative(cfg: &PenaltyConfig, t: f64) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.derivative_unchecked(t))
}

/// Mean penalty over the entries of `j`.
pub fn jacobian_penalty(cfg: &PenaltyConfig, j: &DMatrix<f64>) -> Result<f64> {
    cfg.validate()?;
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Jacobian entry".into()));
    }
    if j.is_empty() {
        return Ok(0.0);
    }
    Ok(j.iter().map(|&t| cfg.value_unchecked(t)).sum::<f64>() / j.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_kinds(lambda: f64) -> [PenaltyConfig; 3] {
        [
            PenaltyConfig::l1(lambda),
            PenaltyConfig::mcp(lambda, DEFAULT_MCP_GAMMA),
            PenaltyConfig::scad(lambda, DEFAULT_SCAD_A),
        ]
    }

    #[test]
    fn zero_argument_has_zero_penalty() {
        for cfg in all_kinds(0.7) {
            assert_eq!(penalty_value(&cfg, 0.0).unwrap(), 0.0);
            assert_eq!(penalty_derivative(&cfg, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn mcp_saturates_and_is_continuous_at_knot() {
        let cfg = PenaltyConfig::mcp(1.0, 2.0);
        assert_eq!(penalty_value(&cfg, 5.0).unwrap(), 1.0);
        let knot = cfg.gamma * cfg.lambda;
        let inside = cfg.lambda * knot - knot * knot / (2.0 * cfg.gamma);
        assert_eq!(inside, cfg.gamma * cfg.lambda * cfg.lambda / 2.0);
        assert!((penalty_value(&cfg, knot - 1e-12).unwrap() - 1.0).abs() < 1e-11);
        assert_eq!(penalty_derivative(&cfg, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn scad_branches() {
        let cfg = PenaltyConfig::scad(1.0, 3.7);
        assert_eq!(penalty_value(&cfg, 0.5).unwrap(), 0.5);
        assert!((penalty_value(&cfg, 10.0).unwrap() - 4.7 / 2.0).abs() < 1e-15);
        // continuity at both knots
        for knot in [1.0, 3.7] {
            let lo = penalty_value(&cfg, knot - 1e-9).unwrap();
            let hi = penalty_value(&cfg, knot + 1e-9).unwrap();
            assert!((lo - hi).abs() < 1e-8);
        }
    }

    #[test]
    fn l1_derivative() {
        assert_eq!(penalty_derivative(&PenaltyConfig::l1(0.5), 2.0).unwrap(), 0.5);
        assert_eq!(penalty_derivative(&PenaltyConfig::l1(0.5), -2.0).unwrap(), -0.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(penalty_value(&PenaltyConfig::mcp(1.0, 1.0), 1.0).is_err());
        assert!(penalty_value(&PenaltyConfig::scad(1.0, 2.0), 1.0).is_err());
        assert!(penalty_value(&PenaltyConfig::l1(-1.0), 1.0).is_err());
        assert!(penalty_derivative(&PenaltyConfig::mcp(1.0, 0.5), 1.0).is_err());
    }

    #[test]
    fn jacobian_penalty_examples() {
        let cfg = PenaltyConfig::l1(1.0);
        assert_eq!(jacobian_penalty(&cfg, &DMatrix::zeros(3, 2)).unwrap(), 0.0);
        assert_eq!(jacobian_penalty(&cfg, &DMatrix::identity(2, 2)).unwrap(), 0.5);
        let mut bad = DMatrix::identity(2, 2);
        bad[(0, 1)] = f64::NAN;
        assert!(jacobian_penalty(&cfg, &bad).is_err());
    }

    #[test]
    fn config_json_shape() {
        let cfg: PenaltyConfig = serde_json::from_str(r#"{"kind":"MCP","lambda":0.01,"gamma":2.0}"#).unwrap();
        assert_eq!(cfg, PenaltyConfig::mcp(0.01, 2.0));
        let cfg: PenaltyConfig = serde_json::from_str(r#"{"kind":"L1","lambda":0.1}"#).unwrap();
        assert_eq!(cfg.kind, PenaltyKind::L1);
    }

    proptest! {
        #[test]
        fn symmetric(t in -10.0f64..10.0, lambda in 0.0f64..2.0) {
            for cfg in all_kinds(lambda) {
                prop_assert_eq!(penalty_value(&cfg, t).unwrap(), penalty_value(&cfg, -t).unwrap());
            }
        }

        #[test]
        fn bounded_and_dominated(t in -50.0f64..50.0, lambda in 0.0f64..2.0, gamma in 1.1f64..5.0) {
            let mcp = PenaltyConfig::mcp(lambda, gamma);
            let v = penalty_value(&mcp, t).unwrap();
            prop_assert!(v <= gamma * lambda * lambda / 2.0 + 1e-12);
            prop_assert!(v <= penalty_value(&PenaltyConfig::l1(lambda), t).unwrap() + 1e-12);
            let scad = PenaltyConfig::scad(lambda, gamma + 1.0);
            prop_assert!(penalty_value(&scad, t).unwrap() <= lambda * lambda * (gamma + 2.0) / 2.0 + 1e-12);
        }

        #[test]
        fn derivative_matches_finite_differences(t in 0.05f64..8.0, neg in any::<bool>()) {
            let t = if neg { -t } else { t };
            let h = 1e-6;
            for cfg in all_kinds(0.9) {
                let knots = [cfg.lambda, cfg.gamma * cfg.lambda];
                if knots.iter().any(|k| (t.abs() - k).abs() < 1e-3) {
                    continue;
                }
                let fd = (cfg.value_unchecked(t + h) - cfg.value_unchecked(t - h)) / (2.0 * h);
                let d = penalty_derivative(&cfg, t).unwrap();
                let err = (fd - d).abs() / d.abs().max(fd.abs()).max(1e-3);
                prop_assert!(err <= 1e-6, "{:?} t={} fd={} d={}", cfg.kind, t, fd, d);
            }
        }

        #[test]
        fn jacobian_penalty_monotone_in_magnitude(vals in proptest::collection::vec(-1.0f64..1.0, 6), scale in 1.0f64..1.5) {
            let cfg = PenaltyConfig::l1(0.3);
            let j = DMatrix::from_row_slice(2, 3, &vals);
            let bigger = &j * scale;
            prop_assert!(jacobian_penalty(&cfg, &bigger).unwrap() >= jacobian_penalty(&cfg, &j).unwrap());
            let mcp = PenaltyConfig::mcp(2.0, 2.0);
            // active region: |t| ≤ γλ = 4
            prop_assert!(jacobian_penalty(&mcp, &bigger).unwrap() >= jacobian_penalty(&mcp, &j).unwrap() - 1e-15);
        }
    }
}
