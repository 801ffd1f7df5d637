use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GenSpec;
use crate::error::{Error, Result};
use crate::linalg::numerical_rank;

/// Rank of the stacked w-vectors at one probe point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub order: u8,
    pub rank: usize,
    pub required: usize,
    pub full_rank: bool,
    /// One row per non-reference domain.
    pub vectors: Vec<Vec<f64>>,
}

const RANK_TOL: f64 = 1e-9;

/// Checks that the per-domain changes of `log p(s_D | u)` are linearly
/// independent at `probe` (a point in `s_D` space).
///
/// Order 1 stacks `∇ log p(s|u_k) − ∇ log p(s|u_0)` and needs rank `n_D`.
/// Order 2 appends the change in the Hessian diagonal and needs rank `2 n_D`.
pub fn variability_audit(spec: &GenSpec, probe: &[f64], order: u8) -> Result<VariabilityReport> {
    let nd = spec.n_d;
    if probe.len() != nd {
        return Err(Error::shape(format!("probe of length {nd}"), format!("{}", probe.len())));
    }
    let required = match order {
        1 => nd,
        2 => 2 * nd,
        other => return Err(Error::InvalidParameter(format!("order {other} is not 1 or 2"))),
    };
    if spec.u_values.len() < required + 1 {
        return Err(Error::InvalidParameter(format!(
            "order-{order} audit needs ≥ {} domain labels, got {}",
            required + 1,
            spec.u_values.len()
        )));
    }
    let s = DVector::from_column_slice(probe);
    let pieces: Vec<(DVector<f64>, DVector<f64>)> = spec
        .u_values
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let prec = p
                .cov_matrix()
                .try_inverse()
                .ok_or_else(|| Error::InvalidParameter(format!("domain {k} covariance is singular")))?;
            let mu = DVector::from_column_slice(&p.mean);
            let grad = -(&prec * (&s - mu));
            let hess_diag = DVector::from_fn(nd, |i, _| -prec[(i, i)]);
            Ok((grad, hess_diag))
        })
        .collect::<Result<_>>()?;
    let (g0, h0) = &pieces[0];
    let vectors: Vec<Vec<f64>> = pieces[1..]
        .iter()
        .map(|(g, h)| {
            let mut row: Vec<f64> = (g - g0).iter().cloned().collect();
            if order == 2 {
                row.extend((h - h0).iter());
            }
            row
        })
        .collect();
    let mat = DMatrix::from_fn(vectors.len(), required, |r, c| vectors[r][c]);
    let rank = numerical_rank(&mat, RANK_TOL);
    Ok(VariabilityReport {
        order,
        rank,
        required,
        full_rank: rank == required,
        vectors,
    })
}
