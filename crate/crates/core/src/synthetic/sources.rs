use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{DomainParams, GenSpec, VAR_HIGH, VAR_LOW};
use crate::error::{Error, Result};
use crate::{derive_seed, seeded_rng};

/// `count × n` i.i.d. zero-mean Gaussians, with per-coordinate variances
/// drawn once from `U[0.5, 3]`. Returns the samples and the variances.
pub fn sample_independent_sources(n: usize, count: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if n == 0 || count == 0 {
        return Err(Error::InvalidParameter("n and count must be ≥ 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let var: Vec<f64> = (0..n).map(|_| rng.random_range(VAR_LOW..VAR_HIGH)).collect();
    Ok((gaussian_columns(&var, count, &mut rng), var))
}

fn gaussian_columns(var: &[f64], count: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    DMatrix::from_fn(count, var.len(), |_, j| {
        let e: f64 = StandardNormal.sample(rng);
        sd[j] * e
    })
}

/// Per-domain Gaussian parameters for `n_d` dependent sources.
///
/// Variances come from `U[0.5, 3]`. Domain 0 has zero mean; other domains
/// draw means from `U[-1, 1]`. With `groups`, each block gets a random
/// correlation structure; blocks stay mutually independent.
pub fn draw_domain_params(n_d: usize, groups: Option<&[usize]>, domains: usize, seed: u64) -> Vec<DomainParams> {
    let mut rng = seeded_rng(seed);
    let blocks: Vec<usize> = groups.map(|g| g.to_vec()).unwrap_or_else(|| vec![1; n_d]);
    (0..domains)
        .map(|u| {
            let mean: Vec<f64> = (0..n_d)
                .map(|_| if u == 0 { 0.0 } else { rng.random_range(-1.0..1.0) })
                .collect();
            let mut cov = vec![vec![0.0; n_d]; n_d];
            let mut start = 0;
            for &size in &blocks {
                let var: Vec<f64> = (0..size).map(|_| rng.random_range(VAR_LOW..VAR_HIGH)).collect();
                let corr = random_correlation(size, &mut rng);
                for a in 0..size {
                    for b in 0..size {
                        cov[start + a][start + b] = corr[(a, b)] * (var[a] * var[b]).sqrt();
                    }
                }
                start += size;
            }
            DomainParams { mean, cov }
        })
        .collect()
}

fn random_correlation(d: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    if d == 1 {
        return DMatrix::identity(1, 1);
    }
    let b = DMatrix::from_fn(d, d, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        e
    });
    let c = &b * b.transpose() + DMatrix::identity(d, d) * (d as f64);
    let diag: Vec<f64> = (0..d).map(|i| c[(i, i)].sqrt()).collect();
    let mut r = DMatrix::from_fn(d, d, |i, j| c[(i, j)] / (diag[i] * diag[j]));
    for i in 0..d {
        for j in 0..i {
            r[(j, i)] = r[(i, j)];
        }
    }
    r
}

/// Samples `s_D` and labels: `u` uniform over the domains of `spec`, then
/// `s_D | u ~ N(μ_u, Σ_u)`.
pub fn sample_dependent_sources(spec: &GenSpec, count: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if spec.u_values.is_empty() || spec.u_values.len() < spec.required_domains() {
        return Err(Error::InvalidParameter(format!(
            "{:?} mode needs ≥ {} domain labels, got {}",
            spec.mode,
            spec.required_domains(),
            spec.u_values.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let chol: Vec<DMatrix<f64>> = spec
        .u_values
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if spec.n_d == 0 {
                return Ok(DMatrix::zeros(0, 0));
            }
            p.cov_matrix()
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| Error::InvalidParameter(format!("domain {k} covariance is not positive definite")))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..spec.u_values.len())).collect();
    let mut out = DMatrix::zeros(count, spec.n_d);
    for (r, &u) in labels.iter().enumerate() {
        let e = nalgebra::DVector::from_fn(spec.n_d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let s = &chol[u] * e;
        for j in 0..spec.n_d {
            out[(r, j)] = spec.u_values[u].mean[j] + s[j];
        }
    }
    Ok((out, labels))
}

/// Full source block `[s_I, s_D]` and labels for `spec`.
pub fn sample_sources(spec: &GenSpec, count: usize, seed: u64) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (dep, labels) = sample_dependent_sources(spec, count, derive_seed(seed, 1))?;
    let mut rng = seeded_rng(derive_seed(seed, 2));
    let ind = gaussian_columns(&spec.invariant_var, count, &mut rng);
    let mut s = DMatrix::zeros(count, spec.n());
    s.view_mut((0, 0), (count, spec.n_i)).copy_from(&ind);
    s.view_mut((0, spec.n_i), (count, spec.n_d)).copy_from(&dep);
    Ok((s, labels))
}
