use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{default_rank_tol, numerical_rank};
use crate::support::{generic_rank, SupportMatrix};
use crate::{derive_seed, seeded_rng};

/// Activity threshold for support verification.
pub const SUPPORT_TAU: f64 = 1e-4;
/// Weight redraws allowed before construction gives up.
pub const SUPPORT_RETRY_BUDGET: usize = 20;
const PROBES: usize = 10;

/// Architecture of the per-observation maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixingConfig {
    pub width: usize,
    /// Hidden tanh layers; 0 gives a masked linear map.
    pub depth: usize,
    /// Weight of the nonlinear branch relative to the linear one.
    pub gain: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            width: 16,
            depth: 2,
            gain: 1.0,
        }
    }
}

impl MixingConfig {
    pub fn linear() -> Self {
        Self {
            depth: 0,
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.depth > 0 && self.width == 0 {
            return Err(Error::InvalidParameter("mixing width must be ≥ 1".into()));
        }
        if !self.gain.is_finite() {
            return Err(Error::InvalidParameter("mixing gain must be finite".into()));
        }
        Ok(())
    }
}

/// `g_i(s) = a · s_P + gain · v · h_L(s_P)` over the parent set `P`, where
/// `h_k = tanh(h_{k-1} W_k + b_k)` and `h_0 = s_P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationMap {
    pub parents: Vec<usize>,
    pub linear: Vec<f64>,
    pub hidden: Vec<(DMatrix<f64>, Vec<f64>)>,
    pub readout: Vec<f64>,
    pub gain: f64,
}

impl ObservationMap {
    fn value_and_grad(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let p = self.parents.len();
        let input: Vec<f64> = self.parents.iter().map(|&j| s[j]).collect();
        let mut out: f64 = self.linear.iter().zip(&input).map(|(a, x)| a * x).sum();
        let mut grad = self.linear.clone();
        if self.hidden.is_empty() {
            return (out, grad);
        }
        let mut h = input;
        // Tangent matrix dh/ds_P, rows index hidden units.
        let mut dh: Vec<Vec<f64>> = (0..p).map(|k| (0..p).map(|l| f64::from(u8::from(k == l))).collect()).collect();
        for (w, b) in &self.hidden {
            let width = w.ncols();
            let mut nh = vec![0.0; width];
            let mut ndh = vec![vec![0.0; p]; width];
            for c in 0..width {
                let mut pre = b[c];
                for (r, hr) in h.iter().enumerate() {
                    pre += hr * w[(r, c)];
                }
                let t = pre.tanh();
                nh[c] = t;
                let slope = 1.0 - t * t;
                for l in 0..p {
                    let mut acc = 0.0;
                    for r in 0..h.len() {
                        acc += w[(r, c)] * dh[r][l];
                    }
                    ndh[c][l] = slope * acc;
                }
            }
            h = nh;
            dh = ndh;
        }
        for (c, v) in self.readout.iter().enumerate() {
            out += self.gain * v * h[c];
            for l in 0..p {
                grad[l] += self.gain * v * dh[c][l];
            }
        }
        (out, grad)
    }
}

/// Structured mixing `x_i = g_i(s_{F_i})`; absent inputs are never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingNetwork {
    pub n: usize,
    pub support: SupportMatrix,
    pub maps: Vec<ObservationMap>,
}

impl MixingNetwork {
    pub fn m(&self) -> usize {
        self.maps.len()
    }

    /// `x = f(s)` for one source vector.
    pub fn eval(&self, s: &[f64]) -> Vec<f64> {
        self.maps.iter().map(|g| g.value_and_grad(s).0).collect()
    }

    /// Analytic `m × n` Jacobian at `s`.
    pub fn jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.m(), self.n);
        for (i, g) in self.maps.iter().enumerate() {
            let (_, grad) = g.value_and_grad(s);
            for (k, &p) in g.parents.iter().enumerate() {
                j[(i, p)] = grad[k];
            }
        }
        j
    }

    fn random(support: &SupportMatrix, cfg: &MixingConfig, rng: &mut crate::Rng) -> Self {
        let maps = (0..support.rows())
            .map(|i| {
                let parents = support.row_support(i);
                let p = parents.len();
                let linear = (0..p)
                    .map(|_| {
                        let mag: f64 = rng.random_range(0.5..1.5);
                        if rng.random::<bool>() { mag } else { -mag }
                    })
                    .collect();
                let mut hidden = Vec::with_capacity(cfg.depth);
                let mut fan_in = p;
                for _ in 0..cfg.depth {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                    let w = DMatrix::from_fn(fan_in, cfg.width, |_, _| dist.sample(rng));
                    let b = (0..cfg.width).map(|_| { let e: f64 = StandardNormal.sample(rng); 0.5 * e }).collect();
                    hidden.push((w, b));
                    fan_in = cfg.width;
                }
                let readout = if cfg.depth == 0 {
                    vec![]
                } else {
                    let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                    (0..fan_in).map(|_| dist.sample(rng)).collect()
                };
                ObservationMap {
                    parents,
                    linear,
                    hidden,
                    readout,
                    gain: cfg.gain,
                }
            })
            .collect();
        Self {
            n: support.cols(),
            support: support.clone(),
            maps,
        }
    }
}

/// Draws a masked network for `support`, redrawing weights until every
/// prescribed entry is active at some probe and the Jacobian has full
/// column rank at all probes.
pub fn build_structured_mixing(support: &SupportMatrix, cfg: &MixingConfig, seed: u64) -> Result<MixingNetwork> {
    cfg.validate()?;
    let n = support.cols();
    if let Some(i) = (0..support.rows()).find(|&i| support.row_support(i).is_empty()) {
        return Err(Error::InvalidParameter(format!("observation {i} has no parent source")));
    }
    if n == 0 || generic_rank(support, seed) != n {
        return Err(Error::RankDeficient(format!(
            "support {}x{} has generic rank below {n}",
            support.rows(),
            n
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut probe_rng = seeded_rng(derive_seed(seed, 0x70));
    let probes = DMatrix::from_fn(PROBES, n, |_, _| { let e: f64 = StandardNormal.sample(&mut probe_rng); 1.3 * e });
    for _ in 0..SUPPORT_RETRY_BUDGET {
        let net = MixingNetwork::random(support, cfg, &mut rng);
        if verify_support(&net, &probes, SUPPORT_TAU)? == *support && verify_full_column_rank(&net, &probes)? {
            return Ok(net);
        }
    }
    Err(Error::RetryBudgetExhausted {
        attempts: SUPPORT_RETRY_BUDGET,
        reason: "prescribed support not realized at the probe points".into(),
    })
}

/// Applies the mixing row-wise to an `N × n` source block.
pub fn mix(net: &MixingNetwork, sources: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sources.ncols() != net.n {
        return Err(Error::shape(format!("{} source columns", net.n), format!("{}", sources.ncols())));
    }
    let mut x = DMatrix::zeros(sources.nrows(), net.m());
    let mut row = vec![0.0; net.n];
    for r in 0..sources.nrows() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sources[(r, j)];
        }
        for (i, v) in net.eval(&row).into_iter().enumerate() {
            x[(r, i)] = v;
        }
    }
    Ok(x)
}

/// Empirical support from central finite differences with step
/// `1e-4 · max(1, |s_j|)`: entry set iff the largest probe derivative
/// exceeds `tau`.
pub fn verify_support(net: &MixingNetwork, probes: &DMatrix<f64>, tau: f64) -> Result<SupportMatrix> {
    if probes.nrows() == 0 {
        return Err(Error::InvalidParameter("at least one probe point is required".into()));
    }
    if probes.ncols() != net.n {
        return Err(Error::shape(format!("{} probe columns", net.n), format!("{}", probes.ncols())));
    }
    let mut out = SupportMatrix::zeros(net.m(), net.n)?;
    for r in 0..probes.nrows() {
        let s: Vec<f64> = probes.row(r).iter().cloned().collect();
        for j in 0..net.n {
            let h = 1e-4 * s[j].abs().max(1.0);
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += h;
            sm[j] -= h;
            let (xp, xm) = (net.eval(&sp), net.eval(&sm));
            for i in 0..net.m() {
                if ((xp[i] - xm[i]) / (2.0 * h)).abs() > tau {
                    out.set(i, j, true);
                }
            }
        }
    }
    Ok(out)
}

/// Whether the Jacobian has numerical rank `n` at every probe.
pub fn verify_full_column_rank(net: &MixingNetwork, probes: &DMatrix<f64>) -> Result<bool> {
    if probes.ncols() != net.n {
        return Err(Error::shape(format!("{} probe columns", net.n), format!("{}", probes.ncols())));
    }
    Ok((0..probes.nrows()).all(|r| {
        let s: Vec<f64> = probes.row(r).iter().cloned().collect();
        let j = net.jacobian(&s);
        numerical_rank(&j, default_rank_tol(&j).max(1e-10)) == net.n
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::support::random_support;
    use proptest::prelude::*;

    fn probes(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded_rng(seed);
        DMatrix::from_fn(10, n, |_, _| 1.5 * { let e: f64 = StandardNormal.sample(&mut rng); e })
    }

    #[test]
    fn identity_support_gives_diagonal_jacobian() {
        let support = SupportMatrix::identity(3).unwrap();
        let net = build_structured_mixing(&support, &MixingConfig::default(), 4).unwrap();
        let p = probes(3, 1);
        for r in 0..p.nrows() {
            let s: Vec<f64> = p.row(r).iter().cloned().collect();
            let j = net.jacobian(&s);
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        assert!(j[(a, b)].abs() <= 1e-12);
                    }
                }
            }
        }
        assert_eq!(verify_support(&net, &p, 1e-6).unwrap(), support);
    }

    #[test]
    fn chain_support_is_realized() {
        let support = SupportMatrix::from_row_sets(2, &[&[0], &[0, 1], &[1]]).unwrap();
        let net = build_structured_mixing(&support, &MixingConfig::default(), 8).unwrap();
        assert_eq!(verify_support(&net, &probes(2, 3), SUPPORT_TAU).unwrap(), support);
        assert!(verify_full_column_rank(&net, &probes(2, 3)).unwrap());
    }

    #[test]
    fn empty_row_and_rank_deficient_supports_are_rejected() {
        let empty = SupportMatrix::from_row_sets(2, &[&[0, 1], &[]]).unwrap();
        assert!(build_structured_mixing(&empty, &MixingConfig::default(), 0).is_err());
        let dup = SupportMatrix::from_row_sets(2, &[&[0], &[0]]).unwrap();
        assert!(matches!(
            build_structured_mixing(&dup, &MixingConfig::default(), 0),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn duplicated_column_support_fails_rank_check() {
        let support = SupportMatrix::from_row_sets(2, &[&[0], &[0]]).unwrap();
        let net = MixingNetwork::random(&support, &MixingConfig::default(), &mut seeded_rng(1));
        assert!(!verify_full_column_rank(&net, &probes(2, 0)).unwrap());
    }

    #[test]
    fn linear_configuration_is_a_masked_matrix() {
        let support = SupportMatrix::from_row_sets(2, &[&[0], &[0, 1], &[1]]).unwrap();
        let net = build_structured_mixing(&support, &MixingConfig::linear(), 2).unwrap();
        let w = net.jacobian(&[0.0, 0.0]);
        let s = probes(2, 5);
        let x = mix(&net, &s).unwrap();
        assert!((&x - &s * w.transpose()).amax() < 1e-12);
        assert!(w[(0, 1)] == 0.0 && w[(2, 0)] == 0.0);
        assert!(verify_full_column_rank(&net, &s).unwrap());
    }

    #[test]
    fn mix_is_pure_and_masked() {
        let support = SupportMatrix::from_row_sets(3, &[&[0], &[0, 1], &[1, 2], &[2]]).unwrap();
        let net = build_structured_mixing(&support, &MixingConfig::default(), 3).unwrap();
        let s = probes(3, 9);
        assert_eq!(mix(&net, &s).unwrap(), mix(&net, &s).unwrap());
        let mut t = s.clone();
        for r in 0..t.nrows() {
            t[(r, 2)] += 1.7;
        }
        let (xs, xt) = (mix(&net, &s).unwrap(), mix(&net, &t).unwrap());
        for r in 0..s.nrows() {
            assert_eq!(xs[(r, 0)], xt[(r, 0)]);
            assert_eq!(xs[(r, 1)], xt[(r, 1)]);
        }
        assert!(mix(&net, &DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let support = SupportMatrix::ones(3, 2).unwrap();
        let net = build_structured_mixing(&support, &MixingConfig { depth: 3, ..MixingConfig::default() }, 6).unwrap();
        let s = [0.3, -1.2];
        let j = net.jacobian(&s);
        for k in 0..2 {
            let h = 1e-6;
            let mut sp = s;
            let mut sm = s;
            sp[k] += h;
            sm[k] -= h;
            let (xp, xm) = (net.eval(&sp), net.eval(&sm));
            for i in 0..3 {
                assert!(((xp[i] - xm[i]) / (2.0 * h) - j[(i, k)]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn random_specs_realize_their_support() {
        let mut built = 0;
        for seed in 0..200u64 {
            let support = random_support(5, 3, 0.5, seed).unwrap();
            let Ok(net) = build_structured_mixing(&support, &MixingConfig::default(), seed) else {
                continue;
            };
            assert_eq!(verify_support(&net, &probes(3, seed), SUPPORT_TAU).unwrap(), support);
            assert!(verify_full_column_rank(&net, &probes(3, seed)).unwrap());
            built += 1;
            if built == 20 {
                break;
            }
        }
        assert_eq!(built, 20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn masked_entries_have_zero_derivative(seed in any::<u64>()) {
            let support = random_support(4, 3, 0.5, seed).unwrap();
            prop_assume!((0..4).all(|i| !support.row_support(i).is_empty()));
            let net = MixingNetwork::random(&support, &MixingConfig::default(), &mut seeded_rng(seed));
            let emp = verify_support(&net, &probes(3, seed ^ 7), 1e-6).unwrap();
            for i in 0..4 {
                for j in 0..3 {
                    if !support.get(i, j) {
                        prop_assert!(!emp.get(i, j));
                    }
                }
            }
        }
    }
}
