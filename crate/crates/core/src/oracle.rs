//! Exhaustive checks of the support-level identifiability argument.
//!
//! With `F` the true Jacobian support and `T` the support of the
//! indeterminacy `T(s)` relating true and estimated sources, the estimated
//! support must contain `F̂ = ∪_{(i,j) ∈ F} {i} × T_{j,:}`. A candidate `T`
//! is *admissible* when it contains a permutation pattern (so `det T` can be
//! nonzero) and `|F̂| ≤ |F|` (the sparsity regularizer never prefers a
//! denser estimate). Under structural sparsity every admissible `T` should
//! be a generalized permutation; the scan below checks this for all small
//! supports.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pinv;
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::support::{generic_rank, ss_count_bits, structural_rank, SupportMatrix};
use crate::{derive_seed, seeded_rng};

/// Largest `n` for [`admissible_t_supports`].
pub const MAX_T_DIM: usize = 4;
/// Largest `m` for [`admissible_t_supports`].
pub const MAX_ROWS: usize = 6;
/// Largest `n` for [`exhaustive_lemma_scan`].
pub const SCAN_MAX_N: usize = 3;
/// Largest `m` for [`exhaustive_lemma_scan`].
pub const SCAN_MAX_M: usize = 5;

/// `F̂_i = ∪_{j ∈ F_i} T_j`.
pub fn propagate_support(f: &SupportMatrix, t: &SupportMatrix) -> Result<SupportMatrix> {
    let n = f.cols();
    if t.rows() != n || t.cols() != n {
        return Err(Error::shape(format!("T of shape {n}x{n}"), format!("{}x{}", t.rows(), t.cols())));
    }
    let tb = t.row_bits();
    let rows: Vec<u64> = f.row_bits().iter().map(|&fb| propagate_row(fb, &tb)).collect();
    SupportMatrix::from_row_bits(n, &rows)
}

fn propagate_row(f_row: u64, t_rows: &[u64]) -> u64 {
    let mut out = 0;
    let mut bits = f_row;
    while bits != 0 {
        let j = bits.trailing_zeros() as usize;
        out |= t_rows[j];
        bits &= bits - 1;
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

fn contains_permutation(t_rows: &[u64], perms: &[Vec<usize>]) -> bool {
    perms
        .iter()
        .any(|p| p.iter().enumerate().all(|(i, &j)| t_rows[i] >> j & 1 == 1))
}

/// Exactly one entry per row and per column.
pub fn is_generalized_permutation(t: &SupportMatrix) -> bool {
    let n = t.rows();
    t.cols() == n && (0..n).all(|i| t.row_support(i).len() == 1) && (0..n).all(|j| t.col_support(j).len() == 1)
}

fn admissible_bits(f_rows: &[u64], n: usize, perms: &[Vec<usize>]) -> Vec<Vec<u64>> {
    let budget: u32 = f_rows.iter().map(|r| r.count_ones()).sum();
    let row_mask = (1u64 << n) - 1;
    let mut out = Vec::new();
    for code in 0u64..(1u64 << (n * n)) {
        let t: Vec<u64> = (0..n).map(|i| (code >> (i * n)) & row_mask).collect();
        if !contains_permutation(&t, perms) {
            continue;
        }
        let size: u32 = f_rows.iter().map(|&fr| propagate_row(fr, &t).count_ones()).sum();
        if size <= budget {
            out.push(t);
        }
    }
    out
}

/// All `T` patterns that contain a permutation and keep `|F̂| ≤ |F|`, in
/// increasing order of their bit encoding.
pub fn admissible_t_supports(f: &SupportMatrix) -> Result<Vec<SupportMatrix>> {
    let n = f.cols();
    if n > MAX_T_DIM || f.rows() > MAX_ROWS {
        return Err(Error::SizeLimit {
            what: format!("{}x{} support", f.rows(), n),
            limit: MAX_T_DIM * MAX_ROWS,
        });
    }
    let perms = permutations(n);
    admissible_bits(&f.row_bits(), n, &perms)
        .into_iter()
        .map(|t| SupportMatrix::from_row_bits(n, &t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub f: SupportMatrix,
    pub ss_holds: bool,
    pub admissible: Vec<SupportMatrix>,
    pub all_permutation_scalings: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<SupportMatrix>,
}

/// Whether every admissible `T` for `F` is a generalized permutation.
pub fn lemma_check(f: &SupportMatrix) -> Result<LemmaReport> {
    let admissible = admissible_t_supports(f)?;
    let counterexample = admissible.iter().find(|t| !is_generalized_permutation(t)).cloned();
    Ok(LemmaReport {
        f: f.clone(),
        ss_holds: crate::support::ss_report(f).all_hold,
        all_permutation_scalings: counterexample.is_none(),
        counterexample,
        admissible,
    })
}

/// Counts for one `(n, m)` cell of the scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub n: usize,
    pub m: usize,
    pub total: u64,
    pub rank_deficient: u64,
    pub ss_hold: u64,
    pub violations: u64,
    /// Up to a few violating `(F, T)` pairs, verbatim.
    pub examples: Vec<(SupportMatrix, SupportMatrix)>,
}

impl ScanRow {
    pub const CSV_HEADER: &'static str = "n,m,total,rank_deficient,ss_hold,violations";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.n, self.m, self.total, self.rank_deficient, self.ss_hold, self.violations)
    }
}

const MAX_EXAMPLES: usize = 5;

/// Scans every `m × n` support with `m` in `m_range` and `n ≤ m`. Supports
/// without full structural column rank are counted and skipped; for every
/// other support where structural sparsity holds, any admissible
/// non-permutation `T` is a violation.
pub fn exhaustive_lemma_scan(n: usize, m_range: std::ops::RangeInclusive<usize>) -> Result<Vec<ScanRow>> {
    if n == 0 || n > SCAN_MAX_N || *m_range.end() > SCAN_MAX_M {
        return Err(Error::SizeLimit {
            what: format!("scan with n={n}, m up to {}", m_range.end()),
            limit: SCAN_MAX_N * SCAN_MAX_M,
        });
    }
    let perms = permutations(n);
    let mut rows = Vec::new();
    for m in m_range.filter(|&m| m >= n) {
        let cells = m * n;
        let row_mask = (1u64 << n) - 1;
        let partials: Vec<(u64, u64, u64, Vec<(SupportMatrix, SupportMatrix)>)> = (0u64..(1u64 << cells))
            .into_par_iter()
            .fold(
                || (0u64, 0u64, 0u64, Vec::new()),
                |(mut def, mut ss, mut viol, mut ex), code| {
                    let f: Vec<u64> = (0..m).map(|i| (code >> (i * n)) & row_mask).collect();
                    let fm = SupportMatrix::from_row_bits(n, &f).expect("valid bits");
                    if structural_rank(&fm) < n {
                        def += 1;
                        return (def, ss, viol, ex);
                    }
                    if ss_count_bits(&f, n) as usize != n {
                        return (def, ss, viol, ex);
                    }
                    ss += 1;
                    for t in admissible_bits(&f, n, &perms) {
                        let tm = SupportMatrix::from_row_bits(n, &t).expect("valid bits");
                        if !is_generalized_permutation(&tm) {
                            viol += 1;
                            if ex.len() < MAX_EXAMPLES {
                                ex.push((fm.clone(), tm));
                            }
                        }
                    }
                    (def, ss, viol, ex)
                },
            )
            .collect();
        let mut row = ScanRow {
            n,
            m,
            total: 1u64 << cells,
            rank_deficient: 0,
            ss_hold: 0,
            violations: 0,
            examples: Vec::new(),
        };
        for (d, s, v, ex) in partials {
            row.rank_deficient += d;
            row.ss_hold += s;
            row.violations += v;
            row.examples.extend(ex);
        }
        row.examples.sort_by_key(|(f, t)| (f.row_bits(), t.row_bits()));
        row.examples.truncate(MAX_EXAMPLES);
        rows.push(row);
    }
    Ok(rows)
}

/// Result of the linear recovery demo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRecovery {
    pub lambda: f64,
    /// Estimated mixing `Â` (`m × n`).
    pub estimate: Vec<Vec<f64>>,
    /// `Â⁺ A`, ideally a scaled permutation.
    pub product: Vec<Vec<f64>>,
    /// Best permutation `π` with `product[i][π(i)]` on the support.
    pub permutation: Vec<usize>,
    /// Share of `|Â⁺ A|` off the best permuted diagonal.
    pub off_dp_fraction: f64,
    pub objective: f64,
}

const DEMO_SAMPLES: usize = 20_000;
const DEMO_STARTS: usize = 12;
const DEMO_ITERS: usize = 4000;

fn to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..a.nrows()).map(|i| a.row(i).iter().cloned().collect()).collect()
}

/// Off-diagonal mass of `M` under the best permutation.
pub fn off_dp_fraction(m: &DMatrix<f64>) -> (f64, Vec<usize>) {
    let n = m.nrows();
    let total: f64 = m.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return (1.0, (0..n).collect());
    }
    permutations(n)
        .into_iter()
        .map(|p| {
            let on: f64 = p.iter().enumerate().map(|(i, &j)| m[(i, j)].abs()).sum();
            ((total - on) / total, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one permutation")
}

fn prox(cfg: &PenaltyConfig, z: f64, step: f64) -> f64 {
    let (lam, g, a) = (cfg.lambda, cfg.gamma, z.abs());
    let soft = |t: f64| z.signum() * (a - t).max(0.0);
    match cfg.kind {
        PenaltyKind::L1 => soft(step * lam),
        PenaltyKind::Mcp => {
            if a <= step * lam {
                0.0
            } else if a <= g * lam {
                z.signum() * (a - step * lam) / (1.0 - step / g)
            } else {
                z
            }
        }
        PenaltyKind::Scad => {
            if a <= lam * (1.0 + step) {
                soft(step * lam)
            } else if a <= g * lam {
                ((g - 1.0) * z - z.signum() * g * step * lam) / (g - 1.0 - step)
            } else {
                z
            }
        }
    }
}

/// Fits `Â` to the sample covariance of `x = A s` (unit-variance Gaussian
/// sources) by penalized least squares `‖Σ̂ − ÂÂᵀ‖²_F + Σ P(Â_ij)` with
/// proximal gradient from several random starts, and reports how far
/// `Â⁺ A` is from a scaled permutation.
pub fn linear_recovery_demo(a: &DMatrix<f64>, penalty: &PenaltyConfig, seed: u64) -> Result<LinearRecovery> {
    penalty.validate()?;
    let (m, n) = a.shape();
    if n == 0 || m < n || n > 8 {
        return Err(Error::InvalidParameter(format!("demo needs 1 ≤ n ≤ min(m, 8), got {m}x{n}")));
    }
    let mask = a.iter().map(|v| *v != 0.0).collect::<Vec<bool>>();
    let support = SupportMatrix::new(m, n, (0..m * n).map(|k| mask[(k % n) * m + k / n]).collect())?;
    if generic_rank(&support, seed) != n {
        return Err(Error::RankDeficient("support of A is generically rank deficient".into()));
    }
    let sv = a.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > 1e6 {
        return Err(Error::InvalidParameter(format!("A is ill-conditioned (σ_max/σ_min = {})", smax / smin)));
    }

    let mut rng = seeded_rng(seed);
    let s = DMatrix::from_fn(DEMO_SAMPLES, n, |_, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        e
    });
    let x = &s * a.transpose();
    let cov = x.transpose() * &x / DEMO_SAMPLES as f64;
    let step = 0.1 / (cov.norm() + 1.0);
    if penalty.kind == PenaltyKind::Mcp && step >= penalty.gamma || penalty.kind == PenaltyKind::Scad && step >= penalty.gamma - 1.0 {
        return Err(Error::InvalidParameter("proximal step too large for the concavity knob".into()));
    }
    let scale = (cov.trace() / (m * n) as f64).sqrt().max(1e-3);
    let objective = |ah: &DMatrix<f64>| {
        let r = &cov - ah * ah.transpose();
        r.norm_squared() + ah.iter().map(|v| penalty.value_unchecked(*v)).sum::<f64>()
    };

    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for start in 0..DEMO_STARTS {
        let mut srng = seeded_rng(derive_seed(seed, start as u64 + 1));
        let mut ah = DMatrix::from_fn(m, n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut srng);
            scale * e
        });
        for _ in 0..DEMO_ITERS {
            let grad = (&ah * ah.transpose() - &cov) * &ah * 4.0;
            let z = &ah - grad * step;
            ah = z.map(|v| prox(penalty, v, step));
        }
        let obj = objective(&ah);
        if obj.is_finite() && best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, ah));
        }
    }
    let (obj, ah) = best.ok_or_else(|| Error::NonFinite("demo objective".into()))?;
    let product = pinv(&ah) * a;
    let (frac, perm) = off_dp_fraction(&product);
    Ok(LinearRecovery {
        lambda: penalty.lambda,
        estimate: to_rows(&ah),
        product: to_rows(&product),
        permutation: perm,
        off_dp_fraction: frac,
        objective: obj,
    })
}

/// Runs [`linear_recovery_demo`] for each `λ` and keeps the run with the
/// smallest off-permutation mass.
pub fn linear_recovery_sweep(a: &DMatrix<f64>, kind: PenaltyKind, lambdas: &[f64], seed: u64) -> Result<LinearRecovery> {
    let mut best: Option<LinearRecovery> = None;
    for &lam in lambdas {
        let r = linear_recovery_demo(a, &PenaltyConfig::with_default_knob(kind, lam), seed)?;
        if best.as_ref().is_none_or(|b| r.off_dp_fraction < b.off_dp_fraction) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("empty λ sweep".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::support::{random_support, ss_report};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn sm(cols: usize, rows: &[&[usize]]) -> SupportMatrix {
        SupportMatrix::from_row_sets(cols, rows).unwrap()
    }

    #[test]
    fn propagation_examples() {
        let f = sm(2, &[&[0], &[0, 1], &[1]]);
        assert_eq!(propagate_support(&f, &SupportMatrix::identity(2).unwrap()).unwrap(), f);
        let swap = sm(2, &[&[1], &[0]]);
        assert_eq!(propagate_support(&f, &swap).unwrap(), sm(2, &[&[1], &[0, 1], &[0]]));
        let ones = SupportMatrix::ones(2, 2).unwrap();
        assert_eq!(propagate_support(&f, &ones).unwrap(), SupportMatrix::ones(3, 2).unwrap());
        assert!(propagate_support(&f, &SupportMatrix::ones(3, 3).unwrap()).is_err());
    }

    #[test]
    fn admissible_sets() {
        let id = admissible_t_supports(&SupportMatrix::identity(2).unwrap()).unwrap();
        assert_eq!(id, vec![sm(2, &[&[1], &[0]]), SupportMatrix::identity(2).unwrap()]);

        let dense = lemma_check(&SupportMatrix::ones(2, 2).unwrap()).unwrap();
        assert!(!dense.ss_holds);
        assert!(!dense.all_permutation_scalings);
        assert!(dense.admissible.iter().any(|t| !is_generalized_permutation(t)));
        assert!(dense.counterexample.is_some());

        let chain = admissible_t_supports(&sm(2, &[&[0], &[0, 1], &[1]])).unwrap();
        assert!(!chain.is_empty() && chain.iter().all(is_generalized_permutation));

        assert!(admissible_t_supports(&SupportMatrix::ones(7, 2).unwrap()).is_err());
        assert!(admissible_t_supports(&SupportMatrix::ones(5, 5).unwrap()).is_err());
    }

    #[test]
    fn lemma_holds_on_identity_and_random_ss_instance() {
        assert!(lemma_check(&SupportMatrix::identity(3).unwrap()).unwrap().all_permutation_scalings);
        let mut seed = 0;
        let f = loop {
            let f = random_support(4, 3, 0.5, seed).unwrap();
            if ss_report(&f).all_hold && structural_rank(&f) == 3 {
                break f;
            }
            seed += 1;
        };
        let r = lemma_check(&f).unwrap();
        assert!(r.ss_holds && r.all_permutation_scalings && r.counterexample.is_none());
    }

    #[test]
    fn small_scans_have_no_violations() {
        let rows = exhaustive_lemma_scan(2, 2..=3).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.violations, 0);
            assert_eq!(r.total, 1 << (r.m * r.n));
            assert!(r.rank_deficient > 0 && r.ss_hold > 0);
        }
        // 2x2: supports with a perfect matching are 7 of 16; SS holds for 2.
        assert_eq!((rows[0].rank_deficient, rows[0].ss_hold), (9, 2));
        let three = exhaustive_lemma_scan(3, 3..=3).unwrap();
        assert_eq!(three[0].violations, 0);
        assert!(exhaustive_lemma_scan(4, 4..=4).is_err());
        assert_eq!(ScanRow::CSV_HEADER, "n,m,total,rank_deficient,ss_hold,violations");
        assert_eq!(rows[0].csv(), "2,2,16,9,2,0");
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(3)[0], vec![0, 1, 2]);
    }

    #[test]
    fn linear_demo_trivial_cases() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = linear_recovery_demo(&id, &PenaltyConfig::mcp(0.1, 2.0), 1).unwrap();
        assert!(r.off_dp_fraction < 1e-12, "{}", r.off_dp_fraction);
        let mut pd = DMatrix::zeros(3, 3);
        pd[(0, 2)] = 2.0;
        pd[(1, 0)] = -0.5;
        pd[(2, 1)] = 1.3;
        let r = linear_recovery_demo(&pd, &PenaltyConfig::mcp(0.1, 2.0), 2).unwrap();
        assert!(r.off_dp_fraction < 0.01, "{}", r.off_dp_fraction);
        assert!(linear_recovery_demo(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), &PenaltyConfig::l1(0.1), 0).is_err());
    }

    #[test]
    fn linear_demo_recovers_random_sparse_mixing() {
        let mut rng = seeded_rng(4);
        let mut seed = 0;
        let f = loop {
            let f = random_support(5, 3, 0.5, seed).unwrap();
            if ss_report(&f).all_hold && structural_rank(&f) == 3 {
                break f;
            }
            seed += 1;
        };
        let a = DMatrix::from_fn(5, 3, |i, j| {
            if f.get(i, j) {
                let mag: f64 = rng.random_range(0.5..2.0);
                if rng.random::<bool>() { mag } else { -mag }
            } else {
                0.0
            }
        });
        let r = linear_recovery_sweep(&a, PenaltyKind::Mcp, &[0.03, 0.1, 0.3], 7).unwrap();
        assert!(r.off_dp_fraction <= 0.05, "{r:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn propagation_is_monotone(fb in prop::collection::vec(0u64..8, 4), tb in prop::collection::vec(0u64..8, 3), i in 0usize..4, j in 0usize..3, k in 0usize..3) {
            let f = SupportMatrix::from_row_bits(3, &fb).unwrap();
            let t = SupportMatrix::from_row_bits(3, &tb).unwrap();
            let base = propagate_support(&f, &t).unwrap();
            let mut f2 = f.clone();
            f2.set(i, j, true);
            let mut t2 = t.clone();
            t2.set(j, k, true);
            for bigger in [propagate_support(&f2, &t).unwrap(), propagate_support(&f, &t2).unwrap()] {
                for r in 0..4 {
                    for c in 0..3 {
                        prop_assert!(!base.get(r, c) || bigger.get(r, c));
                    }
                }
            }
        }

        #[test]
        fn permutations_are_admissible_under_full_rank(fb in prop::collection::vec(0u64..8, 4), p in 0usize..6) {
            let f = SupportMatrix::from_row_bits(3, &fb).unwrap();
            prop_assume!(structural_rank(&f) == 3);
            let perm = &permutations(3)[p];
            let rows: Vec<u64> = perm.iter().map(|&c| 1u64 << c).collect();
            let t = SupportMatrix::from_row_bits(3, &rows).unwrap();
            prop_assert!(admissible_t_supports(&f).unwrap().contains(&t));
        }
    }
}
