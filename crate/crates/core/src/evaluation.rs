//! Identifiability metrics.
//!
//! MCC aligns every (true, estimated) pair with a 1-D cubic spline fitted by
//! least squares, takes absolute Pearson correlations, and solves the
//! assignment problem on the resulting matrix. Subspace scores regress one
//! block on the other in both directions with a random-feature network.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{rank_latents_by_contribution, FlowModel};
use crate::linalg::{column, mean_var, pearson};
use crate::seeded_rng;

type Mat = DMatrix<f64>;

/// Interior knots of the alignment spline.
pub const SPLINE_KNOTS: usize = 5;
const MIN_ROWS: usize = 10;

/// Least-squares cubic spline with knots at quantiles of `x`.
fn spline_fit(x: &[f64], y: &[f64]) -> Vec<f64> {
    let (mx, vx) = mean_var(x);
    let sx = vx.sqrt();
    let xs: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let knots: Vec<f64> = (1..=SPLINE_KNOTS)
        .map(|k| sorted[(k * (sorted.len() - 1)) / (SPLINE_KNOTS + 1)])
        .collect();
    let cols = 4 + knots.len();
    let basis = Mat::from_fn(xs.len(), cols, |r, c| {
        let t = xs[r];
        match c {
            0..=3 => t.powi(c as i32),
            _ => (t - knots[c - 4]).max(0.0).powi(3),
        }
    });
    let coef = basis
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(y), 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols));
    (&basis * coef).iter().cloned().collect()
}

/// Regresses `true_col` on `est_col` and returns the fitted values with
/// their correlation to `true_col`. Constant columns give correlation 0.
pub fn componentwise_align(true_col: &[f64], est_col: &[f64]) -> Result<(Vec<f64>, f64)> {
    if true_col.len() != est_col.len() {
        return Err(Error::shape(format!("{} rows", true_col.len()), format!("{}", est_col.len())));
    }
    if true_col.len() < MIN_ROWS {
        return Err(Error::InvalidParameter(format!("alignment needs ≥ {MIN_ROWS} rows")));
    }
    if true_col.iter().chain(est_col).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment input".into()));
    }
    let (_, vt) = mean_var(true_col);
    let (_, ve) = mean_var(est_col);
    if vt == 0.0 || ve == 0.0 {
        log::warn!("constant column in component-wise alignment; correlation set to 0");
        return Ok((est_col.to_vec(), 0.0));
    }
    let fitted = spline_fit(est_col, true_col);
    let corr = pearson(&fitted, true_col);
    Ok((fitted, corr))
}

/// `n × n̂` matrix of aligned absolute correlations.
pub fn correlation_matrix(truth: &Mat, est: &Mat) -> Result<Mat> {
    if truth.nrows() != est.nrows() {
        return Err(Error::shape(format!("{} rows", truth.nrows()), format!("{}", est.nrows())));
    }
    if truth.nrows() < MIN_ROWS {
        return Err(Error::InvalidParameter(format!("correlation needs ≥ {MIN_ROWS} rows")));
    }
    let tc: Vec<Vec<f64>> = (0..truth.ncols()).map(|i| column(truth, i)).collect();
    let ec: Vec<Vec<f64>> = (0..est.ncols()).map(|j| column(est, j)).collect();
    let mut out = Mat::zeros(truth.ncols(), est.ncols());
    for (i, t) in tc.iter().enumerate() {
        for (j, e) in ec.iter().enumerate() {
            out[(i, j)] = componentwise_align(t, e)?.1.abs();
        }
    }
    Ok(out)
}

/// Hungarian algorithm on an `n × n̂` score matrix (`n ≤ n̂`). Returns the
/// column assigned to each row, maximizing the total score.
pub fn optimal_assignment(score: &Mat) -> Result<Vec<usize>> {
    let (n, m) = score.shape();
    if n > m {
        return Err(Error::InvalidParameter(format!("assignment needs rows ≤ columns, got {n}x{m}")));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assignment scores".into()));
    }
    if n == 0 {
        return Ok(vec![]);
    }
    // Minimize −score with potentials; arrays are 1-based, index 0 is a sentinel.
    let cost = |i: usize, j: usize| -score[(i - 1, j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    Ok(assign)
}

/// Bidirectional regression scores of one block pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceScore {
    /// R² of predicting the true block from the estimate.
    pub r2_fwd: f64,
    /// R² of predicting the estimate from the true block.
    pub r2_bwd: f64,
}

impl SubspaceScore {
    pub fn mean(&self) -> f64 {
        0.5 * (self.r2_fwd + self.r2_bwd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mcc: f64,
    /// `permutation[i]` is the estimated column matched to true source `i`.
    pub permutation: Vec<usize>,
    /// Aligned correlation of each matched pair.
    pub per_pair: Vec<f64>,
    pub correlations: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace_scores: Option<Vec<SubspaceScore>>,
}

/// Mean aligned correlation under the optimal one-to-one matching.
pub fn mcc(truth: &Mat, est: &Mat) -> Result<EvalReport> {
    let corr = correlation_matrix(truth, est)?;
    let permutation = optimal_assignment(&corr)?;
    let per_pair: Vec<f64> = permutation.iter().enumerate().map(|(i, &j)| corr[(i, j)]).collect();
    let mcc = per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64;
    Ok(EvalReport {
        mcc,
        permutation,
        per_pair,
        correlations: (0..corr.nrows()).map(|i| corr.row(i).iter().cloned().collect()).collect(),
        subspace_scores: None,
    })
}

/// Random tanh features followed by ridge least squares.
struct FeatureRegressor {
    mean: Vec<f64>,
    sd: Vec<f64>,
    w: Mat,
    b: Mat,
    coef: Mat,
}

const FEATURES: usize = 200;
const RIDGE: f64 = 1e-6;

impl FeatureRegressor {
    fn features(&self, x: &Mat) -> Mat {
        let z = Mat::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.mean[c]) / self.sd[c]);
        let mut h = &z * &self.w;
        for r in 0..h.nrows() {
            for c in 0..h.ncols() {
                h[(r, c)] = (h[(r, c)] + self.b[(0, c)]).tanh();
            }
        }
        let mut full = Mat::from_element(x.nrows(), 1 + z.ncols() + h.ncols(), 1.0);
        full.view_mut((0, 1), (z.nrows(), z.ncols())).copy_from(&z);
        full.view_mut((0, 1 + z.ncols()), (h.nrows(), h.ncols())).copy_from(&h);
        full
    }

    fn fit(x: &Mat, y: &Mat, seed: u64) -> Result<Self> {
        let d = x.ncols();
        let mut mean = Vec::with_capacity(d);
        let mut sd = Vec::with_capacity(d);
        for c in 0..d {
            let (m, v) = mean_var(&column(x, c));
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("regressor input column {c} is constant")));
            }
            mean.push(m);
            sd.push(v.sqrt());
        }
        let mut rng = seeded_rng(seed);
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let w = Mat::from_fn(d, FEATURES, |_, _| dist.sample(&mut rng));
        let b = Mat::from_fn(1, FEATURES, |_, _| dist.sample(&mut rng));
        let mut reg = Self {
            mean,
            sd,
            w,
            b,
            coef: Mat::zeros(0, 0),
        };
        let phi = reg.features(x);
        let mut gram = phi.transpose() * &phi;
        let scale = gram.diagonal().max().max(1.0);
        for k in 1..gram.nrows() {
            gram[(k, k)] += RIDGE * scale;
        }
        let rhs = phi.transpose() * y;
        reg.coef = gram
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::NonFinite("ridge system".into()))?;
        Ok(reg)
    }

    fn predict(&self, x: &Mat) -> Mat {
        self.features(x) * &self.coef
    }
}

fn r2(y: &Mat, pred: &Mat) -> f64 {
    let mut sse = 0.0;
    let mut sst = 0.0;
    for c in 0..y.ncols() {
        let (m, _) = mean_var(&column(y, c));
        for r in 0..y.nrows() {
            sse += (y[(r, c)] - pred[(r, c)]).powi(2);
            sst += (y[(r, c)] - m).powi(2);
        }
    }
    if sst == 0.0 {
        0.0
    } else {
        1.0 - sse / sst
    }
}

/// Held-out R² of `x → y`: every fourth row is held out.
fn heldout_r2(x: &Mat, y: &Mat) -> Result<f64> {
    let train: Vec<usize> = (0..x.nrows()).filter(|r| r % 4 != 3).collect();
    let test: Vec<usize> = (0..x.nrows()).filter(|r| r % 4 == 3).collect();
    let reg = FeatureRegressor::fit(&x.select_rows(&train), &y.select_rows(&train), 0x5eed)?;
    let y_test = y.select_rows(&test);
    Ok(r2(&y_test, &reg.predict(&x.select_rows(&test))))
}

/// Bidirectional nonlinear R² between two blocks of equal width.
pub fn subspace_score(true_block: &Mat, est_block: &Mat) -> Result<SubspaceScore> {
    let (n, d) = true_block.shape();
    if est_block.nrows() != n {
        return Err(Error::shape(format!("{n} rows"), format!("{}", est_block.nrows())));
    }
    if d == 0 || est_block.ncols() == 0 {
        return Err(Error::InvalidParameter("empty block".into()));
    }
    if n < MIN_ROWS * d.max(est_block.ncols()) {
        return Err(Error::InvalidParameter(format!("subspace score needs ≥ {} rows", MIN_ROWS * d)));
    }
    Ok(SubspaceScore {
        r2_fwd: heldout_r2(est_block, true_block)?,
        r2_bwd: heldout_r2(true_block, est_block)?,
    })
}

/// Optimal matching of true blocks to estimated blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAssignment {
    /// `permutation[i]` is the estimated block matched to true block `i`.
    pub permutation: Vec<usize>,
    pub scores: Vec<SubspaceScore>,
    /// Mean subspace score for every (true, estimated) block pair of equal size.
    pub score_matrix: Vec<Vec<f64>>,
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .scan(0, |acc, &s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect()
}

/// Matches contiguous column blocks of `truth` (sizes `true_groups`) to
/// blocks of `est` (sizes `est_groups`) by mean bidirectional R².
pub fn block_assignment(truth: &Mat, est: &Mat, true_groups: &[usize], est_groups: &[usize]) -> Result<BlockAssignment> {
    let mut a = true_groups.to_vec();
    let mut b = est_groups.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::shape(format!("block sizes {true_groups:?}"), format!("{est_groups:?}")));
    }
    if true_groups.iter().sum::<usize>() != truth.ncols() || est_groups.iter().sum::<usize>() != est.ncols() {
        return Err(Error::shape("block sizes summing to the column count", "mismatch"));
    }
    let (to, eo) = (offsets(true_groups), offsets(est_groups));
    let k = true_groups.len();
    let mut mean_scores = Mat::from_element(k, k, -1e6);
    let mut pair_scores = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            if true_groups[i] != est_groups[j] {
                continue;
            }
            let tb = truth.columns(to[i], true_groups[i]).into_owned();
            let eb = est.columns(eo[j], est_groups[j]).into_owned();
            let s = subspace_score(&tb, &eb)?;
            mean_scores[(i, j)] = s.mean();
            pair_scores[i][j] = Some(s);
        }
    }
    let permutation = optimal_assignment(&mean_scores)?;
    let scores = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| pair_scores[i][j].expect("sizes match on the optimum"))
        .collect();
    Ok(BlockAssignment {
        permutation,
        scores,
        score_matrix: (0..k)
            .map(|i| (0..k).map(|j| if pair_scores[i][j].is_some() { mean_scores[(i, j)] } else { f64::NAN }).collect())
            .collect(),
    })
}

/// Latent codes of `x` restricted to the `n` coordinates that contribute
/// most to the observations.
pub fn recovered_sources(model: &FlowModel, x: &Mat, n: usize) -> Result<Mat> {
    let (z, _) = model.inverse(x)?;
    let idx = rank_latents_by_contribution(model, &z, n)?;
    Ok(z.select_columns(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = seeded_rng(seed);
        Mat::from_fn(rows, cols, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e
        })
    }

    fn brute_force(score: &Mat) -> (f64, Vec<usize>) {
        fn rec(score: &Mat, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if row == score.nrows() {
                let total: f64 = cur.iter().enumerate().map(|(i, &j)| score[(i, j)]).sum();
                if total > best.0 {
                    *best = (total, cur.clone());
                }
                return;
            }
            for j in 0..score.ncols() {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(score, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (f64::NEG_INFINITY, vec![]);
        rec(score, 0, &mut vec![false; score.ncols()], &mut vec![], &mut best);
        best
    }

    #[test]
    fn alignment_examples() {
        let t = column(&gaussian(2000, 1, 1), 0);
        let (_, c) = componentwise_align(&t, &t).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
        let e: Vec<f64> = t.iter().map(|v| v.exp()).collect();
        assert!(componentwise_align(&t, &e).unwrap().1 >= 0.99);
        let noise = column(&gaussian(2000, 1, 2), 0);
        assert!(componentwise_align(&t, &noise).unwrap().1.abs() <= 0.15);
        assert_eq!(componentwise_align(&t, &vec![1.0; 2000]).unwrap().1, 0.0);
        assert!(componentwise_align(&t[..5], &t[..5]).is_err());
        assert!(componentwise_align(&t, &t[..100]).is_err());
    }

    #[test]
    fn correlation_matrix_of_permuted_truth() {
        let t = gaussian(2000, 3, 3);
        let est = t.select_columns(&[2, 0, 1]).map(|v| -v);
        let c = correlation_matrix(&t, &est).unwrap();
        let perm = [1, 2, 0];
        for i in 0..3 {
            for j in 0..3 {
                if j == perm[i] {
                    assert!(c[(i, j)] >= 0.99);
                } else {
                    assert!(c[(i, j)] <= 0.15);
                }
            }
        }
    }

    #[test]
    fn assignment_examples() {
        let id = Mat::from_row_slice(3, 3, &[0.9, 0.1, 0.2, 0.1, 0.8, 0.1, 0.0, 0.2, 0.7]);
        assert_eq!(optimal_assignment(&id).unwrap(), vec![0, 1, 2]);
        let swapped = Mat::from_row_slice(2, 2, &[0.1, 0.9, 0.8, 0.2]);
        assert_eq!(optimal_assignment(&swapped).unwrap(), vec![1, 0]);
        let rect = Mat::from_row_slice(2, 3, &[0.1, 0.2, 0.9, 0.3, 0.95, 0.1]);
        assert_eq!(optimal_assignment(&rect).unwrap(), vec![2, 1]);
        assert!(optimal_assignment(&Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = seeded_rng(11);
        for n in 1..=6 {
            for extra in 0..2 {
                for _ in 0..30 {
                    let s = Mat::from_fn(n, n + extra, |_, _| rand::Rng::random::<f64>(&mut rng));
                    let a = optimal_assignment(&s).unwrap();
                    let total: f64 = a.iter().enumerate().map(|(i, &j)| s[(i, j)]).sum();
                    let (best, perm) = brute_force(&s);
                    assert!((total - best).abs() < 1e-12);
                    assert_eq!(a, perm);
                }
            }
        }
    }

    #[test]
    fn mcc_under_monotone_transform_and_permutation() {
        let t = gaussian(2000, 4, 5);
        let est = Mat::from_fn(2000, 4, |r, c| match c {
            0 => t[(r, 2)].powi(3),
            1 => (0.5 * t[(r, 0)]).exp(),
            2 => -t[(r, 3)],
            _ => (t[(r, 1)]).tanh() * 3.0 + t[(r, 1)],
        });
        let rep = mcc(&t, &est).unwrap();
        assert!((rep.mcc - 1.0).abs() <= 0.02, "{}", rep.mcc);
        assert_eq!(rep.permutation, vec![1, 3, 0, 2]);
        let flipped = est.map(|v| -v);
        let d = (mcc(&t, &flipped).unwrap().mcc - rep.mcc).abs();
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn mcc_of_noise_is_low() {
        let rep = mcc(&gaussian(2000, 4, 6), &gaussian(2000, 4, 7)).unwrap();
        assert!(rep.mcc <= 0.2, "{}", rep.mcc);
    }

    #[test]
    fn subspace_scores() {
        let t = gaussian(2000, 2, 8);
        let same = subspace_score(&t, &t).unwrap();
        assert!(same.r2_fwd >= 0.99 && same.r2_bwd >= 0.99);
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.7, -0.4, 1.3]);
        let lin = subspace_score(&t, &(&t * a)).unwrap();
        assert!(lin.r2_fwd >= 0.95 && lin.r2_bwd >= 0.95);
        let noise = subspace_score(&t, &gaussian(2000, 2, 9)).unwrap();
        assert!(noise.r2_fwd <= 0.2 && noise.r2_bwd <= 0.2, "{noise:?}");
        assert!(subspace_score(&t.rows(0, 15).into_owned(), &t.rows(0, 15).into_owned()).is_err());
    }

    #[test]
    fn block_assignment_recovers_permutation() {
        let t = gaussian(2000, 4, 10);
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.2, -1.0]);
        let b0 = t.columns(0, 2) * &a;
        let b1 = (t.columns(2, 2) * &a).map(|v| v + 0.1 * v.powi(3));
        let mut est = Mat::zeros(2000, 4);
        est.columns_mut(0, 2).copy_from(&b1);
        est.columns_mut(2, 2).copy_from(&b0);
        let r = block_assignment(&t, &est, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert!(r.scores.iter().all(|s| s.mean() > 0.9));
        let single = block_assignment(&t, &t, &[4], &[4]).unwrap();
        assert_eq!(single.permutation, vec![0]);
        assert!(block_assignment(&t, &t, &[3, 1], &[2, 2]).is_err());
    }

    #[test]
    fn scrambled_block_loses_on_score_gap() {
        let t = gaussian(2000, 4, 12);
        let mut est = t.clone();
        let noise = gaussian(2000, 2, 13);
        est.columns_mut(2, 2).copy_from(&noise);
        let r = block_assignment(&t, &est, &[2, 2], &[2, 2]).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
        assert!(r.scores[0].mean() > 0.95 && r.scores[1].mean() < 0.2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn mcc_invariant_under_monotone_maps(seed in any::<u64>(), a in 0.2f64..3.0, shift in -2.0f64..2.0) {
            let t = gaussian(2000, 3, seed);
            let est = t.select_columns(&[1, 2, 0]).map(|v| a * v + shift + 0.1 * v.powi(3));
            prop_assert!(mcc(&t, &est).unwrap().mcc >= 0.98);
        }
    }
}
