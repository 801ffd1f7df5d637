//! Jacobian support patterns and the structural sparsity condition.
//!
//! A [`SupportMatrix`] is the boolean pattern of an `m × n` mixing Jacobian:
//! entry `(i, j)` is set when observation `x_i` may depend on source `s_j`.
//! Source `k` satisfies *structural sparsity* when some set of rows `C_k`,
//! each containing `k`, has row supports intersecting exactly in `{k}`. Since
//! adding rows only shrinks an intersection, the check uses the maximal
//! witness (every row that contains `k`).
//!
//! Indices are zero-based throughout.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{derive_seed, linalg, seeded_rng};

/// Largest `m · n` accepted by [`ss_all_rate_exhaustive`].
pub const EXHAUSTIVE_CELL_LIMIT: usize = 20;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Boolean `m × n` pattern of a Jacobian support.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SupportJson", into = "SupportJson")]
pub struct SupportMatrix {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct SupportJson {
    m: usize,
    n: usize,
    rows: Vec<Vec<u8>>,
}

impl TryFrom<SupportJson> for SupportMatrix {
    type Error = Error;

    fn try_from(j: SupportJson) -> Result<Self> {
        if j.rows.len() != j.m {
            return Err(Error::shape(format!("{} rows", j.m), format!("{} rows", j.rows.len())));
        }
        let mut mask = Vec::with_capacity(j.m * j.n);
        for row in &j.rows {
            if row.len() != j.n {
                return Err(Error::shape(format!("{} columns", j.n), format!("{} columns", row.len())));
            }
            for &v in row {
                match v {
                    0 => mask.push(false),
                    1 => mask.push(true),
                    other => return Err(Error::Parse(format!("support entry {other} is not 0/1"))),
                }
            }
        }
        SupportMatrix::new(j.m, j.n, mask)
    }
}

impl From<SupportMatrix> for SupportJson {
    fn from(s: SupportMatrix) -> Self {
        SupportJson {
            m: s.rows,
            n: s.cols,
            rows: (0..s.rows)
                .map(|i| (0..s.cols).map(|j| u8::from(s.get(i, j))).collect())
                .collect(),
        }
    }
}

impl fmt::Debug for SupportMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SupportMatrix {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let line: String = (0..self.cols).map(|j| if self.get(i, j) { '1' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl SupportMatrix {
    /// Builds a pattern from a row-major mask.
    pub fn new(rows: usize, cols: usize, mask: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "support must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if mask.len() != rows * cols {
            return Err(Error::shape(format!("{} cells", rows * cols), format!("{} cells", mask.len())));
        }
        Ok(Self { rows, cols, mask })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![false; rows * cols])
    }

    pub fn ones(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut s = Self::zeros(n, n)?;
        for i in 0..n {
            s.set(i, i, true);
        }
        Ok(s)
    }

    /// Builds a pattern from per-row column index sets.
    pub fn from_row_sets(cols: usize, row_sets: &[&[usize]]) -> Result<Self> {
        let mut s = Self::zeros(row_sets.len(), cols)?;
        for (i, set) in row_sets.iter().enumerate() {
            for &j in *set {
                if j >= cols {
                    return Err(Error::IndexOutOfRange { index: j, len: cols });
                }
                s.set(i, j, true);
            }
        }
        Ok(s)
    }

    /// Builds a pattern from row bitmasks (bit `j` set ⇔ column `j`).
    pub fn from_row_bits(cols: usize, bits: &[u64]) -> Result<Self> {
        let mut s = Self::zeros(bits.len(), cols)?;
        for (i, b) in bits.iter().enumerate() {
            for j in 0..cols {
                s.set(i, j, b >> j & 1 == 1);
            }
        }
        Ok(s)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.mask[i * self.cols + j] = v;
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `F_{i,:}`: the columns present in row `i`.
    pub fn row_support(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    /// `F_{:,j}`: the rows present in column `j`.
    pub fn col_support(&self, j: usize) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.get(i, j)).collect()
    }

    /// Number of set entries `|F|`.
    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Keeps only the first `k` columns.
    pub fn restrict_cols(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.cols {
            return Err(Error::IndexOutOfRange { index: k, len: self.cols + 1 });
        }
        let mut out = Self::zeros(self.rows, k)?;
        for i in 0..self.rows {
            for j in 0..k {
                out.set(i, j, self.get(i, j));
            }
        }
        Ok(out)
    }

    /// Adds an extra row with the given column set.
    pub fn with_row(&self, cols: &[usize]) -> Result<Self> {
        let mut mask = self.mask.clone();
        let mut row = vec![false; self.cols];
        for &j in cols {
            if j >= self.cols {
                return Err(Error::IndexOutOfRange { index: j, len: self.cols });
            }
            row[j] = true;
        }
        mask.extend(row);
        Self::new(self.rows + 1, self.cols, mask)
    }

    /// Row bitmasks; requires `n ≤ 64`.
    pub fn row_bits(&self) -> Vec<u64> {
        assert!(self.cols <= 64, "row_bits requires at most 64 columns");
        (0..self.rows)
            .map(|i| (0..self.cols).fold(0u64, |acc, j| acc | (u64::from(self.get(i, j)) << j)))
            .collect()
    }

    /// Dense 0/1 matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| if self.get(i, j) { 1.0 } else { 0.0 })
    }

    fn check_source(&self, k: usize) -> Result<()> {
        if k >= self.cols {
            return Err(Error::IndexOutOfRange { index: k, len: self.cols });
        }
        Ok(())
    }
}

/// Per-source outcome of the structural sparsity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceWitness {
    pub source: usize,
    pub holds: bool,
    /// The maximal witness set `C_k`: every row containing `k`.
    pub rows: Vec<usize>,
    /// `∩_{i ∈ C_k} F_{i,:}`; the full column set when `C_k` is empty.
    pub intersection: Vec<usize>,
}

/// Structural sparsity report over all sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsReport {
    pub per_source: Vec<SourceWitness>,
    pub all_hold: bool,
    pub fraction: f64,
}

/// Monte Carlo estimate with a Wilson 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub rate: f64,
    pub trials: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

/// Which quantity [`ss_rate_monte_carlo`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// Fraction of random supports where every source holds.
    AllSources,
    /// Mean over supports of the fraction of holding sources.
    MeanPerSource,
}

/// `∩_{i : k ∈ F_{i,:}} F_{i,:}`; the full column set when column `k` is empty.
pub fn source_intersection(s: &SupportMatrix, k: usize) -> Result<Vec<usize>> {
    Ok(witness(s, k)?.intersection)
}

fn witness(s: &SupportMatrix, k: usize) -> Result<SourceWitness> {
    s.check_source(k)?;
    let rows = s.col_support(k);
    let mut inter = vec![true; s.cols()];
    for &i in &rows {
        for (j, keep) in inter.iter_mut().enumerate() {
            *keep &= s.get(i, j);
        }
    }
    let intersection: Vec<usize> = (0..s.cols()).filter(|&j| inter[j]).collect();
    let holds = !rows.is_empty() && intersection == [k];
    Ok(SourceWitness {
        source: k,
        holds,
        rows,
        intersection,
    })
}

/// Whether source `k` satisfies structural sparsity.
pub fn satisfies_ss_source(s: &SupportMatrix, k: usize) -> Result<bool> {
    Ok(witness(s, k)?.holds)
}

/// Pairwise characterization: column `k` is nonzero and every other column
/// `j` is excluded by some row containing `k`.
pub fn satisfies_ss_source_pairwise(s: &SupportMatrix, k: usize) -> Result<bool> {
    s.check_source(k)?;
    let rows = s.col_support(k);
    if rows.is_empty() {
        return Ok(false);
    }
    Ok((0..s.cols())
        .filter(|&j| j != k)
        .all(|j| rows.iter().any(|&i| !s.get(i, j))))
}

/// Aggregates the per-source checks.
pub fn ss_report(s: &SupportMatrix) -> SsReport {
    let per_source: Vec<SourceWitness> =
        (0..s.cols()).map(|k| witness(s, k).expect("k in range")).collect();
    let holding = per_source.iter().filter(|w| w.holds).count();
    SsReport {
        all_hold: holding == s.cols(),
        fraction: holding as f64 / s.cols() as f64,
        per_source,
    }
}

/// Counts holding sources on bitmask rows (`n ≤ 64`).
pub(crate) fn ss_count_bits(rows: &[u64], n: usize) -> usize {
    (0..n)
        .filter(|&k| {
            let bit = 1u64 << k;
            let mut inter = u64::MAX;
            let mut any = false;
            for &r in rows {
                if r & bit != 0 {
                    inter &= r;
                    any = true;
                }
            }
            any && inter & low_bits(n) == bit
        })
        .count()
}

pub(crate) fn low_bits(n: usize) -> u64 {
    if n >= 64 {
        u64::MAX
    } else {
        (1u64 << n) - 1
    }
}

/// I.i.d. Bernoulli(`p`) support, deterministic in `seed`.
pub fn random_support(m: usize, n: usize, p: f64, seed: u64) -> Result<SupportMatrix> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("density p={p} outside [0, 1]")));
    }
    let mut rng = seeded_rng(seed);
    let mask = (0..m * n).map(|_| rng.random::<f64>() < p).collect();
    SupportMatrix::new(m, n, mask)
}

/// Wilson score interval at 95% for `successes / trials`.
pub fn wilson_interval(rate: f64, trials: usize) -> (f64, f64) {
    let n = trials as f64;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (rate + z2 / (2.0 * n)) / denom;
    let half = Z95 * (rate * (1.0 - rate) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0).min(rate), (center + half).min(1.0).max(rate))
}

/// Monte Carlo rate of structural sparsity over random Bernoulli(`p`)
/// supports. Trial `t` uses seed `seed ⊕ t`, so the result does not depend
/// on the worker count.
///
/// For [`RateKind::MeanPerSource`] the interval treats each support as one
/// observation, which is conservative because per-support fractions have
/// no more variance than a single Bernoulli draw.
pub fn ss_rate_monte_carlo(
    m: usize,
    n: usize,
    p: f64,
    trials: usize,
    seed: u64,
    kind: RateKind,
) -> Result<RateEstimate> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("support must be at least 1x1, got {m}x{n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("density p={p} outside [0, 1]")));
    }
    let count: u64 = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let s = random_support(m, n, p, derive_seed(seed, t)).expect("validated");
            let holding = ss_report(&s).per_source.iter().filter(|w| w.holds).count() as u64;
            match kind {
                RateKind::AllSources => u64::from(holding == n as u64),
                RateKind::MeanPerSource => holding,
            }
        })
        .sum();
    let denom = match kind {
        RateKind::AllSources => trials as f64,
        RateKind::MeanPerSource => (trials * n) as f64,
    };
    let rate = count as f64 / denom;
    let (ci_low, ci_high) = wilson_interval(rate, trials);
    Ok(RateEstimate {
        rate,
        trials,
        ci_low,
        ci_high,
        seed,
    })
}

/// Exact counts over all `2^{mn}` masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustiveCounts {
    pub total: u64,
    /// Masks where every source holds.
    pub all_hold: u64,
    /// Masks where source 0 holds (identical for every source by symmetry).
    pub source_zero_holds: u64,
}

/// Enumerates every mask of an `m × n` support.
pub fn ss_exhaustive_counts(m: usize, n: usize) -> Result<ExhaustiveCounts> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("support must be at least 1x1, got {m}x{n}")));
    }
    if m * n > EXHAUSTIVE_CELL_LIMIT {
        return Err(Error::SizeLimit {
            what: format!("m·n = {}", m * n),
            limit: EXHAUSTIVE_CELL_LIMIT,
        });
    }
    let total = 1u64 << (m * n);
    let row_mask = low_bits(n);
    let (all_hold, source_zero_holds) = (0..total)
        .into_par_iter()
        .map(|code| {
            let rows: Vec<u64> = (0..m).map(|i| (code >> (i * n)) & row_mask).collect();
            let all = u64::from(ss_count_bits(&rows, n) == n);
            let zero = u64::from(ss_count_bits_single(&rows, n, 0));
            (all, zero)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(ExhaustiveCounts {
        total,
        all_hold,
        source_zero_holds,
    })
}

fn ss_count_bits_single(rows: &[u64], n: usize, k: usize) -> bool {
    let bit = 1u64 << k;
    let mut inter = u64::MAX;
    let mut any = false;
    for &r in rows {
        if r & bit != 0 {
            inter &= r;
            any = true;
        }
    }
    any && inter & low_bits(n) == bit
}

/// Exact probability, under Bernoulli(1/2), that all sources hold.
pub fn ss_all_rate_exhaustive(m: usize, n: usize) -> Result<f64> {
    let c = ss_exhaustive_counts(m, n)?;
    Ok(c.all_hold as f64 / c.total as f64)
}

/// Exact number of `m × n` masks in which a fixed source holds, by
/// inclusion–exclusion over the events "column `j` has no witness row".
/// `None` when the count does not fit in 128 bits.
pub fn ss_source_count_analytic(m: usize, n: usize) -> Option<u128> {
    if m == 0 || n == 0 || m * n > 126 {
        return None;
    }
    if n == 1 {
        return Some((1u128 << m) - 1);
    }
    let mut acc: i128 = 0;
    let mut binom: i128 = 1;
    for s in 0..n {
        // C(n-1, s) · (2^s + 1)^m · 2^{m(n-1-s)}
        let base = (1i128 << s) + 1;
        let mut pow: i128 = 1;
        for _ in 0..m {
            pow = pow.checked_mul(base)?;
        }
        let term = binom.checked_mul(pow)?.checked_mul(1i128.checked_shl((m * (n - 1 - s)) as u32)?)?;
        acc = if s % 2 == 0 { acc.checked_add(term)? } else { acc.checked_sub(term)? };
        binom = binom * (n as i128 - 1 - s as i128) / (s as i128 + 1);
    }
    u128::try_from(acc).ok()
}

/// Probability that a fixed source satisfies structural sparsity under
/// Bernoulli(1/2):
/// `Σ_{s=0}^{n-1} C(n-1,s) (-1)^s (1/2 + 2^{-(s+1)})^m` for `n ≥ 2`, and
/// `1 - 2^{-m}` for `n = 1` (only the nonzero-column event remains).
pub fn ss_source_probability_analytic(m: usize, n: usize) -> f64 {
    if n == 1 {
        return 1.0 - 0.5f64.powi(m as i32);
    }
    let mut acc = 0.0;
    let mut binom = 1.0;
    for s in 0..n {
        let term = binom * (0.5 + 0.5f64.powi(s as i32 + 1)).powi(m as i32);
        acc += if s % 2 == 0 { term } else { -term };
        binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
    }
    acc.clamp(0.0, 1.0)
}

/// Rank of a standard-normal matrix placed on the support; equals the
/// generic rank with probability one.
pub fn generic_rank(s: &SupportMatrix, seed: u64) -> usize {
    let mut rng = seeded_rng(seed);
    let a = DMatrix::from_fn(s.rows(), s.cols(), |i, j| {
        if s.get(i, j) {
            StandardNormal.sample(&mut rng)
        } else {
            0.0
        }
    });
    linalg::numerical_rank(&a, 1e-9)
}

/// Structural (term) rank: size of a maximum matching between rows and
/// columns through set entries. Equals the generic rank.
pub fn structural_rank(s: &SupportMatrix) -> usize {
    let mut col_match: Vec<Option<usize>> = vec![None; s.cols()];
    let mut size = 0;
    for i in 0..s.rows() {
        let mut seen = vec![false; s.cols()];
        if augment(s, i, &mut seen, &mut col_match) {
            size += 1;
        }
    }
    size
}

fn augment(s: &SupportMatrix, i: usize, seen: &mut [bool], col_match: &mut [Option<usize>]) -> bool {
    for j in 0..s.cols() {
        if s.get(i, j) && !seen[j] {
            seen[j] = true;
            if col_match[j].is_none_or(|r| augment(s, r, seen, col_match)) {
                col_match[j] = Some(i);
                return true;
            }
        }
    }
    false
}
