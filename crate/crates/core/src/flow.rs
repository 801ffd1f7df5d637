//! Invertible coupling flow `f̂` with a conditional latent prior `p(ŝ | u)`.
//!
//! The flow is bijective on `m` dimensions. Each coupling layer splits the
//! coordinates with a binary mask: conditioning coordinates pass through and
//! parameterize a scale/translate update of the others,
//!
//! ```text
//! y_a = x_a,   y_b = x_b ⊙ exp(s(x_a)) + t(x_a)
//! ```
//!
//! so the log-determinant is the sum of the active log-scales. In
//! volume-preserving mode the log-scales are centred to sum to zero. Masks
//! alternate between a random balanced half and its complement, which
//! interleaves coordinates across layers.
//!
//! The latent is split into source coordinates and `m − n` noise
//! coordinates; see [`ConditionalPrior`].

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seeded_rng;

type Mat = DMatrix<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Checkpoint format tag and version.
pub const CHECKPOINT_FORMAT: &str = "ica-lab-flow";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    /// Scale and translate.
    Affine,
    /// Translate only (unit Jacobian determinant).
    Additive,
}

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub layers: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub volume_preserving: bool,
    pub kind: CouplingKind,
    /// Log-scales are soft-clamped to `(−c, c)` via `c · tanh(raw / c)`.
    pub scale_clamp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            hidden_width: 32,
            hidden_layers: 1,
            volume_preserving: true,
            kind: CouplingKind::Affine,
            scale_clamp: 2.0,
        }
    }
}

/// One dense layer `h · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Mat,
    pub bias: Mat,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut crate::Rng) -> Self {
        let weight = if std == 0.0 {
            Mat::zeros(fan_in, fan_out)
        } else {
            let dist = Normal::new(0.0, std).expect("positive std");
            Mat::from_fn(fan_in, fan_out, |_, _| dist.sample(rng))
        };
        Self {
            weight,
            bias: Mat::zeros(1, fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// `true` marks a conditioning (pass-through) coordinate.
    pub mask: Vec<bool>,
    pub kind: CouplingKind,
    pub volume_preserving: bool,
    pub scale_clamp: f64,
    /// Hidden layers followed by the output layer.
    pub net: Vec<Dense>,
}

struct Split {
    cond: Vec<usize>,
    trans: Vec<usize>,
    /// Column of coordinate `c` inside `[cond, trans]`.
    pos: Vec<usize>,
}

impl CouplingLayer {
    fn split(&self) -> Split {
        let cond: Vec<usize> = (0..self.mask.len()).filter(|&i| self.mask[i]).collect();
        let trans: Vec<usize> = (0..self.mask.len()).filter(|&i| !self.mask[i]).collect();
        let mut pos = vec![0; self.mask.len()];
        for (k, &c) in cond.iter().chain(trans.iter()).enumerate() {
            pos[c] = k;
        }
        Split { cond, trans, pos }
    }

    fn transformed(&self) -> usize {
        self.mask.iter().filter(|&&c| !c).count()
    }
}

/// The estimator: an ordered stack of coupling layers over `dim`
/// coordinates, of which `sources` latent coordinates are source estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub sources: usize,
    pub layers: Vec<CouplingLayer>,
}

/// Parameters of a model bound as leaves on a tape.
pub(crate) struct BoundFlow<'t> {
    layers: Vec<Vec<(Var<'t>, Var<'t>)>>,
}

impl FlowModel {
    /// Near-identity model: output layers start at zero so every coupling
    /// is the identity map.
    pub fn new(dim: usize, sources: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        Self::build(dim, sources, cfg, seed, 0.0)
    }

    /// A model with random output layers (std `out_std`), for testing.
    pub fn random(dim: usize, sources: usize, cfg: &FlowConfig, seed: u64, out_std: f64) -> Result<Self> {
        Self::build(dim, sources, cfg, seed, out_std)
    }

    fn build(dim: usize, sources: usize, cfg: &FlowConfig, seed: u64, out_std: f64) -> Result<Self> {
        if dim == 0 || sources == 0 || sources > dim {
            return Err(Error::InvalidParameter(format!(
                "flow needs 1 ≤ sources ≤ dim, got sources={sources}, dim={dim}"
            )));
        }
        if cfg.layers == 0 || cfg.hidden_width == 0 {
            return Err(Error::InvalidParameter("flow needs ≥ 1 layer and hidden width ≥ 1".into()));
        }
        if !(cfg.scale_clamp > 0.0) {
            return Err(Error::InvalidParameter(format!("scale_clamp={} must be positive", cfg.scale_clamp)));
        }
        let mut rng = seeded_rng(seed);
        let mut layers = Vec::with_capacity(cfg.layers);
        let mut base_mask = vec![false; dim];
        for l in 0..cfg.layers {
            if l % 2 == 0 {
                let mut order: Vec<usize> = (0..dim).collect();
                order.shuffle(&mut rng);
                base_mask = vec![false; dim];
                for &c in &order[..dim / 2] {
                    base_mask[c] = true;
                }
            }
            let mask: Vec<bool> = if l % 2 == 0 {
                base_mask.clone()
            } else if dim == 1 {
                base_mask.clone()
            } else {
                base_mask.iter().map(|b| !b).collect()
            };
            let n_cond = mask.iter().filter(|&&b| b).count();
            let n_trans = dim - n_cond;
            let out = match cfg.kind {
                CouplingKind::Affine => 2 * n_trans,
                CouplingKind::Additive => n_trans,
            };
            let mut net = Vec::with_capacity(cfg.hidden_layers + 1);
            let mut fan_in = n_cond;
            for _ in 0..cfg.hidden_layers {
                let std = 1.0 / (fan_in.max(1) as f64).sqrt();
                net.push(Dense::init(fan_in, cfg.hidden_width, std, &mut rng));
                fan_in = cfg.hidden_width;
            }
            let out_std = out_std / (fan_in.max(1) as f64).sqrt();
            let mut last = Dense::init(fan_in, out, out_std, &mut rng);
            if out_std != 0.0 {
                let dist = Normal::new(0.0, out_std).expect("positive std");
                last.bias = Mat::from_fn(1, out, |_, _| dist.sample(&mut rng));
            }
            net.push(last);
            layers.push(CouplingLayer {
                mask,
                kind: cfg.kind,
                volume_preserving: cfg.volume_preserving,
                scale_clamp: cfg.scale_clamp,
                net,
            });
        }
        Ok(Self { dim, sources, layers })
    }

    /// All parameters in a fixed order (per layer: `W, b` of each dense).
    pub fn params(&self) -> Vec<&Mat> {
        self.layers
            .iter()
            .flat_map(|l| l.net.iter().flat_map(|d| [&d.weight, &d.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.net.iter_mut().flat_map(|d| [&mut d.weight, &mut d.bias]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundFlow<'t> {
        let leaf = |m: &Mat| if trainable { tape.var(m.clone()) } else { tape.constant(m.clone()) };
        BoundFlow {
            layers: self
                .layers
                .iter()
                .map(|l| l.net.iter().map(|d| (leaf(&d.weight), leaf(&d.bias))).collect())
                .collect(),
        }
    }

    pub(crate) fn bound_params<'t>(bound: &BoundFlow<'t>) -> Vec<Var<'t>> {
        bound.layers.iter().flat_map(|l| l.iter().flat_map(|&(w, b)| [w, b])).collect()
    }

    /// Scale/translate of one layer, with tangents pushed through the
    /// subnetwork. Returns `(s, t, ds, dt)`; `s` is `None` for additive
    /// couplings.
    #[allow(clippy::type_complexity)]
    fn subnet<'t>(
        layer: &CouplingLayer,
        params: &[(Var<'t>, Var<'t>)],
        xa: Var<'t>,
        dxa: &[Var<'t>],
    ) -> (Option<Var<'t>>, Var<'t>, Vec<Option<Var<'t>>>, Vec<Var<'t>>) {
        let tape = xa.tape();
        let mut h = xa;
        let mut dh: Vec<Var<'t>> = dxa.to_vec();
        for (k, &(w, b)) in params.iter().enumerate() {
            let pre = h.affine(w, b);
            let dpre: Vec<Var<'t>> = dh.iter().map(|d| d.matmul(w)).collect();
            if k + 1 == params.len() {
                h = pre;
                dh = dpre;
            } else {
                h = pre.tanh();
                let slope = 1.0 - h.square();
                dh = dpre.into_iter().map(|d| d * slope).collect();
            }
        }
        let nt = layer.transformed();
        match layer.kind {
            CouplingKind::Additive => (None, h, vec![None; dh.len()], dh),
            CouplingKind::Affine => {
                let s_cols: Vec<usize> = (0..nt).collect();
                let t_cols: Vec<usize> = (nt..2 * nt).collect();
                let c = layer.scale_clamp;
                let th = h.gather_cols(&s_cols).scale(1.0 / c).tanh();
                let mut s = th.scale(c);
                let slope = 1.0 - th.square();
                let mut ds: Vec<Var<'t>> = dh.iter().map(|d| d.gather_cols(&s_cols) * slope).collect();
                if layer.volume_preserving {
                    let center = tape.constant(Mat::from_fn(nt, nt, |i, j| {
                        f64::from(u8::from(i == j)) - 1.0 / nt as f64
                    }));
                    s = s.matmul(center);
                    ds = ds.into_iter().map(|d| d.matmul(center)).collect();
                }
                let t = h.gather_cols(&t_cols);
                let dt = dh.iter().map(|d| d.gather_cols(&t_cols)).collect();
                (Some(s), t, ds.into_iter().map(Some).collect(), dt)
            }
        }
    }

    /// Forward map on the tape. Returns `(y, log_det per row, tangents)`,
    /// where each tangent is pushed through as `J_forward · dz`.
    pub(crate) fn forward_vars<'t>(
        &self,
        bound: &BoundFlow<'t>,
        z: Var<'t>,
        tangents: &[Var<'t>],
    ) -> (Var<'t>, Option<Var<'t>>, Vec<Var<'t>>) {
        let mut x = z;
        let mut dx: Vec<Var<'t>> = tangents.to_vec();
        let mut log_det: Option<Var<'t>> = None;
        for (layer, params) in self.layers.iter().zip(&bound.layers) {
            let sp = layer.split();
            let xa = x.gather_cols(&sp.cond);
            let xb = x.gather_cols(&sp.trans);
            let dxa: Vec<Var<'t>> = dx.iter().map(|d| d.gather_cols(&sp.cond)).collect();
            let (s, t, ds, dt) = Self::subnet(layer, params, xa, &dxa);
            let (yb, dyb): (Var<'t>, Vec<Var<'t>>) = match s {
                Some(s) => {
                    let e = s.exp();
                    let yb = xb * e + t;
                    let xe = xb * e;
                    let dyb = dx
                        .iter()
                        .zip(ds.iter().zip(&dt))
                        .map(|(d, (dsk, dtk))| d.gather_cols(&sp.trans) * e + xe * dsk.expect("affine") + *dtk)
                        .collect();
                    let ones = z.tape().constant(Mat::from_element(sp.trans.len(), 1, 1.0));
                    let ld = s.matmul(ones);
                    log_det = Some(match log_det {
                        Some(acc) => acc + ld,
                        None => ld,
                    });
                    (yb, dyb)
                }
                None => {
                    let yb = xb + t;
                    let dyb = dx.iter().zip(&dt).map(|(d, dtk)| d.gather_cols(&sp.trans) + *dtk).collect();
                    (yb, dyb)
                }
            };
            x = Var::concat_cols(&[xa, yb]).gather_cols(&sp.pos);
            dx = dxa
                .into_iter()
                .zip(dyb)
                .map(|(a, b)| Var::concat_cols(&[a, b]).gather_cols(&sp.pos))
                .collect();
        }
        (x, log_det, dx)
    }

    /// Inverse map on the tape. Returns `(z, log_det of the inverse per row)`.
    pub(crate) fn inverse_vars<'t>(&self, bound: &BoundFlow<'t>, x: Var<'t>) -> (Var<'t>, Option<Var<'t>>) {
        let mut y = x;
        let mut log_det: Option<Var<'t>> = None;
        for (layer, params) in self.layers.iter().zip(&bound.layers).rev() {
            let sp = layer.split();
            let ya = y.gather_cols(&sp.cond);
            let yb = y.gather_cols(&sp.trans);
            let (s, t, _, _) = Self::subnet(layer, params, ya, &[]);
            let xb = match s {
                Some(s) => {
                    let ones = x.tape().constant(Mat::from_element(sp.trans.len(), 1, 1.0));
                    let ld = -s.matmul(ones);
                    log_det = Some(match log_det {
                        Some(acc) => acc + ld,
                        None => ld,
                    });
                    (yb - t) * (-s).exp()
                }
                None => yb - t,
            };
            y = Var::concat_cols(&[ya, xb]).gather_cols(&sp.pos);
        }
        (y, log_det)
    }

    fn check_cols(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.dim {
            return Err(Error::shape(format!("{} columns", self.dim), format!("{} columns", m.ncols())));
        }
        Ok(())
    }

    /// `x = f̂(z)` row-wise, with the forward log-determinant per row.
    pub fn forward(&self, z: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check_cols(z)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (x, ld, _) = self.forward_vars(&bound, tape.constant(z.clone()), &[]);
        finish(x, ld, z.nrows())
    }

    /// `z = f̂⁻¹(x)` row-wise, with the inverse log-determinant per row.
    pub fn inverse(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        self.check_cols(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (z, ld) = self.inverse_vars(&bound, tape.constant(x.clone()));
        finish(z, ld, x.nrows())
    }

    /// Columns `cols` of `J_f̂(z)` for every row of `z`; entry `k` of the
    /// result is an `rows × m` matrix whose row `r` is column `cols[k]` of
    /// the Jacobian at `z_r`.
    pub fn jacobian_columns(&self, z: &Mat, cols: &[usize]) -> Result<Vec<Mat>> {
        self.check_cols(z)?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.dim) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.dim });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let tangents: Vec<Var<'_>> = cols
            .iter()
            .map(|&c| tape.constant(Mat::from_fn(z.nrows(), self.dim, |_, j| f64::from(u8::from(j == c)))))
            .collect();
        let (_, _, dx) = self.forward_vars(&bound, tape.constant(z.clone()), &tangents);
        let out: Vec<Mat> = dx.into_iter().map(|d| d.value()).collect();
        if out.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("decoder Jacobian".into()));
        }
        Ok(out)
    }

    /// The `m × n` decoder Jacobian over the first `n` latent coordinates.
    pub fn decoder_jacobian(&self, z: &[f64], n: usize) -> Result<Mat> {
        if n == 0 || n > self.dim {
            return Err(Error::IndexOutOfRange { index: n, len: self.dim + 1 });
        }
        let zm = Mat::from_row_slice(1, z.len(), z);
        let cols: Vec<usize> = (0..n).collect();
        let parts = self.jacobian_columns(&zm, &cols)?;
        Ok(Mat::from_fn(self.dim, n, |i, k| parts[k][(0, i)]))
    }

    /// Full `m × m` forward Jacobian at `z`.
    pub fn full_jacobian(&self, z: &[f64]) -> Result<Mat> {
        self.decoder_jacobian(z, self.dim)
    }

    /// `log p(x | u)` per row.
    pub fn log_likelihood(&self, prior: &ConditionalPrior, x: &Mat, u: &[usize]) -> Result<Vec<f64>> {
        self.check_cols(x)?;
        prior.check(self.dim, u, x.nrows())?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let bp = prior.bind(&tape, false);
        let (z, ld) = self.inverse_vars(&bound, tape.constant(x.clone()));
        let lp = prior.log_density_vars(&bp, z, u);
        let total = match ld {
            Some(ld) => lp + ld,
            None => lp,
        };
        let v: Vec<f64> = total.value().iter().cloned().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("log-likelihood".into()));
        }
        Ok(v)
    }

    /// Draws `count` observations `x = f̂(z)`, `z ~ p(· | u)`.
    pub fn sample(&self, prior: &ConditionalPrior, u: usize, count: usize, seed: u64) -> Result<Mat> {
        let z = prior.sample(u, count, seed)?;
        Ok(self.forward(&z)?.0)
    }
}

fn finish(v: Var<'_>, ld: Option<Var<'_>>, rows: usize) -> Result<(Mat, Vec<f64>)> {
    let out = v.value();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("flow output".into()));
    }
    let ld = match ld {
        Some(ld) => ld.value().iter().cloned().collect(),
        None => vec![0.0; rows],
    };
    Ok((out, ld))
}

/// Role of a latent coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentRole {
    /// Independent of `u`.
    Invariant,
    /// Mean and variance depend on `u`.
    Dependent,
    /// Padding coordinate for the undercomplete case.
    Noise,
}

/// Diagonal Gaussian prior over the latent, conditioned on a domain label.
///
/// Dependent coordinates carry a mean and log-variance per domain.
/// Invariant and noise coordinates share one zero-mean log-variance across
/// domains; it is fixed at 0 (unit variance) unless `learn_shared_variance`
/// is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPrior {
    pub roles: Vec<LatentRole>,
    pub domains: usize,
    pub learn_shared_variance: bool,
    /// `1 × m`; entries at dependent positions are unused.
    pub shared_log_var: Mat,
    /// `domains × n_dependent`.
    pub dep_mean: Mat,
    /// `domains × n_dependent`.
    pub dep_log_var: Mat,
}

pub(crate) struct BoundPrior<'t> {
    shared: Var<'t>,
    dep_mean: Var<'t>,
    dep_log_var: Var<'t>,
    trainable: Vec<Var<'t>>,
}

impl ConditionalPrior {
    pub fn new(roles: Vec<LatentRole>, domains: usize, learn_shared_variance: bool) -> Result<Self> {
        if roles.is_empty() || domains == 0 {
            return Err(Error::InvalidParameter("prior needs ≥ 1 coordinate and ≥ 1 domain".into()));
        }
        let nd = roles.iter().filter(|r| **r == LatentRole::Dependent).count();
        Ok(Self {
            shared_log_var: Mat::zeros(1, roles.len()),
            dep_mean: Mat::zeros(domains, nd),
            dep_log_var: Mat::zeros(domains, nd),
            roles,
            domains,
            learn_shared_variance,
        })
    }

    /// Standard normal prior over `dim` coordinates with `sources` invariant
    /// source coordinates followed by noise.
    pub fn standard(dim: usize, sources: usize) -> Result<Self> {
        Self::layout(dim, sources, 0, 1, false)
    }

    /// Layout `[invariant (n_i), dependent (n_d), noise (dim − n_i − n_d)]`.
    pub fn layout(dim: usize, n_i: usize, n_d: usize, domains: usize, learn_shared_variance: bool) -> Result<Self> {
        if n_i + n_d > dim {
            return Err(Error::InvalidParameter(format!("{n_i}+{n_d} sources exceed dim {dim}")));
        }
        let roles = (0..dim)
            .map(|i| {
                if i < n_i {
                    LatentRole::Invariant
                } else if i < n_i + n_d {
                    LatentRole::Dependent
                } else {
                    LatentRole::Noise
                }
            })
            .collect();
        Self::new(roles, domains, learn_shared_variance)
    }

    pub fn dim(&self) -> usize {
        self.roles.len()
    }

    fn dependent_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.roles[i] == LatentRole::Dependent).collect()
    }

    fn shared_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.roles[i] != LatentRole::Dependent).collect()
    }

    fn check(&self, dim: usize, u: &[usize], rows: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::shape(format!("prior over {dim} coordinates"), format!("{}", self.dim())));
        }
        if u.len() != rows {
            return Err(Error::shape(format!("{rows} labels"), format!("{}", u.len())));
        }
        if let Some(&bad) = u.iter().find(|&&l| l >= self.domains) {
            return Err(Error::IndexOutOfRange { index: bad, len: self.domains });
        }
        Ok(())
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        if self.learn_shared_variance {
            out.push(&self.shared_log_var);
        }
        out.push(&self.dep_mean);
        out.push(&self.dep_log_var);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        if self.learn_shared_variance {
            out.push(&mut self.shared_log_var);
        }
        out.push(&mut self.dep_mean);
        out.push(&mut self.dep_log_var);
        out
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundPrior<'t> {
        let shared = if trainable && self.learn_shared_variance {
            tape.var(self.shared_log_var.clone())
        } else {
            tape.constant(self.shared_log_var.clone())
        };
        let leaf = |m: &Mat| if trainable { tape.var(m.clone()) } else { tape.constant(m.clone()) };
        let dep_mean = leaf(&self.dep_mean);
        let dep_log_var = leaf(&self.dep_log_var);
        let mut params = Vec::new();
        if trainable {
            if self.learn_shared_variance {
                params.push(shared);
            }
            params.push(dep_mean);
            params.push(dep_log_var);
        }
        BoundPrior {
            shared,
            dep_mean,
            dep_log_var,
            trainable: params,
        }
    }

    pub(crate) fn bound_params<'t>(bound: &BoundPrior<'t>) -> Vec<Var<'t>> {
        bound.trainable.clone()
    }

    /// Per-row `log p(z | u)` as an `rows × 1` node.
    pub(crate) fn log_density_vars<'t>(&self, bound: &BoundPrior<'t>, z: Var<'t>, u: &[usize]) -> Var<'t> {
        let tape = z.tape();
        let rows = u.len();
        let shared_rows = bound.shared.gather_rows(&vec![0; rows]);
        let dep = self.dependent_indices();
        let (log_var, diff) = if dep.is_empty() {
            (shared_rows, z)
        } else {
            let shared_idx = self.shared_indices();
            let mut pos = vec![0; self.dim()];
            for (k, &c) in shared_idx.iter().chain(dep.iter()).enumerate() {
                pos[c] = k;
            }
            let lv = Var::concat_cols(&[shared_rows.gather_cols(&shared_idx), bound.dep_log_var.gather_rows(u)])
                .gather_cols(&pos);
            let zeros = tape.constant(Mat::zeros(rows, shared_idx.len()));
            let mean = Var::concat_cols(&[zeros, bound.dep_mean.gather_rows(u)]).gather_cols(&pos);
            (lv, z - mean)
        };
        let quad = diff.square() * (-log_var).exp();
        let ones = tape.constant(Mat::from_element(self.dim(), 1, 1.0));
        (quad + log_var).add_scalar(LN_2PI).matmul(ones).scale(-0.5)
    }

    /// Mean and variance of every coordinate under domain `u`.
    pub fn moments(&self, u: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if u >= self.domains {
            return Err(Error::IndexOutOfRange { index: u, len: self.domains });
        }
        let mut mean = vec![0.0; self.dim()];
        let mut var: Vec<f64> = self.shared_log_var.iter().map(|lv| lv.exp()).collect();
        for (k, &c) in self.dependent_indices().iter().enumerate() {
            mean[c] = self.dep_mean[(u, k)];
            var[c] = self.dep_log_var[(u, k)].exp();
        }
        Ok((mean, var))
    }

    /// Exact `log p(z | u)` for one point.
    pub fn log_density(&self, z: &[f64], u: usize) -> Result<f64> {
        let (mean, var) = self.moments(u)?;
        if z.len() != self.dim() {
            return Err(Error::shape(format!("{} coordinates", self.dim()), format!("{}", z.len())));
        }
        Ok(z.iter()
            .zip(mean.iter().zip(&var))
            .map(|(x, (m, v))| -0.5 * (LN_2PI + v.ln() + (x - m).powi(2) / v))
            .sum())
    }

    /// `count` draws from `p(· | u)`, deterministic in `seed`.
    pub fn sample(&self, u: usize, count: usize, seed: u64) -> Result<Mat> {
        let (mean, var) = self.moments(u)?;
        let mut rng = seeded_rng(seed);
        Ok(Mat::from_fn(count, self.dim(), |_, j| {
            let e: f64 = StandardNormal.sample(&mut rng);
            mean[j] + var[j].sqrt() * e
        }))
    }
}

/// Indices of the `n` latent columns with the largest standard deviation,
/// in decreasing order of spread.
pub fn rank_latents_by_sd(latents: &Mat, n: usize) -> Vec<usize> {
    let mut sd: Vec<(usize, f64)> = (0..latents.ncols())
        .map(|j| {
            let col = latents.column(j);
            let mean = col.mean();
            (j, (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len().max(1) as f64).sqrt())
        })
        .collect();
    sd.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sd.into_iter().take(n).map(|(j, _)| j).collect()
}

/// Rows of `z` used to average decoder Jacobians in
/// [`rank_latents_by_contribution`].
pub const CONTRIBUTION_ROWS: usize = 100;

/// Latent indices ordered by their share of the observation spread,
/// `sd(z_j) · rms_r ‖∂x/∂z_j (z_r)‖`, largest first; ties keep index order.
/// Under a volume-preserving flow a latent can trade spread for decoder
/// gain, so spread alone does not separate sources from padding noise.
pub fn rank_latents_by_contribution(model: &FlowModel, latents: &Mat, n: usize) -> Result<Vec<usize>> {
    if latents.nrows() == 0 {
        return Err(Error::InvalidParameter("no latent rows".into()));
    }
    let step = latents.nrows().div_ceil(CONTRIBUTION_ROWS);
    let rows: Vec<usize> = (0..latents.nrows()).step_by(step).collect();
    let cols: Vec<usize> = (0..model.dim).collect();
    let jac = model.jacobian_columns(&latents.select_rows(&rows), &cols)?;
    let mut score: Vec<(usize, f64)> = (0..model.dim)
        .map(|j| {
            let col = latents.column(j);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            let gain = (jac[j].norm_squared() / rows.len() as f64).sqrt();
            (j, sd * gain)
        })
        .collect();
    score.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(score.into_iter().take(n).map(|(j, _)| j).collect())
}

/// Gaussian log-density constant `−½ ln(2π)`.
pub fn half_log_two_pi() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

/// A serialized model with its prior and a topology header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub topology: Topology,
    pub model: FlowModel,
    pub prior: ConditionalPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub dim: usize,
    pub sources: usize,
    pub layers: usize,
    pub masks: Vec<Vec<bool>>,
    pub widths: Vec<Vec<usize>>,
}

impl Checkpoint {
    pub fn new(model: FlowModel, prior: ConditionalPrior) -> Self {
        let topology = Topology {
            dim: model.dim,
            sources: model.sources,
            layers: model.layers.len(),
            masks: model.layers.iter().map(|l| l.mask.clone()).collect(),
            widths: model
                .layers
                .iter()
                .map(|l| l.net.iter().map(|d| d.weight.ncols()).collect())
                .collect(),
        };
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            topology,
            model,
            prior,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let expect = Checkpoint::new(ck.model.clone(), ck.prior.clone()).topology;
        if expect != ck.topology {
            return Err(Error::Parse("checkpoint topology header does not match parameters".into()));
        }
        Ok(ck)
    }
}
