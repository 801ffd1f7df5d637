//! Regularized maximum likelihood for the coupling flow.
//!
//! The minimized objective per batch is
//!
//! ```text
//! −mean_r log p(x_r | u_r) + P(mean_r |J_f̂(ẑ_r)|)
//! ```
//!
//! where `ẑ_r = f̂⁻¹(x_r)`, `J_f̂` is the decoder Jacobian over the penalized
//! latent columns, and `P` is the entry-mean penalty of
//! [`crate::penalty::jacobian_penalty`]. The Jacobian term is evaluated on a
//! fixed-size subsample of each batch.

use std::rc::Rc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{ConditionalPrior, FlowConfig, FlowModel};
use crate::penalty::PenaltyConfig;
use crate::synthetic::Dataset;
use crate::{derive_seed, seeded_rng};

type Mat = DMatrix<f64>;

/// Default [`TrainConfig::penalty_weight`].
pub const DEFAULT_PENALTY_WEIGHT: f64 = 1000.0;

/// Latent columns whose decoder Jacobian is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyColumns {
    /// The first `n` latent coordinates.
    Sources,
    /// All `m` latent coordinates.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub penalty: PenaltyConfig,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub volume_preserving: bool,
    pub flow: FlowConfig,
    /// Rows per batch used for the Jacobian penalty.
    pub jacobian_subsample: usize,
    pub penalty_columns: PenaltyColumns,
    /// Learn the variance of invariant and noise latents.
    pub learn_prior_variance: bool,
    /// Condition the prior on `u` when the dataset has dependent sources.
    pub use_labels: bool,
    /// Epochs over which the penalty weight ramps linearly from 0.
    pub penalty_warmup_epochs: usize,
    /// Multiplier on the entry-mean Jacobian penalty. With the default,
    /// `λ` in `[0.001, 0.1]` spans negligible to strong regularization.
    pub penalty_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 200,
            epochs: 100,
            penalty: PenaltyConfig::mcp(0.01, crate::penalty::DEFAULT_MCP_GAMMA),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            volume_preserving: true,
            flow: FlowConfig::default(),
            jacobian_subsample: 32,
            penalty_columns: PenaltyColumns::All,
            learn_prior_variance: true,
            use_labels: true,
            penalty_warmup_epochs: 0,
            penalty_weight: DEFAULT_PENALTY_WEIGHT,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning_rate={} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter("batch_size and epochs must be ≥ 1".into()));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::InvalidParameter(format!("penalty_weight={} must be ≥ 0", self.penalty_weight)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam moments need β ∈ [0, 1) and ε > 0".into()));
        }
        self.penalty.validate()
    }
}

/// Per-epoch averages over batches.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub nll: Vec<f64>,
    pub penalty: Vec<f64>,
    pub loss: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    /// `epoch,nll,penalty,loss` with 1-based epochs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,nll,penalty,loss\n");
        for e in 0..self.len() {
            out.push_str(&format!("{},{},{},{}\n", e + 1, self.nll[e], self.penalty[e], self.loss[e]));
        }
        out
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn optimizer_step(params: &mut [&mut Mat], grads: &[Mat], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} gradients", params.len()), format!("{}", grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Mat::zeros(g.nrows(), g.ncols())).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub nll: f64,
    pub penalty: f64,
    pub loss: f64,
}

/// Builds the loss on `tape`. Returns `(loss, nll, penalty)` nodes and the
/// trainable leaves (flow parameters first, then prior parameters).
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub(crate) fn loss_graph<'t>(
    tape: &'t Tape,
    model: &FlowModel,
    prior: &ConditionalPrior,
    x: &Mat,
    u: &[usize],
    penalty: &PenaltyConfig,
    penalty_weight: f64,
    jac_rows: &[usize],
    columns: PenaltyColumns,
) -> (Var<'t>, Var<'t>, Option<Var<'t>>, Vec<Var<'t>>) {
    let flow = model.bind(tape, true);
    let bp = prior.bind(tape, true);
    let mut leaves = FlowModel::bound_params(&flow);
    leaves.extend(ConditionalPrior::bound_params(&bp));

    let (z, ld) = model.inverse_vars(&flow, tape.constant(x.clone()));
    let mut lp = prior.log_density_vars(&bp, z, u);
    if let Some(ld) = ld {
        lp = lp + ld;
    }
    let nll = -lp.mean();

    let active = penalty.lambda > 0.0 && penalty_weight > 0.0 && !jac_rows.is_empty();
    if !active {
        return (nll, nll, None, leaves);
    }
    let cols: Vec<usize> = match columns {
        PenaltyColumns::Sources => (0..model.sources).collect(),
        PenaltyColumns::All => (0..model.dim).collect(),
    };
    let zs = z.gather_rows(jac_rows);
    let rows = jac_rows.len();
    let tangents: Vec<Var<'t>> = cols
        .iter()
        .map(|&c| tape.constant(Mat::from_fn(rows, model.dim, |_, j| f64::from(u8::from(j == c)))))
        .collect();
    let (_, _, dx) = model.forward_vars(&flow, zs, &tangents);
    let avg = tape.constant(Mat::from_element(1, rows, 1.0 / rows as f64));
    let mean_abs: Vec<Var<'t>> = dx.into_iter().map(|d| avg.matmul(d.abs())).collect();
    let pen = Var::concat_cols(&mean_abs).map(Rc::new(*penalty)).mean();
    let loss = nll + pen.scale(penalty_weight);
    (loss, nll, Some(pen), leaves)
}

/// Loss value of one batch with unit penalty weight.
pub fn loss(
    model: &FlowModel,
    prior: &ConditionalPrior,
    x: &Mat,
    u: &[usize],
    penalty: &PenaltyConfig,
    jacobian_subsample: usize,
) -> Result<LossParts> {
    evaluate(model, prior, x, u, penalty, jacobian_subsample, false).map(|(parts, _)| parts)
}

/// [`loss`] together with its gradient for every parameter, flow
/// parameters first (in [`FlowModel::params`] order), then the prior's.
pub fn loss_and_gradients(
    model: &FlowModel,
    prior: &ConditionalPrior,
    x: &Mat,
    u: &[usize],
    penalty: &PenaltyConfig,
    jacobian_subsample: usize,
) -> Result<(LossParts, Vec<Mat>)> {
    evaluate(model, prior, x, u, penalty, jacobian_subsample, true)
}

fn evaluate(
    model: &FlowModel,
    prior: &ConditionalPrior,
    x: &Mat,
    u: &[usize],
    penalty: &PenaltyConfig,
    jacobian_subsample: usize,
    with_grad: bool,
) -> Result<(LossParts, Vec<Mat>)> {
    penalty.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let tape = Tape::new();
    let rows: Vec<usize> = (0..x.nrows().min(jacobian_subsample)).collect();
    let (l, nll, pen, leaves) = loss_graph(&tape, model, prior, x, u, penalty, 1.0, &rows, PenaltyColumns::All);
    if let Some(e) = tape.poisoned() {
        return Err(e);
    }
    let parts = LossParts {
        nll: nll.scalar_value(),
        penalty: pen.map(|p| p.scalar_value()).unwrap_or(0.0),
        loss: l.scalar_value(),
    };
    if !parts.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss (nll={}, penalty={})", parts.nll, parts.penalty)));
    }
    if !with_grad {
        return Ok((parts, Vec::new()));
    }
    let grads = tape.gradient(l)?;
    Ok((parts, leaves.iter().map(|&v| grads.wrt(v)).collect()))
}

/// A fitted estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FlowModel,
    pub prior: ConditionalPrior,
    pub history: TrainHistory,
}

/// Prior layout for a dataset: `[invariant (n_I), dependent (n_D), noise]`.
/// Without labels every source coordinate is treated as invariant.
pub fn prior_for(dataset: &Dataset, cfg: &TrainConfig) -> Result<ConditionalPrior> {
    let spec = &dataset.spec;
    if cfg.use_labels && spec.n_d > 0 {
        ConditionalPrior::layout(spec.m(), spec.n_i, spec.n_d, spec.domains(), cfg.learn_prior_variance)
    } else {
        ConditionalPrior::layout(spec.m(), spec.n(), 0, 1, cfg.learn_prior_variance)
    }
}

/// Labels the prior sees: the dataset's, or all zeros when unconditioned.
pub fn effective_labels(dataset: &Dataset, prior: &ConditionalPrior) -> Vec<usize> {
    if prior.domains == 1 {
        vec![0; dataset.len()]
    } else {
        dataset.labels.clone()
    }
}

/// Trains a fresh near-identity flow on `dataset`.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset) -> Result<FitResult> {
    cfg.validate()?;
    dataset.check()?;
    let spec = &dataset.spec;
    let flow_cfg = FlowConfig {
        volume_preserving: cfg.volume_preserving,
        ..cfg.flow.clone()
    };
    let model = FlowModel::new(spec.m(), spec.n(), &flow_cfg, derive_seed(cfg.seed, 0x666c))?;
    let prior = prior_for(dataset, cfg)?;
    fit_from(cfg, dataset, model, prior)
}

/// Continues training from a given model and prior.
pub fn fit_from(cfg: &TrainConfig, dataset: &Dataset, mut model: FlowModel, mut prior: ConditionalPrior) -> Result<FitResult> {
    cfg.validate()?;
    dataset.check()?;
    if model.dim != dataset.spec.m() {
        return Err(Error::shape(format!("model over {} dims", dataset.spec.m()), format!("{}", model.dim)));
    }
    let labels = effective_labels(dataset, &prior);
    if prior.dim() != model.dim || labels.iter().any(|&u| u >= prior.domains) {
        return Err(Error::shape("prior matching the model and labels", "mismatch"));
    }
    let n_rows = dataset.len();
    let mut rng = seeded_rng(derive_seed(cfg.seed, 0x6261));
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut adam = AdamState::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let weight = cfg.penalty_weight
            * if cfg.penalty_warmup_epochs == 0 {
                1.0
            } else {
                ((epoch + 1) as f64 / cfg.penalty_warmup_epochs as f64).min(1.0)
            };
        let (mut nll_sum, mut pen_sum, mut loss_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.observations.select_rows(chunk);
            let u: Vec<usize> = chunk.iter().map(|&r| labels[r]).collect();
            let jac_rows: Vec<usize> = (0..chunk.len().min(cfg.jacobian_subsample)).collect();
            let tape = Tape::new();
            let (l, nll, pen, leaves) = loss_graph(
                &tape,
                &model,
                &prior,
                &x,
                &u,
                &cfg.penalty,
                weight,
                &jac_rows,
                cfg.penalty_columns,
            );
            let lv = l.scalar_value();
            if let Some(e) = tape.poisoned() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!("batch {batches}: {e}"),
                });
            }
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!(
                        "batch {batches}: loss {lv} (nll {}, last epoch loss {:?})",
                        nll.scalar_value(),
                        history.loss.last()
                    ),
                });
            }
            let grads = tape.gradient(l)?;
            let g: Vec<Mat> = leaves.iter().map(|&v| grads.wrt(v)).collect();
            let mut params = model.params_mut();
            params.extend(prior.params_mut());
            optimizer_step(&mut params, &g, &mut adam, cfg.learning_rate).map_err(|e| Error::Divergence {
                epoch: epoch + 1,
                detail: format!("batch {batches}: {e}"),
            })?;
            nll_sum += nll.scalar_value();
            pen_sum += pen.map(|p| p.scalar_value()).unwrap_or(0.0);
            loss_sum += lv;
            batches += 1;
        }
        let b = batches as f64;
        history.nll.push(nll_sum / b);
        history.penalty.push(pen_sum / b);
        history.loss.push(loss_sum / b);
        log::debug!("epoch {} nll {:.4} penalty {:.5}", epoch + 1, nll_sum / b, pen_sum / b);
    }
    Ok(FitResult { model, prior, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, GenSpec, MixingConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn linear_dataset(seed: u64) -> Dataset {
        let spec = GenSpec::ucss(2, 2, 400, seed).unwrap().with_mixing(MixingConfig::linear());
        generate(&spec).unwrap().0
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = Mat::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        optimizer_step(&mut [&mut p], &[Mat::zeros(1, 3)], &mut st, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let mut p = Mat::from_element(1, 1, 1.0);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        optimizer_step(&mut [&mut p], &[Mat::from_element(1, 1, 3.0)], &mut st, 0.01).unwrap();
        assert!((p[(0, 0)] - 0.99).abs() < 1e-6);
        assert!(optimizer_step(&mut [&mut p], &[Mat::from_element(1, 1, f64::NAN)], &mut st, 0.01).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut p = Mat::from_row_slice(1, 2, &[3.0, -2.0]);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let g = p.map(|v| 2.0 * v);
            optimizer_step(&mut [&mut p], &[g], &mut st, 0.05).unwrap();
        }
        assert!(p.amax() < 1e-3, "{p}");
    }

    #[test]
    fn standard_normal_entropy() {
        let model = FlowModel::new(1, 1, &FlowConfig::default(), 0).unwrap();
        let prior = ConditionalPrior::standard(1, 1).unwrap();
        let mut rng = seeded_rng(1);
        let x = Mat::from_fn(20_000, 1, |_, _| StandardNormal.sample(&mut rng));
        let parts = loss(&model, &prior, &x, &vec![0; 20_000], &PenaltyConfig::none(), 32).unwrap();
        assert!((parts.loss - 1.418_938_533_204_672_7).abs() < 0.05, "{}", parts.loss);
        assert_eq!(parts.penalty, 0.0);
        assert_eq!(parts.loss, parts.nll);
    }

    #[test]
    fn penalty_term_at_identity() {
        // Identity decoder: mean |J| is the identity, so the entry mean of
        // L1 with λ = 1 over a 2x2 Jacobian is 0.5.
        let model = FlowModel::new(2, 2, &FlowConfig::default(), 0).unwrap();
        let prior = ConditionalPrior::standard(2, 2).unwrap();
        let x = Mat::from_row_slice(3, 2, &[0.1, 0.2, -0.3, 0.4, 1.0, 0.0]);
        let parts = loss(&model, &prior, &x, &[0, 0, 0], &PenaltyConfig::l1(1.0), 32).unwrap();
        assert!((parts.penalty - 0.5).abs() < 1e-12);
        assert!((parts.loss - parts.nll - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = FlowConfig {
            layers: 4,
            hidden_width: 8,
            volume_preserving: false,
            ..FlowConfig::default()
        };
        let model = FlowModel::random(4, 2, &cfg, 3, 0.5).unwrap();
        let mut prior = ConditionalPrior::layout(4, 1, 1, 2, true).unwrap();
        prior.dep_mean[(1, 0)] = 0.4;
        let mut rng = seeded_rng(5);
        let x = Mat::from_fn(6, 4, |_, _| StandardNormal.sample(&mut rng));
        let u = vec![0, 1, 0, 1, 1, 0];
        let penalty = PenaltyConfig::mcp(0.3, 2.0);

        let value = |m: &FlowModel, p: &ConditionalPrior| {
            let tape = Tape::new();
            let (l, _, _, _) = loss_graph(&tape, m, p, &x, &u, &penalty, 1.0, &[0, 1, 2], PenaltyColumns::All);
            l.scalar_value()
        };
        let tape = Tape::new();
        let (l, _, _, leaves) = loss_graph(&tape, &model, &prior, &x, &u, &penalty, 1.0, &[0, 1, 2], PenaltyColumns::All);
        let grads = tape.gradient(l).unwrap();
        let ad: Vec<Mat> = leaves.iter().map(|&v| grads.wrt(v)).collect();
        let count = model.params().len() + prior.params().len();
        assert_eq!(ad.len(), count);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..count {
            for i in 0..ad[k].len() {
                let eval = |delta: f64| {
                    let (mut m2, mut p2) = (model.clone(), prior.clone());
                    let mut targets = m2.params_mut();
                    targets.extend(p2.params_mut());
                    targets[k][i] += delta;
                    value(&m2, &p2)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (fd - ad[k][i]).abs() / fd.abs().max(ad[k][i].abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn training_reduces_nll_and_is_deterministic() {
        let ds = linear_dataset(2);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 100,
            flow: FlowConfig {
                layers: 4,
                hidden_width: 16,
                ..FlowConfig::default()
            },
            ..TrainConfig::default()
        };
        let a = fit(&cfg, &ds).unwrap();
        assert_eq!(a.history.len(), 30);
        assert!(a.history.nll[29] < a.history.nll[0]);
        let b = fit(&cfg, &ds).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.history.to_csv().starts_with("epoch,nll,penalty,loss\n1,"));
    }

    #[test]
    fn loss_decreases_over_five_epochs() {
        let ds = linear_dataset(4);
        let cfg = TrainConfig {
            epochs: 5,
            penalty: PenaltyConfig::none(),
            flow: FlowConfig {
                layers: 4,
                hidden_width: 16,
                ..FlowConfig::default()
            },
            ..TrainConfig::default()
        };
        let h = fit(&cfg, &ds).unwrap().history;
        assert!(h.loss[4] < h.loss[0]);
        assert!(h.penalty.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn zero_lambda_matches_penalty_free_path() {
        let ds = linear_dataset(6);
        let base = TrainConfig {
            epochs: 3,
            flow: FlowConfig {
                layers: 2,
                hidden_width: 8,
                ..FlowConfig::default()
            },
            ..TrainConfig::default()
        };
        let zero = TrainConfig {
            penalty: PenaltyConfig::l1(0.0),
            ..base.clone()
        };
        let none = TrainConfig {
            jacobian_subsample: 0,
            ..base
        };
        assert_eq!(fit(&zero, &ds).unwrap().history, fit(&none, &ds).unwrap().history);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ds = linear_dataset(1);
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { penalty: PenaltyConfig::mcp(0.1, 0.5), ..TrainConfig::default() },
        ] {
            assert!(fit(&cfg, &ds).is_err());
        }
    }
}
