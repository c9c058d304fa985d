//! Training objective and optimiser.
//!
//! The per-batch objective is
//!
//! ```text
//! L = mean_k [log Z_k − log Z_k(C_k)]                      marginal likelihood
//!   + λ_B · max(0, |ρ_B − ρ| − γ) + λ_O · |ρ_B − ρ_O|      entity-ratio terms
//!   + λ_S · |ρ_B − ρ_H|                                     self-training term
//! ```
//!
//! where `ρ_B` is the mean of `1 − p(y_i = O)` over the batch tokens, `ρ_O`
//! the running mean of `ρ_B` over previous batches (a constant here), and
//! `ρ_H` the same ratio restricted to tokens the model labels with
//! confidence above the class-wise thresholds.
//!
//! The ratio terms depend on token marginals, so their gradient is the
//! gradient of an expected additive path functional; see
//! [`LatticeResult::expectation_gradient`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelState, Sentence};
use crate::emission::{FeatureVector, DEFAULT_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::eval::entity_prf;
use crate::lattice::{forward_backward, token_marginals, Constraint, Lattice, LatticeResult};
use crate::model::{Model, ModelGradient};
use crate::rng;
use crate::selftrain::CocaThresholds;

/// How positions of a partially annotated sentence become latent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// `O` and unknown positions are latent; entity labels are observed.
    #[default]
    DistantO,
    /// Only unknown positions are latent; `O` is observed.
    ExplicitUnknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Expected fraction of non-`O` tokens.
    pub eer_target: f64,
    pub margin: f64,
    pub lambda_batch: f64,
    pub lambda_overall: f64,
    pub lambda_st: f64,
    pub latent_mode: LatentMode,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub structural_mask: bool,
    pub max_grad_norm: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eer_target: 0.01,
            margin: 0.01,
            lambda_batch: 10.0,
            lambda_overall: 0.0,
            lambda_st: 0.0,
            latent_mode: LatentMode::DistantO,
            batch_size: 32,
            learning_rate: 0.1,
            lr_decay: 0.95,
            max_epochs: 30,
            early_stop_patience: 5,
            seed: 0,
            feature_dim: DEFAULT_FEATURE_DIM,
            structural_mask: true,
            max_grad_norm: None,
        }
    }
}

impl LossConfig {
    /// Plain CRF negative log-likelihood on data whose `O` tags are trusted.
    pub fn full_annotation(mut self) -> Self {
        self.latent_mode = LatentMode::ExplicitUnknown;
        self.lambda_batch = 0.0;
        self.lambda_overall = 0.0;
        self.lambda_st = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.eer_target) {
            return bad("eer_target must lie in [0, 1]");
        }
        for (name, v) in [
            ("margin", self.margin),
            ("lambda_batch", self.lambda_batch),
            ("lambda_overall", self.lambda_overall),
            ("lambda_st", self.lambda_st),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if let Some(n) = self.max_grad_norm {
            if !(n.is_finite() && n > 0.0) {
                return bad("max_grad_norm must be positive");
            }
        }
        Ok(())
    }
}

/// Running mean of the batch entity ratio since training began.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RatioState {
    sum: f64,
    batches_seen: usize,
}

impl RatioState {
    pub fn record(&mut self, rho_b: f64) {
        self.sum += rho_b;
        self.batches_seen += 1;
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn running_mean(&self) -> Option<f64> {
        (self.batches_seen > 0).then(|| self.sum / self.batches_seen as f64)
    }
}

/// Allowed label sets for a sentence under the given latent mode.
pub fn latentize(s: &Sentence, mode: LatentMode, num_labels: usize, o_index: usize) -> Constraint {
    let allowed = s
        .states
        .iter()
        .map(|st| match (st, mode) {
            (LabelState::Unknown, _) => vec![true; num_labels],
            (LabelState::Observed(l), LatentMode::DistantO) if *l == o_index => vec![true; num_labels],
            (LabelState::Observed(l), _) => {
                let mut row = vec![false; num_labels];
                row[*l] = true;
                row
            }
        })
        .collect();
    Constraint::from_masks(allowed).expect("rows share the label count")
}

/// A training sentence with cached features and its current constraint.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: Vec<FeatureVector>,
    pub constraint: Constraint,
}

impl TrainItem {
    pub fn new(model: &Model, s: &Sentence, mode: LatentMode) -> Self {
        Self {
            features: model.features(s),
            constraint: latentize(s, mode, model.num_labels(), model.tagset.o_index()),
        }
    }
}

/// Marginal-likelihood loss on a lattice and its gradient with respect to the
/// lattice's emission and transition scores.
#[derive(Debug, Clone)]
pub struct PalTerms {
    pub loss: f64,
    pub grad_emissions: Array2<f64>,
    pub grad_transitions: Array2<f64>,
    pub free: LatticeResult,
}

pub fn pal_lattice(l: &Lattice, c: &Constraint) -> Result<PalTerms> {
    let free = forward_backward(l, None)?;
    let clamped = forward_backward(l, Some(c))?;
    let loss = (free.log_z - clamped.log_z).max(0.0);
    let grad_emissions = token_marginals(&free) - token_marginals(&clamped);
    let grad_transitions = free.pair_marginal_sums() - clamped.pair_marginal_sums();
    Ok(PalTerms {
        loss,
        grad_emissions,
        grad_transitions,
        free,
    })
}

/// `−log Σ_{y ∈ C} p(y | x)` for one sentence and its parameter gradient.
pub fn pal_loss(model: &Model, s: &Sentence, c: &Constraint) -> Result<(f64, ModelGradient)> {
    let feats = model.features(s);
    let terms = pal_lattice(&model.lattice(&feats)?, c)?;
    let mut grad = ModelGradient::zeros(model.num_labels());
    model
        .emission
        .accumulate_features(&feats, terms.grad_emissions.view(), &mut grad.emission);
    grad.transitions = terms.grad_transitions;
    Ok((terms.loss, grad))
}

/// Mean of `1 − p(y_i = O)` over every token in the batch.
pub fn batch_entity_ratio(marginals: &[Array2<f64>], o_index: usize) -> Result<f64> {
    let tokens: usize = marginals.iter().map(|m| m.nrows()).sum();
    if tokens == 0 {
        return Err(Error::Empty("batch"));
    }
    let mass: f64 = marginals.iter().map(|m| m.column(o_index).iter().map(|p| 1.0 - p).sum::<f64>()).sum();
    Ok(mass / tokens as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Entity-ratio penalty and its derivative with respect to `ρ_B`.
///
/// The `λ_O` term is skipped until at least one batch has been recorded.
pub fn oeer_loss(rho_b: f64, state: &RatioState, cfg: &LossConfig) -> (f64, f64) {
    oeer_with_mean(rho_b, state.running_mean(), cfg)
}

fn oeer_with_mean(rho_b: f64, rho_o: Option<f64>, cfg: &LossConfig) -> (f64, f64) {
    let dev = rho_b - cfg.eer_target;
    let excess = dev.abs() - cfg.margin;
    let (mut value, mut grad) = if excess > 0.0 {
        (cfg.lambda_batch * excess, cfg.lambda_batch * sign(dev))
    } else {
        (0.0, 0.0)
    };
    if let Some(rho_o) = rho_o {
        value += cfg.lambda_overall * (rho_b - rho_o).abs();
        grad += cfg.lambda_overall * sign(rho_b - rho_o);
    }
    (value, grad)
}

/// `λ_S · |ρ_B − ρ_H|`.
pub fn st_loss(rho_b: f64, rho_h: f64, lambda_s: f64) -> f64 {
    lambda_s * (rho_b - rho_h).abs()
}

/// Which tokens count towards `ρ_H`.
#[derive(Debug, Clone, Copy, Default)]
pub enum StTerm<'a> {
    #[default]
    Off,
    /// Membership decided from the current model's marginals.
    Thresholds(&'a CocaThresholds),
    /// Membership given explicitly, one mask per batch sentence.
    Fixed(&'a [Vec<bool>]),
}

/// Tokens whose most probable label reaches that label's threshold.
pub fn high_confidence_mask(marginals: &Array2<f64>, thresholds: &CocaThresholds) -> Vec<bool> {
    marginals
        .rows()
        .into_iter()
        .map(|row| {
            let (label, conf) = argmax(row.iter().copied());
            conf >= thresholds.threshold(label)
        })
        .collect()
}

pub(crate) fn argmax(xs: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub pal: f64,
    pub oeer: f64,
    pub st: f64,
    pub rho_b: f64,
    pub rho_h: Option<f64>,
    pub grad: ModelGradient,
}

/// The batch objective for fixed `ρ_O` and fixed high-confidence membership.
pub fn batch_objective(
    model: &Model,
    batch: &[&TrainItem],
    cfg: &LossConfig,
    rho_o: Option<f64>,
    st: StTerm<'_>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let ny = model.num_labels();
    let o = model.tagset.o_index();
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = ModelGradient::zeros(ny);
    let mut pal = 0.0;
    let mut frees = Vec::with_capacity(batch.len());
    let mut marginals = Vec::with_capacity(batch.len());
    for item in batch {
        let terms = pal_lattice(&model.lattice(&item.features)?, &item.constraint)?;
        pal += terms.loss * inv_b;
        model
            .emission
            .accumulate_features(&item.features, (&terms.grad_emissions * inv_b).view(), &mut grad.emission);
        grad.transitions.scaled_add(inv_b, &terms.grad_transitions);
        marginals.push(token_marginals(&terms.free));
        frees.push(terms.free);
    }

    let tokens: usize = marginals.iter().map(|m| m.nrows()).sum();
    let rho_b = batch_entity_ratio(&marginals, o)?;
    let (oeer, mut d_rho_b) = oeer_with_mean(rho_b, rho_o, cfg);

    let membership: Option<Vec<Vec<bool>>> = match st {
        StTerm::Off => None,
        StTerm::Thresholds(t) => Some(marginals.iter().map(|m| high_confidence_mask(m, t)).collect()),
        StTerm::Fixed(masks) => {
            if masks.len() != batch.len() || masks.iter().zip(&marginals).any(|(k, m)| k.len() != m.nrows()) {
                return Err(Error::Shape("high-confidence masks do not match batch".into()));
            }
            Some(masks.to_vec())
        }
    };
    let mut st_value = 0.0;
    let mut rho_h = None;
    let mut d_rho_h = 0.0;
    let mut h_size = 0usize;
    if let Some(masks) = &membership {
        h_size = masks.iter().flatten().filter(|&&b| b).count();
        if h_size > 0 && cfg.lambda_st > 0.0 {
            let mass: f64 = masks
                .iter()
                .zip(&marginals)
                .flat_map(|(k, m)| k.iter().zip(m.column(o)).filter(|(h, _)| **h).map(|(_, p)| 1.0 - p))
                .sum();
            let rh = mass / h_size as f64;
            rho_h = Some(rh);
            st_value = st_loss(rho_b, rh, cfg.lambda_st);
            let s = cfg.lambda_st * sign(rho_b - rh);
            d_rho_b += s;
            d_rho_h = -s;
        }
    }

    // ∂L/∂p_i(O): ρ_B contributes −1/T per token, ρ_H contributes −1/|H| per member.
    if d_rho_b != 0.0 || d_rho_h != 0.0 {
        for (k, (item, free)) in batch.iter().zip(&frees).enumerate() {
            let mut weights = Array2::zeros((item.features.len(), ny));
            for i in 0..item.features.len() {
                let mut c = -d_rho_b / tokens as f64;
                if let Some(masks) = &membership {
                    if masks[k][i] && h_size > 0 {
                        c -= d_rho_h / h_size as f64;
                    }
                }
                weights[[i, o]] = c;
            }
            let (_, ge, gt) = free.expectation_gradient(&weights);
            model.emission.accumulate_features(&item.features, ge.view(), &mut grad.emission);
            grad.transitions += &gt;
        }
    }

    Ok(BatchLoss {
        loss: pal + oeer + st_value,
        pal,
        oeer,
        st: st_value,
        rho_b,
        rho_h,
        grad,
    })
}

/// Batch objective followed by recording the detached `ρ_B` in `state`.
pub fn total_loss(
    batch: &[&TrainItem],
    model: &Model,
    cfg: &LossConfig,
    state: &mut RatioState,
    st: StTerm<'_>,
) -> Result<BatchLoss> {
    let out = batch_objective(model, batch, cfg, state.running_mean(), st)?;
    state.record(out.rho_b);
    Ok(out)
}

/// Callback run after every optimiser step; used by self-training.
pub trait TrainingHook {
    fn after_step(&mut self, step: usize, model: &Model, items: &mut [TrainItem]) -> Result<()>;

    /// Thresholds for the self-training term, once it is active.
    fn st_thresholds(&self) -> Option<&CocaThresholds>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best_epoch: Option<usize>,
    pub best_dev_f1: Option<f64>,
    pub history: Vec<EpochLog>,
}

pub fn train(ds_train: &Dataset, ds_dev: &Dataset, cfg: &LossConfig) -> Result<Model> {
    Ok(fit(ds_train, ds_dev, cfg, None)?.model)
}

/// Mini-batch SGD with per-epoch learning-rate decay and early stopping on
/// dev entity F1. Returns the best dev checkpoint, ties going to the later
/// epoch (the last one when the dev set is empty).
pub fn fit(
    ds_train: &Dataset,
    ds_dev: &Dataset,
    cfg: &LossConfig,
    mut hook: Option<&mut dyn TrainingHook>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !ds_dev.is_gold() {
        return Err(Error::NotGold);
    }
    let mut model = Model::new(ds_train.tagset.clone(), cfg.feature_dim, cfg.structural_mask)?;
    let mut items: Vec<TrainItem> = ds_train
        .sentences
        .iter()
        .map(|s| TrainItem::new(&model, s, cfg.latent_mode))
        .collect();
    let dev_feats: Vec<Vec<FeatureVector>> = ds_dev.sentences.iter().map(|s| model.features(s)).collect();

    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut state = RatioState::default();
    let mut lr = cfg.learning_rate;
    let mut step = 0usize;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        if items.is_empty() {
            break;
        }
        rng::shuffle(&mut rng, &mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let out = {
                let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &items[i]).collect();
                let st = match hook.as_deref().and_then(|h| h.st_thresholds()) {
                    Some(t) => StTerm::Thresholds(t),
                    None => StTerm::Off,
                };
                total_loss(&batch, &model, cfg, &mut state, st)?
            };
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    learning_rate: lr,
                });
            }
            let mut grad = out.grad;
            if let Some(max) = cfg.max_grad_norm {
                let norm = grad.norm();
                if norm > max {
                    grad.scale(max / norm);
                }
            }
            model.step(&grad, lr);
            if !model.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    learning_rate: lr,
                });
            }
            loss_sum += out.loss;
            batches += 1;
            step += 1;
            if let Some(h) = hook.as_deref_mut() {
                h.after_step(step, &model, &mut items)?;
            }
        }
        let epoch_lr = lr;
        lr *= cfg.lr_decay;

        let dev_f1 = if ds_dev.is_empty() {
            None
        } else {
            let preds = dev_feats
                .iter()
                .map(|f| model.decode_features(f))
                .collect::<Result<Vec<_>>>()?;
            Some(entity_prf(ds_dev, &preds)?.f1)
        };
        history.push(EpochLog {
            epoch,
            steps: step,
            mean_loss: loss_sum / batches.max(1) as f64,
            learning_rate: epoch_lr,
            dev_f1,
        });
        if let Some(f1) = dev_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 >= *b) {
                best = Some((f1, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }

    Ok(match best {
        Some((f1, epoch, m)) => TrainOutcome {
            model: m,
            best_epoch: Some(epoch),
            best_dev_f1: Some(f1),
            history,
        },
        None => TrainOutcome {
            model,
            best_epoch: None,
            best_dev_f1: None,
            history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Scheme, Tagset};

    fn tagset() -> Tagset {
        Tagset::new(Scheme::Bilou, ["Disease"]).unwrap()
    }

    #[test]
    fn latentize_modes() {
        let t = tagset();
        let u = t.index_of("U-Disease").unwrap();
        let s = Sentence::new(
            vec!["Covid-19".into(), "is".into()],
            vec![LabelState::Observed(u), LabelState::Observed(0)],
        )
        .unwrap();
        let c = latentize(&s, LatentMode::DistantO, t.len(), 0);
        assert_eq!(c.pinned(0), Some(u));
        assert_eq!(c.set_size(1), t.len());
        let c = latentize(&s, LatentMode::ExplicitUnknown, t.len(), 0);
        assert_eq!(c.pinned(1), Some(0));
        let all = Sentence::new(vec!["x".into()], vec![LabelState::Observed(u)]).unwrap();
        assert_eq!(
            latentize(&all, LatentMode::DistantO, t.len(), 0),
            latentize(&all, LatentMode::ExplicitUnknown, t.len(), 0)
        );
    }

    #[test]
    fn ratio_examples() {
        let m = ndarray::array![[0.9, 0.1], [0.7, 0.3]];
        assert!((batch_entity_ratio(&[m], 0).unwrap() - 0.2).abs() < 1e-12);
        let all_o = ndarray::array![[1.0, 0.0]];
        assert_eq!(batch_entity_ratio(&[all_o], 0).unwrap(), 0.0);
        let none_o = ndarray::array![[0.0, 1.0]];
        assert_eq!(batch_entity_ratio(&[none_o], 0).unwrap(), 1.0);
        assert!(batch_entity_ratio(&[], 0).is_err());
    }

    #[test]
    fn oeer_examples() {
        let cfg = LossConfig {
            eer_target: 0.01,
            margin: 0.01,
            lambda_batch: 1.0,
            lambda_overall: 1.0,
            ..Default::default()
        };
        let mut state = RatioState::default();
        // No previous batches: only the λ_B term.
        assert!((oeer_loss(0.05, &state, &cfg).0 - 0.03).abs() < 1e-12);
        state.record(0.03);
        let (v, g) = oeer_loss(0.05, &state, &cfg);
        assert!((v - 0.05).abs() < 1e-12);
        assert_eq!(g, 2.0);
        let mut inside = RatioState::default();
        inside.record(0.015);
        assert_eq!(oeer_loss(0.015, &inside, &cfg).0, 0.0);
        let off = LossConfig {
            lambda_batch: 0.0,
            lambda_overall: 0.0,
            ..cfg
        };
        assert_eq!(oeer_loss(0.7, &state, &off), (0.0, 0.0));
    }

    #[test]
    fn st_examples() {
        assert_eq!(st_loss(0.3, 0.3, 5.0), 0.0);
        assert_eq!(st_loss(0.3, 0.1, 0.0), 0.0);
        assert!((st_loss(0.05, 0.02, 2.0) - 0.06).abs() < 1e-12);
    }

    #[test]
    fn running_mean() {
        let mut s = RatioState::default();
        assert_eq!(s.running_mean(), None);
        for v in [0.1, 0.2, 0.6] {
            s.record(v);
        }
        assert!((s.running_mean().unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(s.batches_seen(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            eer_target: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda_st: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"eer_target": 0.05, "batch_size": 8}"#;
        let cfg: LossConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.learning_rate, 0.1);
    }
}
