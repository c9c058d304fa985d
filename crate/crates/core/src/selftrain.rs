//! Teacher–student self-training.
//!
//! At scheduled optimiser steps the current model is frozen as a teacher. It
//! scores every latent position with its constrained marginal; positions
//! whose best label reaches that label's confidence threshold become
//! observed. Observed positions are never released again, so the set of
//! compatible label paths only shrinks.
//!
//! Thresholds are class-wise means of the teacher's confidences among the
//! latent positions predicted as that label; labels with too little support
//! fall back to the global mean.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelState};
use crate::error::{Error, Result};
use crate::lattice::{forward_backward, token_marginals};
use crate::losses::{argmax, fit, latentize, LatentMode, LossConfig, TrainItem, TrainingHook, EpochLog};
use crate::model::Model;

pub const DEFAULT_MIN_SUPPORT: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocaThresholds {
    pub per_label: Vec<f64>,
    pub global: f64,
    pub min_support: usize,
}

impl CocaThresholds {
    pub fn uniform(num_labels: usize, tau: f64) -> Self {
        Self {
            per_label: vec![tau; num_labels],
            global: tau,
            min_support: 0,
        }
    }

    pub fn threshold(&self, label: usize) -> f64 {
        self.per_label.get(label).copied().unwrap_or(self.global)
    }
}

/// Class-wise mean confidence, falling back to the global mean for labels
/// with fewer than `min_support` predictions.
pub fn coca_thresholds(
    confidences: &[(usize, f64)],
    num_labels: usize,
    min_support: usize,
) -> Result<CocaThresholds> {
    if confidences.is_empty() {
        return Err(Error::Empty("confidences"));
    }
    let mut sum = vec![0.0; num_labels];
    let mut count = vec![0usize; num_labels];
    for &(label, conf) in confidences {
        if label >= num_labels {
            return Err(Error::Shape(format!("label {label} out of range")));
        }
        sum[label] += conf;
        count[label] += 1;
    }
    let global = confidences.iter().map(|c| c.1).sum::<f64>() / confidences.len() as f64;
    let per_label = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| {
            if n >= min_support && n > 0 {
                (s / n as f64).clamp(0.0, 1.0)
            } else {
                global.clamp(0.0, 1.0)
            }
        })
        .collect();
    Ok(CocaThresholds {
        per_label,
        global,
        min_support,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub begin_step: usize,
    pub period: usize,
    pub max_rounds: usize,
    pub fix_o: bool,
    pub min_support: usize,
    /// Use this threshold for every label instead of the class-wise means.
    pub fixed_threshold: Option<f64>,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            begin_step: 200,
            period: 100,
            max_rounds: 3,
            fix_o: true,
            min_support: DEFAULT_MIN_SUPPORT,
            fixed_threshold: None,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("self-training period must be at least 1".into()));
        }
        if let Some(t) = self.fixed_threshold {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Config("fixed_threshold must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    fn is_round_step(&self, step: usize, rounds_done: usize) -> bool {
        rounds_done < self.max_rounds && step >= self.begin_step && (step - self.begin_step).is_multiple_of(self.period)
    }
}

/// Teacher prediction at one latent position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPrediction {
    pub position: usize,
    pub label: usize,
    pub confidence: f64,
}

fn is_latent(item: &TrainItem, position: usize) -> bool {
    item.constraint.set_size(position) > 1
}

/// Argmax label and its constrained marginal at every latent position.
pub fn latent_predictions(teacher: &Model, items: &[TrainItem]) -> Result<Vec<Vec<LatentPrediction>>> {
    items
        .par_iter()
        .map(|item| {
            if !(0..item.constraint.len()).any(|i| is_latent(item, i)) {
                return Ok(Vec::new());
            }
            let res = forward_backward(&teacher.lattice(&item.features)?, Some(&item.constraint))?;
            let marg = token_marginals(&res);
            Ok((0..item.constraint.len())
                .filter(|&i| is_latent(item, i))
                .map(|i| {
                    let (label, confidence) = argmax(marg.row(i).iter().copied());
                    LatentPrediction {
                        position: i,
                        label,
                        confidence,
                    }
                })
                .collect())
        })
        .collect()
}

/// A newly observed position: `(sentence, position, label)`.
pub type FixedLabel = (usize, usize, usize);

fn apply_predictions(
    teacher: &Model,
    items: &mut [TrainItem],
    predictions: &[Vec<LatentPrediction>],
    thresholds: &CocaThresholds,
    fix_o: bool,
) -> Result<Vec<FixedLabel>> {
    let o = teacher.tagset.o_index();
    let ny = teacher.num_labels();
    let updates: Vec<Option<(crate::lattice::Constraint, Vec<FixedLabel>)>> = items
        .par_iter()
        .zip(predictions)
        .enumerate()
        .map(|(sid, (item, preds))| {
            let chosen: Vec<&LatentPrediction> = preds
                .iter()
                .filter(|p| p.confidence >= thresholds.threshold(p.label) && (fix_o || p.label != o))
                .collect();
            if chosen.is_empty() {
                return Ok(None);
            }
            let mut masks: Vec<Vec<bool>> = (0..item.constraint.len())
                .map(|i| (0..ny).map(|y| item.constraint.allows(i, y)).collect())
                .collect();
            for p in &chosen {
                masks[p.position] = (0..ny).map(|y| y == p.label).collect();
            }
            let c = crate::lattice::Constraint::from_masks(masks)?;
            // Individually confident labels can still be jointly illegal.
            match forward_backward(&teacher.lattice(&item.features)?, Some(&c)) {
                Ok(_) => Ok(Some((c, chosen.iter().map(|p| (sid, p.position, p.label)).collect()))),
                Err(Error::Infeasible) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut fixed = Vec::new();
    for (item, update) in items.iter_mut().zip(updates) {
        if let Some((c, f)) = update {
            item.constraint = c;
            fixed.extend(f);
        }
    }
    Ok(fixed)
}

fn thresholds_for(
    predictions: &[Vec<LatentPrediction>],
    num_labels: usize,
    cfg: &SelfTrainConfig,
) -> Result<Option<CocaThresholds>> {
    if let Some(t) = cfg.fixed_threshold {
        return Ok(Some(CocaThresholds::uniform(num_labels, t)));
    }
    let confs: Vec<(usize, f64)> = predictions
        .iter()
        .flatten()
        .map(|p| (p.label, p.confidence))
        .collect();
    if confs.is_empty() {
        return Ok(None);
    }
    coca_thresholds(&confs, num_labels, cfg.min_support).map(Some)
}

/// Fixes confident latent positions of `items` in place.
pub fn reannotate_items(
    teacher: &Model,
    items: &mut [TrainItem],
    thresholds: &CocaThresholds,
    fix_o: bool,
) -> Result<Vec<FixedLabel>> {
    let preds = latent_predictions(teacher, items)?;
    apply_predictions(teacher, items, &preds, thresholds, fix_o)
}

/// Dataset-level re-annotation.
///
/// The result is in explicit form: positions that are still latent under
/// `mode` come back as [`LabelState::Unknown`] and newly fixed positions as
/// [`LabelState::Observed`], so it should be read with
/// [`LatentMode::ExplicitUnknown`] afterwards. Also returns the number of
/// newly fixed positions.
pub fn reannotate(
    teacher: &Model,
    ds: &Dataset,
    thresholds: &CocaThresholds,
    cfg: &SelfTrainConfig,
    mode: LatentMode,
) -> Result<(Dataset, usize)> {
    let mut items: Vec<TrainItem> = ds
        .sentences
        .iter()
        .map(|s| TrainItem::new(teacher, s, mode))
        .collect();
    let fixed = reannotate_items(teacher, &mut items, thresholds, cfg.fix_o)?;
    Ok((items_to_dataset(ds, &items), fixed.len()))
}

fn items_to_dataset(ds: &Dataset, items: &[TrainItem]) -> Dataset {
    let mut out = ds.clone();
    for (s, item) in out.sentences.iter_mut().zip(items) {
        for (i, st) in s.states.iter_mut().enumerate() {
            *st = match item.constraint.pinned(i) {
                Some(l) => LabelState::Observed(l),
                None => LabelState::Unknown,
            };
        }
    }
    out
}

pub fn count_latent(items: &[TrainItem]) -> usize {
    items
        .iter()
        .map(|it| (0..it.constraint.len()).filter(|&i| is_latent(it, i)).count())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub step: usize,
    pub latent_before: usize,
    pub latent_after: usize,
    pub fixed: usize,
    pub fixed_entities: usize,
    /// Fraction of newly fixed labels that agree with the gold labels.
    pub precision_vs_gold: Option<f64>,
    pub thresholds: Vec<f64>,
}

struct SelfTrainer<'a> {
    cfg: &'a SelfTrainConfig,
    gold: Option<Vec<Vec<usize>>>,
    thresholds: Option<CocaThresholds>,
    rounds: Vec<RoundLog>,
}

impl TrainingHook for SelfTrainer<'_> {
    fn after_step(&mut self, step: usize, model: &Model, items: &mut [TrainItem]) -> Result<()> {
        if !self.cfg.is_round_step(step, self.rounds.len()) {
            return Ok(());
        }
        let teacher = model.clone();
        let latent_before = count_latent(items);
        let preds = latent_predictions(&teacher, items)?;
        let Some(thresholds) = thresholds_for(&preds, teacher.num_labels(), self.cfg)? else {
            self.rounds.push(RoundLog {
                round: self.rounds.len() + 1,
                step,
                latent_before,
                latent_after: latent_before,
                fixed: 0,
                fixed_entities: 0,
                precision_vs_gold: None,
                thresholds: Vec::new(),
            });
            return Ok(());
        };
        let fixed = apply_predictions(&teacher, items, &preds, &thresholds, self.cfg.fix_o)?;
        let o = teacher.tagset.o_index();
        let precision_vs_gold = match (&self.gold, fixed.is_empty()) {
            (Some(gold), false) => {
                let hits = fixed.iter().filter(|(s, i, l)| gold[*s][*i] == *l).count();
                Some(hits as f64 / fixed.len() as f64)
            }
            _ => None,
        };
        self.rounds.push(RoundLog {
            round: self.rounds.len() + 1,
            step,
            latent_before,
            latent_after: count_latent(items),
            fixed: fixed.len(),
            fixed_entities: fixed.iter().filter(|f| f.2 != o).count(),
            precision_vs_gold,
            thresholds: thresholds.per_label.clone(),
        });
        self.thresholds = Some(thresholds);
        Ok(())
    }

    fn st_thresholds(&self) -> Option<&CocaThresholds> {
        self.thresholds.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub model: Model,
    pub rounds: Vec<RoundLog>,
    pub best_dev_f1: Option<f64>,
    pub history: Vec<EpochLog>,
}

/// Trains with the marginal-likelihood and entity-ratio terms, then from
/// `begin_step` on re-annotates every `period` steps (at most `max_rounds`
/// times) and adds the self-training ratio term. The student keeps its
/// parameters across rounds. `gold`, when given, must be the fully
/// annotated version of `ds_train` and is used only for logging.
pub fn self_train_loop(
    ds_train: &Dataset,
    ds_dev: &Dataset,
    loss_cfg: &LossConfig,
    st_cfg: &SelfTrainConfig,
    gold: Option<&Dataset>,
) -> Result<SelfTrainOutcome> {
    st_cfg.validate()?;
    let gold = match gold {
        Some(g) => {
            if g.len() != ds_train.len() {
                return Err(Error::LengthMismatch {
                    expected: ds_train.len(),
                    got: g.len(),
                });
            }
            let labels = g
                .sentences
                .iter()
                .map(|s| s.label_indices().ok_or(Error::NotGold))
                .collect::<Result<Vec<_>>>()?;
            for (l, s) in labels.iter().zip(&ds_train.sentences) {
                if l.len() != s.len() {
                    return Err(Error::LengthMismatch {
                        expected: s.len(),
                        got: l.len(),
                    });
                }
            }
            Some(labels)
        }
        None => None,
    };
    let mut trainer = SelfTrainer {
        cfg: st_cfg,
        gold,
        thresholds: None,
        rounds: Vec::new(),
    };
    let out = fit(ds_train, ds_dev, loss_cfg, Some(&mut trainer))?;
    Ok(SelfTrainOutcome {
        model: out.model,
        rounds: trainer.rounds,
        best_dev_f1: out.best_dev_f1,
        history: out.history,
    })
}

/// Constraint view of a dataset, for callers that drive re-annotation by hand.
pub fn dataset_items(model: &Model, ds: &Dataset, mode: LatentMode) -> Vec<TrainItem> {
    ds.sentences
        .iter()
        .map(|s| TrainItem {
            features: model.features(s),
            constraint: latentize(s, mode, model.num_labels(), model.tagset.o_index()),
        })
        .collect()
}
