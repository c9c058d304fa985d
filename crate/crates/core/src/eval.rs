//! Entity-level scoring and multi-seed aggregation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{labels_to_spans_lenient, Dataset, Span};
use crate::error::{Error, Result};

/// Micro-averaged span counts and the derived scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// Scores predicted spans against gold spans by exact match.
    pub fn from_spans(gold: &[Span], pred: &[Span]) -> Self {
        let gold: HashSet<&Span> = gold.iter().collect();
        let pred: HashSet<&Span> = pred.iter().collect();
        let tp = pred.intersection(&gold).count();
        Self::from_counts(tp, pred.len() - tp, gold.len() - tp)
    }
}

/// Entity-level P/R/F1 of predicted label-index sequences against a fully
/// annotated dataset. Predictions are decoded leniently so that structurally
/// broken output still yields spans.
pub fn entity_prf(gold: &Dataset, pred: &[Vec<usize>]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            expected: gold.len(),
            got: pred.len(),
        });
    }
    let gold_spans = gold.spans()?;
    let mut pred_spans = Vec::new();
    for (sid, (s, p)) in gold.sentences.iter().zip(pred).enumerate() {
        if p.len() != s.len() {
            return Err(Error::LengthMismatch {
                expected: s.len(),
                got: p.len(),
            });
        }
        let labels: Vec<&str> = p
            .iter()
            .map(|&l| {
                if l < gold.tagset.len() {
                    Ok(gold.tagset.label(l))
                } else {
                    Err(Error::Shape(format!("label {l} out of range")))
                }
            })
            .collect::<Result<_>>()?;
        pred_spans.extend(
            labels_to_spans_lenient(&labels, gold.tagset.scheme())
                .into_iter()
                .map(|sp| sp.in_sentence(sid)),
        );
    }
    Ok(Prf::from_spans(&gold_spans, &pred_spans))
}

/// One trained-and-scored grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub entity_type: String,
    pub scheme: String,
    pub rate: f64,
    pub seed: u64,
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl RunResult {
    pub fn new(entity_type: &str, scheme: &str, rate: f64, seed: u64, model: &str, prf: Prf) -> Self {
        Self {
            entity_type: entity_type.to_string(),
            scheme: scheme.to_string(),
            rate,
            seed,
            model: model.to_string(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            tp: prf.tp,
            fp: prf.fp,
            fn_: prf.fn_,
        }
    }
}

/// Mean, sample standard deviation and Student-t 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub sd: f64,
    pub ci95: f64,
}

pub fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    if values.is_empty() {
        return Err(Error::Empty("aggregation group"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(MeanCi {
            mean,
            sd: 0.0,
            ci95: 0.0,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Config(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(MeanCi {
        mean,
        sd,
        ci95: t * sd / n.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    PerRate,
    /// Rates 0.1–0.5 pooled as `low`, 0.6–0.9 as `high`.
    Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub group: String,
    pub scheme: String,
    pub model: String,
    pub n: usize,
    pub precision: MeanCi,
    pub recall: MeanCi,
    pub f1: MeanCi,
}

fn rate_label(rate: f64) -> String {
    format!("{rate:.1}")
}

fn group_of(r: &RunResult, grouping: Grouping) -> String {
    match grouping {
        Grouping::PerRate => rate_label(r.rate),
        Grouping::Band => {
            let tenths = (r.rate * 10.0).round() as i64;
            match tenths {
                1..=5 => "low".to_string(),
                6..=9 => "high".to_string(),
                _ => rate_label(r.rate),
            }
        }
    }
}

/// Groups results by (scheme, model, rate or band) and summarises each
/// group. Output is sorted by scheme, model and group key, so it does not
/// depend on input order.
pub fn aggregate(results: &[RunResult], grouping: Grouping) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<(String, String, String), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.scheme.clone(), r.model.clone(), group_of(r, grouping)))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((scheme, model, group), rs)| {
            let col = |f: fn(&RunResult) -> f64| -> Result<MeanCi> {
                // Sort so the floating-point sums are independent of input order.
                let mut v: Vec<f64> = rs.iter().map(|r| f(r)).collect();
                v.sort_by(f64::total_cmp);
                mean_ci(&v)
            };
            Ok(AggregateRow {
                group,
                scheme,
                model,
                n: rs.len(),
                precision: col(|r| r.precision)?,
                recall: col(|r| r.recall)?,
                f1: col(|r| r.f1)?,
            })
        })
        .collect()
}
