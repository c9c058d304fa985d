//! Synthetic partial annotation: removing gold entity spans under a seed.
//!
//! Removed spans are rewritten as literal `O`, so the output is a fully
//! observed file in which some entities are silently missing. Whether those
//! `O`s are trusted or treated as latent is decided at training time.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelState, Span};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionScheme {
    /// Remove a uniformly random subset of spans.
    Rar,
    /// Remove every occurrence of randomly chosen (surface form, type) pairs.
    Rsfr,
}

impl fmt::Display for CorruptionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionScheme::Rar => "rar",
            CorruptionScheme::Rsfr => "rsfr",
        })
    }
}

impl FromStr for CorruptionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rar" => Ok(CorruptionScheme::Rar),
            "rsfr" => Ok(CorruptionScheme::Rsfr),
            other => Err(Error::Config(format!("unknown corruption scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub scheme: CorruptionScheme,
    pub rate: f64,
    pub seed: u64,
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("removal rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

/// What a corruption run did.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub dataset: Dataset,
    /// Spans in the gold input.
    pub total_spans: usize,
    /// The removal target (fractional for RSFR).
    pub target: f64,
    /// Spans actually removed, in the order they were removed.
    pub removed: Vec<Span>,
}

pub fn corrupt(ds: &Dataset, cfg: &CorruptionConfig) -> Result<Corrupted> {
    cfg.validate()?;
    match cfg.scheme {
        CorruptionScheme::Rar => rar(ds, cfg.rate, cfg.seed),
        CorruptionScheme::Rsfr => rsfr(ds, cfg.rate, cfg.seed),
    }
}

fn gold_spans(ds: &Dataset, r: f64) -> Result<Vec<Span>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("removal rate {r} outside [0, 1]")));
    }
    if !ds.is_gold() {
        return Err(Error::NotGold);
    }
    ds.spans()
}

fn erase(ds: &Dataset, removed: &[Span]) -> Dataset {
    let mut out = ds.clone();
    let o = ds.tagset.o_index();
    for sp in removed {
        for st in &mut out.sentences[sp.sentence_id].states[sp.start..sp.end] {
            *st = LabelState::Observed(o);
        }
    }
    out
}

/// Removes exactly `round(r·N)` spans chosen by shuffling and taking the
/// first ones.
pub fn rar(ds: &Dataset, r: f64, seed: u64) -> Result<Corrupted> {
    let mut spans = gold_spans(ds, r)?;
    let total = spans.len();
    let k = (r * total as f64).round() as usize;
    rng::shuffle(&mut rng::seeded(seed), &mut spans);
    spans.truncate(k);
    Ok(Corrupted {
        dataset: erase(ds, &spans),
        total_spans: total,
        target: k as f64,
        removed: spans,
    })
}

/// Removes whole (surface form, type) groups until at least
/// `round(r·N)·0.99` spans are gone. The last group is removed entirely, so
/// the count may overshoot the target.
pub fn rsfr(ds: &Dataset, r: f64, seed: u64) -> Result<Corrupted> {
    let spans = gold_spans(ds, r)?;
    let total = spans.len();
    let target = (r * total as f64).round() * 0.99;
    let keys: Vec<(String, String)> = spans.iter().map(|sp| (ds.span_text(sp), sp.entity_type.clone())).collect();
    let mut order: Vec<usize> = (0..total).collect();
    rng::shuffle(&mut rng::seeded(seed), &mut order);

    let mut selected: HashSet<&(String, String)> = HashSet::new();
    let mut removed_idx = Vec::new();
    let mut flag = 0usize;
    for &i in &order {
        if (flag as f64) >= target {
            break;
        }
        if selected.insert(&keys[i]) {
            for &j in &order {
                if keys[j] == keys[i] {
                    removed_idx.push(j);
                    flag += 1;
                }
            }
        }
    }
    let removed: Vec<Span> = removed_idx.iter().map(|&j| spans[j].clone()).collect();
    Ok(Corrupted {
        dataset: erase(ds, &removed),
        total_spans: total,
        target,
        removed,
    })
}
