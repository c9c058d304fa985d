//! A seeded generator of gene-mention-like corpora for benchmarking.
//!
//! Entity surface forms come from a fixed dictionary and are drawn with
//! Zipfian frequencies, so a few names are very common and most are rare.
//! Names look like `BRCA1`, `Tnf2 alpha` or `IL6 receptor 2`; the filler text
//! is lowercase, with a sprinkling of capitalised and numeric distractors.

use serde::{Deserialize, Serialize};

use crate::corpus::{spans_to_labels, Dataset, Scheme, Sentence, Span, Tagset};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_sentences: usize,
    pub dictionary_size: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability weights for 0, 1, 2, ... mentions per sentence.
    pub mentions_per_sentence: Vec<f64>,
    /// Probability that a mention is introduced by a context cue word.
    pub cue_probability: f64,
    pub entity_type: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_sentences: 3400,
            dictionary_size: 600,
            zipf_exponent: 1.0,
            min_len: 12,
            max_len: 28,
            mentions_per_sentence: vec![0.45, 0.35, 0.15, 0.05],
            cue_probability: 0.6,
            entity_type: "Gene".to_string(),
            seed: 0,
        }
    }
}

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "in", "to", "was", "were", "is", "are", "with", "by", "for", "on", "that", "this",
    "we", "these", "cells", "patients", "tissue", "samples", "levels", "analysis", "study", "results", "data",
    "increased", "decreased", "observed", "found", "showed", "significant", "activity", "response", "treatment",
    "mice", "human", "cancer", "tumor", "binding", "pathway", "function", "role", "induced", "reduced", "higher",
    "lower", "compared", "control", "group", "cell", "line", "culture", "growth", "signal", "signaling", "model",
    "effect", "effects", "associated", "between", "after", "during", "from", "into", "within", "also", "both",
    "however", "may", "not", "all", "but", "here", "which", "when", "our", "its", "their", "other", "further",
    "normal", "clinical", "specific", "major", "novel", "previously", "strongly", "markedly", "rapidly",
    "inhibition", "regulation", "mechanism", "interaction", "complex", "membrane", "nuclear", "surface",
    "blood", "serum", "liver", "brain", "muscle", "lung", "kidney", "heart", "skin", "bone", "marrow",
    "infection", "disease", "syndrome", "therapy", "dose", "time", "days", "weeks", "hours", "site", "region",
    "sequence", "domain", "structure", "mutant", "variant", "allele", "transcript", "isoform", "level",
];

const CUES: &[&str] = &[
    "of", "gene", "encoding", "expressing", "mutations", "expression", "targeting", "anti", "knockdown",
    "overexpression", "loss", "phosphorylated", "human", "murine", "recombinant",
];

const DISTRACTORS: &[&str] = &[
    "DNA", "RNA", "PCR", "ATP", "HIV", "USA", "mRNA", "Western", "Northern", "Fig", "Table", "Student", "ELISA",
    "1", "2", "3", "10", "12", "24", "48", "100", "2019", "0.05", "95", "%", "(", ")", ",", ";",
];

const MODIFIERS: &[&str] = &["alpha", "beta", "gamma", "receptor", "kinase", "ligand", "A", "B"];

const UPPER: &[u8] = b"ABCDEFGHIKLMNPRSTVWXYZ";

fn root_name(rng: &mut Rng) -> String {
    let mut s = String::new();
    let letters = 2 + rng::below(rng, 3);
    let lower_tail = rng::unit(rng) < 0.25;
    for k in 0..letters {
        let c = UPPER[rng::below(rng, UPPER.len())] as char;
        s.push(if lower_tail && k > 0 { c.to_ascii_lowercase() } else { c });
    }
    s.push_str(&(1 + rng::below(rng, 19)).to_string());
    if rng::unit(rng) < 0.15 {
        s.push(UPPER[rng::below(rng, UPPER.len())] as char);
    }
    s
}

/// Builds a dictionary of distinct names of one to three tokens.
pub fn dictionary(size: usize, rng: &mut Rng) -> Vec<Vec<String>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let mut form = vec![root_name(rng)];
        let u = rng::unit(rng);
        if u < 0.3 {
            form.push(MODIFIERS[rng::below(rng, MODIFIERS.len())].to_string());
        }
        if u < 0.08 {
            form.push((1 + rng::below(rng, 4)).to_string());
        }
        if seen.insert(form.join(" ")) {
            out.push(form);
        }
    }
    out
}

fn sample_cumulative(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng::unit(rng) * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Generates a fully annotated corpus.
pub fn generate(cfg: &SyntheticConfig, scheme: Scheme) -> Result<Dataset> {
    if cfg.dictionary_size == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.mentions_per_sentence.is_empty() {
        return Err(Error::Config("degenerate synthetic corpus configuration".into()));
    }
    let tagset = Tagset::new(scheme, [cfg.entity_type.as_str()])?;
    let mut rng = rng::seeded(cfg.seed);
    let dict = dictionary(cfg.dictionary_size, &mut rng);
    let zipf = cumulative((1..=dict.len()).map(|r| (r as f64).powf(-cfg.zipf_exponent)));
    let mentions = cumulative(cfg.mentions_per_sentence.iter().copied());

    let mut sentences = Vec::with_capacity(cfg.num_sentences);
    for _ in 0..cfg.num_sentences {
        let len = cfg.min_len + rng::below(&mut rng, cfg.max_len - cfg.min_len + 1);
        let mut words: Vec<String> = (0..len)
            .map(|_| {
                if rng::unit(&mut rng) < 0.08 {
                    DISTRACTORS[rng::below(&mut rng, DISTRACTORS.len())]
                } else {
                    FILLER[rng::below(&mut rng, FILLER.len())]
                }
                .to_string()
            })
            .collect();

        // Insertion points are chosen left to right so spans never overlap.
        let k = sample_cumulative(&mentions, &mut rng);
        let mut cuts: Vec<usize> = (0..k).map(|_| 1 + rng::below(&mut rng, len - 1)).collect();
        cuts.sort_unstable();
        let mut tokens = Vec::with_capacity(len + 4 * k);
        let mut spans = Vec::new();
        let mut prev = 0;
        for cut in cuts {
            tokens.extend(words.drain(..cut - prev));
            prev = cut;
            if rng::unit(&mut rng) < cfg.cue_probability {
                tokens.push(CUES[rng::below(&mut rng, CUES.len())].to_string());
            }
            let form = &dict[sample_cumulative(&zipf, &mut rng)];
            let start = tokens.len();
            tokens.extend(form.iter().cloned());
            spans.push(Span::new(cfg.entity_type.clone(), start, tokens.len()));
        }
        tokens.append(&mut words);
        tokens.push(".".to_string());
        if let Some(first) = tokens.first_mut() {
            if spans.first().is_none_or(|s| s.start > 0) {
                let mut c = first.chars();
                if let Some(h) = c.next() {
                    *first = h.to_uppercase().chain(c).collect();
                }
            }
        }
        let labels = spans_to_labels(&spans, tokens.len(), scheme)?;
        sentences.push(Sentence::from_labels(&tokens, &labels, &tagset)?);
    }
    Ok(Dataset::new(sentences, tagset))
}

/// Generates a corpus and splits it 60:10:30 into train, dev and test.
pub fn generate_splits(cfg: &SyntheticConfig, scheme: Scheme) -> Result<(Dataset, Dataset, Dataset)> {
    Ok(generate(cfg, scheme)?.split_by_ratio(0.6, 0.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;

    #[test]
    fn deterministic_and_gold() {
        let cfg = SyntheticConfig {
            num_sentences: 50,
            ..Default::default()
        };
        let a = generate(&cfg, Scheme::Bilou).unwrap();
        let b = generate(&cfg, Scheme::Bilou).unwrap();
        assert_eq!(a, b);
        assert!(a.is_gold());
        let c = generate(&SyntheticConfig { seed: 1, ..cfg }, Scheme::Bilou).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_corpus_shape() {
        let (train, dev, test) = generate_splits(&SyntheticConfig::default(), Scheme::Bilou).unwrap();
        assert!(train.len() >= 2000);
        assert_eq!(train.len() + dev.len() + test.len(), 3400);
        let st = corpus_stats(&train);
        let ratio = st.entity_tags as f64 / st.tokens as f64;
        assert!((0.04..0.06).contains(&ratio), "entity ratio {ratio}");
    }
}
