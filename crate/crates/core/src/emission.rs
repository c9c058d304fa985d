//! Emission scoring with a hashed-feature linear model.
//!
//! Each token is described by a fixed set of string templates (identity,
//! case, shape, affixes, neighbours, boundaries). Every template value is
//! namespaced, hashed with 64-bit FNV-1a and reduced modulo the feature
//! dimension. Collisions are accepted.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// Bumped whenever the templates or the hash change.
pub const FEATURE_TEMPLATE_VERSION: &str = "tok-v1";

pub const DEFAULT_FEATURE_DIM: usize = 1 << 20;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    for (k, part) in parts.iter().enumerate() {
        if k > 0 {
            h ^= 0x1f;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Sorted, deduplicated hashed feature ids; every value is 1.0.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureVector {
    ids: Vec<u32>,
}

impl FeatureVector {
    pub fn from_ids(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Collapsed character-class shape: upper `X`, lower `x`, digit `d`, other
/// characters kept verbatim, runs squeezed to one symbol.
pub fn word_shape(token: &str) -> String {
    let mut out = String::new();
    let mut last = None;
    for c in token.chars() {
        let m = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_numeric() {
            'd'
        } else {
            c
        };
        if last != Some(m) {
            out.push(m);
            last = Some(m);
        }
    }
    out
}

/// The raw `(namespace, value)` template strings for token `i`.
pub fn feature_strings(s: &Sentence, i: usize) -> Vec<(&'static str, String)> {
    let tok = &s.tokens[i];
    let lower = tok.to_lowercase();
    let chars: Vec<char> = tok.chars().collect();
    let mut out = vec![
        ("bias", String::new()),
        ("w", tok.clone()),
        ("lw", lower.clone()),
        ("sh", word_shape(tok)),
    ];
    if chars.len() >= 3 {
        out.push(("p3", chars[..3].iter().collect()));
        out.push(("s3", chars[chars.len() - 3..].iter().collect()));
    }
    if chars.len() >= 4 {
        out.push(("p4", chars[..4].iter().collect()));
        out.push(("s4", chars[chars.len() - 4..].iter().collect()));
    }
    if !chars.is_empty() && chars.iter().all(|c| c.is_numeric()) {
        out.push(("digit", String::new()));
    }
    if !chars.is_empty() && chars.iter().all(|c| c.is_ascii_punctuation()) {
        out.push(("punct", String::new()));
    }
    match i.checked_sub(1) {
        Some(p) => out.push(("pw", s.tokens[p].to_lowercase())),
        None => out.push(("bos", String::new())),
    }
    match s.tokens.get(i + 1) {
        Some(n) => out.push(("nw", n.to_lowercase())),
        None => out.push(("eos", String::new())),
    }
    out
}

pub fn hash_feature(namespace: &str, value: &str, dim: usize) -> u32 {
    debug_assert!(dim.is_power_of_two());
    (fnv1a(&[namespace.as_bytes(), value.as_bytes()]) & (dim as u64 - 1)) as u32
}

pub fn extract_features(s: &Sentence, i: usize, dim: usize) -> FeatureVector {
    let ids = feature_strings(s, i)
        .iter()
        .map(|(ns, v)| hash_feature(ns, v, dim))
        .collect();
    FeatureVector::from_ids(ids)
}

pub fn sentence_features(s: &Sentence, dim: usize) -> Vec<FeatureVector> {
    (0..s.len()).map(|i| extract_features(s, i, dim)).collect()
}

/// Contract for anything that can produce an `n × |Y|` emission matrix and
/// push gradients with respect to that matrix back into its parameters.
pub trait EmissionScorer {
    type Gradient;

    fn num_labels(&self) -> usize;

    fn score_emissions(&self, s: &Sentence) -> Array2<f64>;

    fn accumulate_gradient(&self, s: &Sentence, grad_emissions: ArrayView2<'_, f64>, acc: &mut Self::Gradient);
}

/// Linear emission model over hashed features, stored as a dense
/// `feature_dim × |Y|` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionModel {
    feature_dim: usize,
    num_labels: usize,
    weights: Vec<f64>,
}

impl EmissionModel {
    pub fn zeros(feature_dim: usize, num_labels: usize) -> Result<Self> {
        if !feature_dim.is_power_of_two() || feature_dim > (1usize << 32) {
            return Err(Error::Config(format!(
                "feature dimension {feature_dim} must be a power of two no larger than 2^32"
            )));
        }
        Ok(Self {
            feature_dim,
            num_labels,
            weights: vec![0.0; feature_dim * num_labels],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn template_version(&self) -> &'static str {
        FEATURE_TEMPLATE_VERSION
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let k = id as usize * self.num_labels;
        &self.weights[k..k + self.num_labels]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        let k = id as usize * self.num_labels;
        &mut self.weights[k..k + self.num_labels]
    }

    /// Non-zero rows in ascending id order.
    pub fn nonzero_rows(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.weights
            .chunks_exact(self.num_labels)
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&w| w != 0.0))
            .map(|(i, r)| (i as u32, r))
    }

    pub fn features(&self, s: &Sentence) -> Vec<FeatureVector> {
        sentence_features(s, self.feature_dim)
    }

    pub fn score_features(&self, feats: &[FeatureVector]) -> Array2<f64> {
        let mut out = Array2::zeros((feats.len(), self.num_labels));
        for (i, fv) in feats.iter().enumerate() {
            let mut row = out.row_mut(i);
            for &id in fv.ids() {
                for (o, w) in row.iter_mut().zip(self.row(id)) {
                    *o += w;
                }
            }
        }
        out
    }

    pub fn accumulate_features(
        &self,
        feats: &[FeatureVector],
        grad_emissions: ArrayView2<'_, f64>,
        acc: &mut EmissionGradient,
    ) {
        for (fv, g) in feats.iter().zip(grad_emissions.rows()) {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for &id in fv.ids() {
                let row = acc.row_mut(id, self.num_labels);
                for (r, v) in row.iter_mut().zip(g.iter()) {
                    *r += v;
                }
            }
        }
    }

    /// `self += scale * grad`.
    pub fn apply(&mut self, grad: &EmissionGradient, scale: f64) {
        for (&id, g) in &grad.rows {
            for (w, v) in self.row_mut(id).iter_mut().zip(g) {
                *w += scale * v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

impl EmissionScorer for EmissionModel {
    type Gradient = EmissionGradient;

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn score_emissions(&self, s: &Sentence) -> Array2<f64> {
        self.score_features(&self.features(s))
    }

    fn accumulate_gradient(&self, s: &Sentence, grad_emissions: ArrayView2<'_, f64>, acc: &mut EmissionGradient) {
        self.accumulate_features(&self.features(s), grad_emissions, acc);
    }
}

/// Sparse gradient over emission weight rows, keyed by feature id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmissionGradient {
    rows: BTreeMap<u32, Vec<f64>>,
}

impl EmissionGradient {
    pub fn row_mut(&mut self, id: u32, num_labels: usize) -> &mut Vec<f64> {
        self.rows.entry(id).or_insert_with(|| vec![0.0; num_labels])
    }

    pub fn row(&self, id: u32) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn merge(&mut self, other: &EmissionGradient) {
        for (&id, g) in &other.rows {
            let row = self.row_mut(id, g.len());
            for (r, v) in row.iter_mut().zip(g) {
                *r += v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.rows.values_mut() {
            for v in g {
                *v *= factor;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.rows.values().flatten().map(|v| v * v).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flatten().all(|&v| v == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelState;
    use ndarray::array;

    fn sent(tokens: &[&str]) -> Sentence {
        Sentence::new(
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![LabelState::Unknown; tokens.len()],
        )
        .unwrap()
    }

    #[test]
    fn shape_of_mixed_token() {
        assert_eq!(word_shape("SARS-CoV-2"), "X-XxX-d");
        assert_eq!(word_shape("p53"), "xd");
        let s = sent(&["SARS-CoV-2"]);
        let strings = feature_strings(&s, 0);
        assert!(strings.contains(&("sh", "X-XxX-d".to_string())));
    }

    #[test]
    fn boundary_flags_and_determinism() {
        let s = sent(&["The", "BRCA1", "gene", "."]);
        let f0 = feature_strings(&s, 0);
        assert!(f0.iter().any(|(ns, _)| *ns == "bos"));
        assert!(!feature_strings(&s, 1).iter().any(|(ns, _)| *ns == "bos"));
        let f3 = feature_strings(&s, 3);
        assert!(f3.iter().any(|(ns, _)| *ns == "eos"));
        assert!(f3.iter().any(|(ns, _)| *ns == "punct"));
        assert_eq!(extract_features(&s, 1, 1 << 20), extract_features(&s, 1, 1 << 20));
        for id in extract_features(&s, 1, 1 << 10).ids() {
            assert!(*id < 1 << 10);
        }
    }

    #[test]
    fn hash_is_pinned() {
        // Changing this value means FEATURE_TEMPLATE_VERSION must change.
        assert_eq!(fnv1a(&[b"w", b"p53"]), fnv1a(&[b"w", b"p53"]));
        assert_eq!(fnv1a(&[b"a"]), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn zero_weights_score_zero() {
        let m = EmissionModel::zeros(1 << 8, 3).unwrap();
        let s = sent(&["a", "b"]);
        assert!(m.score_emissions(&s).iter().all(|&v| v == 0.0));
        assert!(EmissionModel::zeros(100, 3).is_err());
    }

    #[test]
    fn single_feature_linearity() {
        let mut m = EmissionModel::zeros(1 << 4, 2).unwrap();
        m.row_mut(3).copy_from_slice(&[0.5, -0.5]);
        let feats = vec![FeatureVector::from_ids(vec![3])];
        assert_eq!(m.score_features(&feats), array![[0.5, -0.5]]);
    }

    #[test]
    fn gradient_base_cases() {
        let m = EmissionModel::zeros(1 << 4, 2).unwrap();
        let feats = vec![FeatureVector::from_ids(vec![5])];
        let mut acc = EmissionGradient::default();
        m.accumulate_features(&feats, array![[0.0, 0.0]].view(), &mut acc);
        assert!(acc.is_zero());
        m.accumulate_features(&feats, array![[0.25, -1.5]].view(), &mut acc);
        assert_eq!(acc.row(5).unwrap(), &[0.25, -1.5]);
    }
}
