//! The tagging model (emission weights plus transition matrix) and its
//! on-disk format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! b"PNERMDL\0"                      magic
//! u32                               format version (1)
//! u64, [u8]                         JSON header length and bytes
//! f64 × |Y|²                        transitions, row-major
//! u64                               number of non-zero emission rows
//! (u32 id, f64 × |Y|) × rows        emission rows in ascending id order
//! ```
//!
//! The header records the feature template version, feature dimension,
//! tagset and whether the structural transition mask is used.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Tagset};
use crate::emission::{EmissionGradient, EmissionModel, FeatureVector, FEATURE_TEMPLATE_VERSION};
use crate::error::{Error, Result};
use crate::lattice::{self, Lattice, TransitionMask};

const MAGIC: &[u8; 8] = b"PNERMDL\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub emission: EmissionModel,
    pub transitions: Array2<f64>,
    pub tagset: Tagset,
    mask: Option<TransitionMask>,
}

/// Gradient with respect to every model parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelGradient {
    pub emission: EmissionGradient,
    pub transitions: Array2<f64>,
}

impl ModelGradient {
    pub fn zeros(num_labels: usize) -> Self {
        Self {
            emission: EmissionGradient::default(),
            transitions: Array2::zeros((num_labels, num_labels)),
        }
    }

    pub fn merge(&mut self, other: &ModelGradient) {
        self.emission.merge(&other.emission);
        self.transitions += &other.transitions;
    }

    pub fn norm(&self) -> f64 {
        (self.emission.norm_sq() + self.transitions.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.emission.scale(factor);
        self.transitions *= factor;
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    feature_template_version: String,
    feature_dim: usize,
    tagset: Tagset,
    structural_mask: bool,
}

impl Model {
    pub fn new(tagset: Tagset, feature_dim: usize, structural_mask: bool) -> Result<Self> {
        let ny = tagset.len();
        let mask = structural_mask.then(|| tagset.transition_mask());
        Ok(Self {
            emission: EmissionModel::zeros(feature_dim, ny)?,
            transitions: Array2::zeros((ny, ny)),
            tagset,
            mask,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.tagset.len()
    }

    pub fn mask(&self) -> Option<&TransitionMask> {
        self.mask.as_ref()
    }

    pub fn uses_mask(&self) -> bool {
        self.mask.is_some()
    }

    pub fn features(&self, s: &Sentence) -> Vec<FeatureVector> {
        self.emission.features(s)
    }

    pub fn lattice(&self, feats: &[FeatureVector]) -> Result<Lattice> {
        Lattice::new(
            self.emission.score_features(feats),
            self.transitions.clone(),
            self.mask.clone(),
        )
    }

    pub fn decode_features(&self, feats: &[FeatureVector]) -> Result<Vec<usize>> {
        Ok(lattice::viterbi(&self.lattice(feats)?, None)?.0)
    }

    pub fn predict(&self, s: &Sentence) -> Result<Vec<usize>> {
        self.decode_features(&self.features(s))
    }

    /// `self -= lr * grad`, leaving masked transitions at zero.
    pub fn step(&mut self, grad: &ModelGradient, lr: f64) {
        self.emission.apply(&grad.emission, -lr);
        for ((a, b), t) in self.transitions.indexed_iter_mut() {
            if self.mask.as_ref().is_none_or(|m| m.allowed[[a, b]]) {
                *t -= lr * grad.transitions[[a, b]];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.emission.is_finite() && self.transitions.iter().all(|v| v.is_finite())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            feature_template_version: FEATURE_TEMPLATE_VERSION.to_string(),
            feature_dim: self.emission.feature_dim(),
            tagset: self.tagset.clone(),
            structural_mask: self.mask.is_some(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.transitions.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        let rows: Vec<(u32, &[f64])> = self.emission.nonzero_rows().collect();
        w.write_all(&(rows.len() as u64).to_le_bytes())?;
        for (id, row) in rows {
            w.write_all(&id.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported format version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let header: Header = serde_json::from_slice(&buf)?;
        if header.feature_template_version != FEATURE_TEMPLATE_VERSION {
            return Err(Error::ModelFormat(format!(
                "model uses feature templates `{}`, this build has `{}`",
                header.feature_template_version, FEATURE_TEMPLATE_VERSION
            )));
        }
        let mut model = Model::new(header.tagset, header.feature_dim, header.structural_mask)?;
        for t in model.transitions.iter_mut() {
            *t = read_f64(&mut r)?;
        }
        let rows = read_u64(&mut r)?;
        for _ in 0..rows {
            let id = read_u32(&mut r)?;
            if id as usize >= header.feature_dim {
                return Err(Error::ModelFormat(format!("feature id {id} out of range")));
            }
            for w in model.emission.row_mut(id) {
                *w = read_f64(&mut r)?;
            }
        }
        if !model.is_finite() {
            return Err(Error::ModelFormat("non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Scheme;

    #[test]
    fn file_round_trip() {
        let t = Tagset::new(Scheme::Bilou, ["Gene"]).unwrap();
        let mut m = Model::new(t, 1 << 6, true).unwrap();
        m.emission.row_mut(9).copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.5]);
        m.transitions[[0, 1]] = 0.75;
        let bytes = m.to_bytes();
        let back = Model::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            Model::read_from(&b"not a model at all"[..]),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn masked_transitions_stay_fixed() {
        let t = Tagset::new(Scheme::Bilou, ["Gene"]).unwrap();
        let mut m = Model::new(t.clone(), 1 << 4, true).unwrap();
        let mut g = ModelGradient::zeros(5);
        g.transitions.fill(1.0);
        m.step(&g, 0.5);
        let mask = t.transition_mask();
        for ((a, b), v) in m.transitions.indexed_iter() {
            let expect = if mask.allowed[[a, b]] { -0.5 } else { 0.0 };
            assert_eq!(*v, expect);
        }
    }
}
