//! Partial-annotation learning for sequence labelling.
//!
//! A linear-chain CRF whose missing labels are latent, trained by marginal
//! likelihood with entity-ratio regularisers and optional teacher–student
//! re-annotation, plus seeded span-removal corruption and span-level
//! evaluation over removal-rate grids.

pub mod corpus;
pub mod corruption;
pub mod emission;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lattice;
pub mod losses;
pub mod model;
pub mod rng;
pub mod selftrain;
pub mod synthetic;

pub use corpus::{Dataset, LabelState, Scheme, Sentence, Span, Tagset};
pub use error::{Error, Result};
pub use lattice::{Constraint, Lattice};
pub use losses::{LatentMode, LossConfig};
pub use model::Model;
