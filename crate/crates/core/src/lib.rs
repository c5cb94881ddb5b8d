//! Domain-adaptive pretraining and staged fine-tuning at desk scale.
//!
//! The pipeline has two paths that share the same classifier recipe:
//!
//! ```text
//! basic:    init encoder ──────────────────────────────► staged fine-tuning ─► classifier
//! adapted:  init encoder ─► MLM on in-domain corpus ───► staged fine-tuning ─► classifier
//! ```
//!
//! Everything runs on a small dense `f64` tensor library with a recording
//! tape ([`numerics`]) so every gradient can be checked against finite
//! differences.

pub mod baseline;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
