//! Core algorithms for building, completing and evaluating semantic
//! feature norms.
//!
//! Everything here is deterministic and allocation-only; file formats,
//! network clients and the experiment service live in the `normforge`
//! crate.

#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod error;
pub mod judgment;
pub mod norms;
pub mod reduction;
pub mod rng;
pub mod sdt;
pub mod similarity;
pub mod special;
pub mod tsne;
pub mod verifier;

pub use error::{Error, Result};
pub use norms::{CellProvenance, Concept, ConceptId, Feature, FeatureId, NormMatrix, View};
pub use rng::SeededRng;
