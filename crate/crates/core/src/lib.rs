//! Multi-class RSVP target decoding from paired EEG and eye-movement trials:
//! preprocessing, a two-stream network with cross-modal attention and
//! contribution-guided fusion, hierarchical heads, and a nested
//! cross-validation harness.

// Negated float comparisons reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::large_enum_variant)]

pub mod dataio;
pub mod engine;
pub mod error;
pub mod exec;
pub mod extractors;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
