//! Two-stream chained PET/CT fusion segmentation.
//!
//! The crate covers the whole pipeline: volume I/O ([`volio`]), synthetic
//! patient generation ([`phantom`]), PET-to-planning-CT registration
//! ([`register`]), the progressive semantically-nested segmentation network
//! ([`psnn`]), the chained CT / early-fusion / late-fusion streams
//! ([`fusion`]) and evaluation ([`metrics`]).

pub mod error;
pub mod fusion;
pub mod grid;
pub mod metrics;
pub mod phantom;
pub mod psnn;
pub mod register;
pub mod volio;

pub use error::{Error, Result};
pub use grid::{Grid3, Padding};
