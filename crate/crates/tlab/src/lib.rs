//! Transducer lab: a self-contained toolkit for sequence transduction.
//!
//! The crate is organized around a small reference model (`scorer`), exact
//! log-domain losses with analytic gradients (`losses`), a family of beam
//! search strategies (`search`), a synthetic-task trainer (`trainer`), and
//! decoding benchmarks (`bench`). Everything runs in `f64` and is
//! deterministic for a fixed seed.

pub mod bench;
pub mod dataset;
pub mod losses;
pub mod math;
pub mod scorer;
pub mod search;
pub mod trainer;
pub mod verify;

mod error;

pub use error::Error;

/// Symbol index type. `0` is reserved for blank; real labels are `1..=V`.
pub type Label = u32;

/// The reserved blank symbol.
pub const BLANK: Label = 0;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
