//! Delayed data association for landmark-based SLAM by constellation merging.
//!
//! Duplicate landmarks left behind by a conservative front-end are found as
//! maximum-cardinality sets of pairwise-consistent candidate matches that
//! pass a geometric-compatibility gate computed from local uncertainty only,
//! and are then merged in the back-end.

pub mod compatibility;
pub mod correspondence;
pub mod error;
pub mod experiments;
pub mod factor_graph;
pub mod geometry;
pub mod pipeline;
pub mod search;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
