//! Matching-based estimation of pairwise average treatment effects with
//! three or more treatment groups, plus IPW/DR comparators, large-sample
//! inference, and a Monte Carlo harness.

pub mod comparators;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gps;
pub mod inference;
pub mod kmeans;
pub mod matching;
pub mod parallel;
pub mod pipeline;
pub mod report;
pub mod sim;
pub mod stats;
pub mod variance;

pub use data::{Dataset, EstimandSpec, RawRow, Reference};
pub use error::{Error, Result};
pub use estimators::{EffectEstimate, Variant};
pub use gps::GpsModel;
pub use inference::InferenceReport;
pub use matching::{DistanceKind, MatchResult};
