//! Beam training for RIS-assisted THz multi-user MIMO uplinks.
//!
//! The crate covers the whole pipeline: geometric channel generation,
//! analog codebooks, the zero-forcing sum-rate metric, exhaustive and
//! iterative-alternating codebook search, supervised dataset generation, a
//! from-scratch multi-task beam classifier, and the blockwise
//! alternating-optimization model of the classifier's training problem.

pub mod blockwise;
pub mod channel;
pub mod codebook;
pub mod config;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metric;
pub mod mtlnet;
pub mod rng;
pub mod search;

pub use blockwise::{alternate, BlockwiseProblem, AoState};
pub use channel::{sample_channel_set, upa_response, ChannelSet, CMat, PathSpec, C64};
pub use codebook::{build_codebooks, CodebookTriple};
pub use config::{CodebookSizes, GainModel, KvMap, SystemConfig};
pub use error::{Error, Result};
pub use metric::{equivalent_channel, sum_rate, BeamSelection, EquivalentChannel, RateMode};
