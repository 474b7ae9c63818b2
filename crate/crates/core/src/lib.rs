//! Heterogeneous information-bottleneck coordination graphs.
//!
//! Closed-form Gaussian KL penalties over group-aligned edge blocks, a
//! water-filling capacity allocator, the Fano relevance bound, and a
//! three-stage coordination-graph learner trained on a small cooperative
//! hidden-bit game.

pub mod allocator;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod groups;
pub mod harness;
pub mod kl;
pub mod network;
pub mod oracles;
pub mod prior;
pub mod props;
pub mod relevance;
pub mod replay;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
