//! Dynamic feature-map reduction (DFMR) for visual-token grids.
//!
//! A vision encoder turns an image into an `H x W x D` grid of visual tokens.
//! This crate measures how much detail such a grid carries (the mean over
//! non-overlapping windows of the per-window standard deviation), uses that
//! measure to pick an average-pooling factor `s`, and pools the grid down to
//! `(H/s) x (W/s)` tokens. Around that kernel sit corpus I/O in `.npy`
//! format, corpus-level analytics, token-budget arithmetic for multi-image
//! prompts, and a benchmark harness.
//!
//! ```
//! use dfmr::{compress, CompressionPolicy, FeatureMap};
//!
//! let map = FeatureMap::new(24, 24, 4, vec![0.5; 24 * 24 * 4]).unwrap();
//! let (pooled, decision) = compress(&map, &CompressionPolicy::default_dynamic()).unwrap();
//! assert_eq!(decision.chosen_factor, 3);
//! assert_eq!(pooled.tokens(), 64);
//! ```

pub mod analyzer;
pub mod bench;
pub mod budget;
pub mod cli;
pub mod config;
pub mod corpus;
mod error;
pub mod metric;
pub mod npy;
pub mod reducer;
pub mod synth;
pub mod tensor;

pub use error::{Axis, Error, Result};
pub use metric::{mean_sigma, window_mean, window_sigma, ChannelAggregation, MetricReport};
pub use reducer::{
    average_pool, compress, compress_indexed, select_factor, select_factor_indexed, tau_at, CompressionDecision,
    CompressionPolicy, StopReason, ThresholdSchedule,
};
pub use tensor::{partition, FeatureMap, GridPartition, Window, WindowMode};
