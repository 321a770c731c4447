//! Intrinsic-information metric: per-window population standard deviation
//! and its mean over a window partition.
//!
//! All accumulation is done in `f64` with a two-pass (mean, then squared
//! deviation) scheme. Windows are never empty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{partition, FeatureMap, Window, WindowMode};

/// How the channel dimension enters a window's statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelAggregation {
    /// Every scalar in the window (`rows * cols * channels`) is one sample.
    #[default]
    PooledScalars,
    /// Population std per channel, then the arithmetic mean over channels.
    PerChannelMean,
}

impl std::str::FromStr for ChannelAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled-scalars" => Ok(ChannelAggregation::PooledScalars),
            "per-channel-mean" => Ok(ChannelAggregation::PerChannelMean),
            other => Err(Error::InvalidArgument(format!("unknown channel aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for ChannelAggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelAggregation::PooledScalars => "pooled-scalars",
            ChannelAggregation::PerChannelMean => "per-channel-mean",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factor: usize,
    pub mode: WindowMode,
    pub channel_aggregation: ChannelAggregation,
    /// Per-window standard deviation, windows in row-major order.
    pub window_sigmas: Vec<f64>,
    pub window_means: Vec<f64>,
    pub mean_sigma: f64,
}

/// Mean of all scalars in `window`.
///
/// The mean of per-channel means over equal-sized channels equals the pooled
/// mean, so `aggregation` does not change the result.
pub fn window_mean(map: &FeatureMap, window: Window, aggregation: ChannelAggregation) -> Result<f64> {
    let _ = aggregation;
    window.check_inside(map)?;
    Ok(pooled_sum(map, window) / (window.cells() * map.channels()) as f64)
}

/// Population standard deviation of `window` under `aggregation`.
pub fn window_sigma(map: &FeatureMap, window: Window, aggregation: ChannelAggregation) -> Result<f64> {
    window.check_inside(map)?;
    Ok(window_stats(map, window, aggregation, &mut Vec::new()).1)
}

/// Computes every window's sigma for `factor` and their average.
pub fn mean_sigma(
    map: &FeatureMap,
    factor: usize,
    mode: WindowMode,
    aggregation: ChannelAggregation,
) -> Result<MetricReport> {
    let grid = partition(map, factor, mode)?;
    let mut window_sigmas = Vec::with_capacity(grid.len());
    let mut window_means = Vec::with_capacity(grid.len());
    let mut scratch = Vec::new();
    for window in grid.windows() {
        let (mean, sigma) = window_stats(map, window, aggregation, &mut scratch);
        window_means.push(mean);
        window_sigmas.push(sigma);
    }
    let mean_sigma = window_sigmas.iter().sum::<f64>() / window_sigmas.len() as f64;
    Ok(MetricReport {
        factor,
        mode,
        channel_aggregation: aggregation,
        window_sigmas,
        window_means,
        mean_sigma,
    })
}

fn pooled_sum(map: &FeatureMap, window: Window) -> f64 {
    (window.row..window.row + window.rows)
        .map(|r| {
            map.row_segment(r, window.col, window.cols)
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Returns `(mean, sigma)` for a window already known to be in bounds.
/// `scratch` holds per-channel accumulators between calls.
fn window_stats(
    map: &FeatureMap,
    window: Window,
    aggregation: ChannelAggregation,
    scratch: &mut Vec<f64>,
) -> (f64, f64) {
    let rows = window.row..window.row + window.rows;
    match aggregation {
        ChannelAggregation::PooledScalars => {
            let n = (window.cells() * map.channels()) as f64;
            let mean = pooled_sum(map, window) / n;
            let ss: f64 = rows
                .map(|r| {
                    map.row_segment(r, window.col, window.cols)
                        .iter()
                        .map(|&v| {
                            let d = v as f64 - mean;
                            d * d
                        })
                        .sum::<f64>()
                })
                .sum();
            (mean, (ss / n).sqrt())
        }
        ChannelAggregation::PerChannelMean => {
            let channels = map.channels();
            let n = window.cells() as f64;
            scratch.clear();
            scratch.resize(2 * channels, 0.0);
            let (sums, sq) = scratch.split_at_mut(channels);
            for r in rows.clone() {
                for cell in map.row_segment(r, window.col, window.cols).chunks_exact(channels) {
                    for (acc, &v) in sums.iter_mut().zip(cell) {
                        *acc += v as f64;
                    }
                }
            }
            for s in sums.iter_mut() {
                *s /= n;
            }
            for r in rows {
                for cell in map.row_segment(r, window.col, window.cols).chunks_exact(channels) {
                    for ((acc, &mu), &v) in sq.iter_mut().zip(sums.iter()).zip(cell) {
                        let d = v as f64 - mu;
                        *acc += d * d;
                    }
                }
            }
            let mean = sums.iter().sum::<f64>() / channels as f64;
            let sigma = sq.iter().map(|s| (s / n).sqrt()).sum::<f64>() / channels as f64;
            (mean, sigma)
        }
    }
}
