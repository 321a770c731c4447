//! Wall-clock cost of the full per-map pipeline (metric, selection, pooling).

use std::hint::black_box;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reducer::{compress, CompressionPolicy};
use crate::synth::{synth_map, SynthKind};

pub const DEFAULT_WARMUP: usize = 10;
pub const LADDER_SIDES: [usize; 4] = [6, 12, 24, 48];
pub const LADDER_CHANNELS: [usize; 3] = [64, 256, 1024];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub policy: CompressionPolicy,
    /// Synthetic input content. Constant maps drive the dynamic policy
    /// through every candidate, the most expensive path.
    pub input: SynthKind,
}

impl BenchCase {
    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn sort_key(&self) -> (usize, usize, usize, String, SynthKind) {
        (self.height, self.width, self.channels, self.policy.label(), self.input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub min: f64,
    pub median: f64,
    pub p95: f64,
}

impl Latency {
    /// Summary of per-iteration seconds. `samples` must be nonempty.
    pub fn from_samples(samples: &mut [f64]) -> Self {
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let median = if n % 2 == 1 {
            samples[n / 2]
        } else {
            0.5 * (samples[n / 2 - 1] + samples[n / 2])
        };
        // nearest-rank percentile
        let p95 = samples[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Latency {
            min: samples[0],
            median,
            p95: p95.max(median),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub case: BenchCase,
    pub iterations: usize,
    /// Seconds per map.
    pub latency: Latency,
    /// Maps per second.
    pub throughput: f64,
    pub bytes_processed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Process iterations across the rayon pool and report aggregate
    /// throughput against wall-clock time.
    pub parallel: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            iterations: 100,
            warmup: DEFAULT_WARMUP,
            seed: 0,
            parallel: false,
        }
    }
}

pub fn run_bench(cases: &[BenchCase], iterations: usize, warmup: usize, seed: u64) -> Result<Vec<BenchResult>> {
    run_bench_with(
        cases,
        &BenchOptions {
            iterations,
            warmup,
            seed,
            parallel: false,
        },
    )
}

pub fn run_bench_with(cases: &[BenchCase], opts: &BenchOptions) -> Result<Vec<BenchResult>> {
    if opts.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut results = cases
        .iter()
        .map(|case| bench_case(case, opts))
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_cached_key(|r| r.case.sort_key());
    Ok(results)
}

fn bench_case(case: &BenchCase, opts: &BenchOptions) -> Result<BenchResult> {
    let map = synth_map(case.input, case.height, case.width, case.channels, opts.seed, 1.0)?;
    // surface policy errors before timing
    compress(&map, &case.policy)?;
    for _ in 0..opts.warmup {
        black_box(compress(black_box(&map), &case.policy)?);
    }
    let timed = || -> Result<f64> {
        let start = Instant::now();
        black_box(compress(black_box(&map), &case.policy)?);
        Ok(start.elapsed().as_secs_f64())
    };
    let (mut samples, elapsed) = if opts.parallel {
        let wall = Instant::now();
        let samples = (0..opts.iterations)
            .into_par_iter()
            .map(|_| timed())
            .collect::<Result<Vec<_>>>()?;
        (samples, wall.elapsed().as_secs_f64())
    } else {
        let samples = (0..opts.iterations).map(|_| timed()).collect::<Result<Vec<_>>>()?;
        let total = samples.iter().sum();
        (samples, total)
    };
    let latency = Latency::from_samples(&mut samples);
    Ok(BenchResult {
        case: case.clone(),
        iterations: opts.iterations,
        latency,
        throughput: opts.iterations as f64 / elapsed.max(f64::MIN_POSITIVE),
        bytes_processed: (opts.iterations * case.elements() * std::mem::size_of::<f32>()) as u64,
    })
}

/// Square grids from [`LADDER_SIDES`] crossed with [`LADDER_CHANNELS`].
pub fn ladder_cases(policy: &CompressionPolicy, input: SynthKind) -> Vec<BenchCase> {
    LADDER_SIDES
        .iter()
        .flat_map(|&side| {
            LADDER_CHANNELS.iter().map(move |&channels| BenchCase {
                height: side,
                width: side,
                channels,
                policy: policy.clone(),
                input,
            })
        })
        .collect()
}

/// Pairs `(smaller, larger)` whose median latency ratio exceeds
/// `slack * element ratio`, i.e. growth worse than linear beyond the slack.
pub fn superlinear_pairs(results: &[BenchResult], slack: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (i, a) in results.iter().enumerate() {
        for (j, b) in results.iter().enumerate() {
            let (na, nb) = (a.case.elements() as f64, b.case.elements() as f64);
            if nb <= na {
                continue;
            }
            let growth = b.latency.median / a.latency.median;
            if growth > slack * nb / na {
                out.push((i, j, growth / (nb / na)));
            }
        }
    }
    out
}

pub fn format_table(results: &[BenchResult]) -> String {
    let mut out = format!(
        "{:>5} {:>5} {:>6} {:>16} {:>11} {:>11} {:>11} {:>12}\n",
        "H", "W", "D", "policy", "min ms", "median ms", "p95 ms", "maps/s"
    );
    for r in results {
        out.push_str(&format!(
            "{:>5} {:>5} {:>6} {:>16} {:>11.4} {:>11.4} {:>11.4} {:>12.1}\n",
            r.case.height,
            r.case.width,
            r.case.channels,
            r.case.policy.label(),
            r.latency.min * 1e3,
            r.latency.median * 1e3,
            r.latency.p95 * 1e3,
            r.throughput,
        ));
    }
    out
}
