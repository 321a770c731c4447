//! Naive scalar-loop reference implementations, written independently of the
//! library so tests can compare the two.

#![allow(dead_code)]

use dfmr::synth::{derive_seed, synth_map, SynthKind};
use dfmr::FeatureMap;

pub fn at(values: &[f32], w: usize, d: usize, r: usize, c: usize, ch: usize) -> f64 {
    values[(r * w + c) * d + ch] as f64
}

/// Average pooling over `s x s` blocks, one output value at a time.
pub fn pool(values: &[f32], h: usize, w: usize, d: usize, s: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..h / s {
        for j in 0..w / s {
            for ch in 0..d {
                let mut sum = 0.0;
                for u in 0..s {
                    for v in 0..s {
                        sum += at(values, w, d, i * s + u, j * s + v, ch);
                    }
                }
                out.push(sum / (s * s) as f64);
            }
        }
    }
    out
}

/// Top-left corners and side lengths of the metric windows.
/// `paper_literal`: `s x s` windows of side `H/s x W/s`; otherwise windows of
/// side `s x s`.
pub fn windows(h: usize, w: usize, s: usize, paper_literal: bool) -> Vec<(usize, usize, usize, usize)> {
    let (wh, ww) = if paper_literal { (h / s, w / s) } else { (s, s) };
    let mut out = Vec::new();
    let mut r = 0;
    while r < h {
        let mut c = 0;
        while c < w {
            out.push((r, c, wh, ww));
            c += ww;
        }
        r += wh;
    }
    out
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Per-window standard deviation, two-pass. `per_channel` averages the
/// per-channel standard deviations instead of pooling all scalars.
pub fn window_sigmas(
    values: &[f32],
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    paper_literal: bool,
    per_channel: bool,
) -> Vec<f64> {
    windows(h, w, s, paper_literal)
        .into_iter()
        .map(|(r0, c0, wh, ww)| {
            let collect = |chs: &[usize]| {
                let mut xs = Vec::new();
                for r in r0..r0 + wh {
                    for c in c0..c0 + ww {
                        for &ch in chs {
                            xs.push(at(values, w, d, r, c, ch));
                        }
                    }
                }
                xs
            };
            if per_channel {
                (0..d).map(|ch| population_std(&collect(&[ch]))).sum::<f64>() / d as f64
            } else {
                population_std(&collect(&(0..d).collect::<Vec<_>>()))
            }
        })
        .collect()
}

pub fn mean_sigma(
    values: &[f32],
    h: usize,
    w: usize,
    d: usize,
    s: usize,
    paper_literal: bool,
    per_channel: bool,
) -> f64 {
    let sig = window_sigmas(values, h, w, d, s, paper_literal, per_channel);
    sig.iter().sum::<f64>() / sig.len() as f64
}

/// `|actual - expected| <= rel * |expected|`, with a tiny absolute floor for
/// expected values at zero.
pub fn close(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() <= rel * expected.abs().max(1e-12)
}

/// Seeded square random maps over the given side lengths and channel counts.
pub fn random_maps(count: usize, sides: &[usize], channels: &[usize], seed: u64) -> Vec<FeatureMap> {
    (0..count)
        .map(|i| {
            let k = derive_seed(seed, i as u64);
            let h = sides[(k % sides.len() as u64) as usize];
            let d = channels[((k >> 16) % channels.len() as u64) as usize];
            synth_map(SynthKind::WhiteNoise, h, h, d, k, 1.0).unwrap()
        })
        .collect()
}

/// Candidate factors from `{1, 2, 3}` that divide both sides.
pub fn valid_factors(h: usize, w: usize) -> Vec<usize> {
    [1, 2, 3]
        .into_iter()
        .filter(|&s| h.is_multiple_of(s) && w.is_multiple_of(s))
        .collect()
}
