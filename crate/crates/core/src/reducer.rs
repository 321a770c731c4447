//! Compression-factor selection and `s x s` average pooling.
//!
//! The dynamic policy walks candidate factors in ascending order, computing
//! the mean window sigma at each, and stops at the first factor whose sigma
//! exceeds the threshold, or at the last candidate. The fixed and random
//! policies are the uniform-token and randomly-sampled baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{mean_sigma, ChannelAggregation};
use crate::tensor::{check_divisible, FeatureMap, WindowMode};

pub const DEFAULT_THRESHOLD: f64 = 5e-2;
pub const DEFAULT_CANDIDATES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CompressionPolicy {
    Fixed {
        factor: usize,
    },
    Random {
        candidates: Vec<usize>,
        seed: u64,
    },
    Dynamic {
        threshold: f64,
        candidates: Vec<usize>,
        mode: WindowMode,
        aggregation: ChannelAggregation,
    },
}

fn validate_candidates(candidates: &[usize]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::InvalidPolicy("candidate list is empty".into()));
    }
    if candidates.contains(&0) {
        return Err(Error::InvalidPolicy("candidate factors must be >= 1".into()));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidPolicy(format!(
            "candidate factors must be strictly ascending, got {candidates:?}"
        )));
    }
    Ok(())
}

impl CompressionPolicy {
    pub fn fixed(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidPolicy("fixed factor must be >= 1".into()));
        }
        Ok(CompressionPolicy::Fixed { factor })
    }

    pub fn random(candidates: Vec<usize>, seed: u64) -> Result<Self> {
        validate_candidates(&candidates)?;
        Ok(CompressionPolicy::Random { candidates, seed })
    }

    /// A threshold-driven policy. Any non-NaN threshold is accepted here,
    /// including negative and infinite values.
    pub fn dynamic(
        threshold: f64,
        candidates: Vec<usize>,
        mode: WindowMode,
        aggregation: ChannelAggregation,
    ) -> Result<Self> {
        if threshold.is_nan() {
            return Err(Error::InvalidPolicy("threshold is NaN".into()));
        }
        validate_candidates(&candidates)?;
        Ok(CompressionPolicy::Dynamic {
            threshold,
            candidates,
            mode,
            aggregation,
        })
    }

    /// Dynamic policy with the default threshold, candidates and modes.
    pub fn default_dynamic() -> Self {
        CompressionPolicy::Dynamic {
            threshold: DEFAULT_THRESHOLD,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            mode: WindowMode::default(),
            aggregation: ChannelAggregation::default(),
        }
    }

    /// Every factor this policy can choose.
    pub fn factors(&self) -> &[usize] {
        match self {
            CompressionPolicy::Fixed { factor } => std::slice::from_ref(factor),
            CompressionPolicy::Random { candidates, .. } | CompressionPolicy::Dynamic { candidates, .. } => candidates,
        }
    }

    /// Short label such as `fixed:2`, `random:1,2,3` or `dynamic:0.05`.
    pub fn label(&self) -> String {
        let join = |c: &[usize]| c.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        match self {
            CompressionPolicy::Fixed { factor } => format!("fixed:{factor}"),
            CompressionPolicy::Random { candidates, .. } => format!("random:{}", join(candidates)),
            CompressionPolicy::Dynamic { threshold, .. } => format!("dynamic:{threshold}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ExceededThreshold,
    ReachedMax,
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub factor: usize,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionDecision {
    pub chosen_factor: usize,
    /// Every (factor, mean sigma) evaluated, in order. Empty for fixed and
    /// random policies.
    pub sigma_trace: Vec<TraceEntry>,
    pub stop_reason: StopReason,
    pub tokens_out: usize,
}

/// Chooses a compression factor for `map`. Random policies draw as if `map`
/// were corpus entry 0; see [`select_factor_indexed`].
pub fn select_factor(map: &FeatureMap, policy: &CompressionPolicy) -> Result<CompressionDecision> {
    select_factor_indexed(map, policy, 0)
}

/// Like [`select_factor`], with `index` selecting the random policy's draw.
///
/// The random draw depends only on `(seed, index)`, so corpus traversal order
/// does not affect results.
pub fn select_factor_indexed(map: &FeatureMap, policy: &CompressionPolicy, index: u64) -> Result<CompressionDecision> {
    for &f in policy.factors() {
        map.check_factor(f)?;
    }
    let decide = |chosen_factor, sigma_trace, stop_reason| CompressionDecision {
        chosen_factor,
        sigma_trace,
        stop_reason,
        tokens_out: (map.height() / chosen_factor) * (map.width() / chosen_factor),
    };
    match policy {
        CompressionPolicy::Fixed { factor } => Ok(decide(*factor, Vec::new(), StopReason::Fixed)),
        CompressionPolicy::Random { candidates, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            rng.set_stream(index);
            let pick = candidates[rng.gen_range(0..candidates.len())];
            Ok(decide(pick, Vec::new(), StopReason::Random))
        }
        CompressionPolicy::Dynamic {
            threshold,
            candidates,
            mode,
            aggregation,
        } => {
            let mut trace = Vec::with_capacity(candidates.len());
            for &factor in candidates {
                let sigma = mean_sigma(map, factor, *mode, *aggregation)?.mean_sigma;
                trace.push(TraceEntry {
                    factor,
                    mean_sigma: sigma,
                });
                if sigma > *threshold {
                    return Ok(decide(factor, trace, StopReason::ExceededThreshold));
                }
            }
            let last = *candidates.last().expect("validated nonempty");
            Ok(decide(last, trace, StopReason::ReachedMax))
        }
    }
}

/// Averages each non-overlapping `factor x factor` block, channel by channel.
///
/// Block means are accumulated in `f64`. Each is stored as one of the two
/// `f32` values bracketing it, chosen to carry the rounding residual forward,
/// so the pooled total tracks the exact total instead of drifting with the
/// number of outputs.
pub fn average_pool(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    check_divisible(map.height(), map.width(), factor)?;
    if factor == 1 {
        return Ok(map.clone());
    }
    let (out_h, out_w, channels) = (map.height() / factor, map.width() / factor, map.channels());
    let cells = (factor * factor) as f64;
    let mut residual = 0.0f64;
    let mut acc = vec![0.0f64; out_w * channels];
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for i in 0..out_h {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for u in 0..factor {
            let row = map.row_segment(factor * i + u, 0, map.width());
            for (j, acc_cell) in acc.chunks_exact_mut(channels).enumerate() {
                let block = &row[j * factor * channels..(j + 1) * factor * channels];
                for cell in block.chunks_exact(channels) {
                    for (a, &v) in acc_cell.iter_mut().zip(cell) {
                        *a += v as f64;
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&a| narrow_carrying(a / cells, &mut residual)));
    }
    FeatureMap::new(out_h, out_w, channels, out)
}

/// Rounds `exact` to whichever neighbouring `f32` lies closer to
/// `exact + residual`, and adds the rounding error to `residual`.
fn narrow_carrying(exact: f64, residual: &mut f64) -> f32 {
    let nearest = exact as f32;
    if nearest as f64 == exact {
        return nearest;
    }
    let other = if (nearest as f64) < exact {
        nearest.next_up()
    } else {
        nearest.next_down()
    };
    let target = exact + *residual;
    let pick = if ((nearest as f64) - target).abs() <= ((other as f64) - target).abs() {
        nearest
    } else {
        other
    };
    *residual += exact - pick as f64;
    pick
}

/// Selects a factor and pools `map` with it.
pub fn compress(map: &FeatureMap, policy: &CompressionPolicy) -> Result<(FeatureMap, CompressionDecision)> {
    compress_indexed(map, policy, 0)
}

pub fn compress_indexed(
    map: &FeatureMap,
    policy: &CompressionPolicy,
    index: u64,
) -> Result<(FeatureMap, CompressionDecision)> {
    let decision = select_factor_indexed(map, policy, index)?;
    let pooled = average_pool(map, decision.chosen_factor)?;
    Ok((pooled, decision))
}

/// Cosine learning-rate curve from `peak_lr` at step 0 down to `min_lr` at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if self.total_steps == 0 {
            return Ok(self.peak_lr);
        }
        let progress = step as f64 / self.total_steps as f64;
        let cos = (std::f64::consts::PI * progress).cos();
        Ok(self.min_lr + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + cos))
    }
}

/// Threshold that scales with the learning rate: `tau(step) = base_tau * lr(step) / base_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub base_tau: f64,
    pub base_lr: f64,
    pub lr_curve: CosineSchedule,
}

impl ThresholdSchedule {
    pub fn new(base_tau: f64, base_lr: f64, lr_curve: CosineSchedule) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidSchedule(msg.into()));
        if !(base_tau.is_finite() && base_tau >= 0.0) {
            return bad("base_tau must be finite and >= 0");
        }
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return bad("base_lr must be finite and > 0");
        }
        let CosineSchedule { peak_lr, min_lr, .. } = lr_curve;
        if !(min_lr.is_finite() && peak_lr.is_finite() && 0.0 <= min_lr && min_lr <= peak_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= peak_lr");
        }
        Ok(Self {
            base_tau,
            base_lr,
            lr_curve,
        })
    }

    pub fn tau_at(&self, step: u64) -> Result<f64> {
        Ok(self.base_tau * self.lr_curve.lr(step)? / self.base_lr)
    }
}

/// `tau(step)` for `schedule`.
pub fn tau_at(schedule: &ThresholdSchedule, step: u64) -> Result<f64> {
    schedule.tau_at(step)
}
