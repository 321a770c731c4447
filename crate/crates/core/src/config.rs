//! Tool configuration: built-in defaults, overridden by a JSON config file,
//! overridden by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::{AnalyzeOptions, DEFAULT_BINS, DEFAULT_K, DEFAULT_THRESHOLDS};
use crate::error::{Error, Result};
use crate::metric::ChannelAggregation;
use crate::npy::ReadOptions;
use crate::reducer::{CompressionPolicy, CosineSchedule, ThresholdSchedule, DEFAULT_CANDIDATES, DEFAULT_THRESHOLD};
use crate::tensor::WindowMode;

/// Which policy family `compress` applies: `dynamic`, `random`, or `fixed:<s>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    #[default]
    Dynamic,
    Random,
    Fixed(usize),
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(PolicyKind::Dynamic),
            "random" => Ok(PolicyKind::Random),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|f| f.parse().ok())
                .filter(|&f: &usize| f >= 1)
                .map(PolicyKind::Fixed)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown policy `{s}` (expected dynamic, random or fixed:<s>)"))
                }),
        }
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(p: PolicyKind) -> String {
        match p {
            PolicyKind::Dynamic => "dynamic".into(),
            PolicyKind::Random => "random".into(),
            PolicyKind::Fixed(f) => format!("fixed:{f}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_tau: f64,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub total_steps: u64,
    #[serde(default)]
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<ThresholdSchedule> {
        ThresholdSchedule::new(
            self.base_tau,
            self.base_lr,
            CosineSchedule {
                peak_lr: self.peak_lr,
                total_steps: self.total_steps,
                min_lr: self.min_lr,
            },
        )
    }
}

/// Effective configuration, echoed into every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub policy: PolicyKind,
    pub threshold: f64,
    pub candidates: Vec<usize>,
    pub mode: WindowMode,
    pub aggregation: ChannelAggregation,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    pub bins: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    /// Step at which to evaluate `schedule`; the result replaces `threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flat_side: Option<usize>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Dynamic,
            threshold: DEFAULT_THRESHOLD,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            mode: WindowMode::default(),
            aggregation: ChannelAggregation::default(),
            seed: 0,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            bins: DEFAULT_BINS,
            k: DEFAULT_K,
            schedule: None,
            step: None,
            flat_side: None,
        }
    }
}

/// Partial configuration as read from a file or collected from flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub policy: Option<PolicyKind>,
    pub threshold: Option<f64>,
    pub candidates: Option<Vec<usize>>,
    pub mode: Option<WindowMode>,
    pub aggregation: Option<ChannelAggregation>,
    pub seed: Option<u64>,
    pub thresholds: Option<Vec<f64>>,
    pub bins: Option<usize>,
    pub k: Option<usize>,
    pub schedule: Option<ScheduleConfig>,
    pub step: Option<u64>,
    pub flat_side: Option<usize>,
}

impl ConfigOverrides {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    fn apply(self, cfg: &mut ToolConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            policy,
            threshold,
            candidates,
            mode,
            aggregation,
            seed,
            thresholds,
            bins,
            k
        );
        if self.schedule.is_some() {
            cfg.schedule = self.schedule;
        }
        if self.step.is_some() {
            cfg.step = self.step;
        }
        if self.flat_side.is_some() {
            cfg.flat_side = self.flat_side;
        }
    }
}

impl ToolConfig {
    /// Defaults, then `file`, then `flags`; validated.
    pub fn resolve(file: Option<ConfigOverrides>, flags: ConfigOverrides) -> Result<Self> {
        let mut cfg = ToolConfig::default();
        if let Some(file) = file {
            file.apply(&mut cfg);
        }
        flags.apply(&mut cfg);
        if let (Some(schedule), Some(step)) = (cfg.schedule, cfg.step) {
            cfg.threshold = schedule.build()?.tau_at(step)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return bad(format!("threshold must be >= 0, got {}", self.threshold));
        }
        if let Some(t) = self.thresholds.iter().find(|t| t.is_nan() || **t < 0.0) {
            return bad(format!("thresholds must be >= 0, got {t}"));
        }
        if self.bins == 0 {
            return bad("bins must be >= 1".into());
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if let Some(s) = &self.schedule {
            s.build()?;
        }
        if self.step.is_some() && self.schedule.is_none() {
            return bad("step given without a threshold schedule".into());
        }
        if self.flat_side == Some(0) {
            return bad("flat_side must be >= 1".into());
        }
        self.policy()?;
        CompressionPolicy::random(self.candidates.clone(), self.seed)?;
        Ok(())
    }

    pub fn policy(&self) -> Result<CompressionPolicy> {
        match self.policy {
            PolicyKind::Dynamic => {
                CompressionPolicy::dynamic(self.threshold, self.candidates.clone(), self.mode, self.aggregation)
            }
            PolicyKind::Random => CompressionPolicy::random(self.candidates.clone(), self.seed),
            PolicyKind::Fixed(f) => CompressionPolicy::fixed(f),
        }
    }

    pub fn read_options(&self) -> ReadOptions {
        ReadOptions {
            flat_side: self.flat_side,
        }
    }

    pub fn analyze_options(&self, parallel: bool) -> AnalyzeOptions {
        AnalyzeOptions {
            candidates: self.candidates.clone(),
            thresholds: self.thresholds.clone(),
            bins: self.bins,
            k: self.k,
            mode: self.mode,
            aggregation: self.aggregation,
            read: self.read_options(),
            parallel,
        }
    }
}
