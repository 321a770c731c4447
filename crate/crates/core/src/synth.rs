//! Seeded synthetic feature maps for fixtures and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Every value equals the amplitude.
    Constant,
    /// `amplitude * (-1)^(row + col)`, identical across channels.
    Checkerboard,
    /// i.i.d. uniform in `[-amplitude, amplitude]`.
    WhiteNoise,
    /// `amplitude * (row + col) / (height + width)`.
    Gradient,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Constant => "constant",
            SynthKind::Checkerboard => "checkerboard",
            SynthKind::WhiteNoise => "white-noise",
            SynthKind::Gradient => "gradient",
        }
    }
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(SynthKind::Constant),
            "checkerboard" => Ok(SynthKind::Checkerboard),
            "white-noise" | "noise" => Ok(SynthKind::WhiteNoise),
            "gradient" => Ok(SynthKind::Gradient),
            other => Err(Error::InvalidArgument(format!("unknown synth kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn synth_map(
    kind: SynthKind,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    amplitude: f32,
) -> Result<FeatureMap> {
    if !amplitude.is_finite() {
        return Err(Error::InvalidArgument("amplitude must be finite".into()));
    }
    match kind {
        SynthKind::Constant => FeatureMap::from_fn(height, width, channels, |_, _, _| amplitude),
        SynthKind::Checkerboard => FeatureMap::from_fn(height, width, channels, |r, c, _| {
            if (r + c) % 2 == 0 {
                amplitude
            } else {
                -amplitude
            }
        }),
        SynthKind::WhiteNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = amplitude.abs();
            FeatureMap::from_fn(height, width, channels, |_, _, _| rng.gen_range(-a..=a))
        }
        SynthKind::Gradient => {
            let denom = (height + width) as f32;
            FeatureMap::from_fn(height, width, channels, |r, c, _| amplitude * (r + c) as f32 / denom)
        }
    }
}

/// Per-entry seed for entry `index` of a corpus generated from `seed`
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
