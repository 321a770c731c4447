//! Sequence-length accounting for prompts that mix compressed image tokens
//! with text under a model's context limit.
//!
//! A prompt's length is the sum of every image's compressed token count
//! `(H/s) * (W/s)` plus the text tokens. An optional constant per-image
//! overhead covers chat templates that wrap each image in delimiter tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::check_divisible;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// `(height, width)` token grid of each image or frame.
    pub image_grids: Vec<(usize, usize)>,
    pub text_tokens: usize,
    pub context_limit: usize,
    #[serde(default)]
    pub per_image_overhead: usize,
}

impl PromptSpec {
    pub fn new(image_grids: Vec<(usize, usize)>, text_tokens: usize, context_limit: usize) -> Result<Self> {
        let spec = Self {
            image_grids,
            text_tokens,
            context_limit,
            per_image_overhead: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_limit == 0 {
            return Err(Error::InvalidArgument("context_limit must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tokens contributed by one `grid` image pooled with `factor`.
pub fn image_tokens(grid: (usize, usize), factor: usize) -> Result<usize> {
    check_divisible(grid.0, grid.1, factor)?;
    Ok((grid.0 / factor) * (grid.1 / factor))
}

/// Total sequence length with `factors[i]` applied to image `i`.
pub fn sequence_length(spec: &PromptSpec, factors: &[usize]) -> Result<usize> {
    if factors.len() != spec.image_grids.len() {
        return Err(Error::LengthMismatch {
            expected: spec.image_grids.len(),
            actual: factors.len(),
        });
    }
    spec.image_grids
        .iter()
        .zip(factors)
        .try_fold(spec.text_tokens, |total, (&grid, &factor)| {
            Ok(total + image_tokens(grid, factor)? + spec.per_image_overhead)
        })
}

/// How many `grid` images compressed by `factor` fit alongside the text.
pub fn max_images(grid: (usize, usize), factor: usize, text_tokens: usize, context_limit: usize) -> Result<usize> {
    max_images_with_overhead(grid, factor, text_tokens, context_limit, 0)
}

pub fn max_images_with_overhead(
    grid: (usize, usize),
    factor: usize,
    text_tokens: usize,
    context_limit: usize,
    per_image_overhead: usize,
) -> Result<usize> {
    let per_image = image_tokens(grid, factor)? + per_image_overhead;
    if text_tokens >= context_limit {
        return Ok(0);
    }
    Ok((context_limit - text_tokens) / per_image)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoPlan {
    pub fits: bool,
    pub total: usize,
    pub overflow: usize,
}

/// Checks whether `frames` frames, frame `i` compressed by `factors[i]`, fit
/// with the text inside `context_limit`.
pub fn plan_video(
    frames: usize,
    grid: (usize, usize),
    factors: &[usize],
    text_tokens: usize,
    context_limit: usize,
) -> Result<VideoPlan> {
    plan_video_with_overhead(frames, grid, factors, text_tokens, context_limit, 0)
}

pub fn plan_video_with_overhead(
    frames: usize,
    grid: (usize, usize),
    factors: &[usize],
    text_tokens: usize,
    context_limit: usize,
    per_image_overhead: usize,
) -> Result<VideoPlan> {
    let spec = PromptSpec {
        image_grids: vec![grid; frames],
        text_tokens,
        context_limit,
        per_image_overhead,
    };
    spec.validate()?;
    let total = sequence_length(&spec, factors)?;
    Ok(VideoPlan {
        fits: total <= context_limit,
        total,
        overflow: total.saturating_sub(context_limit),
    })
}
