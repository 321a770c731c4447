//! Feature-map geometry and storage.
//!
//! A [`FeatureMap`] is the `height x width x channels` grid of visual tokens
//! produced by a vision encoder, stored row-major as `(row, col, channel)`.
//! Maps are validated once at construction and immutable afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    /// Builds a map from row-major `(row, col, channel)` values.
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        for (name, dim) in [("height", height), ("width", width), ("channels", channels)] {
            if dim == 0 {
                return Err(Error::ZeroDimension(name));
            }
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("map dimensions overflow".into()))?;
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    /// Builds a map by evaluating `f(row, col, channel)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    values.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of visual tokens, `height * width`.
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.values[self.index(row, col, channel)]
    }

    /// The `cols * channels` contiguous scalars of one row segment.
    #[inline]
    pub(crate) fn row_segment(&self, row: usize, col: usize, cols: usize) -> &[f32] {
        let start = self.index(row, col, 0);
        &self.values[start..start + cols * self.channels]
    }

    /// Checks that `factor` evenly divides both spatial dimensions.
    pub fn check_factor(&self, factor: usize) -> Result<()> {
        check_divisible(self.height, self.width, factor)
    }
}

pub(crate) fn check_divisible(height: usize, width: usize, factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::ZeroFactor);
    }
    if !height.is_multiple_of(factor) {
        return Err(Error::IndivisibleGrid {
            dim: Axis::Height,
            size: height,
            factor,
        });
    }
    if !width.is_multiple_of(factor) {
        return Err(Error::IndivisibleGrid {
            dim: Axis::Width,
            size: width,
            factor,
        });
    }
    Ok(())
}

/// How a compression factor maps onto metric windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// Windows of side `H/s` x `W/s`, giving `s * s` windows.
    #[default]
    PaperLiteral,
    /// Windows of side `s` x `s`, the same tiling the pooling step uses.
    PoolWindow,
}

impl std::str::FromStr for WindowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(WindowMode::PaperLiteral),
            "pool-window" => Ok(WindowMode::PoolWindow),
            other => Err(Error::InvalidArgument(format!("unknown window mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for WindowMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WindowMode::PaperLiteral => "paper-literal",
            WindowMode::PoolWindow => "pool-window",
        })
    }
}

/// A rectangular block of grid cells, spanning all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub(crate) fn check_inside(&self, map: &FeatureMap) -> Result<()> {
        let fits = self.rows >= 1
            && self.cols >= 1
            && self.row.checked_add(self.rows).is_some_and(|end| end <= map.height())
            && self.col.checked_add(self.cols).is_some_and(|end| end <= map.width());
        if fits {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                row: self.row,
                col: self.col,
                rows: self.rows,
                cols: self.cols,
                height: map.height(),
                width: map.width(),
            })
        }
    }
}

/// Non-overlapping tiling of a map into `windows_y x windows_x` equal windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridPartition {
    pub window_rows: usize,
    pub window_cols: usize,
    pub windows_y: usize,
    pub windows_x: usize,
}

impl GridPartition {
    /// Total window count `K`.
    pub fn len(&self) -> usize {
        self.windows_y * self.windows_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Windows in row-major order of their top-left corner.
    pub fn windows(&self) -> impl Iterator<Item = Window> + '_ {
        (0..self.windows_y).flat_map(move |wy| {
            (0..self.windows_x).map(move |wx| Window {
                row: wy * self.window_rows,
                col: wx * self.window_cols,
                rows: self.window_rows,
                cols: self.window_cols,
            })
        })
    }
}

/// Splits `map` into metric windows for compression factor `factor`.
pub fn partition(map: &FeatureMap, factor: usize, mode: WindowMode) -> Result<GridPartition> {
    partition_dims(map.height(), map.width(), factor, mode)
}

pub fn partition_dims(height: usize, width: usize, factor: usize, mode: WindowMode) -> Result<GridPartition> {
    // Both modes need s | H and s | W: either the window side or the window
    // count along each axis equals the factor.
    check_divisible(height, width, factor)?;
    Ok(match mode {
        WindowMode::PaperLiteral => GridPartition {
            window_rows: height / factor,
            window_cols: width / factor,
            windows_y: factor,
            windows_x: factor,
        },
        WindowMode::PoolWindow => GridPartition {
            window_rows: factor,
            window_cols: factor,
            windows_y: height / factor,
            windows_x: width / factor,
        },
    })
}
