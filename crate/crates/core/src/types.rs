//! Domain types shared by every stage of the engine.
//!
//! Pixel coordinates are `(row, col)`, row-major, origin top-left. Boxes are
//! half-open `[x0, x1) × [y0, y1)` with `x` the column and `y` the row.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Scalar field over the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("grid extent must be at least 1×1"));
        }
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "grid {}×{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(Grid2D {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Grid2D {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Grid2D::filled(height, width, 0.0)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Sum accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the largest value (first occurrence).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Dense H×W×d feature grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("feature grid dimensions must be nonzero"));
        }
        if values.len() != height * width * channels {
            return Err(Error::dim(format!(
                "feature grid {}×{}×{} needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                values.len()
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureGrid {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
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

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", from = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub const fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// `0 ≤ x0 < x1 ≤ W` and `0 ≤ y0 < y1 ≤ H`.
    pub fn is_valid_in(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 as usize <= width && self.y1 as usize <= height
    }

    /// Center as `(row, col)` in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.y0) + f64::from(self.y1)) / 2.0,
            (f64::from(self.x0) + f64::from(self.x1)) / 2.0,
        )
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl From<[u32; 4]> for BBox {
    fn from(a: [u32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

/// One detector proposal with its segmentation mask and identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub mask: BinaryMask,
    /// Crop identity embedding, computed when the trace was produced.
    pub identity: Embedding,
    pub detector_score: f32,
    /// Score from an external cross-modal refiner, when the trace carries one.
    pub refiner_score: Option<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionFrame {
    pub frame_index: u64,
    pub mean_brightness: f32,
    pub features: FeatureGrid,
    pub proposals: Vec<Proposal>,
}

impl PerceptionFrame {
    pub fn height(&self) -> usize {
        self.features.height()
    }

    pub fn width(&self) -> usize {
        self.features.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub text: String,
    pub embedding: Embedding,
}

/// Per-frame engine output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameOutput {
    Absent,
    Box { bbox: BBox, score: f32 },
}

impl FrameOutput {
    pub fn bbox(&self) -> Option<BBox> {
        match self {
            FrameOutput::Absent => None,
            FrameOutput::Box { bbox, .. } => Some(*bbox),
        }
    }

    pub fn score(&self) -> Option<f32> {
        match self {
            FrameOutput::Absent => None,
            FrameOutput::Box { score, .. } => Some(*score),
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, FrameOutput::Box { .. })
    }
}

/// One output entry per input frame.
pub type Trajectory = Vec<FrameOutput>;
