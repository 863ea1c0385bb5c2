//! Dense row-major f32 containers used across the pipeline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatial extent of a feature map or attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn area(self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A single-channel spatial map (control-scale mask, bias map).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    res: Resolution,
    data: Vec<f32>,
}

impl Grid {
    pub fn new(res: Resolution, data: Vec<f32>) -> Result<Self> {
        if data.len() != res.area() {
            return Err(Error::shape(res.area(), data.len()));
        }
        Ok(Self { res, data })
    }

    pub fn filled(res: Resolution, value: f32) -> Self {
        Self {
            res,
            data: vec![value; res.area()],
        }
    }

    pub fn zeros(res: Resolution) -> Self {
        Self::filled(res, 0.0)
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn height(&self) -> usize {
        self.res.height
    }

    pub fn width(&self) -> usize {
        self.res.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.res.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Attention probabilities (or logits) laid out as `[spatial × tokens]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl AttnMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies one token column out as a spatial grid.
    pub fn column(&self, c: usize, res: Resolution) -> Result<Grid> {
        if res.area() != self.rows {
            return Err(Error::shape(self.rows, res.area()));
        }
        if c >= self.cols {
            return Err(Error::TargetIndexOutOfRange {
                index: c,
                len: self.cols,
            });
        }
        Grid::new(res, (0..self.rows).map(|r| self.get(r, c)).collect())
    }
}

/// A `[channels × height × width]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    channels: usize,
    res: Resolution,
    data: Vec<f32>,
}

impl Feature {
    pub fn new(channels: usize, res: Resolution, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * res.area() {
            return Err(Error::shape(
                format!("{channels}x{res}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            res,
            data,
        })
    }

    pub fn zeros(channels: usize, res: Resolution) -> Self {
        Self {
            channels,
            res,
            data: vec![0.0; channels * res.area()],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> Resolution {
        self.res
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.res.area();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.res.area();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Feature) -> bool {
        self.channels == other.channels && self.res == other.res
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.channels, self.res)
    }
}

/// Hex SHA-256 of a float buffer's little-endian bytes.
pub fn hash_f32(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
