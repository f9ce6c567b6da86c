//! Metric bird's-eye-view grid shared by every stage of the pipeline.
//!
//! Rows index the y axis and columns index the x axis. Cells are half-open
//! intervals `[min, min + cell_size)`, so a point lying exactly on the upper
//! boundary of the crop box is out of bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("cell ({row}, {col}) outside {height}x{width} grid")]
    OutOfRange {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

/// Crop box and cell layout of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub cell_size: f64,
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn new(
        (x_min, x_max): (f64, f64),
        (y_min, y_max): (f64, f64),
        (z_min, z_max): (f64, f64),
        cell_size: f64,
    ) -> Result<Self, GridError> {
        let all = [x_min, x_max, y_min, y_max, z_min, z_max, cell_size];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GridError::Invalid("non-finite bound".into()));
        }
        if cell_size <= 0.0 {
            return Err(GridError::Invalid(format!("cell_size {cell_size} must be > 0")));
        }
        if x_max <= x_min || y_max <= y_min || z_max <= z_min {
            return Err(GridError::Invalid("empty crop box".into()));
        }
        let width = ((x_max - x_min) / cell_size).round() as usize;
        let height = ((y_max - y_min) / cell_size).round() as usize;
        if width == 0 || height == 0 {
            return Err(GridError::Invalid("crop box smaller than one cell".into()));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
            cell_size,
            height,
            width,
        })
    }

    /// Square grid centred on the sensor: `[-half, half)` in x and y.
    pub fn centered(half_extent: f64, (z_min, z_max): (f64, f64), cell_size: f64) -> Result<Self, GridError> {
        Self::new(
            (-half_extent, half_extent),
            (-half_extent, half_extent),
            (z_min, z_max),
            cell_size,
        )
    }

    /// 512x512 cells of 0.2 m over ±51.2 m, z in [-3, 3].
    pub fn full_scale() -> Self {
        Self::centered(51.2, (-3.0, 3.0), 0.2).expect("constant grid is valid")
    }

    /// 128x128 cells of 0.2 m over ±12.8 m, z in [-3, 3].
    pub fn desk_scale() -> Self {
        Self::centered(12.8, (-3.0, 3.0), 0.2).expect("constant grid is valid")
    }

    /// Re-checks the layout invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), GridError> {
        let fresh = Self::new(
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
            self.cell_size,
        )?;
        if fresh.width != self.width || fresh.height != self.height {
            return Err(GridError::Invalid(format!(
                "declared {}x{} but bounds imply {}x{}",
                self.height, self.width, fresh.height, fresh.width
            )));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Floor-based binning; `None` outside the half-open crop box.
    pub fn metric_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let col = ((x - self.x_min) / self.cell_size).floor() as usize;
        let row = ((y - self.y_min) / self.cell_size).floor() as usize;
        // Rounding in the division can push a point just below x_max into
        // index `width`.
        if row >= self.height || col >= self.width {
            return None;
        }
        Some((row, col))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> Result<(f64, f64), GridError> {
        if row >= self.height || col >= self.width {
            return Err(GridError::OutOfRange {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok((
            self.x_min + (col as f64 + 0.5) * self.cell_size,
            self.y_min + (row as f64 + 0.5) * self.cell_size,
        ))
    }

    pub fn contains_z(&self, z: f64) -> bool {
        z >= self.z_min && z <= self.z_max
    }

    /// Row-major flat index of a cell.
    pub fn flat_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Same crop box with cells `factor` times larger (the geometry of a
    /// feature map at 1/factor resolution).
    pub fn coarsened(&self, factor: usize) -> Result<Self, GridError> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(GridError::Invalid(format!(
                "{}x{} grid not divisible by {factor}",
                self.height, self.width
            )));
        }
        Ok(Self {
            cell_size: self.cell_size * factor as f64,
            height: self.height / factor,
            width: self.width / factor,
            ..*self
        })
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::full_scale()
    }
}
