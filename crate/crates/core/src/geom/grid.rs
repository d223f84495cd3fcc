use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned BEV grid with square cells of edge `cell_size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub ix: usize,
    pub iy: usize,
}

/// `extent / cell` as an exact integer, or `None` when it is not integral.
pub(crate) fn integral_ratio(extent: f64, cell: f64) -> Option<usize> {
    let q = extent / cell;
    let r = q.round();
    if r >= 1.0 && (q - r).abs() <= 1e-9 * r.max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

impl GridSpec {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Config(format!("cell size must be positive, got {cell_size}")));
        }
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            || x_max <= x_min
            || y_max <= y_min
        {
            return Err(Error::Config(format!(
                "invalid grid extent [{x_min}, {x_max}] x [{y_min}, {y_max}]"
            )));
        }
        let width = integral_ratio(x_max - x_min, cell_size).ok_or_else(|| {
            Error::Config(format!(
                "x extent {} is not an integer multiple of cell size {cell_size}",
                x_max - x_min
            ))
        })?;
        let height = integral_ratio(y_max - y_min, cell_size).ok_or_else(|| {
            Error::Config(format!(
                "y extent {} is not an integer multiple of cell size {cell_size}",
                y_max - y_min
            ))
        })?;
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            cell_size,
            width,
            height,
        })
    }

    /// Square grid `[-half, half]²`.
    pub fn centered(half_extent: f64, cell_size: f64) -> Result<Self> {
        Self::new(-half_extent, -half_extent, half_extent, half_extent, cell_size)
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// Half-open cell lookup; `None` outside `[x_min, x_max) x [y_min, y_max)`.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<CellIndex> {
        if p[0] < self.x_min || p[1] < self.y_min || p[0] >= self.x_max || p[1] >= self.y_max {
            return None;
        }
        let ix = ((p[0] - self.x_min) / self.cell_size).floor() as usize;
        let iy = ((p[1] - self.y_min) / self.cell_size).floor() as usize;
        (ix < self.width && iy < self.height).then_some(CellIndex { ix, iy })
    }

    pub fn cell_center(&self, c: CellIndex) -> [f64; 2] {
        [
            self.x_min + (c.ix as f64 + 0.5) * self.cell_size,
            self.y_min + (c.iy as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Row-major linear index `iy * W + ix`.
    pub fn linear(&self, c: CellIndex) -> usize {
        c.iy * self.width + c.ix
    }

    /// Same extent, cell size multiplied by `factor`.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        Self::new(
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.cell_size * factor as f64,
        )
    }
}
