use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::{AnchorSet, GridSpec};
use crate::real::Real;

/// Dense BEV map `[H, W, C]` (rows are `(iy, ix)`) tied to its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub grid: GridSpec,
    pub data: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[T] {
        self.data.row(iy * self.grid.width + ix)
    }

    /// Linear indices of cells with any nonzero channel.
    pub fn nonzero_cells(&self) -> Vec<usize> {
        (0..self.data.rows())
            .filter(|&r| self.data.row(r).iter().any(|v| *v != T::zero()))
            .collect()
    }
}

/// Scatters anchor rows into their cells; every other cell is zero.
pub fn grid_transfer<T: Real>(
    anchor_features: &Tensor<T>,
    anchors: &AnchorSet,
    grid: &GridSpec,
) -> Result<FeatureMap<T>> {
    if anchor_features.rows() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} anchors",
            anchor_features.rows(),
            anchors.len()
        )));
    }
    let c = anchor_features.cols();
    let mut data = Tensor::zeros(&[grid.height, grid.width, c]);
    let mut seen = vec![false; grid.num_cells()];
    for (a, cell) in anchors.cells.iter().enumerate() {
        if cell.ix >= grid.width || cell.iy >= grid.height {
            return Err(Error::Contract(format!("anchor cell {cell:?} outside grid")));
        }
        let l = grid.linear(*cell);
        if std::mem::replace(&mut seen[l], true) {
            return Err(Error::Contract(format!(
                "duplicate anchor cell {cell:?}: anchors and cells must be one-to-one"
            )));
        }
        data.row_mut(l).copy_from_slice(anchor_features.row(a));
    }
    Ok(FeatureMap { grid: *grid, data })
}

/// VJP of [`grid_transfer`]: gathers occupied-cell rows back to anchors.
pub fn grid_gather<T: Real>(map: &Tensor<T>, anchors: &AnchorSet, grid: &GridSpec) -> Tensor<T> {
    let c = map.cols();
    let mut out = Tensor::zeros(&[anchors.len(), c]);
    for (a, cell) in anchors.cells.iter().enumerate() {
        out.row_mut(a).copy_from_slice(map.row(grid.linear(*cell)));
    }
    out
}
