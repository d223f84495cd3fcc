use crate::autodiff::Tensor;
use crate::geom::{AnchorSet, Centroids};
use crate::real::Real;

/// Number of geometric channels appended by [`augment`].
pub const AUGMENTED_EXTRA: usize = 7;

/// Augmented rows for the in-grid points only.
#[derive(Clone, Debug)]
pub struct Augmented<T> {
    /// `[N_in_grid, F_in + 7]`.
    pub features: Tensor<T>,
    /// Source point of each row.
    pub rows: Vec<usize>,
    /// Anchor of each row.
    pub anchor: Vec<usize>,
}

/// Appends `[dx_anchor, dy_anchor, dx_centroid, dy_centroid, c_x, c_y, n]` to
/// every in-grid point; out-of-grid points are dropped.
pub fn augment<T: Real>(
    positions: &[[f64; 2]],
    features: &Tensor<T>,
    anchors: &AnchorSet,
    centroids: &Centroids,
) -> Augmented<T> {
    let fin = features.cols();
    let rows = anchors.in_grid_points();
    let mut out = Tensor::zeros(&[rows.len(), fin + AUGMENTED_EXTRA]);
    let mut anchor = Vec::with_capacity(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let a = anchors.point_to_anchor[i].expect("in-grid point");
        let (p, xa, xc) = (positions[i], anchors.positions[a], centroids.centroids[a]);
        let row = out.row_mut(r);
        row[..fin].copy_from_slice(features.row(i));
        let extra = [
            p[0] - xa[0],
            p[1] - xa[1],
            p[0] - xc[0],
            p[1] - xc[1],
            xc[0],
            xc[1],
            centroids.counts[a] as f64,
        ];
        for (dst, v) in row[fin..].iter_mut().zip(extra) {
            *dst = T::of(v);
        }
        anchor.push(a);
    }
    Augmented {
        features: out,
        rows,
        anchor,
    }
}

/// Routes gradients of the original channels back to all `total` points.
pub fn augment_backward<T: Real>(
    d_aug: &Tensor<T>,
    rows: &[usize],
    total: usize,
    fin: usize,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(&[total, fin]);
    for (r, &i) in rows.iter().enumerate() {
        dx.row_mut(i).copy_from_slice(&d_aug.row(r)[..fin]);
    }
    dx
}
