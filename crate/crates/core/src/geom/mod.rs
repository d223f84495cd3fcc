//! Grid geometry, point-to-cell projection, anchors, centroids and radius
//! neighbor search. All coordinates are `f64` meters in the BEV plane.

mod anchors;
mod cloud;
mod grid;
mod neighbors;

pub use anchors::{
    anchors_from_positions, cell_centroids, centroids_from_positions, generate_anchors,
    project_points, project_positions, AnchorSet, Centroids,
};
pub use cloud::{PointCloud, CSV_HEADER, SENSOR_FEATURES};
pub use grid::{CellIndex, GridSpec};
pub(crate) use grid::integral_ratio;
pub use neighbors::{radius_neighbors, radius_neighbors_bruteforce, HashGrid, NeighborLists};
