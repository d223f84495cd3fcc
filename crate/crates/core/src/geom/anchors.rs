use super::cloud::PointCloud;
use super::grid::{CellIndex, GridSpec};

/// Cell per point; `None` marks out-of-grid points, which stay in the cloud
/// and remain usable as neighbors.
pub fn project_points(pc: &PointCloud, grid: &GridSpec) -> Vec<Option<CellIndex>> {
    project_positions(pc.positions(), grid)
}

pub fn project_positions(positions: &[[f64; 2]], grid: &GridSpec) -> Vec<Option<CellIndex>> {
    positions.iter().map(|&p| grid.cell_of(p)).collect()
}

/// One anchor per occupied cell, placed at the cell center.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub positions: Vec<[f64; 2]>,
    pub cells: Vec<CellIndex>,
    /// Anchor of each input point, `None` for out-of-grid points.
    pub point_to_anchor: Vec<Option<usize>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Indices of in-grid points in ascending order.
    pub fn in_grid_points(&self) -> Vec<usize> {
        self.point_to_anchor
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
            .collect()
    }
}

/// Anchors sorted by `(iy, ix)`.
pub fn generate_anchors(pc: &PointCloud, grid: &GridSpec) -> AnchorSet {
    anchors_from_positions(pc.positions(), grid)
}

pub fn anchors_from_positions(positions: &[[f64; 2]], grid: &GridSpec) -> AnchorSet {
    let cells = project_positions(positions, grid);
    let mut occupied: Vec<usize> = cells.iter().flatten().map(|&c| grid.linear(c)).collect();
    occupied.sort_unstable();
    occupied.dedup();
    let anchor_cells: Vec<CellIndex> = occupied
        .iter()
        .map(|&l| CellIndex {
            ix: l % grid.width,
            iy: l / grid.width,
        })
        .collect();
    let point_to_anchor = cells
        .iter()
        .map(|c| c.map(|c| occupied.binary_search(&grid.linear(c)).expect("occupied cell")))
        .collect();
    AnchorSet {
        positions: anchor_cells.iter().map(|&c| grid.cell_center(c)).collect(),
        cells: anchor_cells,
        point_to_anchor,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub centroids: Vec<[f64; 2]>,
    pub counts: Vec<usize>,
}

/// Mean position and member count of the in-grid points of every anchor cell.
pub fn cell_centroids(pc: &PointCloud, anchors: &AnchorSet) -> Centroids {
    centroids_from_positions(pc.positions(), anchors)
}

pub fn centroids_from_positions(positions: &[[f64; 2]], anchors: &AnchorSet) -> Centroids {
    let mut sums = vec![[0.0f64; 2]; anchors.len()];
    let mut counts = vec![0usize; anchors.len()];
    for (p, a) in positions.iter().zip(&anchors.point_to_anchor) {
        if let Some(a) = *a {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
    }
    let centroids = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
        .collect();
    Centroids { centroids, counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 2]]) -> PointCloud {
        PointCloud::new(points.to_vec(), vec![0.0; points.len()], 1).unwrap()
    }

    fn grid4() -> GridSpec {
        GridSpec::new(0.0, 0.0, 4.0, 4.0, 1.0).unwrap()
    }

    #[test]
    fn single_point_anchor_at_cell_center() {
        let a = generate_anchors(&cloud(&[[0.3, 0.7]]), &grid4());
        assert_eq!(a.positions, vec![[0.5, 0.5]]);
        assert_eq!(a.point_to_anchor, vec![Some(0)]);
    }

    #[test]
    fn shared_cell_deduplicates() {
        let a = generate_anchors(&cloud(&[[0.1, 0.1], [0.9, 0.2]]), &grid4());
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn nine_cells_nine_anchors_sorted() {
        let g = GridSpec::new(0.0, 0.0, 3.0, 3.0, 1.0).unwrap();
        let pts: Vec<[f64; 2]> = (0..9)
            .rev()
            .map(|i| [(i % 3) as f64 + 0.5, (i / 3) as f64 + 0.5])
            .collect();
        let a = generate_anchors(&cloud(&pts), &g);
        assert_eq!(a.len(), 9);
        let keys: Vec<(usize, usize)> = a.cells.iter().map(|c| (c.iy, c.ix)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn out_of_grid_points_get_no_anchor() {
        let a = generate_anchors(&cloud(&[[4.0, 1.0], [1.5, 1.5], [-1.0, 0.0]]), &grid4());
        assert_eq!(a.point_to_anchor, vec![None, Some(0), None]);
        assert_eq!(a.in_grid_points(), vec![1]);
    }

    #[test]
    fn empty_cloud_gives_empty_anchors() {
        let a = generate_anchors(&PointCloud::empty(1), &grid4());
        assert!(a.is_empty());
    }

    #[test]
    fn centroid_is_mean_of_members() {
        let pc = cloud(&[[0.0, 0.0], [0.4, 0.4], [2.5, 2.5]]);
        let a = generate_anchors(&pc, &grid4());
        let c = cell_centroids(&pc, &a);
        assert_eq!(c.counts, vec![2, 1]);
        assert!((c.centroids[0][0] - 0.2).abs() < 1e-15);
        assert!((c.centroids[0][1] - 0.2).abs() < 1e-15);
        assert_eq!(c.centroids[1], [2.5, 2.5]);
    }
}
