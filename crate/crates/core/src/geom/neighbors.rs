use std::collections::HashMap;

/// Per-query ascending point indices within a closed ball of `radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborLists {
    pub radius: f64,
    pub lists: Vec<Vec<usize>>,
}

impl NeighborLists {
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn total(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }
}

#[inline]
fn within(a: [f64; 2], b: [f64; 2], radius: f64) -> bool {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy <= radius * radius
}

/// Uniform hash grid over a fixed point set.
#[derive(Clone, Debug)]
pub struct HashGrid<'a> {
    points: &'a [[f64; 2]],
    radius: f64,
    // Slightly larger than the radius so rounding in `x / edge` can never
    // push a point at distance exactly `radius` two buckets away.
    edge: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl<'a> HashGrid<'a> {
    pub fn build(points: &'a [[f64; 2]], radius: f64) -> Self {
        assert!(radius > 0.0, "neighbor radius must be positive");
        let edge = radius * (1.0 + 1e-9);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, &p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, edge)).or_default().push(i);
        }
        Self {
            points,
            radius,
            edge,
            buckets,
        }
    }

    fn key(p: [f64; 2], edge: f64) -> (i64, i64) {
        ((p[0] / edge).floor() as i64, (p[1] / edge).floor() as i64)
    }

    pub fn query(&self, q: [f64; 2]) -> Vec<usize> {
        let (kx, ky) = Self::key(q, self.edge);
        let mut out = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                if let Some(bucket) = self.buckets.get(&(kx + dx, ky + dy)) {
                    out.extend(
                        bucket
                            .iter()
                            .copied()
                            .filter(|&i| within(self.points[i], q, self.radius)),
                    );
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Closed-ball radius search through a hash grid scanning 3x3 buckets.
pub fn radius_neighbors(queries: &[[f64; 2]], points: &[[f64; 2]], radius: f64) -> NeighborLists {
    let grid = HashGrid::build(points, radius);
    NeighborLists {
        radius,
        lists: queries.iter().map(|&q| grid.query(q)).collect(),
    }
}

/// Exhaustive `O(M * N)` reference implementation of [`radius_neighbors`].
pub fn radius_neighbors_bruteforce(
    queries: &[[f64; 2]],
    points: &[[f64; 2]],
    radius: f64,
) -> NeighborLists {
    NeighborLists {
        radius,
        lists: queries
            .iter()
            .map(|&q| {
                (0..points.len())
                    .filter(|&i| within(points[i], q, radius))
                    .collect()
            })
            .collect(),
    }
}
