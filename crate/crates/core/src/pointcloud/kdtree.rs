use super::{ColorPointCloud, PointCloudError};
use crate::geometry::Vec3;

pub const DEFAULT_LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact k-d tree over point positions. Queries return the lowest-index
/// point among those at minimal squared distance.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

impl SpatialIndex {
    pub fn new(cloud: &ColorPointCloud) -> Self {
        Self::from_points(cloud.positions().to_vec(), DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(cloud: &ColorPointCloud, leaf_size: usize) -> Self {
        Self::from_points(cloud.positions().to_vec(), leaf_size)
    }

    pub fn from_points(points: Vec<Vec3>, leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut index = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
            leaf_size,
        };
        if !index.points.is_empty() {
            index.build(0, index.points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = self.points[slice[0]];
        let mut hi = lo;
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = self.points[self.order[start + mid]][axis];

        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Returns `(index, squared distance)` of the nearest indexed point.
    pub fn nearest_neighbor(&self, query: &Vec3) -> Result<(usize, f64), PointCloudError> {
        if self.points.is_empty() {
            return Err(PointCloudError::EmptyIndex);
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        Ok(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // equal distance must still be visited for the index tie-break
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn empty_index() {
        let idx = SpatialIndex::new(&ColorPointCloud::empty());
        assert!(matches!(idx.nearest_neighbor(&Vec3::zeros()), Err(PointCloudError::EmptyIndex)));
    }

    #[test]
    fn exact_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let idx = SpatialIndex::from_points(pts.clone(), 4);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(idx.nearest_neighbor(p).unwrap(), (i, 0.0));
        }
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let idx = SpatialIndex::from_points(pts.clone(), DEFAULT_LEAF_SIZE);
        for _ in 0..100 {
            let q = Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            assert_eq!(idx.nearest_neighbor(&q).unwrap(), linear_scan(&pts, &q));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Duplicates and a grid with many equidistant neighbors.
        let mut pts = Vec::new();
        for _ in 0..3 {
            for x in 0..5 {
                for y in 0..5 {
                    pts.push(Vec3::new(x as f64, y as f64, 0.0));
                }
            }
        }
        let idx = SpatialIndex::from_points(pts.clone(), 2);
        for q in [Vec3::new(1.5, 1.5, 0.0), Vec3::new(2.0, 2.0, 0.0), Vec3::new(0.5, 3.0, 1.0)] {
            assert_eq!(idx.nearest_neighbor(&q).unwrap(), linear_scan(&pts, &q));
        }
    }

    proptest! {
        #[test]
        fn index_equals_exhaustive_search(
            pts in prop::collection::vec((-10i32..10, -10i32..10, -10i32..10), 1..300),
            queries in prop::collection::vec((-12.0..12.0f64, -12.0..12.0f64, -12.0..12.0f64), 1..20),
            leaf in 1usize..20,
        ) {
            // integer grid coordinates make exact ties common
            let pts: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x as f64, y as f64, z as f64 * 0.5)).collect();
            let idx = SpatialIndex::from_points(pts.clone(), leaf);
            for (x, y, z) in queries {
                let q = Vec3::new(x.round(), y, z);
                prop_assert_eq!(idx.nearest_neighbor(&q).unwrap(), linear_scan(&pts, &q));
            }
        }
    }
}
