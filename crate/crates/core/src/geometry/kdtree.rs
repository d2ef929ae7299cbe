use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Exact nearest-neighbour k-d tree over a [`PointCloud`].
///
/// Results are bit-identical to an exhaustive scan: distances are compared
/// as squared sums computed in the same order, and ties resolve to the
/// smallest point index.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    cloud: PointCloud,
    perm: Vec<u32>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist_sq(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn build(cloud: PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut perm: Vec<u32> = (0..cloud.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * cloud.len() / LEAF_SIZE + 1);
        build_rec(cloud.points(), &mut perm, 0, &mut nodes);
        Ok(SpatialIndex { cloud, perm, nodes })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    /// Index of the nearest point and the Euclidean distance to it.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        let (i, d2) = self.nearest_sq(query);
        (i, d2.sqrt())
    }

    /// Index of the nearest point and the squared distance to it.
    pub fn nearest_sq(&self, query: &Vec3) -> (usize, f64) {
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        (best.0 as usize, best.1)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (u32, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let pts = self.cloud.points();
                for &idx in &self.perm[start as usize..end as usize] {
                    let d2 = dist_sq(q, &pts[idx as usize]);
                    if d2 < best.1 || (d2 == best.1 && idx < best.0) {
                        *best = (idx, d2);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near as usize, q, best);
                // `<=` keeps equal-distance candidates reachable for the tie rule.
                if diff * diff <= best.1 {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

fn build_rec(points: &[Vec3], perm: &mut [u32], offset: u32, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if perm.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + perm.len() as u32,
        });
        return id;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in perm.iter() {
        let p = &points[i as usize];
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let dim = extent.imax();
    if extent[dim] <= 0.0 {
        // all points coincide
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + perm.len() as u32,
        });
        return id;
    }
    let mid = perm.len() / 2;
    perm.select_nth_unstable_by(mid, |a, b| {
        points[*a as usize][dim].total_cmp(&points[*b as usize][dim])
    });
    let value = points[perm[mid] as usize][dim];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = perm.split_at_mut(mid);
    let left = build_rec(points, l, offset, nodes);
    let right = build_rec(points, r, offset + mid as u32, nodes);
    nodes[id as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    id
}
