//! Exact nearest-neighbour search over a transformed point set.
//!
//! The tree stores model-frame coordinates `T(v_h)`, so it must be rebuilt
//! whenever the set's transform changes. Splits are taken on the axis of
//! largest spread at the median, which keeps depth at `O(log N)`.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointSet, RigidTransform};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Immutable k-d tree over one point set in the model frame.
#[derive(Debug, Clone)]
pub struct NnIndex {
    set: usize,
    transform: RigidTransform,
    coords: Vec<[f64; 3]>,
    original: Vec<u32>,
    nodes: Vec<Node>,
}

pub fn build_index(set: &PointSet, transform: &RigidTransform) -> Result<NnIndex> {
    NnIndex::build(set, transform)
}

pub fn nearest(index: &NnIndex, query: &Point3) -> Neighbor {
    index.nearest(query)
}

impl NnIndex {
    pub fn build(set: &PointSet, transform: &RigidTransform) -> Result<Self> {
        Self::from_model_points(set.id(), *transform, set.points().iter().map(|p| transform.apply(p)))
    }

    fn from_model_points(
        set: usize,
        transform: RigidTransform,
        points: impl Iterator<Item = Point3>,
    ) -> Result<Self> {
        let mut items: Vec<([f64; 3], u32)> = points
            .enumerate()
            .map(|(h, p)| ([p.x, p.y, p.z], h as u32))
            .collect();
        if items.is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let mut nodes = Vec::with_capacity(2 * items.len() / LEAF_SIZE + 1);
        build_node(&mut items, 0, &mut nodes);
        let (coords, original) = items.into_iter().unzip();
        Ok(Self {
            set,
            transform,
            coords,
            original,
            nodes,
        })
    }

    pub fn set(&self) -> usize {
        self.set
    }

    /// The transform the coordinates were built with.
    pub fn transform(&self) -> &RigidTransform {
        &self.transform
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn nearest(&self, query: &Point3) -> Neighbor {
        let (index, d2) = self.nearest_squared(query);
        Neighbor {
            index,
            distance: d2.sqrt(),
        }
    }

    /// Original point index and squared distance of the nearest stored point.
    /// Exact ties go to the smallest index.
    pub fn nearest_squared(&self, query: &Point3) -> (usize, f64) {
        let q = [query.x, query.y, query.z];
        let mut best = (u32::MAX, f64::INFINITY);
        self.search(0, &q, &mut best);
        (best.0 as usize, best.1)
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut (u32, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for k in start as usize..end as usize {
                    let p = &self.coords[k];
                    let d2 = squared_distance(p, q);
                    let h = self.original[k];
                    if d2 < best.1 || (d2 == best.1 && h < best.0) {
                        *best = (h, d2);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, q, best);
                // `<=` keeps equal-distance candidates reachable for the tie rule.
                if diff * diff <= best.1 {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

#[inline]
fn squared_distance(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = q[0] - p[0];
    let dy = q[1] - p[1];
    let dz = q[2] - p[2];
    dx * dx + dy * dy + dz * dz
}

fn build_node(items: &mut [([f64; 3], u32)], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if items.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + items.len()) as u32,
        });
        return id;
    }
    let axis = widest_axis(items);
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]));
    let value = items[mid].0[axis];

    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lo, hi) = items.split_at_mut(mid);
    let left = build_node(lo, offset, nodes);
    let right = build_node(hi, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

fn widest_axis(items: &[([f64; 3], u32)]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0)
}
