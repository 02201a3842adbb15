//! Static 3-d tree for nearest-neighbour and fixed-radius queries.
//!
//! Distances are compared as squared Euclidean norms computed with
//! [`dist2`], so a query answers exactly what a brute-force scan using the
//! same function would answer.

use crate::geometry::Vec3;

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

const LEAF: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    // index into `points` for each slot of the implicit tree
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    start: usize,
    end: usize,
    axis: u8,
    split: f64,
    left: u32,
    right: u32,
}

const NONE: u32 = u32::MAX;

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            start,
            end,
            axis: 0,
            split: 0.0,
            left: NONE,
            right: NONE,
        });
        if end - start <= LEAF {
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis])
        });
        let split = self.points[self.order[mid]][axis];
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        let n = &mut self.nodes[id as usize];
        n.axis = axis as u8;
        n.split = split;
        n.left = left;
        n.right = right;
        id
    }

    /// Index and squared distance of the nearest point. Ties resolve to the
    /// lowest index.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(0, q, &mut best);
        Some(best)
    }

    fn nearest_rec(&self, id: u32, q: &Vec3, best: &mut (usize, f64)) {
        let n = self.nodes[id as usize];
        if n.left == NONE {
            for &i in &self.order[n.start..n.end] {
                let d = dist2(q, &self.points[i]);
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
            return;
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, q, best);
        if diff * diff <= best.1 {
            self.nearest_rec(far, q, best);
        }
    }

    /// True if some point lies within `radius` (inclusive).
    pub fn any_within(&self, q: &Vec3, radius: f64) -> bool {
        if self.points.is_empty() {
            return false;
        }
        self.any_rec(0, q, radius * radius)
    }

    fn any_rec(&self, id: u32, q: &Vec3, r2: f64) -> bool {
        let n = self.nodes[id as usize];
        if n.left == NONE {
            return self.order[n.start..n.end]
                .iter()
                .any(|&i| dist2(q, &self.points[i]) <= r2);
        }
        let diff = q[n.axis as usize] - n.split;
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if self.any_rec(near, q, r2) {
            return true;
        }
        diff * diff <= r2 && self.any_rec(far, q, r2)
    }
}
