//! Exact k-nearest-neighbor queries over a static KD-tree.
//!
//! Candidates are ranked by `(squared distance, index)`, so distance ties
//! always resolve to the lowest index and answers match an exhaustive scan.

use super::cloud::{dist2, Point, PointCloud};
use crate::error::{ensure, Result};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced KD-tree over a fixed set of points. Immutable after build.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Point>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point]) -> Self {
        let mut index = SpatialIndex { points: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            let n = points.len();
            index.build_node(0, n);
        }
        index
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a))).unwrap()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Index and squared distance of the nearest indexed point.
    pub fn nearest(&self, query: &Point) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on an empty index");
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, query, &mut best);
        (best.1, best.0)
    }

    fn nearest_rec(&self, node: usize, q: &Point, best: &mut (f64, usize)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(q, &self.points[i]);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        *best = (d, i);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest indices in ascending `(distance, index)` order.
    pub fn knn(&self, query: &Point, k: usize) -> Result<Vec<usize>> {
        Ok(self.knn_with_dist2(query, k)?.into_iter().map(|(i, _)| i).collect())
    }

    pub fn knn_with_dist2(&self, query: &Point, k: usize) -> Result<Vec<(usize, f64)>> {
        ensure!(k >= 1 && k <= self.points.len(), "knn: k = {k} outside 1..={}", self.points.len());
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        Ok(heap.into_iter().map(|(d, i)| (i, d)).collect())
    }

    fn knn_rec(&self, node: usize, q: &Point, k: usize, best: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = (dist2(q, &self.points[i]), i);
                    if best.len() == k {
                        let worst = best[k - 1];
                        if cand.0 > worst.0 || (cand.0 == worst.0 && cand.1 > worst.1) {
                            continue;
                        }
                    }
                    let pos = best.partition_point(|&(d, j)| d < cand.0 || (d == cand.0 && j < cand.1));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            KdNode::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, best);
                if best.len() < k || diff * diff <= best[k - 1].0 {
                    self.knn_rec(far, q, k, best);
                }
            }
        }
    }
}
