//! Exact nearest-neighbour search. `KdTree` serves the metrics on clouds of
//! any size; `knn_table` is the brute-force variant the networks use on
//! blocks of at most a few thousand points.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud::{dist2, Point};

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced kd-tree over a borrowed point slice. Results are exact; equal
/// distances resolve to the lower point index.
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(PartialEq)]
struct Cand(f64, usize);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap();
        if hi[axis] <= lo[axis] {
            // all points identical
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = (end - start) / 2;
        let pts = self.points;
        self.order[start..end].select_nth_unstable_by(mid, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = pts[self.order[start + mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Nearest point index and its squared distance.
    pub fn nearest(&self, q: &Point) -> (usize, f64) {
        let mut best = Cand(f64::INFINITY, usize::MAX);
        self.nearest_rec(0, q, &mut best);
        (best.1, best.0)
    }

    fn nearest_rec(&self, node: usize, q: &Point, best: &mut Cand) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let c = Cand(dist2(q, &self.points[i]), i);
                    // NaN distances still yield some index
                    if c < *best || best.1 == usize::MAX {
                        *best = c;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.nearest_rec(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_rec(far, q, best);
                }
            }
        }
    }

    /// The `k` nearest points, closest first.
    pub fn knn(&self, q: &Point, k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.points.is_empty() {
            self.knn_rec(0, q, k, &mut heap);
        }
        let mut v: Vec<Cand> = heap.into_vec();
        v.sort();
        v.into_iter().map(|c| (c.1, c.0)).collect()
    }

    fn knn_rec(&self, node: usize, q: &Point, k: usize, heap: &mut BinaryHeap<Cand>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let c = Cand(dist2(q, &self.points[i]), i);
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.knn_rec(near, q, k, heap);
                let worst = if heap.len() < k { f64::INFINITY } else { heap.peek().unwrap().0 };
                if diff * diff <= worst {
                    self.knn_rec(far, q, k, heap);
                }
            }
        }
    }
}

/// Row-major `queries.len() x k` table of the `k` nearest indices into
/// `points` for every query, closest first, ties to the lower index.
/// Brute force; `k` is clamped to `points.len()`.
pub fn knn_table(points: &[Point], queries: &[Point], k: usize) -> Vec<usize> {
    let k = k.min(points.len());
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for q in queries {
        scratch.clear();
        scratch.extend(points.iter().enumerate().map(|(i, p)| (dist2(q, p), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k, cmp);
        }
        let head = &mut scratch[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, i)| i));
    }
    out
}
