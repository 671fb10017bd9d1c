//! Exact k-nearest-neighbor search over fixed-dimension points.
//!
//! One implementation serves both the 3-D spatial search and the 6-D
//! position⊕feature search. Results are ordered by `(squared distance,
//! index)`, so equal distances resolve to the smaller point index and the
//! output is identical to a sorted brute-force scan.

use nalgebra::Vector3;
use thiserror::Error;

pub const DEFAULT_BUCKET_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnnError {
    #[error("cannot build a k-d tree over zero points")]
    Empty,
    #[error("point {0} has non-finite coordinates")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Neighbor {
    fn precedes(&self, other: &Neighbor) -> bool {
        (self.dist_sq, self.index) < (other.dist_sq, other.index)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<const D: usize> {
    points: Vec<[f64; D]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

pub type KdTree3 = KdTree<3>;
pub type KdTree6 = KdTree<6>;

#[inline]
pub fn dist_sq<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        let d = a[i] - b[i];
        s += d * d;
    }
    s
}

impl<const D: usize> KdTree<D> {
    pub fn build(points: Vec<[f64; D]>) -> Result<Self, KnnError> {
        Self::build_with_bucket(points, DEFAULT_BUCKET_SIZE)
    }

    pub fn build_with_bucket(points: Vec<[f64; D]>, bucket: usize) -> Result<Self, KnnError> {
        if points.is_empty() {
            return Err(KnnError::Empty);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(KnnError::NonFinite(i));
        }
        let mut tree = KdTree {
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / bucket.max(1) + 1),
            points,
        };
        let n = tree.points.len();
        tree.build_node(0, n, bucket.max(1));
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize, bucket: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= bucket {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for &i in &self.order[start..end] {
            for a in 0..D {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..D)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap();
        if hi[axis] == lo[axis] {
            // all coincident
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid, bucket);
        let right = self.build_node(mid, end, bucket);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; D] {
        &self.points[index]
    }

    pub fn points(&self) -> &[[f64; D]] {
        &self.points
    }

    /// The `k` nearest points; all points when `k` exceeds the tree size.
    pub fn knn(&self, query: &[f64; D], k: usize) -> Vec<Neighbor> {
        let k = k.max(1).min(self.points.len());
        let mut best = Vec::with_capacity(k + 1);
        self.search(0, query, k, f64::INFINITY, &mut best);
        best
    }

    /// Nearest point with squared distance at most `max_dist_sq`.
    pub fn nearest_within(&self, query: &[f64; D], max_dist_sq: f64) -> Option<Neighbor> {
        let mut best = Vec::with_capacity(2);
        self.search(0, query, 1, max_dist_sq, &mut best);
        best.pop()
    }

    pub fn nearest(&self, query: &[f64; D]) -> Neighbor {
        self.knn(query, 1)[0]
    }

    fn search(&self, node: usize, q: &[f64; D], k: usize, limit: f64, best: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = Neighbor { index: i, dist_sq: dist_sq(q, &self.points[i]) };
                    if cand.dist_sq > limit {
                        continue;
                    }
                    if best.len() == k && !cand.precedes(&best[k - 1]) {
                        continue;
                    }
                    let pos = best.partition_point(|b| b.precedes(&cand));
                    best.insert(pos, cand);
                    best.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, limit, best);
                let bound = diff * diff;
                // equal bounds must still be visited: a tie may carry a smaller index
                let worst = if best.len() == k { best[k - 1].dist_sq } else { limit };
                if bound <= worst {
                    self.search(far, q, k, limit, best);
                }
            }
        }
    }

    /// Every indexed point exactly once, by walking the leaves.
    pub fn leaf_membership(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.points.len());
        for n in &self.nodes {
            if let Node::Leaf { start, end } = n {
                out.extend_from_slice(&self.order[*start..*end]);
            }
        }
        out
    }
}

pub fn vec3_to_array(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl KdTree<3> {
    pub fn from_positions(positions: &[Vector3<f64>]) -> Result<Self, KnnError> {
        Self::build(positions.iter().map(vec3_to_array).collect())
    }
}
