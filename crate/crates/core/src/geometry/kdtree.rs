//! Exact nearest-neighbor index over a fixed point set of any dimension.

use ndarray::Array2;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { left: usize, right: usize },
}

/// Immutable kd-tree. Queries return the exact nearest point; among points
/// at equal distance the lowest index wins.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    /// Coordinates in tree order.
    points: Vec<f64>,
    /// Original index of each point in tree order.
    order: Vec<usize>,
    nodes: Vec<KdNode>,
    /// Per node: `dim` lower bounds followed by `dim` upper bounds.
    bounds: Vec<f64>,
}

impl KdTree {
    /// Builds from the rows of `points`. Panics on an empty set.
    pub fn from_rows(points: &Array2<f64>) -> Self {
        let (n, dim) = points.dim();
        assert!(n > 0, "kd-tree over an empty point set");
        let flat: Vec<f64> = points.iter().copied().collect();
        Self::from_flat(flat, dim)
    }

    pub fn from_flat(points: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && points.len() % dim == 0 && !points.is_empty());
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let mut nodes = Vec::new();
        let mut bounds = Vec::new();
        build(&points, dim, &mut order, 0, n, &mut nodes, &mut bounds);
        let mut sorted = Vec::with_capacity(points.len());
        for &i in &order {
            sorted.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        KdTree {
            dim,
            points: sorted,
            order,
            nodes,
            bounds,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn box_sq_dist(&self, node: usize, q: &[f64]) -> f64 {
        let b = &self.bounds[node * 2 * self.dim..(node + 1) * 2 * self.dim];
        let (lo, hi) = b.split_at(self.dim);
        let mut d = 0.0;
        for k in 0..self.dim {
            let e = if q[k] < lo[k] {
                lo[k] - q[k]
            } else if q[k] > hi[k] {
                q[k] - hi[k]
            } else {
                0.0
            };
            d += e * e;
        }
        d
    }

    /// `(index, squared distance)` of the nearest stored point.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        assert_eq!(q.len(), self.dim, "query dimension");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: &[f64], best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for k in start..end {
                    let p = &self.points[k * self.dim..(k + 1) * self.dim];
                    let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    let i = self.order[k];
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split { left, right } => {
                let (dl, dr) = (self.box_sq_dist(left, q), self.box_sq_dist(right, q));
                let (near, far, df) = if dl <= dr { (left, right, dr) } else { (right, left, dl) };
                if dl.min(dr) <= best.1 {
                    self.search(near, q, best);
                }
                // Equal-distance points on the far side may carry lower indices.
                if df <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Nearest neighbor of every row of `queries`.
    pub fn nearest_all(&self, queries: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::with_capacity(queries.nrows());
        let mut dist = Vec::with_capacity(queries.nrows());
        let mut buf = vec![0.0; self.dim];
        for row in queries.rows() {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = v;
            }
            let (i, d) = self.nearest(&buf);
            idx.push(i);
            dist.push(d);
        }
        (idx, dist)
    }
}

fn build(
    points: &[f64],
    dim: usize,
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<KdNode>,
    bounds: &mut Vec<f64>,
) -> usize {
    let id = nodes.len();
    let (mut lo, mut hi) = (vec![f64::INFINITY; dim], vec![f64::NEG_INFINITY; dim]);
    for &i in &order[start..end] {
        for a in 0..dim {
            let c = points[i * dim + a];
            lo[a] = lo[a].min(c);
            hi[a] = hi[a].max(c);
        }
    }
    bounds.extend_from_slice(&lo);
    bounds.extend_from_slice(&hi);
    if end - start <= LEAF_SIZE {
        nodes.push(KdNode::Leaf { start, end });
        return id;
    }
    nodes.push(KdNode::Leaf { start: 0, end: 0 });
    // Split along the axis of widest spread.
    let axis = (0..dim)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
        .unwrap_or(0);
    let mid = start + (end - start) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a * dim + axis].total_cmp(&points[b * dim + axis]));
    let left = build(points, dim, order, start, mid, nodes, bounds);
    let right = build(points, dim, order, mid, end, nodes, bounds);
    nodes[id] = KdNode::Split { left, right };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &Array2<f64>, q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, row) in points.rows().into_iter().enumerate() {
            let d: f64 = row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn singleton() {
        let p = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let t = KdTree::from_rows(&p);
        assert_eq!(t.nearest(&[5.0, 5.0, 5.0]).0, 0);
        assert_eq!(t.nearest(&[1.0, 2.0, 3.0]), (0, 0.0));
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for dim in [2, 3, 6] {
            let pts = Array2::from_shape_fn((1000, dim), |_| rng.random_range(-1.0..1.0));
            let tree = KdTree::from_rows(&pts);
            for _ in 0..2500 {
                let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..1.2)).collect();
                assert_eq!(tree.nearest(&q), linear_scan(&pts, &q));
            }
        }
    }

    #[test]
    fn ties_pick_lowest_index() {
        // Many duplicates of the same point spread across leaves.
        let mut data = Vec::new();
        for i in 0..64 {
            data.extend_from_slice(&[(i % 4) as f64, 0.0]);
        }
        let pts = Array2::from_shape_vec((64, 2), data).unwrap();
        let tree = KdTree::from_rows(&pts);
        assert_eq!(tree.nearest(&[2.0, 0.0]).0, 2);
        assert_eq!(tree.nearest(&[0.5, 0.0]).0, 0);
        assert_eq!(tree.nearest(&[3.0, 1.0]).0, 3);
    }
}
