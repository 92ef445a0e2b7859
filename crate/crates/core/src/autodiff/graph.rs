//! Batched reverse-mode tape whose nodes are dense row-major matrices.
//!
//! This is the training-path counterpart of the scalar [`Tape`](super::Tape):
//! the same forward-over-reverse scheme, but a network layer over a batch of
//! points is one `matmul` node instead of thousands of scalar nodes. Tangent
//! streams are ordinary matrices recorded on the same graph, so losses built
//! from Jacobians backpropagate into the weights.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::AutodiffError;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Index of a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Array2<f64>),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    SafeSqrt(NodeId),
    Cols(NodeId, usize),
    HCat(Vec<NodeId>),
    VCat(Vec<NodeId>),
    Rows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    RowSum(NodeId),
    SumAll(NodeId),
    MeanRowSqNorm(NodeId),
    Cross3(NodeId, NodeId),
    NormalizeRows(NodeId, f64, Vec<bool>),
    Repulsion(NodeId, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// A batched computation graph. Built fresh for every evaluation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    discrete: u64,
}

/// Adjoints of a scalar output with respect to graph nodes.
#[derive(Debug)]
pub struct GraphGradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl GraphGradients {
    /// `None` when the output does not depend on the node.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            discrete: FNV_OFFSET,
        }
    }

    /// Folds discrete choices (nearest-neighbor indices, activation
    /// patterns) into [`discrete_signature`](Self::discrete_signature).
    pub fn note_discrete(&mut self, data: impl IntoIterator<Item = u64>) {
        for x in data {
            self.discrete = (self.discrete ^ x).wrapping_mul(FNV_PRIME);
        }
    }

    /// Hash of every discrete choice made while building the graph. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn discrete_signature(&self) -> u64 {
        self.discrete
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable input (parameter). Rejects non-finite entries.
    pub fn param(&mut self, value: Array2<f64>) -> Result<NodeId, AutodiffError> {
        if let Some(&v) = value.iter().find(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { value: v });
        }
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a` (n×m) plus the broadcast row `row` (1×m).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let v = self.value(a) + &r.row(0);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a fixed matrix (e.g. an activation mask).
    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        let bits: Vec<u64> = self.value(a).iter().map(|&x| u64::from(x > 0.0)).collect();
        self.note_discrete(bits);
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Indicator of positive entries, the derivative of `relu`.
    pub fn relu_mask(&self, a: NodeId) -> Array2<f64> {
        self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Square root of a nonnegative input; the derivative at 0 is taken as 0.
    pub fn safe_sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0).sqrt());
        let rg = self.rg(a);
        self.push(v, Op::SafeSqrt(a), rg)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Cols(a, start), rg)
    }

    /// Rows `start..start + len`.
    pub fn rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Rows(a, start), rg)
    }

    pub fn hcat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("hcat row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::HCat(parts.to_vec()), rg)
    }

    pub fn vcat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("vcat column counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::VCat(parts.to_vec()), rg)
    }

    /// Output row `i` is row `indices[i]` of `a`.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (mut row, &i) in v.rows_mut().into_iter().zip(&indices) {
            row.assign(&src.row(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::Gather(a, indices), rg)
    }

    /// Per-row sum, n×m → n×1.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a);
        self.push(v, Op::RowSum(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `(1/n) Σ_i ‖a_i‖²` over the rows of `a`.
    pub fn mean_row_sq_norm(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let n = m.nrows().max(1) as f64;
        let v = Array2::from_elem((1, 1), m.iter().map(|x| x * x).sum::<f64>() / n);
        let rg = self.rg(a);
        self.push(v, Op::MeanRowSqNorm(a), rg)
    }

    /// Row-wise cross product of two n×3 matrices.
    pub fn cross3(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.ncols(), 3);
        let mut v = Array2::zeros((x.nrows(), 3));
        for i in 0..x.nrows() {
            let c = cross(row3(x, i), row3(y, i));
            v[[i, 0]] = c[0];
            v[[i, 1]] = c[1];
            v[[i, 2]] = c[2];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Cross3(a, b), rg)
    }

    /// Rescales each row to norm `alpha`. Rows with norm below `eps` become
    /// zero and pass no gradient; the returned vector flags them.
    pub fn normalize_rows(&mut self, a: NodeId, alpha: f64, eps: f64) -> (NodeId, Vec<bool>) {
        let x = self.value(a);
        let mut v = Array2::zeros(x.dim());
        let mut degenerate = vec![false; x.nrows()];
        for (i, row) in x.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm < eps {
                degenerate[i] = true;
            } else {
                v.row_mut(i).assign(&(&row * (alpha / norm)));
            }
        }
        self.note_discrete(degenerate.iter().map(|&d| u64::from(d) + 2));
        let rg = self.rg(a);
        let id = self.push(v, Op::NormalizeRows(a, alpha, degenerate.clone()), rg);
        (id, degenerate)
    }

    /// `(1/K²) Σ_{i,j} exp(-‖μ_i − μ_j‖ / σ)` over the rows of a K×d matrix,
    /// self-pairs included.
    pub fn repulsion(&mut self, means: NodeId, sigma: f64) -> NodeId {
        let m = self.value(means);
        let k = m.nrows();
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let d = row_dist(m, i, j);
                total += (-d / sigma).exp();
            }
        }
        let v = Array2::from_elem((1, 1), total / (k * k) as f64);
        let rg = self.rg(means);
        self.push(v, Op::Repulsion(means, sigma), rg)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn backward(&self, output: NodeId) -> Result<GraphGradients, AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        let out = &self.nodes[output.0].value;
        if out.dim() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput { shape: out.dim() });
        }
        if !out[[0, 0]].is_finite() {
            return Err(AutodiffError::NonFiniteNode { node: output.0 });
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(GraphGradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Array2<f64>>],
        id: NodeId,
        f: impl FnOnce(&mut Array2<f64>),
    ) {
        if !self.rg(id) {
            return;
        }
        let shape = self.value(id).dim();
        let slot = grads[id.0].get_or_insert_with(|| Array2::zeros(shape));
        f(slot);
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Array2<f64>,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, g * c),
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * value),
            Op::SafeSqrt(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(value).for_each(|d, &y| {
                    *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 };
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Cols(a, start) => {
                let len = g.ncols();
                let start = *start;
                self.accumulate_with(grads, *a, |acc| {
                    let mut view = acc.slice_mut(s![.., start..start + len]);
                    view += g;
                });
            }
            Op::Rows(a, start) => {
                let len = g.nrows();
                let start = *start;
                self.accumulate_with(grads, *a, |acc| {
                    let mut view = acc.slice_mut(s![start..start + len, ..]);
                    view += g;
                });
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![offset..offset + h, ..]).to_owned());
                    }
                    offset += h;
                }
            }
            Op::Gather(a, indices) => {
                self.accumulate_with(grads, *a, |acc| {
                    for (row, &i) in g.rows().into_iter().zip(indices) {
                        let mut dst = acc.row_mut(i);
                        dst += &row;
                    }
                });
            }
            Op::RowSum(a) => {
                let (n, m) = self.value(*a).dim();
                let ga = Array2::from_shape_fn((n, m), |(i, _)| g[[i, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRowSqNorm(a) => {
                let x = self.value(*a);
                let c = 2.0 * g[[0, 0]] / x.nrows().max(1) as f64;
                self.accumulate(grads, *a, x * c);
            }
            Op::Cross3(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let n = x.nrows();
                // d(x × y) = dx × y + x × dy; adjoints: gx = y × g, gy = g × x.
                if self.rg(*a) {
                    let mut ga = Array2::zeros((n, 3));
                    for i in 0..n {
                        let c = cross(row3(y, i), row3(g, i));
                        ga.row_mut(i).assign(&ndarray::arr1(&c));
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Array2::zeros((n, 3));
                    for i in 0..n {
                        let c = cross(row3(g, i), row3(x, i));
                        gb.row_mut(i).assign(&ndarray::arr1(&c));
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::NormalizeRows(a, alpha, degenerate) => {
                let x = self.value(*a);
                let mut ga = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    if degenerate[i] {
                        continue;
                    }
                    let row = x.row(i);
                    let norm = row.dot(&row).sqrt();
                    let gi = g.row(i);
                    // y = α x/‖x‖; J = α (I − x̂ x̂ᵀ)/‖x‖ is symmetric.
                    let xhat = &row / norm;
                    let proj = gi.dot(&xhat);
                    let gx = (&gi - &(&xhat * proj)) * (*alpha / norm);
                    ga.row_mut(i).assign(&gx);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Repulsion(means, sigma) => {
                let m = self.value(*means);
                let (k, d) = m.dim();
                let coef = g[[0, 0]] / (k * k) as f64;
                let mut gm = Array2::zeros((k, d));
                for i in 0..k {
                    for j in 0..k {
                        if i == j {
                            continue;
                        }
                        let dist = row_dist(m, i, j);
                        if dist == 0.0 {
                            continue;
                        }
                        // The (i,j) and (j,i) terms each contribute once here.
                        let w = 2.0 * coef * (-dist / sigma).exp() * (-1.0 / sigma) / dist;
                        for c in 0..d {
                            gm[[i, c]] += w * (m[[i, c]] - m[[j, c]]);
                        }
                    }
                }
                self.accumulate(grads, *means, gm);
            }
        }
    }
}

fn row3(m: &Array2<f64>, i: usize) -> [f64; 3] {
    [m[[i, 0]], m[[i, 1]], m[[i, 2]]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn row_dist(m: &Array2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..m.ncols() {
        let d = m[[i, c]] - m[[j, c]];
        s += d * d;
    }
    s.sqrt()
}
