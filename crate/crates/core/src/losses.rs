//! Training objectives on the batched graph.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::geometry::{KdTree, SampleSet};
use crate::network::{BoundMlp, MlpNodes, NetworkError, NormalScale};
use crate::sampler::MixtureDraw;
use crate::trainer::{AtlasCollection, ParamGroup};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("chamfer distance of an empty point set")]
    EmptySet,
    #[error("point dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Nearest-neighbor associations of a Chamfer evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamferPairs {
    /// For each row of X, the nearest row of Y.
    pub x_to_y: Vec<usize>,
    pub y_to_x: Vec<usize>,
    pub mean_x_to_y: f64,
    pub mean_y_to_x: f64,
}

impl ChamferPairs {
    pub fn value(&self) -> f64 {
        self.mean_x_to_y + self.mean_y_to_x
    }
}

fn check_sets(x: &Array2<f64>, y: &Array2<f64>) -> Result<(), LossError> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(LossError::EmptySet);
    }
    if x.ncols() != y.ncols() {
        return Err(LossError::DimensionMismatch(x.ncols(), y.ncols()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer_pairs(x: &Array2<f64>, y: &Array2<f64>) -> Result<ChamferPairs, LossError> {
    check_sets(x, y)?;
    let (x_to_y, dxy) = KdTree::from_rows(y).nearest_all(x);
    let (y_to_x, dyx) = KdTree::from_rows(x).nearest_all(y);
    Ok(ChamferPairs {
        x_to_y,
        y_to_x,
        mean_x_to_y: mean(&dxy),
        mean_y_to_x: mean(&dyx),
    })
}

/// Mean squared nearest-neighbor distance from X to Y plus from Y to X.
pub fn chamfer(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, LossError> {
    Ok(chamfer_pairs(x, y)?.value())
}

/// Chamfer distance between two graph nodes. Associations are fixed at
/// their current values; gradients flow through both point sets.
pub fn chamfer_node(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId, LossError> {
    let pairs = chamfer_pairs(g.value(x), g.value(y))?;
    g.note_discrete(pairs.x_to_y.iter().chain(&pairs.y_to_x).map(|&i| i as u64));
    let yx = g.gather(y, pairs.x_to_y);
    let dx = g.sub(x, yx);
    let a = g.mean_row_sq_norm(dx);
    let xy = g.gather(x, pairs.y_to_x);
    let dy = g.sub(y, xy);
    let b = g.mean_row_sq_norm(dy);
    Ok(g.add(a, b))
}

/// 6D reconstruction: Chamfer between ϕ̃ outputs and α-scaled shape samples.
pub fn loss_6d(g: &mut Graph, generated6: NodeId, target6: NodeId) -> Result<NodeId, LossError> {
    chamfer_node(g, generated6, target6)
}

/// 2D chart reconstruction: Chamfer between ψ images of the shape samples and
/// draws from the domain.
pub fn loss_2d(g: &mut Graph, projected: NodeId, sampled: NodeId) -> Result<NodeId, LossError> {
    chamfer_node(g, projected, sampled)
}

/// `mean‖x − ψ(ϕ̃(x))‖² + mean‖x₆ − ϕ̃(ψ(x₆))‖²`, both terms over full
/// vectors.
pub fn loss_cycle(
    g: &mut Graph,
    samples_2d: NodeId,
    round_trip_2d: NodeId,
    samples_6d: NodeId,
    round_trip_6d: NodeId,
) -> Result<NodeId, LossError> {
    for (a, b) in [(samples_2d, round_trip_2d), (samples_6d, round_trip_6d)] {
        let (sa, sb) = (g.shape(a), g.shape(b));
        if sa.1 != sb.1 {
            return Err(LossError::DimensionMismatch(sa.1, sb.1));
        }
        if sa.0 != sb.0 {
            return Err(LossError::CountMismatch(sa.0, sb.0));
        }
    }
    let d2 = g.sub(samples_2d, round_trip_2d);
    let t2 = g.mean_row_sq_norm(d2);
    let d6 = g.sub(samples_6d, round_trip_6d);
    let t6 = g.mean_row_sq_norm(d6);
    Ok(g.add(t2, t6))
}

/// Mean Frobenius norm of `JᵀJ − I₂` from the two tangent streams (n×3).
pub fn loss_iso(g: &mut Graph, tangent_u: NodeId, tangent_v: NodeId) -> NodeId {
    let uu = g.mul(tangent_u, tangent_u);
    let e = g.row_sum(uu);
    let uv = g.mul(tangent_u, tangent_v);
    let f = g.row_sum(uv);
    let vv = g.mul(tangent_v, tangent_v);
    let gg = g.row_sum(vv);
    let e1 = g.add_scalar(e, -1.0);
    let g1 = g.add_scalar(gg, -1.0);
    let e2 = g.mul(e1, e1);
    let g2 = g.mul(g1, g1);
    let f2 = g.mul(f, f);
    let f2 = g.scale(f2, 2.0);
    let s = g.add(e2, g2);
    let s = g.add(s, f2);
    let norm = g.safe_sqrt(s);
    g.mean_all(norm)
}

/// `(1/K²) Σ_{i,j} exp(−‖μ_i − μ_j‖/σ)`, self-pairs included.
pub fn loss_rep(g: &mut Graph, means: NodeId, sigma: f64) -> NodeId {
    g.repulsion(means, sigma)
}

/// Term weights. A zero weight skips the term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_6d: f64,
    pub lambda_2d: f64,
    pub lambda_cycle: f64,
    pub lambda_iso: f64,
    pub lambda_rep: f64,
}

impl LossWeights {
    /// λ_6D = 1, λ_2D = 1e-2, λ_cycle = 1/M, λ_iso = 1e-4/M, λ_rep = 1.
    pub fn defaults(m: usize) -> Self {
        let m = m.max(1) as f64;
        LossWeights {
            lambda_6d: 1.0,
            lambda_2d: 1e-2,
            lambda_cycle: 1.0 / m,
            lambda_iso: 1e-4 / m,
            lambda_rep: 1.0,
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            lambda_6d: 0.0,
            lambda_2d: 0.0,
            lambda_cycle: 0.0,
            lambda_iso: 0.0,
            lambda_rep: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("loss_6d", self.lambda_6d),
            ("loss_2d", self.lambda_2d),
            ("loss_cycle", self.lambda_cycle),
            ("loss_iso", self.lambda_iso),
            ("loss_rep", self.lambda_rep),
        ]
    }
}

/// Term values and weighted total of one evaluation. Skipped terms are
/// `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_6d: Option<f64>,
    pub loss_2d: Option<f64>,
    pub loss_cycle: Option<f64>,
    pub loss_iso: Option<f64>,
    pub loss_rep: Option<f64>,
    pub total: f64,
    /// Domain samples whose Jacobian was too degenerate for a normal.
    pub degenerate: usize,
    /// Forward passes that carried tangent streams.
    pub tangent_passes: usize,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("loss_6d", self.loss_6d),
            ("loss_2d", self.loss_2d),
            ("loss_cycle", self.loss_cycle),
            ("loss_iso", self.loss_iso),
            ("loss_rep", self.loss_rep),
        ]
    }

    /// Σ λ_t · term_t from the stored term values.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.terms()
            .iter()
            .zip(w.named())
            .map(|((_, v), (_, l))| v.map_or(0.0, |v| l * v))
            .sum()
    }

    /// Adds another shape's report term by term.
    pub fn accumulate(&mut self, other: &LossReport) {
        fn add(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        add(&mut self.loss_6d, other.loss_6d);
        add(&mut self.loss_2d, other.loss_2d);
        add(&mut self.loss_cycle, other.loss_cycle);
        add(&mut self.loss_iso, other.loss_iso);
        add(&mut self.loss_rep, other.loss_rep);
        self.total += other.total;
        self.degenerate += other.degenerate;
        self.tangent_passes += other.tangent_passes;
    }

    /// First term whose value is not finite.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms()
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

/// What one shape's loss is built from.
pub struct SingleLossInputs<'a> {
    pub phi: &'a BoundMlp,
    pub psi: Option<&'a BoundMlp>,
    /// Domain points fed to ϕ (M × 2).
    pub domain: NodeId,
    /// Mixture means or learnable points (K × 2), for repulsion.
    pub means: NodeId,
    pub sigma: f64,
    pub target: &'a SampleSet,
    pub alpha: NormalScale,
    /// With normals off the reconstruction term is a 3D Chamfer.
    pub use_normals: bool,
}

pub struct SingleLoss {
    pub total: NodeId,
    pub terms: Vec<(&'static str, NodeId)>,
    pub report: LossReport,
}

/// Weighted sum of the active terms for one shape.
pub fn loss_single(g: &mut Graph, inp: &SingleLossInputs, w: &LossWeights) -> Result<SingleLoss, LossError> {
    let mut report = LossReport::default();
    let mut terms: Vec<(&'static str, NodeId)> = Vec::new();
    let alpha = inp.alpha;
    let target6 = g.constant(inp.target.embed6(alpha));
    let need_phi6 = (w.lambda_6d > 0.0 && inp.use_normals) || (w.lambda_cycle > 0.0 && inp.psi.is_some());
    let phi6 = if need_phi6 {
        report.tangent_passes += 1;
        let p = inp.phi.forward_phi6(g, inp.domain, alpha);
        report.degenerate += p.degenerate.iter().filter(|&&d| d).count();
        Some(p)
    } else {
        None
    };

    if w.lambda_6d > 0.0 {
        let t = match &phi6 {
            Some(p) if inp.use_normals => loss_6d(g, p.embed6, target6)?,
            _ => {
                let points = inp.phi.forward(g, inp.domain);
                let target3 = g.constant(inp.target.points.clone());
                chamfer_node(g, points, target3)?
            }
        };
        report.loss_6d = Some(g.scalar(t));
        terms.push(("loss_6d", t));
    }

    let projected = match inp.psi {
        Some(psi) if w.lambda_2d > 0.0 || w.lambda_cycle > 0.0 => Some(psi.forward(g, target6)),
        _ => None,
    };
    if let (Some(proj), true) = (projected, w.lambda_2d > 0.0) {
        let t = loss_2d(g, proj, inp.domain)?;
        report.loss_2d = Some(g.scalar(t));
        terms.push(("loss_2d", t));
    }
    if let (Some(psi), Some(proj), Some(p6), true) = (inp.psi, projected, &phi6, w.lambda_cycle > 0.0) {
        let back_2d = psi.forward(g, p6.embed6);
        report.tangent_passes += 1;
        let fwd = inp.phi.forward_phi6(g, proj, alpha);
        report.degenerate += fwd.degenerate.iter().filter(|&&d| d).count();
        let t = loss_cycle(g, inp.domain, back_2d, target6, fwd.embed6)?;
        report.loss_cycle = Some(g.scalar(t));
        terms.push(("loss_cycle", t));
    }

    if w.lambda_iso > 0.0 {
        let (tu, tv) = match &phi6 {
            Some(p) => (p.tangent_u, p.tangent_v),
            None => {
                report.tangent_passes += 1;
                let (_, tu, tv) = inp.phi.forward_with_tangents(g, inp.domain);
                (tu, tv)
            }
        };
        let t = loss_iso(g, tu, tv);
        report.loss_iso = Some(g.scalar(t));
        terms.push(("loss_iso", t));
    }

    if w.lambda_rep > 0.0 {
        let t = loss_rep(g, inp.means, inp.sigma);
        report.loss_rep = Some(g.scalar(t));
        terms.push(("loss_rep", t));
    }

    let weights = w.named();
    let mut total: Option<NodeId> = None;
    for &(name, node) in &terms {
        let lambda = weights.iter().find(|(n, _)| *n == name).map(|(_, l)| *l).unwrap_or(0.0);
        let scaled = g.scale(node, lambda);
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled),
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Array2::zeros((1, 1))));
    report.total = g.scalar(total);
    Ok(SingleLoss { total, terms, report })
}

/// Per-iteration inputs of one shape.
#[derive(Debug, Clone)]
pub struct ShapeBatch {
    pub target: SampleSet,
    /// Mixture draw; `None` feeds the learnable points directly to ϕ.
    pub draw: Option<MixtureDraw>,
}

/// Loss options shared by every shape.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub use_normals: bool,
}

/// Loss and flat gradient of one shape.
#[derive(Debug, Clone)]
pub struct ShapeEvaluation {
    pub report: LossReport,
    pub gradient: Vec<f64>,
    /// Term whose gradient is not finite, if any.
    pub non_finite_gradient: Option<&'static str>,
    pub discrete_signature: u64,
}

/// Builds and differentiates the loss of shape `i`.
pub fn evaluate_shape(
    atlas: &AtlasCollection,
    i: usize,
    batch: &ShapeBatch,
    settings: &LossSettings,
) -> Result<ShapeEvaluation, LossError> {
    let mut g = Graph::new();
    let layout = atlas.layout();
    let phi_nodes = MlpNodes::bind(&mut g, &atlas.phi, true);
    let phi_code = match atlas.phi_code(i) {
        Some(c) => Some(g.param(c.as_row())?),
        None => None,
    };
    let phi = phi_nodes.with_code(&mut g, phi_code);
    let psi_bound = match &atlas.psi {
        Some(w) => {
            let nodes = MlpNodes::bind(&mut g, w, true);
            let code = match atlas.psi_code(i) {
                Some(c) => Some(g.param(c.as_row())?),
                None => None,
            };
            Some((nodes.clone(), nodes.with_code(&mut g, code)))
        }
        None => None,
    };
    let means = g.param(atlas.mixture.means_array())?;
    let domain = match &batch.draw {
        Some(d) => d.on_graph(&mut g, means),
        None => means,
    };
    let inputs = SingleLossInputs {
        phi: &phi,
        psi: psi_bound.as_ref().map(|(_, b)| b),
        domain,
        means,
        sigma: atlas.mixture.sigma(),
        target: &batch.target,
        alpha: atlas.alpha,
        use_normals: settings.use_normals,
    };
    let loss = loss_single(&mut g, &inputs, &settings.weights)?;

    let collect = |grads: &crate::autodiff::GraphGradients| -> Vec<f64> {
        let mut flat = vec![0.0; layout.len()];
        let mut put = |group: ParamGroup, nodes: &[NodeId]| {
            let Some(range) = layout.range(group) else { return };
            let mut off = range.start;
            for &n in nodes {
                let len = g.value(n).len();
                if let Some(gr) = grads.get(n) {
                    for (dst, &v) in flat[off..off + len].iter_mut().zip(gr.iter()) {
                        *dst = v;
                    }
                }
                off += len;
            }
        };
        let mut phi_params = Vec::new();
        for (w, b) in phi.weights.iter().zip(&phi.biases) {
            phi_params.push(*w);
            phi_params.push(*b);
        }
        put(ParamGroup::Phi, &phi_params);
        if let Some((nodes, _)) = &psi_bound {
            let mut p = Vec::new();
            for (w, b) in nodes.weights.iter().zip(&nodes.biases) {
                p.push(*w);
                p.push(*b);
            }
            put(ParamGroup::Psi, &p);
        }
        if let Some(c) = phi.code {
            put(ParamGroup::PhiCode(i), &[c]);
        }
        if let Some(c) = psi_bound.as_ref().and_then(|(_, b)| b.code) {
            put(ParamGroup::PsiCode(i), &[c]);
        }
        put(ParamGroup::Means, &[means]);
        flat
    };

    let grads = g.backward(loss.total)?;
    let gradient = collect(&grads);
    let mut non_finite_gradient = None;
    if gradient.iter().any(|v| !v.is_finite()) {
        for &(name, node) in &loss.terms {
            let gt = g.backward(node)?;
            if collect(&gt).iter().any(|v| !v.is_finite()) {
                non_finite_gradient = Some(name);
                break;
            }
        }
        non_finite_gradient.get_or_insert("total");
    }
    Ok(ShapeEvaluation {
        report: loss.report,
        gradient,
        non_finite_gradient,
        discrete_signature: g.discrete_signature(),
    })
}

/// Sum over shapes of the single-shape losses with summed gradients.
/// Shapes are evaluated in parallel; the reduction runs in shape order, so
/// the result does not depend on the thread count.
pub fn loss_full(
    atlas: &AtlasCollection,
    batches: &[ShapeBatch],
    settings: &LossSettings,
) -> Result<Vec<ShapeEvaluation>, LossError> {
    if batches.len() != atlas.num_shapes() {
        return Err(LossError::CountMismatch(batches.len(), atlas.num_shapes()));
    }
    batches
        .par_iter()
        .enumerate()
        .map(|(i, b)| evaluate_shape(atlas, i, b, settings))
        .collect()
}

/// Shape-order reduction of per-shape evaluations.
pub fn reduce(evals: &[ShapeEvaluation]) -> (LossReport, Vec<f64>) {
    let mut report = LossReport::default();
    let mut grad = vec![0.0; evals.first().map_or(0, |e| e.gradient.len())];
    for e in evals {
        report.accumulate(&e.report);
        for (a, b) in grad.iter_mut().zip(&e.gradient) {
            *a += b;
        }
    }
    (report, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn chamfer_examples() {
        let x = array![[0.0, 0.0]];
        let y = array![[3.0, 4.0]];
        assert_eq!(chamfer(&x, &y).unwrap(), 50.0);
        let x = array![[0.0, 0.0], [2.0, 0.0]];
        let y = array![[1.0, 0.0]];
        assert_eq!(chamfer(&x, &y).unwrap(), 2.0);
        assert_eq!(chamfer(&x, &x).unwrap(), 0.0);
        assert_eq!(chamfer(&Array2::zeros((0, 2)), &y), Err(LossError::EmptySet));
        assert_eq!(chamfer(&x, &array![[1.0, 0.0, 0.0]]), Err(LossError::DimensionMismatch(2, 3)));
    }

    #[test]
    fn repulsion_examples() {
        let mut g = Graph::new();
        let one = g.constant(array![[0.3, 0.1]]);
        let r = loss_rep(&mut g, one, 1.0);
        assert_eq!(g.scalar(r), 1.0);
        let two = g.constant(array![[0.0, 0.0], [0.0, 0.0]]);
        let r = loss_rep(&mut g, two, 0.7);
        assert_eq!(g.scalar(r), 1.0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let apart = g.constant(array![[0.0, 0.0], [s, 0.0]]);
        let r = loss_rep(&mut g, apart, s);
        assert!((g.scalar(r) - (2.0 + 2.0 * (-1.0f64).exp()) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn iso_examples() {
        let mut g = Graph::new();
        let tu = g.constant(array![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let tv = g.constant(array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let r = loss_iso(&mut g, tu, tv);
        assert!((g.scalar(r) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn cycle_example() {
        let mut g = Graph::new();
        let x = g.constant(array![[0.0, 0.0]]);
        let back = g.constant(array![[0.3, 0.4]]);
        let x6 = g.constant(array![[1.0, 2.0, 3.0, 0.0, 0.0, 0.01]]);
        let r = loss_cycle(&mut g, x, back, x6, x6).unwrap();
        assert!((g.scalar(r) - 0.25).abs() < 1e-15);
    }
}
