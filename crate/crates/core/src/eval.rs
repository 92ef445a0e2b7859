//! Reconstruction metrics, optimal-assignment EMD and keypoint transfer.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{KdTree, Point3, SampleSet, Shape, ShapeSource};
use crate::losses::{chamfer_pairs, LossError};
use crate::network::{evaluate, evaluate_phi6, evaluate_psi, NetworkError};
use crate::trainer::AtlasCollection;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("point sets have different sizes: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("point sets have different dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty point set")]
    Empty,
    #[error("the atlas has no chart map; use the sampling method")]
    MissingChart,
    #[error("shape index {0} is out of range")]
    UnknownShape(usize),
    #[error("{0} keypoints but {1} normals")]
    KeypointMismatch(usize, usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// A bijection from rows of X to rows of Y with its mean squared cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Row `i` of X is matched to row `perm[i]` of Y.
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching of a dense `n × n` cost given by `cost(i,
/// j)`. Shortest augmenting paths with dual potentials, O(n³).
pub fn hungarian(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|x| *x = inf);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

fn sq_dist(x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize) -> f64 {
    x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Optimal assignment under squared Euclidean cost; cost is the mean over
/// matched pairs.
pub fn emd(x: &Array2<f64>, y: &Array2<f64>) -> Result<Assignment, EvalError> {
    if x.nrows() != y.nrows() {
        return Err(EvalError::SizeMismatch(x.nrows(), y.nrows()));
    }
    if x.ncols() != y.ncols() {
        return Err(EvalError::DimensionMismatch(x.ncols(), y.ncols()));
    }
    let n = x.nrows();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    let perm = hungarian(n, |i, j| sq_dist(x, i, y, j));
    let cost = perm.iter().enumerate().map(|(i, &j)| sq_dist(x, i, y, j)).sum::<f64>() / n as f64;
    Ok(Assignment { perm, cost })
}

/// The four reconstruction metrics on unit normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub chamfer: f64,
    pub emd: f64,
    /// Mean squared normal difference under nearest-neighbor association,
    /// averaged over both directions.
    pub normal_chamfer: f64,
    /// Mean squared normal difference under the optimal assignment.
    pub normal_emd: f64,
}

fn normal_sq(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    sq_dist(a, i, b, j)
}

pub fn metric_suite(reconstruction: &SampleSet, target: &SampleSet) -> Result<Metrics, EvalError> {
    let pairs = chamfer_pairs(&reconstruction.points, &target.points)?;
    let (rn, tn) = (&reconstruction.normals, &target.normals);
    let forward = pairs.x_to_y.iter().enumerate().map(|(i, &j)| normal_sq(rn, i, tn, j)).sum::<f64>()
        / pairs.x_to_y.len() as f64;
    let backward = pairs.y_to_x.iter().enumerate().map(|(j, &i)| normal_sq(tn, j, rn, i)).sum::<f64>()
        / pairs.y_to_x.len() as f64;
    let a = emd(&reconstruction.points, &target.points)?;
    let normal_emd =
        a.perm.iter().enumerate().map(|(i, &j)| normal_sq(rn, i, tn, j)).sum::<f64>() / a.perm.len() as f64;
    Ok(Metrics {
        chamfer: pairs.value(),
        emd: a.cost,
        normal_chamfer: 0.5 * (forward + backward),
        normal_emd,
    })
}

/// Fraction of reconstruction samples whose nearest target sample has a
/// normal pointing the other way.
pub fn back_facing_fraction(reconstruction: &SampleSet, target: &SampleSet) -> f64 {
    let tree = KdTree::from_rows(&target.points);
    let (nn, _) = tree.nearest_all(&reconstruction.points);
    let back = nn
        .iter()
        .enumerate()
        .filter(|&(i, &j)| {
            let d: f64 = (0..3).map(|k| reconstruction.normals[[i, k]] * target.normals[[j, k]]).sum();
            d < 0.0
        })
        .count();
    back as f64 / nn.len().max(1) as f64
}

/// Domain points for evaluating shape reconstructions: mixture draws, or
/// the learned points resampled with replacement.
pub fn domain_samples(atlas: &AtlasCollection, use_distribution: bool, count: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mix = &atlas.mixture;
    if use_distribution {
        let mut gauss = ChaCha8Rng::seed_from_u64(rng.random());
        mix.draw(count.max(1), rng, &mut gauss).expect("count >= 1").points(mix)
    } else {
        let k = mix.k();
        let means = mix.means();
        let mut out = Array2::zeros((count, 2));
        for i in 0..count {
            let m = means[rng.random_range(0..k)];
            out[[i, 0]] = m[0];
            out[[i, 1]] = m[1];
        }
        out
    }
}

/// ϕ̃ images of `uv` for `shape`, as points with unit normals in the
/// normalized frame. Degenerate samples keep a zero normal.
pub fn reconstruction_samples(atlas: &AtlasCollection, shape: usize, uv: &Array2<f64>) -> Result<SampleSet, EvalError> {
    if shape >= atlas.num_shapes() {
        return Err(EvalError::UnknownShape(shape));
    }
    let out = evaluate_phi6(&atlas.phi, atlas.phi_code(shape), uv)?;
    Ok(SampleSet {
        points: out.points,
        normals: out.unit_normals,
    })
}

/// Reconstruction evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Points per side for every metric.
    pub m_prime: usize,
    /// Independent draws averaged per metric value.
    pub draws: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            m_prime: 2000,
            draws: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub metrics: Metrics,
    pub back_facing: f64,
}

/// Metrics of `shape`'s reconstruction against fresh samples of `target`
/// (in the normalized training frame), averaged over `cfg.draws` draws.
pub fn evaluate_reconstruction(
    atlas: &AtlasCollection,
    use_distribution: bool,
    shape: usize,
    target: &ShapeSource,
    cfg: &EvalConfig,
) -> Result<ReconstructionReport, EvalError> {
    check_shape(atlas, shape)?;
    if cfg.m_prime == 0 || cfg.draws == 0 {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(shape as u64 + 1);
    let mut acc = [0.0; 5];
    for _ in 0..cfg.draws {
        let uv = domain_samples(atlas, use_distribution, cfg.m_prime, &mut rng);
        let recon = reconstruction_samples(atlas, shape, &uv)?;
        let truth = target.sample(cfg.m_prime, &mut rng);
        let m = metric_suite(&recon, &truth)?;
        let b = back_facing_fraction(&recon, &truth);
        for (a, v) in acc.iter_mut().zip([m.chamfer, m.emd, m.normal_chamfer, m.normal_emd, b]) {
            *a += v / cfg.draws as f64;
        }
    }
    Ok(ReconstructionReport {
        metrics: Metrics {
            chamfer: acc[0],
            emd: acc[1],
            normal_chamfer: acc[2],
            normal_emd: acc[3],
        },
        back_facing: acc[4],
    })
}

/// Unit normals for keypoints: nearest face for meshes, nearest point for
/// clouds. Points and shape share a frame.
pub fn keypoint_normals(shape: &Shape, points: &[Point3]) -> Result<Vec<Point3>, EvalError> {
    match shape {
        Shape::Mesh(mesh) => points
            .iter()
            .map(|&p| mesh.nearest_face_normal(p).ok_or(EvalError::Empty))
            .collect(),
        Shape::Cloud(cloud) => {
            if cloud.points.is_empty() {
                return Err(EvalError::Empty);
            }
            let flat = cloud.points.iter().flatten().copied().collect();
            let tree = KdTree::from_flat(flat, 3);
            Ok(points.iter().map(|p| cloud.normals[tree.nearest(p).0]).collect())
        }
    }
}

/// Transferred keypoints with their errors against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceResult {
    pub transferred: Vec<Point3>,
    pub ground_truth: Vec<Point3>,
    pub errors: Vec<f64>,
    pub mean_error: f64,
}

impl CorrespondenceResult {
    pub fn new(transferred: Vec<Point3>, ground_truth: Vec<Point3>) -> Self {
        assert_eq!(transferred.len(), ground_truth.len(), "keypoint counts");
        let errors: Vec<f64> = transferred
            .iter()
            .zip(&ground_truth)
            .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt())
            .collect();
        let mean_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
        CorrespondenceResult {
            transferred,
            ground_truth,
            errors,
            mean_error,
        }
    }

    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut s = String::from("keypoint_id,qx,qy,qz,gx,gy,gz,l2\n");
        for (i, (q, g)) in self.transferred.iter().zip(&self.ground_truth).enumerate() {
            let id = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            let _ = writeln!(s, "{id},{},{},{},{},{},{},{}", q[0], q[1], q[2], g[0], g[1], g[2], self.errors[i]);
        }
        s
    }
}

fn check_shape(atlas: &AtlasCollection, i: usize) -> Result<(), EvalError> {
    if i >= atlas.num_shapes() {
        Err(EvalError::UnknownShape(i))
    } else {
        Ok(())
    }
}

/// `q = ϕ_{S₂}(ψ_{S₁}(p, α·n))` with frames handled per shape. `points` and
/// `normals` are in the source shape's original frame.
pub fn correspond_chart(
    atlas: &AtlasCollection,
    source: usize,
    target: usize,
    points: &[Point3],
    normals: &[Point3],
) -> Result<Vec<Point3>, EvalError> {
    check_shape(atlas, source)?;
    check_shape(atlas, target)?;
    if points.len() != normals.len() {
        return Err(EvalError::KeypointMismatch(points.len(), normals.len()));
    }
    let psi = atlas.psi.as_ref().ok_or(EvalError::MissingChart)?;
    let a = atlas.alpha.get();
    let frame = atlas.normalizations[source];
    let mut x6 = Array2::zeros((points.len(), 6));
    for (i, (p, n)) in points.iter().zip(normals).enumerate() {
        let q = frame.apply(*p);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-300);
        for k in 0..3 {
            x6[[i, k]] = q[k];
            x6[[i, 3 + k]] = a * n[k] / len;
        }
    }
    let uv = evaluate_psi(psi, atlas.psi_code(source), &x6, atlas.alpha)?;
    to_target(atlas, target, &uv)
}

fn to_target(atlas: &AtlasCollection, target: usize, uv: &Array2<f64>) -> Result<Vec<Point3>, EvalError> {
    let out = evaluate(&atlas.phi, atlas.phi_code(target), uv)?;
    let frame = atlas.normalizations[target];
    Ok(out.rows().into_iter().map(|r| frame.invert([r[0], r[1], r[2]])).collect())
}

/// Transfer without a chart map: the domain sample whose source image is
/// nearest to each keypoint is mapped through the target's ϕ.
pub fn correspond_sampling(
    atlas: &AtlasCollection,
    source: usize,
    target: usize,
    points: &[Point3],
    domain: &Array2<f64>,
) -> Result<Vec<Point3>, EvalError> {
    check_shape(atlas, source)?;
    check_shape(atlas, target)?;
    if domain.nrows() == 0 {
        return Err(EvalError::Empty);
    }
    let images = evaluate(&atlas.phi, atlas.phi_code(source), domain)?;
    let tree = KdTree::from_rows(&images);
    let frame = atlas.normalizations[source];
    let mut picked = Array2::zeros((points.len(), 2));
    for (i, p) in points.iter().enumerate() {
        let (j, _) = tree.nearest(&frame.apply(*p));
        picked[[i, 0]] = domain[[j, 0]];
        picked[[i, 1]] = domain[[j, 1]];
    }
    to_target(atlas, target, &picked)
}

/// Values of each metric run, reported in units of 10⁻².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub shape: String,
    pub method: String,
    pub seed: u64,
    pub chamfer: f64,
    pub emd: f64,
    pub normal_chamfer: f64,
    pub normal_emd: f64,
    pub correspondence: Option<f64>,
}

pub const REPORT_SCALE: f64 = 1e-2;

impl MetricRecord {
    pub fn new(dataset: &str, shape: &str, method: &str, seed: u64, m: &Metrics, corr: Option<f64>) -> Self {
        let s = |v: f64| v / REPORT_SCALE;
        MetricRecord {
            dataset: dataset.into(),
            shape: shape.into(),
            method: method.into(),
            seed,
            chamfer: s(m.chamfer),
            emd: s(m.emd),
            normal_chamfer: s(m.normal_chamfer),
            normal_emd: s(m.normal_emd),
            correspondence: corr.map(s),
        }
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut s = String::from("dataset,shape,method,seed,chamfer_e-2,emd_e-2,normal_chamfer_e-2,normal_emd_e-2,correspondence_e-2\n");
    for r in records {
        let corr = r.correspondence.map_or(String::new(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.dataset, r.shape, r.method, r.seed, r.chamfer, r.emd, r.normal_chamfer, r.normal_emd, corr
        );
    }
    s
}

pub fn metrics_json(records: &[MetricRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
