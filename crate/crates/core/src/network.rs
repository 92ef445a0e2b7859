//! Coordinate MLPs: the parameterization ϕ (2D → 3D, extended to 6D with its
//! analytic normal) and the chart-mapping ψ (6D → 2D).
//!
//! Weights live in one flat vector. Layer `l` stores a row-major
//! `fan_in × fan_out` matrix followed by its bias. When a latent code is
//! used it is concatenated to the input, so the first layer's matrix has
//! `input_dim + latent_dim` rows.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Dual2, Graph, NodeId, Tape, Var};

/// Norm threshold below which J_u × J_v is treated as degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("normal part has norm {norm}, expected alpha = {alpha}")]
    UnscaledNormal { norm: f64, alpha: f64 },
    #[error("normal scale must be positive, got {0}")]
    InvalidNormalScale(f64),
    #[error("weights contain a non-finite entry at {0}")]
    NonFiniteWeight(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    #[serde(default)]
    pub latent_dim: usize,
}

impl MlpConfig {
    /// ϕ: 2 → 3.
    pub fn phi(hidden_layers: usize, hidden_width: usize, latent_dim: usize) -> Self {
        MlpConfig {
            input_dim: 2,
            output_dim: 3,
            hidden_layers,
            hidden_width,
            latent_dim,
        }
    }

    /// ψ: 6 → 2.
    pub fn psi(hidden_layers: usize, hidden_width: usize, latent_dim: usize) -> Self {
        MlpConfig {
            input_dim: 6,
            output_dim: 2,
            hidden_layers,
            hidden_width,
            latent_dim,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("hidden_layers", self.hidden_layers),
            ("hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(NetworkError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        dims.push((self.input_dim + self.latent_dim, self.hidden_width));
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.hidden_width, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Location of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub config: MlpConfig,
    pub params: Vec<f64>,
}

impl MlpWeights {
    pub fn zeros(config: MlpConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        Ok(MlpWeights {
            config,
            params: vec![0.0; config.param_count()],
        })
    }

    pub fn from_params(config: MlpConfig, params: Vec<f64>) -> Result<Self, NetworkError> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(NetworkError::DimensionMismatch {
                expected: config.param_count(),
                got: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(NetworkError::NonFiniteWeight(i));
        }
        Ok(MlpWeights { config, params })
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }

    pub fn weight(&self, layer: &LayerLayout) -> ArrayView2<'_, f64> {
        let data = &self.params[layer.weight_offset..layer.bias_offset];
        ArrayView2::from_shape((layer.fan_in, layer.fan_out), data).expect("layout")
    }

    pub fn bias(&self, layer: &LayerLayout) -> ArrayView2<'_, f64> {
        let data = &self.params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        ArrayView2::from_shape((1, layer.fan_out), data).expect("layout")
    }

    pub fn check_code(&self, code: Option<&LatentCode>) -> Result<(), NetworkError> {
        let got = code.map_or(0, |c| c.dim());
        if got != self.config.latent_dim {
            return Err(NetworkError::DimensionMismatch {
                expected: self.config.latent_dim,
                got,
            });
        }
        Ok(())
    }
}

/// Glorot-uniform weights, `U(±1/√fan_in)` biases, deterministic in `seed`.
pub fn init_weights(config: MlpConfig, seed: u64) -> Result<MlpWeights, NetworkError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(config.param_count());
    for (fan_in, fan_out) in config.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            params.push(rng.random_range(-limit..limit));
        }
        let bias_limit = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_out {
            params.push(rng.random_range(-bias_limit..bias_limit));
        }
    }
    MlpWeights::from_params(config, params)
}

/// Per-shape feature vector fed to a network alongside its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        LatentCode(vec![0.0; dim])
    }

    /// Small Gaussian initialization, σ = 0.01.
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, 0.01).expect("valid");
        LatentCode((0..dim).map(|_| normal.sample(rng)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row")
    }
}

/// Length α given to normals inside 6D embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalScale(f64);

impl NormalScale {
    pub const DEFAULT: NormalScale = NormalScale(0.01);

    pub fn new(alpha: f64) -> Result<Self, NetworkError> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(NormalScale(alpha))
        } else {
            Err(NetworkError::InvalidNormalScale(alpha))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for NormalScale {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Columns ∂ϕ/∂u and ∂ϕ/∂v.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian32 {
    pub du: [f64; 3],
    pub dv: [f64; 3],
}

impl Jacobian32 {
    /// First fundamental form JᵀJ as (E, F, G).
    pub fn metric(&self) -> (f64, f64, f64) {
        let d = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        (d(&self.du, &self.du), d(&self.du, &self.dv), d(&self.dv, &self.dv))
    }
}

// ---------------------------------------------------------------------------
// Scalar-tape route

/// Network weights (and optionally a latent code) recorded as tape leaves.
pub struct TapedMlp<'t> {
    pub weights: Vec<Var<'t>>,
    pub code: Vec<Var<'t>>,
    layout: Vec<LayerLayout>,
    config: MlpConfig,
}

impl<'t> TapedMlp<'t> {
    pub fn record(
        tape: &'t Tape,
        weights: &MlpWeights,
        code: Option<&LatentCode>,
    ) -> Result<Self, NetworkError> {
        weights.check_code(code)?;
        let w = weights
            .params
            .iter()
            .map(|&p| tape.record(p))
            .collect::<Result<Vec<_>, _>>()?;
        let c = code
            .map(|c| c.0.iter().map(|&x| tape.record(x)).collect::<Result<Vec<_>, _>>())
            .transpose()?
            .unwrap_or_default();
        Ok(TapedMlp {
            weights: w,
            code: c,
            layout: weights.layout(),
            config: weights.config,
        })
    }

    fn forward_generic<T: Copy>(
        &self,
        input: Vec<T>,
        lift: impl Fn(Var<'t>) -> T,
        mul_w: impl Fn(T, Var<'t>) -> T,
        add: impl Fn(T, T) -> T,
        add_b: impl Fn(T, Var<'t>) -> T,
        relu: impl Fn(T) -> T,
    ) -> Vec<T> {
        let mut h: Vec<T> = input;
        h.extend(self.code.iter().map(|&c| lift(c)));
        let n_layers = self.layout.len();
        for (l, layer) in self.layout.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.fan_out);
            for j in 0..layer.fan_out {
                let mut acc: Option<T> = None;
                for (i, &hi) in h.iter().enumerate() {
                    let w = self.weights[layer.weight_offset + i * layer.fan_out + j];
                    let term = mul_w(hi, w);
                    acc = Some(match acc {
                        None => term,
                        Some(a) => add(a, term),
                    });
                }
                let z = add_b(acc.expect("fan_in >= 1"), self.weights[layer.bias_offset + j]);
                out.push(if l + 1 < n_layers { relu(z) } else { z });
            }
            h = out;
        }
        h
    }

    fn check_input(&self, got: usize) -> Result<(), NetworkError> {
        if got != self.config.input_dim {
            return Err(NetworkError::DimensionMismatch {
                expected: self.config.input_dim,
                got,
            });
        }
        Ok(())
    }

    /// Plain forward pass on tape variables.
    pub fn forward(&self, x: &[Var<'t>]) -> Result<Vec<Var<'t>>, NetworkError> {
        self.check_input(x.len())?;
        Ok(self.forward_generic(
            x.to_vec(),
            |v| v,
            |h, w| h * w,
            |a, b| a + b,
            |a, b| a + b,
            |z| z.relu(),
        ))
    }

    /// Forward pass with tangents along both input coordinates.
    pub fn forward_dual(&self, x: [Var<'t>; 2]) -> Result<Vec<Dual2<'t>>, NetworkError> {
        self.check_input(2)?;
        let input = vec![Dual2::seed_u(x[0]), Dual2::seed_v(x[1])];
        Ok(self.forward_generic(
            input,
            Dual2::constant,
            |h, w| h.scale_by(w),
            |a, b| a + b,
            |a, b| a.add_var(b),
            |z| z.relu(),
        ))
    }
}

/// ϕ(x) on the scalar tape.
pub fn forward_phi<'t>(net: &TapedMlp<'t>, x: [Var<'t>; 2]) -> Result<[Var<'t>; 3], NetworkError> {
    let out = net.forward(&x)?;
    to_array3(out)
}

fn to_array3<T: Copy>(v: Vec<T>) -> Result<[T; 3], NetworkError> {
    if v.len() != 3 {
        return Err(NetworkError::DimensionMismatch {
            expected: 3,
            got: v.len(),
        });
    }
    Ok([v[0], v[1], v[2]])
}

/// 6D output of ϕ̃ on the scalar tape.
pub struct TapedPhi6<'t> {
    pub point: [Var<'t>; 3],
    /// α-scaled normal; `None` when the Jacobian is degenerate.
    pub normal: Option<[Var<'t>; 3]>,
    pub jacobian_u: [Var<'t>; 3],
    pub jacobian_v: [Var<'t>; 3],
}

impl TapedPhi6<'_> {
    pub fn jacobian(&self) -> Jacobian32 {
        Jacobian32 {
            du: self.jacobian_u.map(|v| v.value()),
            dv: self.jacobian_v.map(|v| v.value()),
        }
    }
}

/// ϕ̃(x) = [ϕ(x), α (J_u × J_v)/‖J_u × J_v‖] on the scalar tape.
pub fn forward_phi_with_normal<'t>(
    net: &TapedMlp<'t>,
    x: [Var<'t>; 2],
    alpha: NormalScale,
) -> Result<TapedPhi6<'t>, NetworkError> {
    let out = to_array3(net.forward_dual(x)?)?;
    let point = out.map(|d| d.primal);
    let ju = out.map(|d| d.tangent_u);
    let jv = out.map(|d| d.tangent_v);
    let c = autodiff::cross3(ju, jv);
    let sq = autodiff::dot(&c, &c).value();
    let normal = if sq.sqrt() < DEGENERATE_EPS {
        None
    } else {
        let len = autodiff::norm(&c)?;
        let mut n = [c[0]; 3];
        for k in 0..3 {
            n[k] = c[k].div(len)?.scale(alpha.get());
        }
        Some(n)
    };
    Ok(TapedPhi6 {
        point,
        normal,
        jacobian_u: ju,
        jacobian_v: jv,
    })
}

/// ψ(x, n) on the scalar tape. The normal part must already have norm α.
pub fn forward_psi<'t>(
    net: &TapedMlp<'t>,
    x6: [Var<'t>; 6],
    alpha: NormalScale,
) -> Result<[Var<'t>; 2], NetworkError> {
    check_scaled_normal(&x6.map(|v| v.value()), alpha)?;
    let out = net.forward(&x6)?;
    if out.len() != 2 {
        return Err(NetworkError::DimensionMismatch {
            expected: 2,
            got: out.len(),
        });
    }
    Ok([out[0], out[1]])
}

pub fn check_scaled_normal(x6: &[f64], alpha: NormalScale) -> Result<(), NetworkError> {
    let norm = (x6[3] * x6[3] + x6[4] * x6[4] + x6[5] * x6[5]).sqrt();
    if (norm - alpha.get()).abs() > 1e-6 {
        return Err(NetworkError::UnscaledNormal {
            norm,
            alpha: alpha.get(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batched graph route

/// Network parameters bound into a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    /// One node per layer; the first holds the input and latent rows.
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub code: Option<NodeId>,
    input_weight: NodeId,
    first_bias: NodeId,
    input_dim: usize,
    output_dim: usize,
}

/// Parameter nodes of a network, created once per graph and shared by every
/// shape that uses the network.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    config: MlpConfig,
}

impl MlpNodes {
    /// `trainable = false` records the weights as constants.
    pub fn bind(g: &mut Graph, weights: &MlpWeights, trainable: bool) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for layer in weights.layout() {
            let wv = weights.weight(&layer).to_owned();
            let bv = weights.bias(&layer).to_owned();
            if trainable {
                w.push(g.param(wv).expect("weights are finite"));
                b.push(g.param(bv).expect("weights are finite"));
            } else {
                w.push(g.constant(wv));
                b.push(g.constant(bv));
            }
        }
        MlpNodes {
            weights: w,
            biases: b,
            config: weights.config,
        }
    }

    /// Specializes the network to one latent code node (1×latent_dim).
    pub fn with_code(&self, g: &mut Graph, code: Option<NodeId>) -> BoundMlp {
        let cfg = self.config;
        let (input_weight, first_bias) = match code {
            Some(c) if cfg.latent_dim > 0 => {
                let wx = g.rows(self.weights[0], 0, cfg.input_dim);
                let wf = g.rows(self.weights[0], cfg.input_dim, cfg.latent_dim);
                let shift = g.matmul(c, wf);
                let bias = g.add(self.biases[0], shift);
                (wx, bias)
            }
            _ => (self.weights[0], self.biases[0]),
        };
        BoundMlp {
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            code,
            input_weight,
            first_bias,
            input_dim: cfg.input_dim,
            output_dim: cfg.output_dim,
        }
    }
}

/// Batched ϕ̃ output.
#[derive(Debug, Clone)]
pub struct Phi6Nodes {
    pub points: NodeId,
    pub tangent_u: NodeId,
    pub tangent_v: NodeId,
    pub normals: NodeId,
    pub embed6: NodeId,
    pub degenerate: Vec<bool>,
}

impl BoundMlp {
    fn layer_weight(&self, l: usize) -> NodeId {
        if l == 0 {
            self.input_weight
        } else {
            self.weights[l]
        }
    }

    fn layer_bias(&self, l: usize) -> NodeId {
        if l == 0 {
            self.first_bias
        } else {
            self.biases[l]
        }
    }

    /// Forward pass over the rows of `x` (n × input_dim).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        assert_eq!(g.shape(x).1, self.input_dim, "input width");
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let z = g.matmul(h, self.layer_weight(l));
            let z = g.add_row(z, self.layer_bias(l));
            h = if l < last { g.relu(z) } else { z };
        }
        h
    }

    /// Forward pass plus the two input-coordinate tangent streams. Input
    /// must have two columns.
    pub fn forward_with_tangents(&self, g: &mut Graph, x: NodeId) -> (NodeId, NodeId, NodeId) {
        assert_eq!(self.input_dim, 2, "tangents are defined for 2D inputs");
        let n = g.shape(x).0;
        let mut seed = Array2::zeros((2 * n, 2));
        for i in 0..n {
            seed[[i, 0]] = 1.0;
            seed[[n + i, 1]] = 1.0;
        }
        let mut t = g.constant(seed);
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..=last {
            let w = self.layer_weight(l);
            let z = g.matmul(h, w);
            let z = g.add_row(z, self.layer_bias(l));
            let tz = g.matmul(t, w);
            if l < last {
                let mask = g.relu_mask(z);
                let mask2 = ndarray::concatenate(ndarray::Axis(0), &[mask.view(), mask.view()])
                    .expect("mask shapes");
                h = g.relu(z);
                t = g.mul_const(tz, mask2);
            } else {
                h = z;
                t = tz;
            }
        }
        let tu = g.rows(t, 0, n);
        let tv = g.rows(t, n, n);
        debug_assert_eq!(g.shape(h).1, self.output_dim);
        (h, tu, tv)
    }

    /// ϕ̃ over the rows of `x`.
    pub fn forward_phi6(&self, g: &mut Graph, x: NodeId, alpha: NormalScale) -> Phi6Nodes {
        let (p, tu, tv) = self.forward_with_tangents(g, x);
        let c = g.cross3(tu, tv);
        let (normals, degenerate) = g.normalize_rows(c, alpha.get(), DEGENERATE_EPS);
        let embed6 = g.hcat(&[p, normals]);
        Phi6Nodes {
            points: p,
            tangent_u: tu,
            tangent_v: tv,
            normals,
            embed6,
            degenerate,
        }
    }
}

/// Evaluated ϕ̃ on a batch without recording gradients.
#[derive(Debug, Clone)]
pub struct Phi6Values {
    pub points: Array2<f64>,
    /// Unit normals (α removed); zero rows where degenerate.
    pub unit_normals: Array2<f64>,
    pub tangent_u: Array2<f64>,
    pub tangent_v: Array2<f64>,
    pub degenerate: Vec<bool>,
}

pub fn evaluate_phi6(
    weights: &MlpWeights,
    code: Option<&LatentCode>,
    uv: &Array2<f64>,
) -> Result<Phi6Values, NetworkError> {
    weights.check_code(code)?;
    if uv.ncols() != 2 {
        return Err(NetworkError::DimensionMismatch {
            expected: 2,
            got: uv.ncols(),
        });
    }
    let mut g = Graph::new();
    let nodes = MlpNodes::bind(&mut g, weights, false);
    let code_node = code.map(|c| g.constant(c.as_row()));
    let net = nodes.with_code(&mut g, code_node);
    let x = g.constant(uv.clone());
    let out = net.forward_phi6(&mut g, x, NormalScale::new(1.0)?);
    Ok(Phi6Values {
        points: g.value(out.points).clone(),
        unit_normals: g.value(out.normals).clone(),
        tangent_u: g.value(out.tangent_u).clone(),
        tangent_v: g.value(out.tangent_v).clone(),
        degenerate: out.degenerate,
    })
}

pub fn evaluate(
    weights: &MlpWeights,
    code: Option<&LatentCode>,
    x: &Array2<f64>,
) -> Result<Array2<f64>, NetworkError> {
    weights.check_code(code)?;
    if x.ncols() != weights.config.input_dim {
        return Err(NetworkError::DimensionMismatch {
            expected: weights.config.input_dim,
            got: x.ncols(),
        });
    }
    let mut g = Graph::new();
    let nodes = MlpNodes::bind(&mut g, weights, false);
    let code_node = code.map(|c| g.constant(c.as_row()));
    let net = nodes.with_code(&mut g, code_node);
    let xn = g.constant(x.clone());
    let out = net.forward(&mut g, xn);
    Ok(g.value(out).clone())
}

/// ψ over rows of 6D embeddings whose normal parts have norm α.
pub fn evaluate_psi(
    weights: &MlpWeights,
    code: Option<&LatentCode>,
    x6: &Array2<f64>,
    alpha: NormalScale,
) -> Result<Array2<f64>, NetworkError> {
    for row in x6.rows() {
        check_scaled_normal(row.as_slice().unwrap_or(&row.to_vec()), alpha)?;
    }
    evaluate(weights, code, x6)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ReLU net with one hidden layer of width 4 computing (u, v, 0), or
    /// (v, u, 0) when `swap`.
    pub(crate) fn plane_net(swap: bool) -> MlpWeights {
        let cfg = MlpConfig::phi(1, 4, 0);
        let mut w = MlpWeights::zeros(cfg).unwrap();
        let layout = w.layout();
        let (l0, l1) = (layout[0], layout[1]);
        // hidden = relu([u, -u, v, -v])
        let set = |w: &mut MlpWeights, l: &LayerLayout, i: usize, j: usize, v: f64| {
            w.params[l.weight_offset + i * l.fan_out + j] = v;
        };
        set(&mut w, &l0, 0, 0, 1.0);
        set(&mut w, &l0, 0, 1, -1.0);
        set(&mut w, &l0, 1, 2, 1.0);
        set(&mut w, &l0, 1, 3, -1.0);
        let (a, b) = if swap { (1, 0) } else { (0, 1) };
        set(&mut w, &l1, 0, a, 1.0);
        set(&mut w, &l1, 1, a, -1.0);
        set(&mut w, &l1, 2, b, 1.0);
        set(&mut w, &l1, 3, b, -1.0);
        w
    }

    #[test]
    fn zero_net_outputs_zero() {
        let w = MlpWeights::zeros(MlpConfig::phi(2, 8, 0)).unwrap();
        let tape = Tape::new();
        let net = TapedMlp::record(&tape, &w, None).unwrap();
        let x = [tape.constant(0.3), tape.constant(-1.2)];
        let p = forward_phi(&net, x).unwrap();
        assert_eq!(p.map(|v| v.value()), [0.0, 0.0, 0.0]);

        let wpsi = MlpWeights::zeros(MlpConfig::psi(2, 8, 0)).unwrap();
        let net = TapedMlp::record(&tape, &wpsi, None).unwrap();
        let x6 = [0.1, 0.2, 0.3, 0.0, 0.0, 0.01].map(|v| tape.constant(v));
        let q = forward_psi(&net, x6, NormalScale::DEFAULT).unwrap();
        assert_eq!(q.map(|v| v.value()), [0.0, 0.0]);
    }

    #[test]
    fn plane_net_reproduces_plane_and_normal() {
        let alpha = NormalScale::DEFAULT;
        for (swap, nz) in [(false, 1.0), (true, -1.0)] {
            let w = plane_net(swap);
            let tape = Tape::new();
            let net = TapedMlp::record(&tape, &w, None).unwrap();
            let x = [tape.constant(0.25), tape.constant(-0.5)];
            let out = forward_phi_with_normal(&net, x, alpha).unwrap();
            let p = out.point.map(|v| v.value());
            let expect = if swap { [-0.5, 0.25, 0.0] } else { [0.25, -0.5, 0.0] };
            assert_eq!(p, expect);
            let n = out.normal.unwrap().map(|v| v.value());
            assert_eq!(n, [0.0, 0.0, nz * 0.01]);
        }
    }

    #[test]
    fn degenerate_jacobian_flagged() {
        let w = MlpWeights::zeros(MlpConfig::phi(2, 4, 0)).unwrap();
        let tape = Tape::new();
        let net = TapedMlp::record(&tape, &w, None).unwrap();
        let x = [tape.constant(0.1), tape.constant(0.1)];
        let out = forward_phi_with_normal(&net, x, NormalScale::DEFAULT).unwrap();
        assert!(out.normal.is_none());

        let uv = Array2::from_shape_vec((1, 2), vec![0.1, 0.1]).unwrap();
        let v = evaluate_phi6(&w, None, &uv).unwrap();
        assert_eq!(v.degenerate, vec![true]);
    }

    #[test]
    fn psi_rejects_unscaled_normal() {
        let w = init_weights(MlpConfig::psi(2, 8, 0), 3).unwrap();
        let tape = Tape::new();
        let net = TapedMlp::record(&tape, &w, None).unwrap();
        let x6 = [0.1, 0.2, 0.3, 0.0, 0.0, 1.0].map(|v| tape.constant(v));
        assert!(matches!(
            forward_psi(&net, x6, NormalScale::DEFAULT),
            Err(NetworkError::UnscaledNormal { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let w = init_weights(MlpConfig::phi(2, 8, 4), 3).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            TapedMlp::record(&tape, &w, None),
            Err(NetworkError::DimensionMismatch { expected: 4, got: 0 })
        ));
        let bad = MlpWeights::from_params(MlpConfig::phi(2, 8, 0), vec![0.0; 3]);
        assert!(bad.is_err());
        assert!(MlpConfig::phi(0, 8, 0).validate().is_err());
        assert!(NormalScale::new(0.0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = MlpConfig::phi(3, 16, 2);
        assert_eq!(init_weights(cfg, 7).unwrap(), init_weights(cfg, 7).unwrap());
        assert_ne!(init_weights(cfg, 7).unwrap(), init_weights(cfg, 8).unwrap());
        assert_eq!(init_weights(cfg, 7).unwrap().params.len(), cfg.param_count());
    }

    #[test]
    fn batched_matches_taped_forward() {
        let cfg = MlpConfig::phi(2, 16, 3);
        let w = init_weights(cfg, 11).unwrap();
        let code = LatentCode(vec![0.2, -0.1, 0.05]);
        let uv = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap();
        let batched = evaluate_phi6(&w, Some(&code), &uv).unwrap();
        for i in 0..3 {
            let tape = Tape::new();
            let net = TapedMlp::record(&tape, &w, Some(&code)).unwrap();
            let x = [tape.constant(uv[[i, 0]]), tape.constant(uv[[i, 1]])];
            let out = forward_phi_with_normal(&net, x, NormalScale::new(1.0).unwrap()).unwrap();
            for k in 0..3 {
                assert!((out.point[k].value() - batched.points[[i, k]]).abs() < 1e-12);
                assert_eq!(out.normal.is_none(), batched.degenerate[i]);
                if let Some(n) = out.normal {
                    assert!((n[k].value() - batched.unit_normals[[i, k]]).abs() < 1e-12);
                }
                assert!((out.jacobian_u[k].value() - batched.tangent_u[[i, k]]).abs() < 1e-12);
            }
        }
    }
}
