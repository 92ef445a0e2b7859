//! Parameter registry, Adam, the training loop, checkpoints and the
//! ablation ladder.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Normalization, ShapeSource};
use crate::losses::{loss_full, reduce, LossError, LossReport, LossSettings, LossWeights, ShapeBatch};
use crate::network::{init_weights, LatentCode, MlpConfig, MlpWeights, NetworkError, NormalScale};
use crate::sampler::{GaussianMixture2D, SamplerError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite {what} in {term} at iteration {iteration}")]
    NonFinite {
        iteration: u64,
        term: String,
        what: &'static str,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Ablation switches of the ladder rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_normals: bool,
    pub use_repulsion: bool,
    pub use_distribution: bool,
    pub use_chart: bool,
    pub use_iso: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        use_normals: true,
        use_repulsion: true,
        use_distribution: true,
        use_chart: true,
        use_iso: true,
    };

    /// Ladder row with exactly these flags, if any.
    pub fn row(&self) -> Option<u32> {
        (6..=11).find(|&r| configure_ablation(r).is_ok_and(|f| f == *self))
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::ALL
    }
}

/// Flags of ladder rows 6 through 11: φ; +n; +r; +p; +ψ; +i.
pub fn configure_ablation(row: u32) -> Result<AblationFlags, TrainError> {
    if !(6..=11).contains(&row) {
        return Err(TrainError::Config(format!("ablation row must be in 6..=11, got {row}")));
    }
    Ok(AblationFlags {
        use_normals: row >= 7,
        use_repulsion: row >= 8,
        use_distribution: row >= 9,
        use_chart: row >= 10,
        use_iso: row >= 11,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Mixture components, or learnable points without the distribution.
    pub k: usize,
    /// Points per iteration on each shape and from the domain.
    pub m: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub alpha: f64,
    pub iterations: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub checkpoint_every: u64,
    /// `None` uses the defaults for `m`.
    pub weights: Option<LossWeights>,
    pub flags: AblationFlags,
    /// Interpolated vertex normals instead of face normals for mesh samples.
    pub interpolate_normals: bool,
}

impl Default for TrainConfig {
    /// Full-scale settings.
    fn default() -> Self {
        TrainConfig {
            k: 10_000,
            m: 10_000,
            hidden_layers: 5,
            hidden_width: 256,
            latent_dim: 0,
            alpha: NormalScale::DEFAULT.get(),
            iterations: 100_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            clip_norm: Some(10.0),
            checkpoint_every: 1000,
            weights: None,
            flags: AblationFlags::ALL,
            interpolate_normals: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.k == 0 || self.m == 0 {
            return bad("k and m must be at least 1");
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return bad("hidden_layers and hidden_width must be at least 1");
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning_rate must be positive and betas in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if self.flags.use_chart && !self.flags.use_distribution {
            return bad("use_chart requires use_distribution");
        }
        if let Some(w) = &self.weights {
            w.validate().map_err(TrainError::Config)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_ablation_row(mut self, row: u32) -> Result<Self, TrainError> {
        self.flags = configure_ablation(row)?;
        Ok(self)
    }

    /// Loss weights after applying the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.unwrap_or_else(|| LossWeights::defaults(self.m));
        if !self.flags.use_repulsion {
            w.lambda_rep = 0.0;
        }
        if !self.flags.use_iso {
            w.lambda_iso = 0.0;
        }
        if !self.flags.use_chart {
            w.lambda_2d = 0.0;
            w.lambda_cycle = 0.0;
        }
        w
    }

    pub fn phi_config(&self) -> MlpConfig {
        MlpConfig::phi(self.hidden_layers, self.hidden_width, self.latent_dim)
    }

    pub fn psi_config(&self) -> MlpConfig {
        MlpConfig::psi(self.hidden_layers, self.hidden_width, self.latent_dim)
    }

    pub fn normal_scale(&self) -> NormalScale {
        NormalScale::new(self.alpha).expect("validated alpha")
    }
}

/// A contiguous block of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Phi,
    Psi,
    PhiCode(usize),
    PsiCode(usize),
    Means,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::Phi => write!(f, "phi"),
            ParamGroup::Psi => write!(f, "psi"),
            ParamGroup::PhiCode(i) => write!(f, "phi_code[{i}]"),
            ParamGroup::PsiCode(i) => write!(f, "psi_code[{i}]"),
            ParamGroup::Means => write!(f, "means"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub groups: Vec<(ParamGroup, Range<usize>)>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.groups.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, group: ParamGroup) -> Option<Range<usize>> {
        self.groups.iter().find(|(g, _)| *g == group).map(|(_, r)| r.clone())
    }

    pub fn group_of(&self, index: usize) -> Option<ParamGroup> {
        self.groups.iter().find(|(_, r)| r.contains(&index)).map(|(g, _)| *g)
    }
}

/// Shared networks, per-shape codes and the shared domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasCollection {
    pub phi: MlpWeights,
    /// Absent when the chart map is not trained.
    pub psi: Option<MlpWeights>,
    /// Empty when `latent_dim = 0`.
    pub phi_codes: Vec<LatentCode>,
    pub psi_codes: Vec<LatentCode>,
    pub mixture: GaussianMixture2D,
    pub normalizations: Vec<Normalization>,
    pub shape_names: Vec<String>,
    pub alpha: NormalScale,
}

impl AtlasCollection {
    pub fn initialize(
        config: &TrainConfig,
        shape_names: Vec<String>,
        normalizations: Vec<Normalization>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let n = shape_names.len();
        if n == 0 {
            return Err(TrainError::Data("at least one shape is required".into()));
        }
        if normalizations.len() != n {
            return Err(TrainError::Data("one normalization per shape is required".into()));
        }
        let mut rng = stream(config.seed, STREAM_INIT);
        let phi = init_weights(config.phi_config(), config.seed.wrapping_mul(2).wrapping_add(1))?;
        let psi = if config.flags.use_chart {
            Some(init_weights(config.psi_config(), config.seed.wrapping_mul(2).wrapping_add(2))?)
        } else {
            None
        };
        let codes = |rng: &mut ChaCha8Rng, on: bool| -> Vec<LatentCode> {
            if config.latent_dim == 0 || !on {
                return Vec::new();
            }
            (0..n).map(|_| LatentCode::random(config.latent_dim, rng)).collect()
        };
        let phi_codes = codes(&mut rng, true);
        let psi_codes = codes(&mut rng, psi.is_some());
        let mixture = GaussianMixture2D::init_uniform(config.k, &mut rng)?;
        Ok(AtlasCollection {
            phi,
            psi,
            phi_codes,
            psi_codes,
            mixture,
            normalizations,
            shape_names,
            alpha: config.normal_scale(),
        })
    }

    pub fn num_shapes(&self) -> usize {
        self.shape_names.len()
    }

    pub fn phi_code(&self, i: usize) -> Option<&LatentCode> {
        self.phi_codes.get(i)
    }

    pub fn psi_code(&self, i: usize) -> Option<&LatentCode> {
        self.psi_codes.get(i)
    }

    pub fn shape_index(&self, name: &str) -> Option<usize> {
        self.shape_names.iter().position(|n| n == name).or_else(|| {
            name.parse::<usize>().ok().filter(|&i| i < self.num_shapes())
        })
    }

    pub fn layout(&self) -> ParamLayout {
        let mut groups = Vec::new();
        let mut off = 0;
        let mut push = |g: ParamGroup, len: usize| {
            groups.push((g, off..off + len));
            off += len;
        };
        push(ParamGroup::Phi, self.phi.params.len());
        if let Some(psi) = &self.psi {
            push(ParamGroup::Psi, psi.params.len());
        }
        for (i, c) in self.phi_codes.iter().enumerate() {
            push(ParamGroup::PhiCode(i), c.dim());
        }
        for (i, c) in self.psi_codes.iter().enumerate() {
            push(ParamGroup::PsiCode(i), c.dim());
        }
        push(ParamGroup::Means, 2 * self.mixture.k());
        ParamLayout { groups }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.phi.params.clone();
        if let Some(psi) = &self.psi {
            v.extend_from_slice(&psi.params);
        }
        for c in self.phi_codes.iter().chain(&self.psi_codes) {
            v.extend_from_slice(&c.0);
        }
        v.extend(self.mixture.means_flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), TrainError> {
        let layout = self.layout();
        if flat.len() != layout.len() {
            return Err(TrainError::Checkpoint(format!(
                "parameter vector has {} entries, expected {}",
                flat.len(),
                layout.len()
            )));
        }
        for (group, r) in layout.groups {
            let src = &flat[r];
            match group {
                ParamGroup::Phi => self.phi.params.copy_from_slice(src),
                ParamGroup::Psi => self.psi.as_mut().expect("layout").params.copy_from_slice(src),
                ParamGroup::PhiCode(i) => self.phi_codes[i].0.copy_from_slice(src),
                ParamGroup::PsiCode(i) => self.psi_codes[i].0.copy_from_slice(src),
                ParamGroup::Means => self.mixture.set_means_flat(src)?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and reports the offending index.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    hp: AdamParams,
) -> Result<(), usize> {
    assert_eq!(params.len(), grads.len(), "gradient length");
    assert_eq!(params.len(), state.m.len(), "optimizer state length");
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(i);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= hp.lr * mh / (vh.sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Rescales `grads` to global norm at most `max`; returns the norm before.
pub fn clip_global_norm(grads: &mut [f64], max: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

const STREAM_SELECT: u64 = 1;
const STREAM_GAUSS: u64 = 2;
const STREAM_SURFACE: u64 = 3;
const STREAM_INIT: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Independent random streams for component selection, Gaussian noise and
/// surface sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub select: ChaCha8Rng,
    pub gauss: ChaCha8Rng,
    pub surface: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            select: stream(seed, STREAM_SELECT),
            gauss: stream(seed, STREAM_GAUSS),
            surface: stream(seed, STREAM_SURFACE),
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub atlas: AtlasCollection,
    pub optimizer: OptimizerState,
    pub rng: RngStreams,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                c.format_version
            )));
        }
        if c.optimizer.m.len() != c.atlas.layout().len() || c.optimizer.v.len() != c.optimizer.m.len() {
            return Err(TrainError::Checkpoint("optimizer state does not match the parameters".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|e| TrainError::Io(tmp.display().to_string(), e))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub grad_norm: f64,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

/// A training shape ready for sampling.
#[derive(Debug, Clone)]
pub struct TrainingShape {
    pub name: String,
    pub source: ShapeSource,
    pub normalization: Normalization,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub atlas: AtlasCollection,
    pub optimizer: OptimizerState,
    pub rng: RngStreams,
    pub iteration: u64,
    shapes: Vec<TrainingShape>,
}

impl Trainer {
    pub fn new(config: TrainConfig, shapes: Vec<TrainingShape>) -> Result<Self, TrainError> {
        config.validate()?;
        let atlas = AtlasCollection::initialize(
            &config,
            shapes.iter().map(|s| s.name.clone()).collect(),
            shapes.iter().map(|s| s.normalization).collect(),
        )?;
        let optimizer = OptimizerState::new(atlas.layout().len());
        Ok(Trainer {
            rng: RngStreams::new(config.seed),
            config,
            atlas,
            optimizer,
            iteration: 0,
            shapes,
        })
    }

    pub fn resume(checkpoint: Checkpoint, shapes: Vec<TrainingShape>) -> Result<Self, TrainError> {
        checkpoint.config.validate()?;
        if shapes.len() != checkpoint.atlas.num_shapes() {
            return Err(TrainError::Data(format!(
                "checkpoint has {} shapes, {} given",
                checkpoint.atlas.num_shapes(),
                shapes.len()
            )));
        }
        Ok(Trainer {
            config: checkpoint.config,
            atlas: checkpoint.atlas,
            optimizer: checkpoint.optimizer,
            rng: checkpoint.rng,
            iteration: checkpoint.iteration,
            shapes,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            atlas: self.atlas.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            iteration: self.iteration,
        }
    }

    pub fn shapes(&self) -> &[TrainingShape] {
        &self.shapes
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings {
            weights: self.config.effective_weights(),
            use_normals: self.config.flags.use_normals,
        }
    }

    /// Draws this iteration's shape samples and domain draws, in shape order.
    pub fn next_batches(&mut self) -> Result<Vec<ShapeBatch>, TrainError> {
        let m = self.config.m;
        let mut out = Vec::with_capacity(self.shapes.len());
        for s in &self.shapes {
            let target = s.source.sample(m, &mut self.rng.surface);
            let draw = if self.config.flags.use_distribution {
                Some(self.atlas.mixture.draw(m, &mut self.rng.select, &mut self.rng.gauss)?)
            } else {
                None
            };
            out.push(ShapeBatch { target, draw });
        }
        Ok(out)
    }

    /// One optimization step. On a non-finite loss or gradient the state is
    /// left as it was before the step.
    pub fn step(&mut self) -> Result<LogRecord, TrainError> {
        let saved_rng = self.rng.clone();
        let batches = self.next_batches()?;
        let settings = self.settings();
        let evals = loss_full(&self.atlas, &batches, &settings)?;
        let iteration = self.iteration + 1;
        let (report, mut grad) = reduce(&evals);
        if let Some(term) = report.non_finite_term() {
            self.rng = saved_rng;
            return Err(TrainError::NonFinite {
                iteration,
                term: term.to_string(),
                what: "loss",
            });
        }
        if let Some(e) = evals.iter().find(|e| e.non_finite_gradient.is_some()) {
            self.rng = saved_rng;
            return Err(TrainError::NonFinite {
                iteration,
                term: e.non_finite_gradient.unwrap_or("total").to_string(),
                what: "gradient",
            });
        }
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_global_norm(&mut grad, c),
            None => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
        };
        let mut params = self.atlas.to_flat();
        let hp = AdamParams {
            lr: self.config.learning_rate,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            epsilon: self.config.epsilon,
        };
        let mut opt = self.optimizer.clone();
        if adam_step(&mut params, &grad, &mut opt, hp).is_err() || params.iter().any(|p| !p.is_finite()) {
            self.rng = saved_rng;
            return Err(TrainError::NonFinite {
                iteration,
                term: "parameters".into(),
                what: "update",
            });
        }
        self.atlas.set_flat(&params)?;
        self.optimizer = opt;
        self.iteration = iteration;
        Ok(LogRecord {
            iteration,
            report,
            grad_norm,
        })
    }

    /// Runs `iterations` steps, calling `observer` after each.
    pub fn run(
        &mut self,
        iterations: u64,
        mut observer: impl FnMut(&Trainer, &LogRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<LogRecord>, TrainError> {
        let mut log = Vec::with_capacity(iterations as usize);
        for _ in 0..iterations {
            let rec = self.step()?;
            observer(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Trains for `config.iterations` steps.
pub fn train(config: TrainConfig, shapes: Vec<TrainingShape>) -> Result<(Trainer, Vec<LogRecord>), TrainError> {
    let mut t = Trainer::new(config, shapes)?;
    let n = t.config.iterations;
    let log = t.run(n, |_, _| Ok(()))?;
    Ok((t, log))
}
