//! Finite-difference verification of every loss term's gradient.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::geometry::{primitives, Shape, ShapeSource};
use crate::losses::{loss_full, reduce, LossSettings, LossWeights, ShapeBatch};
use crate::trainer::{AtlasCollection, TrainConfig, TrainError, Trainer, TrainingShape};

pub const TERMS: [&str; 5] = ["loss_6d", "loss_2d", "loss_cycle", "loss_iso", "loss_rep"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckSize {
    /// 2×8 networks, K = 4, M = 16.
    Tiny,
    /// 2×16 networks, K = 16, M = 32.
    Small,
}

impl std::str::FromStr for GradcheckSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(GradcheckSize::Tiny),
            "small" => Ok(GradcheckSize::Small),
            _ => Err(format!("unknown size '{s}' (expected tiny or small)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub size: GradcheckSize,
    pub seeds: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub denominator_floor: f64,
    /// Negates the analytic gradient of this term, as a negative control.
    pub flip_sign_of: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            size: GradcheckSize::Tiny,
            seeds: 20,
            epsilon: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
            flip_sign_of: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub checked: usize,
    /// Checked coordinates with a gradient above the denominator floor.
    pub nonzero: usize,
    /// Coordinates where a ±ε step changed an activation pattern or a
    /// nearest-neighbor association.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub terms: Vec<TermCheck>,
    pub seeds: u64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in &self.terms {
            s.push_str(&format!(
                "{} {:<10} checked={:<6} nonzero={:<6} skipped={:<5} max_rel_err={:.3e} worst={}\n",
                if t.passed { "PASS" } else { "FAIL" },
                t.term,
                t.checked,
                t.nonzero,
                t.skipped,
                t.max_rel_error,
                t.worst_parameter
            ));
        }
        s.push_str(&format!(
            "{} overall ({} seeds, {:.1} s)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.seeds,
            self.elapsed.as_secs_f64()
        ));
        s
    }
}

pub fn config_for(size: GradcheckSize, seed: u64) -> TrainConfig {
    let (width, k, m) = match size {
        GradcheckSize::Tiny => (8, 4, 16),
        GradcheckSize::Small => (16, 16, 32),
    };
    TrainConfig {
        k,
        m,
        hidden_layers: 2,
        hidden_width: width,
        latent_dim: 3,
        seed,
        ..TrainConfig::default()
    }
}

/// Two related curved patches, so latent codes are exercised.
pub fn check_shapes() -> Vec<TrainingShape> {
    (0..2)
        .map(|v| {
            let mesh = primitives::patch_mesh(9, primitives::bump_embedding(v));
            let mut shape = Shape::Mesh(mesh);
            let normalization = shape.normalize().expect("patch is not degenerate");
            TrainingShape {
                name: format!("patch{v}"),
                source: ShapeSource::new(shape, false).expect("patch has area"),
                normalization,
            }
        })
        .collect()
}

fn only(term: &str) -> LossWeights {
    let mut w = LossWeights::zero();
    match term {
        "loss_6d" => w.lambda_6d = 1.0,
        "loss_2d" => w.lambda_2d = 1.0,
        "loss_cycle" => w.lambda_cycle = 1.0,
        "loss_iso" => w.lambda_iso = 1.0,
        _ => w.lambda_rep = 1.0,
    }
    w
}

fn evaluate(
    atlas: &AtlasCollection,
    batches: &[ShapeBatch],
    settings: &LossSettings,
) -> Result<(f64, Vec<f64>, u64), TrainError> {
    let evals = loss_full(atlas, batches, settings)?;
    let sig = evals
        .iter()
        .fold(0u64, |h, e| h.rotate_left(17) ^ e.discrete_signature);
    let (report, grad) = reduce(&evals);
    Ok((report.total, grad, sig))
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, TrainError> {
    let start = Instant::now();
    let mut checks: Vec<TermCheck> = TERMS
        .iter()
        .map(|&term| TermCheck {
            term,
            checked: 0,
            nonzero: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_parameter: String::new(),
            passed: true,
        })
        .collect();
    for seed in 0..opts.seeds {
        let mut trainer = Trainer::new(config_for(opts.size, seed), check_shapes())?;
        let batches = trainer.next_batches()?;
        let atlas = trainer.atlas.clone();
        let layout = atlas.layout();
        let theta = atlas.to_flat();
        for check in checks.iter_mut() {
            let settings = LossSettings {
                weights: only(check.term),
                use_normals: true,
            };
            let (_, mut analytic, sig) = evaluate(&atlas, &batches, &settings)?;
            if opts.flip_sign_of == Some(check.term) {
                analytic.iter_mut().for_each(|g| *g = -*g);
            }
            let mut probe = atlas.clone();
            let mut shifted = theta.clone();
            for j in 0..theta.len() {
                shifted[j] = theta[j] + opts.epsilon;
                probe.set_flat(&shifted)?;
                let (fp, _, sp) = evaluate(&probe, &batches, &settings)?;
                shifted[j] = theta[j] - opts.epsilon;
                probe.set_flat(&shifted)?;
                let (fm, _, sm) = evaluate(&probe, &batches, &settings)?;
                shifted[j] = theta[j];
                if sp != sig || sm != sig {
                    check.skipped += 1;
                    continue;
                }
                let fd = (fp - fm) / (2.0 * opts.epsilon);
                let a = analytic[j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.denominator_floor);
                check.checked += 1;
                if a.abs().max(fd.abs()) > opts.denominator_floor {
                    check.nonzero += 1;
                }
                if rel > check.max_rel_error {
                    check.max_rel_error = rel;
                    check.worst_parameter = match layout.group_of(j) {
                        Some(g) => {
                            let offset = layout.range(g).map_or(0, |r| j - r.start);
                            format!("{g}[{offset}] (seed {seed})")
                        }
                        None => format!("#{j} (seed {seed})"),
                    };
                }
            }
        }
    }
    for c in checks.iter_mut() {
        c.passed = c.nonzero > 0 && c.max_rel_error < opts.tolerance;
    }
    Ok(GradcheckReport {
        terms: checks,
        seeds: opts.seeds,
        elapsed: start.elapsed(),
    })
}
