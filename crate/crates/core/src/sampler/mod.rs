//! The learned 2D domain: an isotropic Gaussian mixture with learnable means,
//! reparameterized sampling, density thresholding and triangulation.

mod domain;
mod export;
mod triangulate;

pub use domain::{default_threshold, extract_domain, DomainGrid};
pub use export::{domain_svg, parse_grid, read_grid, write_grid};
pub use triangulate::{triangulate_domain, Domain2DMesh};

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("a mixture needs at least one component")]
    NoComponents,
    #[error("mixture mean {index} is not finite")]
    NonFiniteMean { index: usize },
    #[error("sample count must be at least 1")]
    EmptyBatch,
    #[error("grid resolution {0} is below the minimum of 16")]
    ResolutionTooSmall(usize),
    #[error("threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("threshold {tau:.6e} is above the maximum grid density {max:.6e}; the domain is empty, lower --tau")]
    EmptyDomain { tau: f64, max: f64 },
    #[error("grid file: {0}")]
    GridFormat(String),
}

/// `K` isotropic components with fixed σ = 1/√K and uniform weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture2D {
    means: Vec<[f64; 2]>,
}

impl GaussianMixture2D {
    pub fn new(means: Vec<[f64; 2]>) -> Result<Self, SamplerError> {
        if means.is_empty() {
            return Err(SamplerError::NoComponents);
        }
        if let Some(index) = means.iter().position(|m| !m[0].is_finite() || !m[1].is_finite()) {
            return Err(SamplerError::NonFiniteMean { index });
        }
        Ok(GaussianMixture2D { means })
    }

    /// Means drawn uniformly from `[-0.5, 0.5]²`.
    pub fn init_uniform(k: usize, rng: &mut impl Rng) -> Result<Self, SamplerError> {
        let means = (0..k)
            .map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)])
            .collect();
        Self::new(means)
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn sigma(&self) -> f64 {
        1.0 / (self.means.len() as f64).sqrt()
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.means
    }

    /// Replaces the means; `flat` holds `x0, y0, x1, y1, ...`.
    pub fn set_means_flat(&mut self, flat: &[f64]) -> Result<(), SamplerError> {
        assert_eq!(flat.len(), 2 * self.k(), "mean vector length");
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(SamplerError::NonFiniteMean { index: i / 2 });
        }
        for (m, c) in self.means.iter_mut().zip(flat.chunks(2)) {
            *m = [c[0], c[1]];
        }
        Ok(())
    }

    pub fn means_flat(&self) -> Vec<f64> {
        self.means.iter().flat_map(|m| [m[0], m[1]]).collect()
    }

    /// Means as a `K × 2` array.
    pub fn means_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.k(), 2), |(i, j)| self.means[i][j])
    }

    /// 𝒫(x) = (1/K) Σ_k N(x | μ_k, σ²I).
    pub fn density(&self, x: [f64; 2]) -> f64 {
        let s2 = self.sigma() * self.sigma();
        let norm = 1.0 / (2.0 * PI * s2 * self.k() as f64);
        self.means
            .iter()
            .map(|m| {
                let d = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                (-d / (2.0 * s2)).exp()
            })
            .sum::<f64>()
            * norm
    }

    /// Upper bound on the density, reached when every mean coincides.
    pub fn peak_bound(&self) -> f64 {
        1.0 / (2.0 * PI * self.sigma().powi(2))
    }

    /// Mean over components of the density at each mean.
    pub fn mean_density_at_means(&self) -> f64 {
        let field = DensityField::new(self);
        self.means.iter().map(|&m| field.density(m)).sum::<f64>() / self.k() as f64
    }

    /// Component indices and standard-normal-scaled offsets for `m` samples.
    /// Selection and Gaussian draws use separate streams.
    pub fn draw(
        &self,
        m: usize,
        select_rng: &mut impl Rng,
        gauss_rng: &mut impl Rng,
    ) -> Result<MixtureDraw, SamplerError> {
        self.draw_with_sigma(m, self.sigma(), select_rng, gauss_rng)
    }

    /// As [`draw`](Self::draw) with an explicit noise scale; `sigma = 0`
    /// yields the selected means exactly.
    pub fn draw_with_sigma(
        &self,
        m: usize,
        sigma: f64,
        select_rng: &mut impl Rng,
        gauss_rng: &mut impl Rng,
    ) -> Result<MixtureDraw, SamplerError> {
        if m == 0 {
            return Err(SamplerError::EmptyBatch);
        }
        let k = self.k();
        let components: Vec<usize> = (0..m).map(|_| select_rng.random_range(0..k)).collect();
        let mut noise = Array2::zeros((m, 2));
        for i in 0..m {
            for j in 0..2 {
                let z: f64 = gauss_rng.sample(StandardNormal);
                noise[[i, j]] = sigma * z;
            }
        }
        Ok(MixtureDraw { components, noise })
    }

    /// Reparameterized samples on a scalar tape. Returns the mean leaves and
    /// the sampled points `x = noise + μ_i`.
    #[allow(clippy::type_complexity)]
    pub fn sample_on_tape<'t>(
        &self,
        tape: &'t Tape,
        draw: &MixtureDraw,
    ) -> Result<(Vec<[Var<'t>; 2]>, Vec<[Var<'t>; 2]>), crate::autodiff::AutodiffError> {
        let leaves = self
            .means
            .iter()
            .map(|m| Ok([tape.record(m[0])?, tape.record(m[1])?]))
            .collect::<Result<Vec<_>, crate::autodiff::AutodiffError>>()?;
        let points = draw
            .components
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mu = leaves[c];
                [mu[0].offset(draw.noise[[i, 0]]), mu[1].offset(draw.noise[[i, 1]])]
            })
            .collect();
        Ok((leaves, points))
    }
}

/// The random part of a batch of mixture samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDraw {
    pub components: Vec<usize>,
    /// `M × 2`, already scaled by σ.
    pub noise: Array2<f64>,
}

impl MixtureDraw {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn points(&self, gmm: &GaussianMixture2D) -> Array2<f64> {
        let means = gmm.means();
        Array2::from_shape_fn((self.len(), 2), |(i, j)| self.noise[[i, j]] + means[self.components[i]][j])
    }

    /// `gather(means, components) + noise` on a graph; `means` is `K × 2`.
    pub fn on_graph(&self, g: &mut Graph, means: NodeId) -> NodeId {
        let picked = g.gather(means, self.components.clone());
        let noise = g.constant(self.noise.clone());
        g.add(picked, noise)
    }
}

/// Mixture density with far components skipped. Contributions beyond 8σ
/// are below `e^{-32}` of a component peak.
pub(crate) struct DensityField<'a> {
    gmm: &'a GaussianMixture2D,
    cell: f64,
    origin: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'a> DensityField<'a> {
    pub(crate) fn new(gmm: &'a GaussianMixture2D) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for m in gmm.means() {
            for a in 0..2 {
                lo[a] = lo[a].min(m[a]);
                hi[a] = hi[a].max(m[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let cell = (8.0 * gmm.sigma()).max(span / 4096.0);
        let dims = [0, 1].map(|a| ((hi[a] - lo[a]) / cell).floor() as usize + 1);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for (i, m) in gmm.means().iter().enumerate() {
            let bx = (((m[0] - lo[0]) / cell) as usize).min(dims[0] - 1);
            let by = (((m[1] - lo[1]) / cell) as usize).min(dims[1] - 1);
            buckets[by * dims[0] + bx].push(i);
        }
        DensityField {
            gmm,
            cell,
            origin: lo,
            dims,
            buckets,
        }
    }

    pub(crate) fn density(&self, x: [f64; 2]) -> f64 {
        let s2 = self.gmm.sigma().powi(2);
        let norm = 1.0 / (2.0 * PI * s2 * self.gmm.k() as f64);
        let fx = ((x[0] - self.origin[0]) / self.cell).floor();
        let fy = ((x[1] - self.origin[1]) / self.cell).floor();
        let mut total = 0.0;
        for dy in -1..=1 {
            let by = fy + dy as f64;
            if by < 0.0 || by >= self.dims[1] as f64 {
                continue;
            }
            for dx in -1..=1 {
                let bx = fx + dx as f64;
                if bx < 0.0 || bx >= self.dims[0] as f64 {
                    continue;
                }
                for &i in &self.buckets[by as usize * self.dims[0] + bx as usize] {
                    let m = self.gmm.means()[i];
                    let d = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                    total += (-d / (2.0 * s2)).exp();
                }
            }
        }
        total * norm
    }
}
