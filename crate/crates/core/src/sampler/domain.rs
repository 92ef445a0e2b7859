//! Thresholded density grids.

use rayon::prelude::*;

use super::{DensityField, GaussianMixture2D, SamplerError};

/// Grid padding around the means, in units of σ.
const PAD_SIGMAS: f64 = 4.0;

/// Density sampled at `resolution × resolution` nodes of an axis-aligned box.
/// Values are row-major with row index along y.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGrid {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub resolution: usize,
    pub values: Vec<f64>,
    pub tau: f64,
    pub inside: Vec<bool>,
    pub(crate) source: Option<GaussianMixture2D>,
}

/// 0.3 × the mixture density averaged over the means.
pub fn default_threshold(gmm: &GaussianMixture2D) -> f64 {
    0.3 * gmm.mean_density_at_means()
}

pub fn extract_domain(gmm: &GaussianMixture2D, resolution: usize, tau: f64) -> Result<DomainGrid, SamplerError> {
    if resolution < 16 {
        return Err(SamplerError::ResolutionTooSmall(resolution));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SamplerError::InvalidThreshold(tau));
    }
    let pad = PAD_SIGMAS * gmm.sigma();
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for m in gmm.means() {
        for a in 0..2 {
            min[a] = min[a].min(m[a] - pad);
            max[a] = max[a].max(m[a] + pad);
        }
    }
    let field = DensityField::new(gmm);
    let mut grid = DomainGrid::from_fn(min, max, resolution, tau, |x| field.density(x))?;
    grid.source = Some(gmm.clone());
    Ok(grid)
}

impl DomainGrid {
    /// Samples an arbitrary density on the grid nodes.
    pub fn from_fn(
        min: [f64; 2],
        max: [f64; 2],
        resolution: usize,
        tau: f64,
        density: impl Fn([f64; 2]) -> f64 + Sync,
    ) -> Result<Self, SamplerError> {
        let r = resolution;
        let mut values = vec![0.0; r * r];
        let probe = DomainGrid {
            min,
            max,
            resolution: r,
            values: Vec::new(),
            tau,
            inside: Vec::new(),
            source: None,
        };
        values.par_chunks_mut(r).enumerate().for_each(|(j, row)| {
            for (i, v) in row.iter_mut().enumerate() {
                *v = density(probe.node(i, j));
            }
        });
        Self::from_values(min, max, r, tau, values)
    }

    pub fn from_values(
        min: [f64; 2],
        max: [f64; 2],
        resolution: usize,
        tau: f64,
        values: Vec<f64>,
    ) -> Result<Self, SamplerError> {
        if resolution < 2 {
            return Err(SamplerError::ResolutionTooSmall(resolution));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(SamplerError::InvalidThreshold(tau));
        }
        assert_eq!(values.len(), resolution * resolution, "grid value count");
        let inside: Vec<bool> = values.iter().map(|&v| v >= tau).collect();
        if !inside.iter().any(|&b| b) {
            let max_v = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return Err(SamplerError::EmptyDomain { tau, max: max_v });
        }
        Ok(DomainGrid {
            min,
            max,
            resolution,
            values,
            tau,
            inside,
            source: None,
        })
    }

    pub fn spacing(&self) -> [f64; 2] {
        let n = (self.resolution - 1) as f64;
        [(self.max[0] - self.min[0]) / n, (self.max[1] - self.min[1]) / n]
    }

    pub fn cell_area(&self) -> f64 {
        let h = self.spacing();
        h[0] * h[1]
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [self.min[0] + i as f64 * h[0], self.min[1] + j as f64 * h[1]]
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.resolution + i]
    }

    pub fn is_inside(&self, i: usize, j: usize) -> bool {
        self.inside[j * self.resolution + i]
    }

    pub fn inside_count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// Grid cells (of `(r-1)²`) whose corners are not all equal in mask state.
    pub fn boundary_cell_count(&self) -> usize {
        let r = self.resolution;
        let mut n = 0;
        for j in 0..r - 1 {
            for i in 0..r - 1 {
                let c = [
                    self.is_inside(i, j),
                    self.is_inside(i + 1, j),
                    self.is_inside(i + 1, j + 1),
                    self.is_inside(i, j + 1),
                ];
                if c.iter().any(|&b| b) && !c.iter().all(|&b| b) {
                    n += 1;
                }
            }
        }
        n
    }

    /// Density at `x`: exact when the grid came from a mixture, otherwise
    /// bilinear interpolation of node values.
    pub fn density_at(&self, x: [f64; 2]) -> f64 {
        if let Some(g) = &self.source {
            return g.density(x);
        }
        let h = self.spacing();
        let r = self.resolution;
        let fx = ((x[0] - self.min[0]) / h[0]).clamp(0.0, (r - 1) as f64);
        let fy = ((x[1] - self.min[1]) / h[1]).clamp(0.0, (r - 1) as f64);
        let i = (fx.floor() as usize).min(r - 2);
        let j = (fy.floor() as usize).min(r - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let v00 = self.value(i, j);
        let v10 = self.value(i + 1, j);
        let v01 = self.value(i, j + 1);
        let v11 = self.value(i + 1, j + 1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
    }

    /// Number of 4-connected components of the inside mask.
    pub fn component_count(&self) -> usize {
        let r = self.resolution;
        let mut label = vec![false; r * r];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..r * r {
            if !self.inside[start] || label[start] {
                continue;
            }
            count += 1;
            label[start] = true;
            stack.push(start);
            while let Some(c) = stack.pop() {
                let (i, j) = (c % r, c / r);
                let mut visit = |n: usize| {
                    if self.inside[n] && !label[n] {
                        label[n] = true;
                        stack.push(n);
                    }
                };
                if i > 0 {
                    visit(c - 1);
                }
                if i + 1 < r {
                    visit(c + 1);
                }
                if j > 0 {
                    visit(c - r);
                }
                if j + 1 < r {
                    visit(c + r);
                }
            }
        }
        count
    }
}
