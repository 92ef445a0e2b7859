//! Uniform surface sampling and 6D embeddings.

use ndarray::Array2;
use rand::Rng;

use super::mesh::{normalize, Point3, PointCloudWithNormals, Shape, TriangleMesh};
use super::GeometryError;
use crate::network::NormalScale;

/// A surface point with its unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSample {
    pub point: Point3,
    pub normal: Point3,
}

impl ShapeSample {
    /// `[point, α·normal]`.
    pub fn embed6(&self, alpha: NormalScale) -> [f64; 6] {
        let a = alpha.get();
        let (p, n) = (self.point, self.normal);
        [p[0], p[1], p[2], a * n[0], a * n[1], a * n[2]]
    }
}

/// A batch of samples stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub points: Array2<f64>,
    pub normals: Array2<f64>,
}

impl SampleSet {
    pub fn from_samples(samples: &[ShapeSample]) -> Self {
        let n = samples.len();
        let mut points = Array2::zeros((n, 3));
        let mut normals = Array2::zeros((n, 3));
        for (i, s) in samples.iter().enumerate() {
            for k in 0..3 {
                points[[i, k]] = s.point[k];
                normals[[i, k]] = s.normal[k];
            }
        }
        SampleSet { points, normals }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed6(&self, alpha: NormalScale) -> Array2<f64> {
        let n = self.len();
        let a = alpha.get();
        Array2::from_shape_fn((n, 6), |(i, k)| {
            if k < 3 {
                self.points[[i, k]]
            } else {
                a * self.normals[[i, k - 3]]
            }
        })
    }

    pub fn sample(&self, i: usize) -> ShapeSample {
        ShapeSample {
            point: [self.points[[i, 0]], self.points[[i, 1]], self.points[[i, 2]]],
            normal: [self.normals[[i, 0]], self.normals[[i, 1]], self.normals[[i, 2]]],
        }
    }
}

/// Area-weighted triangle picker.
#[derive(Debug, Clone)]
pub struct SurfaceSampler {
    cumulative: Vec<f64>,
    total: f64,
    face_normals: Vec<Point3>,
    vertex_normals: Option<Vec<Point3>>,
}

impl SurfaceSampler {
    /// `interpolate_normals` switches from face normals to barycentric
    /// interpolation of area-weighted vertex normals.
    pub fn new(mesh: &TriangleMesh, interpolate_normals: bool) -> Result<Self, GeometryError> {
        let mut cumulative = Vec::with_capacity(mesh.triangles.len());
        let mut total = 0.0;
        let mut face_normals = Vec::with_capacity(mesh.triangles.len());
        for f in 0..mesh.triangles.len() {
            total += mesh.face_area(f);
            cumulative.push(total);
            face_normals.push(mesh.face_normal(f).unwrap_or([0.0, 0.0, 1.0]));
        }
        if !(total > 0.0) {
            return Err(GeometryError::ZeroArea);
        }
        Ok(SurfaceSampler {
            cumulative,
            total,
            face_normals,
            vertex_normals: interpolate_normals.then(|| mesh.vertex_normals()),
        })
    }

    pub fn pick_face(&self, rng: &mut impl Rng) -> usize {
        let r = rng.random::<f64>() * self.total;
        // First face whose cumulative area exceeds r; zero-area faces have
        // no width in the cumulative sum and are never returned.
        let i = self.cumulative.partition_point(|&c| c <= r);
        i.min(self.cumulative.len() - 1)
    }

    pub fn sample(&self, mesh: &TriangleMesh, rng: &mut impl Rng) -> ShapeSample {
        let f = self.pick_face(rng);
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let s = r1.sqrt();
        let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
        let [a, b, c] = mesh.triangles[f];
        let [pa, pb, pc] = [a, b, c].map(|i| mesh.vertices[i]);
        let point = [0, 1, 2].map(|k| wa * pa[k] + wb * pb[k] + wc * pc[k]);
        let normal = match &self.vertex_normals {
            Some(vn) => {
                let n = [0, 1, 2].map(|k| wa * vn[a][k] + wb * vn[b][k] + wc * vn[c][k]);
                normalize(n).unwrap_or(self.face_normals[f])
            }
            None => self.face_normals[f],
        };
        ShapeSample { point, normal }
    }
}

/// `count` area-uniform samples with face normals.
pub fn sample_surface(
    mesh: &TriangleMesh,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ShapeSample>, GeometryError> {
    let sampler = SurfaceSampler::new(mesh, false)?;
    Ok((0..count).map(|_| sampler.sample(mesh, rng)).collect())
}

/// Samples with replacement from a point cloud.
pub fn sample_cloud(cloud: &PointCloudWithNormals, count: usize, rng: &mut impl Rng) -> Vec<ShapeSample> {
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..cloud.len());
            ShapeSample {
                point: cloud.points[i],
                normal: cloud.normals[i],
            }
        })
        .collect()
}

/// Prepared sampler for either kind of input shape.
#[derive(Debug, Clone)]
pub enum ShapeSource {
    Mesh(TriangleMesh, SurfaceSampler),
    Cloud(PointCloudWithNormals),
}

impl ShapeSource {
    pub fn new(shape: Shape, interpolate_normals: bool) -> Result<Self, GeometryError> {
        match shape {
            Shape::Mesh(m) => {
                let s = SurfaceSampler::new(&m, interpolate_normals)?;
                Ok(ShapeSource::Mesh(m, s))
            }
            Shape::Cloud(c) => {
                if c.is_empty() {
                    return Err(GeometryError::Invalid("empty point cloud".into()));
                }
                Ok(ShapeSource::Cloud(c))
            }
        }
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> SampleSet {
        let samples: Vec<ShapeSample> = match self {
            ShapeSource::Mesh(m, s) => (0..count).map(|_| s.sample(m, rng)).collect(),
            ShapeSource::Cloud(c) => sample_cloud(c, count, rng),
        };
        SampleSet::from_samples(&samples)
    }

    pub fn as_mesh(&self) -> Option<&TriangleMesh> {
        match self {
            ShapeSource::Mesh(m, _) => Some(m),
            ShapeSource::Cloud(_) => None,
        }
    }
}
