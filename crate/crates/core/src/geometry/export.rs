//! Reconstructed meshes: the domain triangulation pushed through ϕ.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::io::save_obj;
use super::mesh::{Normalization, Point3, TriangleMesh};
use super::GeometryError;
use crate::network::{evaluate, LatentCode, MlpWeights, NetworkError};
use crate::sampler::Domain2DMesh;

/// Affine map from domain coordinates to UVs: `uv = (x - origin) * scale`.
/// One scale for both axes keeps the domain's aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvTransform {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl UvTransform {
    /// Fits the domain's bounding box into `[0,1]²`.
    pub fn fit(domain: &Domain2DMesh) -> Self {
        let (lo, hi) = domain.bounds();
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        UvTransform {
            origin: lo,
            scale: if span > 0.0 { 1.0 / span } else { 1.0 },
        }
    }

    pub fn to_uv(&self, x: [f64; 2]) -> [f64; 2] {
        [(x[0] - self.origin[0]) * self.scale, (x[1] - self.origin[1]) * self.scale]
    }

    pub fn to_domain(&self, uv: [f64; 2]) -> [f64; 2] {
        [uv[0] / self.scale + self.origin[0], uv[1] / self.scale + self.origin[1]]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Vertices `ϕ(x)` for every domain vertex `x`, UVs from [`UvTransform`],
/// connectivity copied. `frame` maps the result back out of the normalized
/// training frame.
pub fn reconstruction_mesh(
    domain: &Domain2DMesh,
    phi: &MlpWeights,
    code: Option<&LatentCode>,
    frame: Option<&Normalization>,
) -> Result<(TriangleMesh, UvTransform), NetworkError> {
    let uv_map = UvTransform::fit(domain);
    let x = Array2::from_shape_fn((domain.vertices.len(), 2), |(i, a)| domain.vertices[i][a]);
    let out = evaluate(phi, code, &x)?;
    let vertices: Vec<Point3> = out
        .rows()
        .into_iter()
        .map(|r| {
            let p = [r[0], r[1], r[2]];
            frame.map_or(p, |f| f.invert(p))
        })
        .collect();
    let mesh = TriangleMesh {
        vertices,
        triangles: domain.triangles.clone(),
        uvs: Some(domain.vertices.iter().map(|&v| uv_map.to_uv(v)).collect()),
        normals: None,
    };
    Ok((mesh, uv_map))
}

pub fn export_reconstruction(
    domain: &Domain2DMesh,
    phi: &MlpWeights,
    code: Option<&LatentCode>,
    frame: Option<&Normalization>,
    path: &Path,
) -> Result<TriangleMesh, ExportError> {
    let (mesh, _) = reconstruction_mesh(domain, phi, code, frame)?;
    save_obj(&mesh, path)?;
    Ok(mesh)
}

/// Closest point on triangle `abc` to `p`.
pub fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    use super::mesh::{dot, sub};
    let lerp = |o: Point3, d: Point3, t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    let (ab, ac, ap) = (sub(b, a), sub(c, a), sub(p, a));
    let (d1, d2) = (dot(ab, ap), dot(ac, ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let (d3, d4) = (dot(ab, bp), dot(ac, bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let (d5, d6) = (dot(ab, cp), dot(ac, cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return lerp(b, sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    [0, 1, 2].map(|k| a[k] + ab[k] * v + ac[k] * w)
}

impl TriangleMesh {
    /// Index of the face nearest to `p` (lowest index on ties) and the
    /// squared distance to it.
    pub fn nearest_face(&self, p: Point3) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (f, t) in self.triangles.iter().enumerate() {
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let q = closest_point_on_triangle(p, a, b, c);
            let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((f, d));
            }
        }
        best
    }

    /// Unit normal of the nearest non-degenerate face.
    pub fn nearest_face_normal(&self, p: Point3) -> Option<Point3> {
        let mut best: Option<(Point3, f64)> = None;
        for (f, t) in self.triangles.iter().enumerate() {
            let Some(n) = self.face_normal(f) else { continue };
            let [a, b, c] = t.map(|i| self.vertices[i]);
            let q = closest_point_on_triangle(p, a, b, c);
            let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((n, d));
            }
        }
        best.map(|(n, _)| n)
    }
}
