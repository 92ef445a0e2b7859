use serde::{Deserialize, Serialize};

use super::GeometryError;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Option<Vec<[f64; 2]>>,
    pub normals: Option<Vec<Point3>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        let m = TriangleMesh {
            vertices,
            triangles,
            uvs: None,
            normals: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.vertices.len();
        for (f, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= n) {
                return Err(GeometryError::Invalid(format!(
                    "face {f} references a vertex out of range ({n} vertices)"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(GeometryError::Invalid(format!("face {f} repeats a vertex")));
            }
        }
        if let Some(uv) = &self.uvs {
            if uv.len() != n {
                return Err(GeometryError::Invalid("uv count differs from vertex count".into()));
            }
        }
        if let Some(nr) = &self.normals {
            if nr.len() != n {
                return Err(GeometryError::Invalid(
                    "normal count differs from vertex count".into(),
                ));
            }
        }
        Ok(())
    }

    /// Unnormalized face normal (twice the area).
    pub fn face_cross(&self, f: usize) -> Point3 {
        let [a, b, c] = self.triangles[f].map(|i| self.vertices[i]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * length(self.face_cross(f))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|f| self.face_area(f)).sum()
    }

    /// Unit face normal; `None` for zero-area faces.
    pub fn face_normal(&self, f: usize) -> Option<Point3> {
        normalize(self.face_cross(f))
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Point3> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for (f, t) in self.triangles.iter().enumerate() {
            let c = self.face_cross(f);
            for &i in t {
                acc[i] = add(acc[i], c);
            }
        }
        acc.into_iter()
            .map(|n| normalize(n).unwrap_or([0.0, 0.0, 1.0]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloudWithNormals {
    pub points: Vec<Point3>,
    pub normals: Vec<Point3>,
}

impl PointCloudWithNormals {
    pub fn new(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self, GeometryError> {
        if points.len() != normals.len() {
            return Err(GeometryError::Invalid(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if (length(*n) - 1.0).abs() > 1e-6 {
                return Err(GeometryError::Invalid(format!("normal {i} is not unit length")));
            }
        }
        Ok(PointCloudWithNormals { points, normals })
    }

    /// Rescales every normal to unit length before validating.
    pub fn with_renormalized(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self, GeometryError> {
        let normals = normals
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                normalize(n).ok_or_else(|| GeometryError::Invalid(format!("normal {i} is zero")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(points, normals)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A loaded input shape.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Mesh(TriangleMesh),
    Cloud(PointCloudWithNormals),
}

impl Shape {
    pub fn positions(&self) -> &[Point3] {
        match self {
            Shape::Mesh(m) => &m.vertices,
            Shape::Cloud(c) => &c.points,
        }
    }

    pub fn positions_mut(&mut self) -> &mut Vec<Point3> {
        match self {
            Shape::Mesh(m) => &mut m.vertices,
            Shape::Cloud(c) => &mut c.points,
        }
    }

    /// Recenters on the centroid and scales the bounding sphere to radius
    /// 0.5, returning the applied transform.
    pub fn normalize(&mut self) -> Result<Normalization, GeometryError> {
        let t = Normalization::fit(self.positions())?;
        for p in self.positions_mut() {
            *p = t.apply(*p);
        }
        Ok(t)
    }
}

/// `normalized = (p - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::IDENTITY
    }
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn fit(points: &[Point3]) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::Invalid("cannot normalize an empty shape".into()));
        }
        let n = points.len() as f64;
        let mut c = [0.0; 3];
        for p in points {
            c = add(c, *p);
        }
        let c = c.map(|x| x / n);
        let r = points
            .iter()
            .map(|p| length(sub(*p, c)))
            .fold(0.0, f64::max);
        if r == 0.0 {
            return Err(GeometryError::Invalid("all points coincide".into()));
        }
        Ok(Normalization {
            center: c,
            scale: 0.5 / r,
        })
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        sub(p, self.center).map(|x| x * self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        add(p.map(|x| x / self.scale), self.center)
    }
}

pub(crate) fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn length(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: Point3) -> Option<Point3> {
    let l = length(a);
    if l > 0.0 && l.is_finite() {
        Some(a.map(|x| x / l))
    } else {
        None
    }
}
