//! Synthetic shapes used by the test suites and the CLI demos.

use std::f64::consts::PI;

use super::mesh::{Point3, PointCloudWithNormals, TriangleMesh};

/// Axis-aligned cube centered at the origin with outward-facing triangles.
pub fn cube_mesh(side: f64) -> TriangleMesh {
    let h = side / 2.0;
    let vertices = vec![
        [-h, -h, -h],
        [h, -h, -h],
        [h, h, -h],
        [-h, h, -h],
        [-h, -h, h],
        [h, -h, h],
        [h, h, h],
        [-h, h, h],
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [3, 7, 6],
        [3, 6, 2],
        [0, 4, 7],
        [0, 7, 3],
        [1, 2, 6],
        [1, 6, 5],
    ];
    TriangleMesh::new(vertices, triangles).expect("valid cube")
}

/// The unit square `[0,1]² × {0}` as two triangles.
pub fn unit_square_mesh() -> TriangleMesh {
    TriangleMesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .expect("valid square")
}

/// `n` points on a sphere of radius `radius` (Fibonacci lattice) with
/// outward normals.
pub fn sphere_cloud(n: usize, radius: f64) -> PointCloudWithNormals {
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for i in 0..n {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let theta = golden * i as f64;
        let nrm = [r * theta.cos(), y, r * theta.sin()];
        normals.push(nrm);
        points.push(nrm.map(|c| c * radius));
    }
    PointCloudWithNormals::with_renormalized(points, normals).expect("valid sphere")
}

/// Regular grid of points on `[-h,h]² × {0}` with +z normals.
pub fn plane_cloud(per_side: usize, half: f64) -> PointCloudWithNormals {
    let mut points = Vec::new();
    for j in 0..per_side {
        for i in 0..per_side {
            let x = -half + 2.0 * half * i as f64 / (per_side - 1) as f64;
            let y = -half + 2.0 * half * j as f64 / (per_side - 1) as f64;
            points.push([x, y, 0.0]);
        }
    }
    let normals = vec![[0.0, 0.0, 1.0]; points.len()];
    PointCloudWithNormals::new(points, normals).expect("valid plane")
}

/// Triangulated graph surface `(x, y) ↦ embed(x, y)` over `[-1,1]²`, with
/// faces oriented so normals point along +z for a flat embedding.
pub fn patch_mesh(per_side: usize, embed: impl Fn(f64, f64) -> Point3) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(per_side * per_side);
    for j in 0..per_side {
        for i in 0..per_side {
            let x = -1.0 + 2.0 * i as f64 / (per_side - 1) as f64;
            let y = -1.0 + 2.0 * j as f64 / (per_side - 1) as f64;
            vertices.push(embed(x, y));
        }
    }
    let idx = |i: usize, j: usize| j * per_side + i;
    let mut triangles = Vec::new();
    for j in 0..per_side - 1 {
        for i in 0..per_side - 1 {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, triangles).expect("valid patch")
}

/// Asymmetric bump used for synthetic correspondence pairs. `variant`
/// selects one of two related embeddings sharing the (x, y) parameter.
pub fn bump_embedding(variant: usize) -> impl Fn(f64, f64) -> Point3 {
    move |x, y| {
        let bump = (-((x - 0.3).powi(2) + (y + 0.2).powi(2)) / 0.25).exp();
        match variant {
            0 => [x, 0.8 * y, 0.35 * bump + 0.1 * x],
            _ => [1.15 * x + 0.1 * y, 0.7 * y, 0.5 * bump - 0.05 * y],
        }
    }
}
