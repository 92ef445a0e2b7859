//! Shared fixtures and measurement helpers for integration tests.
#![allow(dead_code)]

pub mod oracles;

use atlasforge::geometry::{
    closest_point_on_triangle, primitives, reconstruction_mesh, Point3, PointCloudWithNormals, SampleSet, Shape, ShapeSource,
    TriangleMesh,
};
use atlasforge::sampler::{default_threshold, extract_domain, triangulate_domain, Domain2DMesh, DomainGrid};
use atlasforge::trainer::{AtlasCollection, LogRecord, TrainConfig, Trainer, TrainingShape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn training_shape(name: &str, mut shape: Shape) -> TrainingShape {
    let normalization = shape.normalize().expect("shape is not degenerate");
    TrainingShape {
        name: name.into(),
        source: ShapeSource::new(shape, false).expect("shape has area"),
        normalization,
    }
}

pub fn cube() -> TrainingShape {
    training_shape("cube", Shape::Mesh(primitives::cube_mesh(1.0)))
}

pub fn sphere(n: usize) -> TrainingShape {
    training_shape("sphere", Shape::Cloud(primitives::sphere_cloud(n, 1.0)))
}

/// Desk-scale configuration for a ladder row.
pub fn desk(k: usize, m: usize, layers: usize, width: usize, row: u32, seed: u64, iterations: u64) -> TrainConfig {
    TrainConfig {
        k,
        m,
        hidden_layers: layers,
        hidden_width: width,
        seed,
        iterations,
        ..TrainConfig::default()
    }
    .with_ablation_row(row)
    .expect("row in range")
}

pub fn train(cfg: TrainConfig, shapes: Vec<TrainingShape>) -> (Trainer, Vec<LogRecord>) {
    let mut t = Trainer::new(cfg, shapes).expect("valid setup");
    let n = t.config.iterations;
    let log = t.run(n, |_, _| Ok(())).expect("training stays finite");
    (t, log)
}

pub fn domain(atlas: &AtlasCollection, resolution: usize) -> (DomainGrid, Domain2DMesh) {
    let grid = extract_domain(&atlas.mixture, resolution, default_threshold(&atlas.mixture)).expect("domain");
    let mesh = triangulate_domain(&grid);
    (grid, mesh)
}

/// Reconstruction of `shape` over the extracted domain, normalized frame.
pub fn reconstruction(atlas: &AtlasCollection, shape: usize, domain: &Domain2DMesh) -> TriangleMesh {
    reconstruction_mesh(domain, &atlas.phi, atlas.phi_code(shape), None).expect("phi evaluates").0
}

/// Squared distance from each point to the nearest triangle of `mesh`.
pub fn sq_distances_to_mesh(mesh: &TriangleMesh, points: &[Point3]) -> Vec<f64> {
    points
        .iter()
        .map(|&p| {
            mesh.triangles
                .iter()
                .map(|t| {
                    let q = closest_point_on_triangle(p, mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
                    (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

pub fn surface_samples(shape: &TrainingShape, n: usize, seed: u64) -> SampleSet {
    shape.source.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn rows3(set: &SampleSet) -> Vec<Point3> {
    set.points.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Axis scaling between the two shapes of the synthetic pair.
pub const PAIR_SCALE: Point3 = [1.3, 0.8, 1.0];

fn scaled(p: Point3) -> Point3 {
    [p[0] * PAIR_SCALE[0], p[1] * PAIR_SCALE[1], p[2] * PAIR_SCALE[2]]
}

/// Unit sphere (`variant` 0) or the axis-scaled ellipsoid (`variant` 1).
pub fn ellipsoid_cloud(variant: usize, n: usize) -> PointCloudWithNormals {
    let c = primitives::sphere_cloud(n, 1.0);
    if variant == 0 {
        return c;
    }
    let points = c.points.iter().map(|&p| scaled(p)).collect();
    let normals = c
        .normals
        .iter()
        .map(|q| [q[0] / PAIR_SCALE[0], q[1] / PAIR_SCALE[1], q[2] / PAIR_SCALE[2]])
        .collect();
    PointCloudWithNormals::with_renormalized(points, normals).expect("valid cloud")
}

pub fn ellipsoid_pair() -> Vec<TrainingShape> {
    vec![
        training_shape("sphere", Shape::Cloud(ellipsoid_cloud(0, 5000))),
        training_shape("ellipsoid", Shape::Cloud(ellipsoid_cloud(1, 5000))),
    ]
}

/// Keypoints on the sphere and their exact images on the ellipsoid.
pub fn pair_keypoints() -> (Vec<Point3>, Vec<Point3>) {
    let p = primitives::sphere_cloud(36, 1.0).points;
    let q = p.iter().map(|&x| scaled(x)).collect();
    (p, q)
}
