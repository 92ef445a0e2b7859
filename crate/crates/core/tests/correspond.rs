mod common;

use atlasforge::eval::{correspond_chart, correspond_sampling, domain_samples, CorrespondenceResult};
use atlasforge::geometry::{primitives, Point3, Shape};
use atlasforge::network::{evaluate, evaluate_psi};
use atlasforge::trainer::{AtlasCollection, TrainConfig, Trainer};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SHIFT: Point3 = [2.0, -1.0, 0.5];

fn shifted_square(by: Point3) -> Shape {
    let mut m = primitives::unit_square_mesh();
    for v in m.vertices.iter_mut() {
        for k in 0..3 {
            v[k] += by[k];
        }
    }
    Shape::Mesh(m)
}

fn keypoints() -> Vec<Point3> {
    let mut out = Vec::new();
    for j in 0..5 {
        for i in 0..5 {
            out.push([0.1 + 0.2 * i as f64, 0.1 + 0.2 * j as f64, 0.0]);
        }
    }
    out
}

fn translated(points: &[Point3]) -> Vec<Point3> {
    points.iter().map(|p| [p[0] + SHIFT[0], p[1] + SHIFT[1], p[2] + SHIFT[2]]).collect()
}

fn dist(a: Point3, b: Point3) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

fn planes_trainer(cfg: TrainConfig) -> Trainer {
    let shapes = vec![
        training_shape("a", shifted_square([0.0; 3])),
        training_shape("b", shifted_square(SHIFT)),
    ];
    Trainer::new(cfg, shapes).unwrap()
}

/// RMS over surface samples of the 3D part of φ(ψ(x)) − x, in input units.
fn cycle_rms(atlas: &AtlasCollection, shape: usize, target: &atlasforge::trainer::TrainingShape) -> f64 {
    let set = target.source.sample(2000, &mut ChaCha8Rng::seed_from_u64(21));
    let x6 = set.embed6(atlas.alpha);
    let uv = evaluate_psi(atlas.psi.as_ref().unwrap(), atlas.psi_code(shape), &x6, atlas.alpha).unwrap();
    let back = evaluate(&atlas.phi, atlas.phi_code(shape), &uv).unwrap();
    let sq: f64 = back
        .rows()
        .into_iter()
        .zip(set.points.rows())
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    (sq / 2000.0).sqrt() / atlas.normalizations[shape].scale
}

#[test]
fn sampling_transfer_picks_the_nearest_image() {
    // Untrained and code-free: φ is shared, so the oracle is a brute-force
    // nearest image in the source frame carried over by the translation.
    let t = planes_trainer(desk(32, 64, 2, 16, 9, 3, 0));
    let atlas = &t.atlas;
    let domain = domain_samples(atlas, true, 3000, &mut ChaCha8Rng::seed_from_u64(4));
    let p = keypoints();
    let q = correspond_sampling(atlas, 0, 1, &p, &domain).unwrap();
    let images: Vec<Point3> = evaluate(&atlas.phi, None, &domain)
        .unwrap()
        .rows()
        .into_iter()
        .map(|r| atlas.normalizations[0].invert([r[0], r[1], r[2]]))
        .collect();
    for (pi, qi) in p.iter().zip(&q) {
        let best = images.iter().copied().fold((f64::INFINITY, [0.0; 3]), |acc, im| {
            let d = dist(*pi, im);
            if d < acc.0 {
                (d, im)
            } else {
                acc
            }
        });
        let want = translated(&[best.1])[0];
        assert!(dist(*qi, want) < 1e-9);
    }

    // More samples can only bring the selection closer.
    let fewer = domain.slice(ndarray::s![..300, ..]).to_owned();
    let q_few = correspond_sampling(atlas, 0, 0, &p, &fewer).unwrap();
    let q_all = correspond_sampling(atlas, 0, 0, &p, &domain).unwrap();
    for ((pi, a), b) in p.iter().zip(&q_few).zip(&q_all) {
        assert!(dist(*pi, *b) <= dist(*pi, *a) + 1e-12);
    }
}

#[test]
fn chart_transfer_on_translated_planes_tracks_the_cycle_error() {
    let cfg = TrainConfig { latent_dim: 4, ..desk(128, 512, 2, 32, 10, 0, 1500) };
    let mut t = planes_trainer(cfg);
    t.run(1500, |_, _| Ok(())).unwrap();
    let atlas = &t.atlas;
    let p = keypoints();
    let normals = vec![[0.0, 0.0, 1.0]; p.len()];
    let gt = translated(&p);
    let chart = CorrespondenceResult::new(correspond_chart(atlas, 0, 1, &p, &normals).unwrap(), gt.clone());
    let rms = cycle_rms(atlas, 0, &t.shapes()[0]).max(cycle_rms(atlas, 1, &t.shapes()[1]));
    println!("chart mean L2 {:.3e}, cycle rms {rms:.3e}", chart.mean_error);
    assert!(chart.mean_error <= 3.0 * rms, "{} vs {rms}", chart.mean_error);

    let domain = domain_samples(atlas, true, 20_000, &mut ChaCha8Rng::seed_from_u64(8));
    let sampled = correspond_sampling(atlas, 0, 1, &p, &domain).unwrap();
    let gap = sampled.iter().zip(&chart.transferred).map(|(a, b)| dist(*a, *b)).sum::<f64>() / p.len() as f64;
    println!("sampling vs chart {gap:.3e}");
    assert!(gap <= 2.0 * rms, "{gap} vs {rms}");
}

#[test]
fn chart_transfer_requires_a_chart() {
    let t = planes_trainer(desk(16, 32, 2, 8, 9, 0, 0));
    let p = keypoints();
    assert!(correspond_chart(&t.atlas, 0, 1, &p, &vec![[0.0, 0.0, 1.0]; p.len()]).is_err());
    assert!(correspond_sampling(&t.atlas, 0, 2, &p, &ndarray::Array2::zeros((4, 2))).is_err());
}
