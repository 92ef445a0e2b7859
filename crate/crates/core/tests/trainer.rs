mod common;

use atlasforge::geometry::{primitives, Shape};
use atlasforge::trainer::{configure_ablation, Checkpoint, ParamGroup, TrainConfig, Trainer};
use common::*;

fn plane() -> atlasforge::trainer::TrainingShape {
    training_shape("plane", Shape::Mesh(primitives::unit_square_mesh()))
}

fn small(row: u32, seed: u64, iterations: u64) -> TrainConfig {
    desk(64, 256, 2, 32, row, seed, iterations)
}

#[test]
fn plane_loss_drops_by_two_orders() {
    let (_, log) = train(small(6, 0, 2000), vec![plane()]);
    let first = log[0].report.loss_6d.unwrap();
    let tail = log[log.len() - 50..].iter().map(|r| r.report.loss_6d.unwrap()).sum::<f64>() / 50.0;
    println!("plane loss_6d {first:.3e} -> {tail:.3e} ({:.2}%)", 100.0 * tail / first);
    assert!(tail < 0.01 * first, "{tail} vs {first}");
}

#[test]
fn windowed_loss_decreases_on_the_plane() {
    let (_, log) = train(small(11, 1, 600), vec![plane()]);
    let windows: Vec<f64> = log.chunks(150).map(|w| w.iter().map(|r| r.report.total).sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "{windows:?}");
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let (a, la) = train(small(11, 5, 30), vec![plane(), cube()]);
    let (b, lb) = train(small(11, 5, 30), vec![plane(), cube()]);
    assert_eq!(la, lb);
    assert_eq!(a.atlas.to_flat(), b.atlas.to_flat());
    let (c, _) = train(small(11, 6, 30), vec![plane(), cube()]);
    assert_ne!(a.atlas.to_flat(), c.atlas.to_flat());
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let shapes = || vec![plane(), cube()];
    let (full, log_full) = train(small(11, 2, 40), shapes());

    let mut half = Trainer::new(small(11, 2, 40), shapes()).unwrap();
    let mut log = half.run(17, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    half.checkpoint().save(&path).unwrap();
    drop(half);

    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.iteration, 17);
    let mut resumed = Trainer::resume(ck, shapes()).unwrap();
    log.extend(resumed.run(23, |_, _| Ok(())).unwrap());
    assert_eq!(log, log_full);
    assert_eq!(resumed.atlas.to_flat(), full.atlas.to_flat());
    assert_eq!(resumed.optimizer.m, full.optimizer.m);
    assert_eq!(resumed.optimizer.v, full.optimizer.v);
    assert_eq!(resumed.checkpoint().to_json(), full.checkpoint().to_json());
}

#[test]
fn rows_switch_parameter_groups_and_terms() {
    for row in 6..=11 {
        let flags = configure_ablation(row).unwrap();
        let latent_dim = if row % 2 == 0 { 4 } else { 0 };
        let (t, log) = train(TrainConfig { latent_dim, ..small(row, 0, 3) }, vec![plane(), cube()]);
        assert_eq!(t.atlas.psi.is_some(), flags.use_chart, "row {row}");
        let layout = t.atlas.layout();
        assert_eq!(layout.range(ParamGroup::Psi).is_some(), flags.use_chart);
        let coded = t.config.latent_dim > 0;
        assert_eq!(layout.range(ParamGroup::PsiCode(1)).is_some(), flags.use_chart && coded);
        assert_eq!(layout.range(ParamGroup::PhiCode(1)).is_some(), coded);
        assert!(layout.range(ParamGroup::Means).is_some());
        let r = &log[2].report;
        assert_eq!(r.loss_cycle.is_some(), flags.use_chart);
        assert_eq!(r.loss_iso.is_some(), flags.use_iso);
        assert_eq!(r.loss_rep.is_some(), flags.use_repulsion);
        assert_eq!(r.loss_2d.is_some(), flags.use_chart);
        // Normals, cycle and iso all need the Jacobian; plain φ does not.
        assert_eq!(r.tangent_passes == 0, row == 6, "row {row}");
    }
}

#[test]
fn point_positions_are_learned_in_every_row() {
    for row in [6, 8, 11] {
        let mut t = Trainer::new(small(row, 0, 20), vec![plane()]).unwrap();
        let before = t.atlas.mixture.clone();
        t.run(20, |_, _| Ok(())).unwrap();
        assert_ne!(t.atlas.mixture, before, "row {row}");
    }
}

#[test]
fn checkpoint_json_round_trips() {
    let (t, _) = train(small(11, 9, 5), vec![plane()]);
    let ck = t.checkpoint();
    let back = Checkpoint::from_json(&ck.to_json()).unwrap();
    assert_eq!(back.to_json(), ck.to_json());
    assert_eq!(back.atlas.to_flat(), t.atlas.to_flat());
    assert!(Checkpoint::from_json("{\"format_version\": 99}").is_err());
}

#[test]
fn configs_round_trip_and_reject_bad_values() {
    let cfg = small(9, 3, 10);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(TrainConfig { k: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { alpha: -1.0, ..cfg.clone() }.validate().is_err());
    assert!(configure_ablation(5).is_err() && configure_ablation(12).is_err());
}
