use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atlasforge::eval::{evaluate_reconstruction, EvalConfig};
use atlasforge::geometry::{load_shape, parse_obj, primitives, write_obj, Shape, ShapeSource, UvTransform};
use atlasforge::network::evaluate;
use atlasforge::sampler::{default_threshold, extract_domain, triangulate_domain};
use atlasforge::trainer::{Checkpoint, TrainConfig, Trainer, TrainingShape};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_atlasforge"));
    c.env("ATLASFORGE_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        for v in 0..2 {
            let mut mesh = primitives::patch_mesh(9, primitives::bump_embedding(v));
            // Keep the shapes off the origin and at different scales.
            for p in mesh.vertices.iter_mut() {
                p[0] = 3.0 * p[0] + 1.0 + v as f64;
                p[1] *= 3.0;
            }
            std::fs::write(dir.path().join(format!("patch{v}.obj")), write_obj(&mesh)).unwrap();
        }
        let cfg = TrainConfig {
            k: 16,
            m: 64,
            hidden_layers: 2,
            hidden_width: 16,
            latent_dim: 3,
            iterations: 4,
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
        .with_ablation_row(11)
        .unwrap();
        std::fs::write(dir.path().join("config.toml"), cfg.to_toml()).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "--threads".to_string(),
            "1".into(),
            "train".into(),
            "--config".into(),
            self.s("config.toml"),
            "--out".into(),
            self.s(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        args.push(self.s("patch0.obj"));
        args.push(self.s("patch1.obj"));
        bin().args(&args).output().unwrap()
    }

    fn training_shapes(&self) -> Vec<TrainingShape> {
        ["patch0", "patch1"]
            .iter()
            .map(|n| {
                let l = load_shape(&self.path(&format!("{n}.obj")), true).unwrap();
                TrainingShape {
                    name: n.to_string(),
                    source: ShapeSource::new(l.shape, false).unwrap(),
                    normalization: l.normalization,
                }
            })
            .collect()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn zero_iterations_writes_the_initial_state() {
    let f = Fixture::new();
    ok(&f.train("t0", &["--iterations", "0"]));
    let ck = Checkpoint::load(&f.path("t0/checkpoint.json")).unwrap();
    assert_eq!(ck.iteration, 0);
    assert_eq!(ck.optimizer.step, 0);
    let cfg = TrainConfig::from_path(&f.path("config.toml")).unwrap();
    let fresh = Trainer::new(cfg, f.training_shapes()).unwrap();
    assert_eq!(ck.atlas.to_flat(), fresh.atlas.to_flat());
    assert_eq!(ck.atlas.normalizations, fresh.atlas.normalizations);
    assert!(f.path("t0/density.svg").exists());
    assert_eq!(std::fs::read_to_string(f.path("t0/log.jsonl")).unwrap(), "");
}

#[test]
fn reruns_and_resumes_are_byte_identical() {
    let f = Fixture::new();
    let inputs = (read(&f.path("patch0.obj")), read(&f.path("config.toml")));
    ok(&f.train("a", &["--seed", "3"]));
    ok(&f.train("b", &["--seed", "3"]));
    for name in ["log.jsonl", "checkpoint.json", "config.toml", "density.svg"] {
        assert_eq!(read(&f.path(&format!("a/{name}"))), read(&f.path(&format!("b/{name}"))), "{name}");
    }
    assert_eq!(std::fs::read_to_string(f.path("a/log.jsonl")).unwrap().lines().count(), 4);
    assert_eq!((read(&f.path("patch0.obj")), read(&f.path("config.toml"))), inputs);

    ok(&f.train("c", &["--seed", "3", "--iterations", "2"]));
    let ck = f.s("c/checkpoint.json");
    ok(&f.train("c", &["--resume", &ck, "--iterations", "4"]));
    assert_eq!(read(&f.path("a/log.jsonl")), read(&f.path("c/log.jsonl")));
    assert_eq!(read(&f.path("a/checkpoint.json")), read(&f.path("c/checkpoint.json")));

    ok(&f.train("d", &["--seed", "4"]));
    assert_ne!(read(&f.path("a/log.jsonl")), read(&f.path("d/log.jsonl")));
}

#[test]
fn meshes_share_the_domain_and_match_phi() {
    let f = Fixture::new();
    ok(&f.train("t", &[]));
    let ck_path = f.s("t/checkpoint.json");
    let out = f.s("m");
    ok(&run(&[
        "mesh", &ck_path, "--resolution", "48", "--shape-id", "patch0", "--shape-id", "1", "--normalized", "--out", &out,
    ]));
    let load = |n: &str| match parse_obj(&std::fs::read_to_string(f.path(&format!("m/{n}.obj"))).unwrap()).unwrap() {
        Shape::Mesh(m) => m,
        Shape::Cloud(_) => panic!("mesh expected"),
    };
    let (a, b) = (load("patch0"), load("patch1"));
    assert_eq!(a.uvs, b.uvs);
    assert_eq!(a.triangles, b.triangles);
    assert!(!a.triangles.is_empty());
    assert!(f.path("m/domain.svg").exists());

    let ck = Checkpoint::load(Path::new(&ck_path)).unwrap();
    let atlas = &ck.atlas;
    let grid = extract_domain(&atlas.mixture, 48, default_threshold(&atlas.mixture)).unwrap();
    let domain = triangulate_domain(&grid);
    let uv = UvTransform::fit(&domain);
    for (i, mesh) in [(0, &a), (1, &b)] {
        let uvs = mesh.uvs.as_ref().unwrap();
        let x = ndarray::Array2::from_shape_fn((uvs.len(), 2), |(r, k)| uv.to_domain(uvs[r])[k]);
        let want = evaluate(&atlas.phi, atlas.phi_code(i), &x).unwrap();
        for (v, w) in mesh.vertices.iter().zip(want.rows()) {
            for k in 0..3 {
                assert!((v[k] - w[k]).abs() < 1e-9);
            }
        }
    }

    // Without --normalized the meshes come back in the input frame.
    let out2 = f.s("m2");
    ok(&run(&["mesh", &ck_path, "--resolution", "48", "--shape-id", "patch1", "--out", &out2]));
    let Shape::Mesh(c) = parse_obj(&std::fs::read_to_string(f.path("m2/patch1.obj")).unwrap()).unwrap() else {
        panic!("mesh expected")
    };
    let frame = atlas.normalizations[1];
    for (p, q) in c.vertices.iter().zip(&b.vertices) {
        let r = frame.apply(*p);
        assert!((0..3).all(|k| (r[k] - q[k]).abs() < 1e-9));
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let f = Fixture::new();
    ok(&f.train("t", &["--iterations", "1"]));
    let ck = f.s("t/checkpoint.json");
    let out = f.s("x");

    let high = run(&["mesh", &ck, "--tau", "1e9", "--out", &out]);
    assert_eq!(high.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&high.stderr).contains("lower --tau"));

    let missing = run(&["mesh", &f.s("nope.json"), "--out", &out]);
    assert_eq!(missing.status.code(), Some(1));

    std::fs::write(f.path("bad.toml"), "k = \"many\"\n").unwrap();
    let bad = bin()
        .args(["train", "--config", &f.s("bad.toml"), "--out", &out, &f.s("patch0.obj")])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));

    std::fs::write(f.path("broken.obj"), "v 0 0 0\nf 1 2 3\n").unwrap();
    let data = bin()
        .args(["train", "--config", &f.s("config.toml"), "--out", &out, &f.s("broken.obj")])
        .output()
        .unwrap();
    assert_eq!(data.status.code(), Some(3));

    let unknown = run(&["mesh", &ck, "--shape-id", "nothing", "--out", &out]);
    assert_eq!(unknown.status.code(), Some(3));
}

#[test]
fn eval_writes_scaled_metrics_per_target() {
    let f = Fixture::new();
    ok(&f.train("t", &[]));
    let out = f.s("e");
    ok(&run(&[
        "eval",
        &f.s("t/checkpoint.json"),
        &f.s("patch0.obj"),
        &f.s("patch1.obj"),
        "--mprime",
        "64",
        "--draws",
        "2",
        "--seed",
        "7",
        "--out",
        &out,
    ]));
    let csv = std::fs::read_to_string(f.path("e/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("e/metrics.json")).unwrap()).unwrap();
    let rows = json.as_array().unwrap();
    assert_eq!(rows[1]["shape"], "patch1");
    assert_eq!(rows[1]["method"], "row11");
    assert_eq!(rows[1]["seed"], 7);

    let ck = Checkpoint::load(&f.path("t/checkpoint.json")).unwrap();
    let shapes = f.training_shapes();
    let cfg = EvalConfig { m_prime: 64, draws: 2, seed: 7 };
    let r = evaluate_reconstruction(&ck.atlas, true, 1, &shapes[1].source, &cfg).unwrap();
    let got = rows[1]["emd"].as_f64().unwrap();
    assert!((got - r.metrics.emd / 1e-2).abs() <= 1e-9 * got.abs().max(1.0), "{got} vs {}", r.metrics.emd);
}

#[test]
fn correspond_emits_one_row_per_keypoint() {
    let f = Fixture::new();
    ok(&f.train("t", &[]));
    let mut csv = String::from("shape_id,keypoint_id,x,y,z\n");
    for (i, p) in [[1.2, 0.3, 0.0], [2.0, -0.5, 0.1], [2.5, 1.0, 0.0]].iter().enumerate() {
        csv += &format!("patch0,k{i},{},{},{}\n", p[0], p[1], p[2]);
        csv += &format!("patch1,k{i},{},{},{}\n", p[0] + 1.0, p[1], p[2]);
    }
    std::fs::write(f.path("kp.csv"), csv).unwrap();
    let out = f.s("c");
    ok(&run(&[
        "correspond",
        &f.s("t/checkpoint.json"),
        "--keypoints",
        &f.s("kp.csv"),
        "--source",
        "patch0",
        "--target",
        "patch1",
        "--source-shape",
        &f.s("patch0.obj"),
        "--method",
        "both",
        "--samples",
        "500",
        "--out",
        &out,
    ]));
    for m in ["chart", "sampling"] {
        let text = std::fs::read_to_string(f.path(&format!("c/correspond_{m}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "{m}");
        assert!(lines[0].starts_with("keypoint_id"));
        assert!(lines[1].starts_with("k0,"));
    }
    let no_shape = run(&[
        "correspond",
        &f.s("t/checkpoint.json"),
        "--keypoints",
        &f.s("kp.csv"),
        "--source",
        "patch0",
        "--target",
        "patch1",
        "--out",
        &out,
    ]);
    assert_eq!(no_shape.status.code(), Some(2));
}

#[test]
fn domain_command_writes_grid_svg_and_obj() {
    let f = Fixture::new();
    ok(&f.train("t", &["--iterations", "1"]));
    let out = f.s("d");
    ok(&run(&["domain", &f.s("t/checkpoint.json"), "--resolution", "32", "--out", &out]));
    let grid = atlasforge::sampler::read_grid(&f.path("d/domain.grid")).unwrap();
    assert_eq!(grid.resolution, 32);
    assert!(std::fs::read_to_string(f.path("d/domain.svg")).unwrap().starts_with("<svg") ||
        std::fs::read_to_string(f.path("d/domain.svg")).unwrap().contains("<svg"));
    assert!(parse_obj(&std::fs::read_to_string(f.path("d/domain.obj")).unwrap()).is_ok());
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_sign() {
    let good = run(&["gradcheck", "--seeds", "2"]);
    ok(&good);
    let text = String::from_utf8_lossy(&good.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
    let bad = run(&["gradcheck", "--seeds", "1", "--flip-sign", "loss_cycle"]);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL loss_cycle"));
}
