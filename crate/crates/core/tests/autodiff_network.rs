use atlasforge::autodiff::{cross3, dot, norm, Dual2, Tape, Var};
use atlasforge::network::{
    evaluate, evaluate_phi6, forward_phi, forward_phi_with_normal, forward_psi, init_weights, LatentCode, MlpConfig,
    MlpWeights, NormalScale, TapedMlp,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Independent plain-f64 MLP forward pass: row-major weights (fan_in × fan_out)
/// followed by the bias, ReLU on hidden layers.
fn plain_forward(w: &MlpWeights, code: Option<&LatentCode>, x: &[f64]) -> Vec<f64> {
    let mut h: Vec<f64> = x.to_vec();
    if let Some(c) = code {
        h.extend_from_slice(&c.0);
    }
    let dims = w.config.layer_dims();
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let mut out = vec![0.0; fan_out];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, hi) in h.iter().enumerate() {
                acc += hi * w.params[offset + i * fan_out + j];
            }
            acc += w.params[offset + fan_in * fan_out + j];
            *o = if l + 1 < dims.len() { acc.max(0.0) } else { acc };
        }
        offset += fan_in * fan_out + fan_out;
        h = out;
    }
    h
}

#[test]
fn random_two_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n_in, n_hidden) = (3, 5);
    let params: Vec<f64> = (0..n_in * n_hidden + 2 * n_hidden + 1)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();

    let plain = |p: &[f64]| {
        let mut out = p[n_in * n_hidden + 2 * n_hidden];
        for j in 0..n_hidden {
            let mut z = p[n_in * n_hidden + j];
            for i in 0..n_in {
                z += p[i * n_hidden + j] * x[i];
            }
            out += p[n_in * n_hidden + n_hidden + j] * z.tanh();
        }
        out
    };

    let tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|&p| tape.record(p).unwrap()).collect();
    let xs: Vec<Var> = x.iter().map(|&v| tape.constant(v)).collect();
    let mut out = leaves[n_in * n_hidden + 2 * n_hidden];
    for j in 0..n_hidden {
        let mut z = leaves[n_in * n_hidden + j];
        for i in 0..n_in {
            z = z + leaves[i * n_hidden + j] * xs[i];
        }
        out = out + leaves[n_in * n_hidden + n_hidden + j] * z.tanh();
    }
    assert!((out.value() - plain(&params)).abs() < 1e-14);
    let grads = tape.backward(out).unwrap();

    let eps = 1e-5;
    for (k, leaf) in leaves.iter().enumerate() {
        let mut p = params.clone();
        p[k] += eps;
        let fp = plain(&p);
        p[k] -= 2.0 * eps;
        let fm = plain(&p);
        let fd = (fp - fm) / (2.0 * eps);
        let e = rel(grads.wrt(*leaf), fd);
        assert!(e < 1e-6, "parameter {k}: analytic {} vs fd {fd} (rel {e:.2e})", grads.wrt(*leaf));
    }
}

type Unary = fn(&[f64]) -> f64;

/// Each primitive as a function of a small input vector, evaluated on the tape
/// and in plain arithmetic.
fn primitive_cases() -> Vec<(&'static str, usize, Unary, for<'t> fn(&[Var<'t>]) -> Var<'t>)> {
    vec![
        ("add", 2, |x| x[0] + x[1], |v| v[0] + v[1]),
        ("sub", 2, |x| x[0] - x[1], |v| v[0] - v[1]),
        ("mul", 2, |x| x[0] * x[1], |v| v[0] * v[1]),
        ("div", 2, |x| x[0] / (x[1] + 3.0), |v| v[0].div(v[1].offset(3.0)).unwrap()),
        ("tanh", 1, |x| x[0].tanh(), |v| v[0].tanh()),
        ("relu", 1, |x| x[0].max(0.0), |v| v[0].relu()),
        ("exp", 1, |x| x[0].exp(), |v| v[0].exp()),
        ("sqrt", 1, |x| (x[0] + 3.0).sqrt(), |v| v[0].offset(3.0).sqrt().unwrap()),
        ("dot", 6, |x| x[0] * x[3] + x[1] * x[4] + x[2] * x[5], |v| dot(&v[..3], &v[3..])),
        (
            "cross3",
            6,
            |x| {
                let c = [x[1] * x[5] - x[2] * x[4], x[2] * x[3] - x[0] * x[5], x[0] * x[4] - x[1] * x[3]];
                c[0] + 2.0 * c[1] - 0.5 * c[2]
            },
            |v| {
                let c = cross3([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
                c[0] + c[1].scale(2.0) - c[2].scale(0.5)
            },
        ),
        ("norm", 3, |x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt(), |v| norm(v).unwrap()),
    ]
}

#[test]
fn every_primitive_matches_finite_differences_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-5;
    for (name, arity, plain, taped) in primitive_cases() {
        let mut done = 0;
        while done < 100 {
            let x: Vec<f64> = (0..arity).map(|_| rng.random_range(-2.0..2.0)).collect();
            if name == "relu" && x[0].abs() < 10.0 * eps {
                continue;
            }
            if name == "norm" && x.iter().map(|v| v * v).sum::<f64>() < 1e-2 {
                continue;
            }
            let tape = Tape::new();
            let vars: Vec<Var> = x.iter().map(|&v| tape.record(v).unwrap()).collect();
            let out = taped(&vars);
            assert!(rel(out.value(), plain(&x)) < 1e-14, "{name} value");
            let g = tape.backward(out).unwrap();
            for k in 0..arity {
                let mut p = x.clone();
                p[k] += eps;
                let fp = plain(&p);
                p[k] -= 2.0 * eps;
                let fd = (fp - plain(&p)) / (2.0 * eps);
                let a = g.wrt(vars[k]);
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-8),
                    "{name} input {k} at {x:?}: {a} vs {fd}"
                );
            }
            done += 1;
        }
    }
}

#[test]
fn chain_of_thousand_adds_replays_to_same_value() {
    let tape = Tape::new();
    let mut acc = tape.record(0.5).unwrap();
    let step = tape.record(0.001).unwrap();
    for _ in 0..1000 {
        acc = acc + step;
    }
    let recorded = tape.values();
    let replayed = tape.replay();
    assert_eq!(recorded, replayed);
    assert_eq!(acc.value(), replayed[acc.index()]);
    assert_eq!(tape.backward(acc).unwrap().wrt(step), 1000.0);
}

proptest! {
    /// f(u, v; a, b) = a·u²·v + b·u·v² + a·b·u. The reverse-mode gradient of
    /// the product of its two input tangents must equal the analytic mixed
    /// partials.
    #[test]
    fn gradient_of_tangents_matches_analytic_mixed_partials(
        u in -2.0f64..2.0, v in -2.0f64..2.0, a in -2.0f64..2.0, b in -2.0f64..2.0
    ) {
        let tape = Tape::new();
        let (ua, va) = (tape.record(u).unwrap(), tape.record(v).unwrap());
        let (aa, ba) = (tape.record(a).unwrap(), tape.record(b).unwrap());
        let du = Dual2::seed_u(ua);
        let dv = Dual2::seed_v(va);
        let f = (du * du * dv).scale_by(aa) + (du * dv * dv).scale_by(ba) + du.scale_by(aa * ba);
        let g = f.tangent_u * f.tangent_v;
        let grads = tape.backward(g).unwrap();

        let fu = 2.0 * a * u * v + b * v * v + a * b;
        let fv = a * u * u + 2.0 * b * u * v;
        prop_assert!((f.tangent_u.value() - fu).abs() < 1e-12);
        prop_assert!((f.tangent_v.value() - fv).abs() < 1e-12);
        let dga = (2.0 * u * v + b) * fv + fu * (u * u);
        let dgb = (v * v + a) * fv + fu * (2.0 * u * v);
        let dgu = (2.0 * a * v) * fv + fu * (2.0 * a * u + 2.0 * b * v);
        let dgv = (2.0 * a * u + 2.0 * b * v) * fv + fu * (2.0 * b * u);
        for (got, want) in [(grads.wrt(aa), dga), (grads.wrt(ba), dgb), (grads.wrt(ua), dgu), (grads.wrt(va), dgv)] {
            prop_assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "{} vs {}", got, want);
        }
    }
}

fn random_phi(seed: u64, latent: usize) -> (MlpWeights, Option<LatentCode>) {
    let w = init_weights(MlpConfig::phi(3, 16, latent), seed).unwrap();
    let code = (latent > 0).then(|| LatentCode::random(latent, &mut ChaCha8Rng::seed_from_u64(seed + 100)));
    (w, code)
}

#[test]
fn taped_and_batched_forward_match_plain_implementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (seed, latent) in [(1, 0), (2, 4)] {
        let (w, code) = random_phi(seed, latent);
        let pts: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let batch = ndarray::Array2::from_shape_fn((pts.len(), 2), |(r, k)| pts[r][k]);
        let batched = evaluate(&w, code.as_ref(), &batch).unwrap();
        for (r, p) in pts.iter().enumerate() {
            let want = plain_forward(&w, code.as_ref(), p);
            let tape = Tape::new();
            let net = TapedMlp::record(&tape, &w, code.as_ref()).unwrap();
            let x = [tape.record(p[0]).unwrap(), tape.record(p[1]).unwrap()];
            let got = forward_phi(&net, x).unwrap();
            for k in 0..3 {
                assert!((got[k].value() - want[k]).abs() < 1e-12);
                assert!((batched[[r, k]] - want[k]).abs() < 1e-12);
            }
        }
    }

    let alpha = NormalScale::DEFAULT;
    let psi = init_weights(MlpConfig::psi(2, 16, 3), 9).unwrap();
    let code = LatentCode::random(3, &mut rng);
    for _ in 0..20 {
        let n: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let x6: [f64; 6] = std::array::from_fn(|k| if k < 3 { rng.random_range(-0.5..0.5) } else { alpha.get() * n[k - 3] / len });
        let want = plain_forward(&psi, Some(&code), &x6);
        let tape = Tape::new();
        let net = TapedMlp::record(&tape, &psi, Some(&code)).unwrap();
        let got = forward_psi(&net, x6.map(|v| tape.record(v).unwrap()), alpha).unwrap();
        for k in 0..2 {
            assert!((got[k].value() - want[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn jacobian_and_normal_match_finite_differences_of_phi() {
    let (w, code) = random_phi(4, 2);
    let alpha = NormalScale::DEFAULT;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let eps = 1e-5;
    for _ in 0..50 {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let tape = Tape::new();
        let net = TapedMlp::record(&tape, &w, code.as_ref()).unwrap();
        let x = [tape.record(p[0]).unwrap(), tape.record(p[1]).unwrap()];
        let out = forward_phi_with_normal(&net, x, alpha).unwrap();
        let plain_point = forward_phi(&net, x).unwrap();
        for k in 0..3 {
            assert_eq!(out.point[k].value().to_bits(), plain_point[k].value().to_bits());
        }
        let j = out.jacobian();
        for (axis, col) in [(0, j.du), (1, j.dv)] {
            let mut a = p;
            a[axis] += eps;
            let fp = plain_forward(&w, code.as_ref(), &a);
            a[axis] -= 2.0 * eps;
            let fm = plain_forward(&w, code.as_ref(), &a);
            for k in 0..3 {
                let fd = (fp[k] - fm[k]) / (2.0 * eps);
                assert!((col[k] - fd).abs() <= 1e-4 * col[k].abs().max(fd.abs()).max(1e-6), "J[{k},{axis}]");
            }
        }
        let n = out.normal.expect("random net is not degenerate here");
        let len = n.iter().map(|v| v.value().powi(2)).sum::<f64>().sqrt();
        assert!((len - alpha.get()).abs() < 1e-9);
    }
}

#[test]
fn six_dimensional_output_gradient_matches_finite_differences() {
    let (w, code) = random_phi(6, 0);
    let alpha = NormalScale::DEFAULT;
    let uv = [0.3, -0.4];
    let coeffs = [0.7, -1.1, 0.4, 30.0, -20.0, 50.0];
    let scalar = |w: &MlpWeights| {
        let v = evaluate_phi6(w, code.as_ref(), &ndarray::arr2(&[uv])).unwrap();
        (0..3).map(|k| coeffs[k] * v.points[[0, k]] + coeffs[k + 3] * alpha.get() * v.unit_normals[[0, k]]).sum::<f64>()
    };
    let tape = Tape::new();
    let net = TapedMlp::record(&tape, &w, code.as_ref()).unwrap();
    let out = forward_phi_with_normal(&net, uv.map(|u| tape.constant(u)), alpha).unwrap();
    let n = out.normal.unwrap();
    let mut f = tape.constant(0.0);
    for k in 0..3 {
        f = f + out.point[k].scale(coeffs[k]) + n[k].scale(coeffs[k + 3]);
    }
    assert!((f.value() - scalar(&w)).abs() < 1e-12);
    let grads = tape.backward(f).unwrap();
    let eps = 1e-5;
    let mut checked = 0;
    for (k, leaf) in net.weights.iter().enumerate() {
        let mut p = w.clone();
        p.params[k] += eps;
        let fp = scalar(&p);
        p.params[k] -= 2.0 * eps;
        let fm = scalar(&p);
        let fd = (fp - fm) / (2.0 * eps);
        let a = grads.wrt(*leaf);
        assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "weight {k}: {a} vs {fd}");
        checked += usize::from(a != 0.0);
    }
    assert!(checked > w.params.len() / 4);
}

#[test]
fn zero_latent_code_reduces_to_unconditioned_network() {
    let cond = init_weights(MlpConfig::phi(2, 8, 3), 12).unwrap();
    let single_cfg = MlpConfig::phi(2, 8, 0);
    let first = cond.layout()[0];
    // Drop the weight rows fed by the code (inputs 2..5 of layer 1).
    let mut params = Vec::new();
    params.extend_from_slice(&cond.params[first.weight_offset..first.weight_offset + 2 * first.fan_out]);
    params.extend_from_slice(&cond.params[first.bias_offset..]);
    let single = MlpWeights::from_params(single_cfg, params).unwrap();
    let x = ndarray::arr2(&[[0.1, 0.2], [-0.7, 0.4], [0.9, -0.9]]);
    let a = evaluate(&cond, Some(&LatentCode::zeros(3)), &x).unwrap();
    let b = evaluate(&single, None, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn square_layers_preserve_unit_variance_at_init() {
    let cfg = MlpConfig::phi(4, 256, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..3 {
        let w = init_weights(cfg, seed).unwrap();
        for layer in w.layout().iter().filter(|l| l.fan_in == l.fan_out) {
            let weight = w.weight(layer);
            let bias = w.bias(layer);
            let mut sum = 0.0;
            let mut sq = 0.0;
            let draws = 200;
            for _ in 0..draws {
                let x = ndarray::Array2::from_shape_fn((1, layer.fan_in), |_| rng.sample::<f64, _>(StandardNormal));
                let z = x.dot(&weight) + bias;
                sum += z.sum();
                sq += z.mapv(|v| v * v).sum();
            }
            let n = (draws * layer.fan_out) as f64;
            let var = sq / n - (sum / n).powi(2);
            assert!(var > 0.5 && var < 2.0, "seed {seed}: variance {var}");
        }
    }
}

#[test]
fn opposite_normals_give_inputs_two_alpha_apart() {
    let alpha = NormalScale::DEFAULT;
    let a = [0.1, 0.2, 0.3, 0.0, 0.0, alpha.get()];
    let b = [0.1, 0.2, 0.3, 0.0, 0.0, -alpha.get()];
    let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!((d - 2.0 * alpha.get()).abs() < 1e-15);
    let psi = init_weights(MlpConfig::psi(2, 8, 0), 1).unwrap();
    let ya = plain_forward(&psi, None, &a);
    let yb = plain_forward(&psi, None, &b);
    assert_ne!(ya, yb);
}
