//! Independent reference implementations used as test oracles.

use atlasforge::autodiff::Tape;
use atlasforge::sampler::GaussianMixture2D;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn sq(x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize) -> f64 {
    x.row(i).iter().zip(y.row(j).iter()).map(|(a, b)| (a - b).powi(2)).sum()
}

/// O(n²) nearest neighbor, lowest index on ties. Returns indices and the
/// mean squared distance.
pub fn brute_nn(x: &Array2<f64>, y: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut total = 0.0;
    for i in 0..x.nrows() {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..y.nrows() {
            let d = sq(x, i, y, j);
            if d < best.1 {
                best = (j, d);
            }
        }
        idx.push(best.0);
        total += best.1;
    }
    (idx, total / x.nrows() as f64)
}

/// Minimum mean squared matching cost over all n! permutations (Heap's
/// algorithm), with the number of permutations visited.
pub fn exhaustive_emd(x: &Array2<f64>, y: &Array2<f64>) -> (f64, usize) {
    let n = x.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let cost = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| sq(x, i, y, j)).sum::<f64>() / n as f64;
    let mut best = cost(&perm);
    let mut visited = 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            visited += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best, visited)
}

pub fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut a = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ChaCha8Rng::seed_from_u64(seed);
    a.set_stream(1);
    b.set_stream(2);
    (a, b)
}

/// χ² goodness of fit of `n` mixture draws on a 50×50 grid over
/// [-2, 2.5]², against cell masses from the normal CDF. Sparse cells and
/// the outside region are pooled. Returns (statistic, cells, p-value).
pub fn mixture_histogram_p(means: &[[f64; 2]], n: usize, seed: u64) -> (f64, usize, f64) {
    let g = GaussianMixture2D::new(means.to_vec()).unwrap();
    let sigma = g.sigma();
    let (mut s, mut z) = rngs(seed);
    let pts = g.draw(n, &mut s, &mut z).unwrap().points(&g);

    let (lo, hi, bins) = (-2.0, 2.5, 50);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins * bins + 1];
    for p in pts.rows() {
        let i = ((p[0] - lo) / width).floor();
        let j = ((p[1] - lo) / width).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < bins && (j as usize) < bins {
            counts[j as usize * bins + i as usize] += 1;
        } else {
            counts[bins * bins] += 1;
        }
    }
    let mass_1d = |mu: f64, a: f64, b: f64| {
        let d = Normal::new(mu, sigma).unwrap();
        d.cdf(b) - d.cdf(a)
    };
    let mut expected = vec![0.0; bins * bins + 1];
    for j in 0..bins {
        for i in 0..bins {
            let (x0, y0) = (lo + i as f64 * width, lo + j as f64 * width);
            expected[j * bins + i] = means
                .iter()
                .map(|m| mass_1d(m[0], x0, x0 + width) * mass_1d(m[1], y0, y0 + width))
                .sum::<f64>()
                / means.len() as f64
                * n as f64;
        }
    }
    expected[bins * bins] = n as f64 - expected[..bins * bins].iter().sum::<f64>();

    // Pool sparse bins so every χ² cell expects at least 5 hits.
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut pool_obs, mut pool_exp) = (0.0, 0.0);
    for (&o, &e) in counts.iter().zip(&expected) {
        if e < 5.0 {
            pool_obs += o as f64;
            pool_exp += e;
        } else {
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pool_exp > 0.0 {
        stat += (pool_obs - pool_exp).powi(2) / pool_exp;
        cells += 1;
    }
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
    (stat, cells, p)
}

/// Average over reparameterized draws of d(mean x)/d(mean_k) for every
/// component, with the standard error of the expected value 1/K.
pub fn reparam_mean_gradient(means: &[[f64; 2]], m: usize, draws: usize, seed: u64) -> (Vec<[f64; 2]>, f64) {
    let g = GaussianMixture2D::new(means.to_vec()).unwrap();
    let k = means.len();
    let (mut s, mut z) = rngs(seed);
    let mut total = vec![[0.0; 2]; k];
    for _ in 0..draws {
        let draw = g.draw(m, &mut s, &mut z).unwrap();
        let tape = Tape::new();
        let (leaves, points) = g.sample_on_tape(&tape, &draw).unwrap();
        let xs: Vec<_> = points.iter().map(|p| p[0]).collect();
        let loss = atlasforge::autodiff::sum(&xs).scale(1.0 / m as f64);
        let grads = tape.backward(loss).unwrap();
        for (t, leaf) in total.iter_mut().zip(&leaves) {
            t[0] += grads.wrt(leaf[0]);
            t[1] += grads.wrt(leaf[1]);
        }
    }
    let p = 1.0 / k as f64;
    let se = (p * (1.0 - p) / (m * draws) as f64).sqrt();
    (total.iter().map(|t| [t[0] / draws as f64, t[1] / draws as f64]).collect(), se)
}
