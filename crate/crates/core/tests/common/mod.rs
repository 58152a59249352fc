#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarlab::generator::{Generator, GeneratorConfig, ModelState, PositionalMode};
use sarlab::pyramid::{LatentPyramid, ScaleSchedule, TokenMap};
use sarlab::{Grid, Scalar};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(
    schedule: &[usize],
    depth: usize,
    width: usize,
    heads: usize,
    vocab: usize,
    latent_dim: usize,
) -> GeneratorConfig {
    GeneratorConfig {
        schedule: ScaleSchedule::new(schedule.to_vec()).unwrap(),
        depth,
        width,
        heads,
        vocab,
        latent_dim,
        classes: 3,
        label_drop_prob: 0.1,
        seed: 7,
        positional: PositionalMode::PerPosition,
    }
}

/// Every parameter drawn uniformly from `[-amp, amp]`; the zero-initialised
/// head would otherwise hide most of the network.
pub fn random_generator<S: Scalar>(config: &GeneratorConfig, seed: u64, amp: f64) -> Generator<S> {
    let n = config.param_count();
    let mut r = rng(seed);
    let values: Vec<S> = (0..n).map(|_| S::of(r.random_range(-amp..amp))).collect();
    let state = ModelState::from_values(config, values).unwrap();
    Generator::from_state(config.clone(), state).unwrap()
}

pub fn random_grid<S: Scalar>(side: usize, channels: usize, r: &mut ChaCha8Rng) -> Grid<S> {
    Grid::from_fn(side, channels, |_, _, _| S::of(r.random_range(-1.0..1.0)))
}

pub fn random_pyramid<S: Scalar>(
    schedule: &ScaleSchedule,
    dim: usize,
    r: &mut ChaCha8Rng,
) -> LatentPyramid<S> {
    let maps = schedule
        .resolutions()
        .iter()
        .map(|&h| random_grid(h, dim, r))
        .collect();
    LatentPyramid::new(schedule.clone(), maps).unwrap()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max over entries of `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Top-k/top-p by exhaustive search: among all subsets that contain every
/// entry ranked above any of their members (logit descending, index ascending),
/// have at most `k` members and carry at least `p` of the top-k mass (or
/// exactly `k` members), return the smallest.
pub fn filter_oracle(logits: &[f64], k: Option<usize>, p: f64) -> Vec<bool> {
    let v = logits.len();
    let k = k.unwrap_or(v).clamp(1, v);
    let above = |a: usize, b: usize| logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    let closed = |mask: u32| {
        (0..v).all(|i| mask & (1 << i) == 0 || (0..v).all(|j| !above(j, i) || mask & (1 << j) != 0))
    };
    let size = |mask: u32| mask.count_ones() as usize;
    let topk = (1u32..1 << v).find(|&m| size(m) == k && closed(m)).unwrap();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w = |i: usize| (logits[i] - max).exp();
    let total: f64 = (0..v).filter(|&i| topk & (1 << i) != 0).map(w).sum();
    let mut best: Option<u32> = None;
    for m in 1u32..1 << v {
        if m & !topk != 0 || !closed(m) {
            continue;
        }
        let mass: f64 = (0..v).filter(|&i| m & (1 << i) != 0).map(w).sum::<f64>() / total;
        if (mass >= p || m == topk) && best.is_none_or(|b| size(m) < size(b)) {
            best = Some(m);
        }
    }
    let best = best.unwrap();
    (0..v).map(|i| best & (1 << i) != 0).collect()
}

/// Row-major `n × n` product.
pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    c
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap();
        for j in 0..n {
            m.swap(col * n + j, piv * n + j);
            inv.swap(col * n + j, piv * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for j in 0..n {
                    m[r * n + j] -= f * m[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    inv
}

/// Principal square root by the Denman-Beavers iteration (no eigendecomposition).
pub fn denman_beavers(a: &[f64], n: usize) -> Vec<f64> {
    let mut y = a.to_vec();
    let mut z: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    for _ in 0..100 {
        let yi = inverse(&y, n);
        let zi = inverse(&z, n);
        let ny: Vec<f64> = y.iter().zip(&zi).map(|(p, q)| 0.5 * (p + q)).collect();
        let nz: Vec<f64> = z.iter().zip(&yi).map(|(p, q)| 0.5 * (p + q)).collect();
        let delta = max_abs(&ny, &y);
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

/// Random symmetric positive definite matrix `B Bᵀ + δI`.
pub fn random_spd(n: usize, delta: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let b: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| b[i * n + k] * b[j * n + k]).sum::<f64>()
                + if i == j { delta } else { 0.0 };
        }
    }
    m
}

/// Mean token cross-entropy over the positions selected by `only` (all by default).
pub fn ce_oracle(logits: &Grid<f64>, tokens: &TokenMap, only: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for p in 0..logits.positions() {
        if only.is_some_and(|m| !m[p]) {
            continue;
        }
        let z = logits.vector(p);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[tokens.indices()[p]];
        n += 1.0;
    }
    total / n
}

/// Mean squared error per element.
pub fn mse_oracle(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    let s = a.as_slice();
    s.iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / s.len() as f64
}
