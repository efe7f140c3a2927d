//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilenpu::gpt2::{data, Gpt2, ModelConfig, ParamStore};
use tilenpu::kernel::{f64_gemm, sequential_gemm};
use tilenpu::{Backend, Bf16, CostConfig, Grid, LayoutTag, Matrix, OffloadContext, ProblemSize, TileShape};

pub fn toy_batch(c: &ModelConfig) -> (Vec<usize>, Vec<usize>) {
    let corpus = data::synthetic_corpus(4 * c.seq_len, c.vocab_size, 1);
    data::batch(&corpus, 0, c.seq_len).unwrap()
}

pub fn toy_model(params: ParamStore, backend: Backend) -> Gpt2 {
    let ctx = OffloadContext::init(&[], TileShape::default(), Grid::default(), CostConfig::default(), backend).unwrap();
    Gpt2::new(params, ctx)
}

/// Straight-line f64 evaluation of the mean loss over raw tensors in
/// [`ParamStore::tensors`] order.
pub fn oracle_loss(c: &ModelConfig, w: &[Vec<f64>], tokens: &[usize], targets: &[usize]) -> f64 {
    let (t, d, v, nh, ff) = (c.seq_len, c.d_model, c.vocab_size, c.n_heads, c.d_ff);
    let hs = d / nh;
    let ln = |x: &[Vec<f64>], g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let m = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
                let s = 1.0 / (var + 1e-5).sqrt();
                (0..d).map(|i| (r[i] - m) * s * g[i] + b[i]).collect()
            })
            .collect()
    };
    // weights are stored column-major: element (i, o) at o * rows + i
    let lin = |x: &[Vec<f64>], wt: &[f64], b: Option<&[f64]>, rows: usize, cols: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                (0..cols)
                    .map(|o| (0..rows).map(|i| r[i] * wt[o * rows + i]).sum::<f64>() + b.map_or(0.0, |b| b[o]))
                    .collect()
            })
            .collect()
    };
    let mut x: Vec<Vec<f64>> = (0..t).map(|p| (0..d).map(|i| w[0][tokens[p] * d + i] + w[1][p * d + i]).collect()).collect();
    for l in 0..c.n_layers {
        let q = &w[2 + 12 * l..2 + 12 * (l + 1)];
        let h1 = ln(&x, &q[0], &q[1]);
        let qkv = lin(&h1, &q[2], Some(&q[3]), d, 3 * d);
        let mut y = vec![vec![0.0; d]; t];
        for h in 0..nh {
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..hs).map(|e| qkv[i][h * hs + e] * qkv[j][d + h * hs + e]).sum::<f64>() / (hs as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s.iter().map(|a| (a - mx).exp()).sum();
                for j in 0..=i {
                    let a = (s[j] - mx).exp() / z;
                    for e in 0..hs {
                        y[i][h * hs + e] += a * qkv[j][2 * d + h * hs + e];
                    }
                }
            }
        }
        let proj = lin(&y, &q[4], Some(&q[5]), d, d);
        let x2: Vec<Vec<f64>> = x.iter().zip(&proj).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let h2 = ln(&x2, &q[6], &q[7]);
        let f = lin(&h2, &q[8], Some(&q[9]), d, ff);
        let g: Vec<Vec<f64>> = f
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&a| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a * a * a)).tanh()))
                    .collect()
            })
            .collect();
        let out = lin(&g, &q[10], Some(&q[11]), ff, d);
        x = x2.iter().zip(&out).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
    }
    let n = w.len();
    let hf = ln(&x, &w[n - 2], &w[n - 1]);
    let logits = lin(&hf, &w[0], None, d, v);
    let mut loss = 0.0;
    for (r, &y) in logits.iter().zip(targets) {
        let mx = r.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + r.iter().map(|a| (a - mx).exp()).sum::<f64>().ln();
        loss += lse - r[y];
    }
    loss / t as f64
}

pub fn as_f64(p: &ParamStore) -> Vec<Vec<f64>> {
    p.tensors().into_iter().map(|(_, t)| t.iter().map(|&x| x as f64).collect()).collect()
}


pub const GRAD_FLOOR: f64 = 1e-9;

pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Central differences of the f64 oracle at `samples` random parameters,
/// against the model's analytic gradient.
pub fn gradient_check(c: &ModelConfig, seed: u64, samples: usize, h: f64) -> Vec<GradSample> {
    let p = ParamStore::init(c, seed);
    let (x, y) = toy_batch(c);
    let mut m = toy_model(p.clone(), Backend::ReferenceF32);
    let acts = m.forward(&x).unwrap();
    let g = m.backward(&acts, &y).unwrap().flatten();
    let base = as_f64(&p);
    let sizes: Vec<usize> = base.iter().map(|t| t.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..samples)
        .map(|_| {
            let index = rng.random_range(0..g.len());
            let (mut tensor, mut off) = (0, index);
            while off >= sizes[tensor] {
                off -= sizes[tensor];
                tensor += 1;
            }
            let mut w = base.clone();
            w[tensor][off] += h;
            let up = oracle_loss(c, &w, &x, &y);
            w[tensor][off] -= 2.0 * h;
            let down = oracle_loss(c, &w, &x, &y);
            let numeric = (up - down) / (2.0 * h);
            let analytic = g[index] as f64;
            // structurally zero gradients (key biases) compare absolutely
            let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            GradSample { index, analytic, numeric, rel }
        })
        .collect()
}

pub fn random_bf16(rows: usize, cols: usize, layout: LayoutTag, rng: &mut ChaCha8Rng) -> Matrix<Bf16> {
    Matrix::from_fn(rows, cols, layout, |_, _| Bf16::from_f32(rng.random_range(-1.0f32..1.0)))
}

fn widen(m: &Matrix<Bf16>) -> Vec<f32> {
    m.to_row_major().data().iter().map(|x| x.to_f32()).collect()
}

/// Sequential f32 result of `a * b` on the rounded inputs.
pub fn sequential_oracle(a: &Matrix<Bf16>, b: &Matrix<Bf16>) -> Vec<f32> {
    sequential_gemm(a.rows(), a.cols(), b.cols(), &widen(a), &widen(b))
}

/// Largest violation of the f32 recursive-summation bound
/// `|c - exact| <= gamma_K * sum |a||b|` against an f64 product, as a
/// fraction of the bound (at most 1 when the result is within tolerance).
pub fn f64_bound_ratio(a: &Matrix<Bf16>, b: &Matrix<Bf16>, c: &[f32]) -> f64 {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (af, bf) = (widen(a), widen(b));
    let exact = f64_gemm(m, k, n, &af, &bf);
    let aa: Vec<f32> = af.iter().map(|x| x.abs()).collect();
    let ba: Vec<f32> = bf.iter().map(|x| x.abs()).collect();
    let mag = f64_gemm(m, k, n, &aa, &ba);
    let u = f32::EPSILON as f64 / 2.0;
    let gamma = k as f64 * u / (1.0 - k as f64 * u);
    let mut worst = 0f64;
    for ((&got, &want), &s) in c.iter().zip(&exact).zip(&mag) {
        let err = (got as f64 - want).abs();
        let bound = gamma * s + f64::MIN_POSITIVE;
        worst = worst.max(err / bound);
    }
    worst
}

/// A legal tile (kernel-schedulable, fits L1) and a problem of at most
/// `max_dim` per dimension.
pub fn random_combo(rng: &mut ChaCha8Rng, grid: &Grid, max_dim: usize) -> (ProblemSize, TileShape) {
    loop {
        let tile = TileShape::new(8 * rng.random_range(1..=8), 8 * rng.random_range(1..=8), 8 * rng.random_range(1..=8));
        if tile.validate(grid.memory.l1_bytes).is_err() {
            continue;
        }
        let size = ProblemSize::new(rng.random_range(1..=max_dim), rng.random_range(1..=max_dim), rng.random_range(1..=max_dim));
        return (size, tile);
    }
}
