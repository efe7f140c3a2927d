//! Host-side f32 operators and their backward passes. Activations are
//! row-major `T x C` slices.

use std::f32::consts::PI;

pub const LN_EPS: f32 = 1e-5;

/// Returns per-row mean and reciprocal standard deviation for backward.
pub fn layernorm_forward(out: &mut [f32], mean: &mut [f32], rstd: &mut [f32], inp: &[f32], w: &[f32], b: &[f32], c: usize) {
    for (t, x) in inp.chunks_exact(c).enumerate() {
        let m = x.iter().sum::<f32>() / c as f32;
        let v = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<f32>() / c as f32;
        let s = 1.0 / (v + LN_EPS).sqrt();
        let o = &mut out[t * c..(t + 1) * c];
        for i in 0..c {
            o[i] = (s * (x[i] - m)) * w[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = s;
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dinp: &mut [f32],
    dw: &mut [f32],
    db: &mut [f32],
    dout: &[f32],
    inp: &[f32],
    w: &[f32],
    mean: &[f32],
    rstd: &[f32],
    c: usize,
) {
    for t in 0..inp.len() / c {
        let (x, d) = (&inp[t * c..(t + 1) * c], &dout[t * c..(t + 1) * c]);
        let (m, s) = (mean[t], rstd[t]);
        let mut dnorm_mean = 0.0f32;
        let mut dnorm_norm_mean = 0.0f32;
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = w[i] * d[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= c as f32;
        dnorm_norm_mean /= c as f32;
        let di = &mut dinp[t * c..(t + 1) * c];
        for i in 0..c {
            let norm = (x[i] - m) * s;
            let dnorm = w[i] * d[i];
            db[i] += d[i];
            dw[i] += norm * d[i];
            di[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

/// Causal multi-head attention over a packed `T x 3C` query/key/value
/// input. Fills `preatt` and `att` (`NH x T x T`, future entries zero) and
/// writes the `T x C` output.
pub fn attention_forward(out: &mut [f32], preatt: &mut [f32], att: &mut [f32], qkv: &[f32], t_len: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = 1.0 / (hs as f32).sqrt();
    out.fill(0.0);
    for h in 0..nh {
        for t in 0..t_len {
            let q = &qkv[t * 3 * c + h * hs..][..hs];
            let row = (h * t_len + t) * t_len;
            let mut max = f32::NEG_INFINITY;
            for t2 in 0..=t {
                let k = &qkv[t2 * 3 * c + c + h * hs..][..hs];
                let v = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                preatt[row + t2] = v;
                max = max.max(v);
            }
            let mut sum = 0.0f32;
            for t2 in 0..=t {
                let e = (preatt[row + t2] - max).exp();
                att[row + t2] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for t2 in 0..t_len {
                if t2 <= t {
                    att[row + t2] *= inv;
                } else {
                    preatt[row + t2] = 0.0;
                    att[row + t2] = 0.0;
                }
            }
            let o = &mut out[t * c + h * hs..][..hs];
            for t2 in 0..=t {
                let v = &qkv[t2 * 3 * c + 2 * c + h * hs..][..hs];
                let a = att[row + t2];
                for i in 0..hs {
                    o[i] += a * v[i];
                }
            }
        }
    }
}

/// Accumulates into `dqkv`.
pub fn attention_backward(dqkv: &mut [f32], dout: &[f32], qkv: &[f32], att: &[f32], t_len: usize, c: usize, nh: usize) {
    let hs = c / nh;
    let scale = 1.0 / (hs as f32).sqrt();
    let mut datt = vec![0.0f32; t_len];
    let mut dpre = vec![0.0f32; t_len];
    for h in 0..nh {
        for t in 0..t_len {
            let row = (h * t_len + t) * t_len;
            let a = &att[row..row + t_len];
            let d = &dout[t * c + h * hs..][..hs];
            for t2 in 0..=t {
                let vo = t2 * 3 * c + 2 * c + h * hs;
                datt[t2] = qkv[vo..vo + hs].iter().zip(d).map(|(v, g)| v * g).sum();
                for i in 0..hs {
                    dqkv[vo + i] += a[t2] * d[i];
                }
            }
            // softmax backward
            let dot: f32 = (0..=t).map(|t2| a[t2] * datt[t2]).sum();
            for t2 in 0..=t {
                dpre[t2] = a[t2] * (datt[t2] - dot);
            }
            let qo = t * 3 * c + h * hs;
            for t2 in 0..=t {
                let ko = t2 * 3 * c + c + h * hs;
                let g = dpre[t2] * scale;
                for i in 0..hs {
                    dqkv[qo + i] += qkv[ko + i] * g;
                    dqkv[ko + i] += qkv[qo + i] * g;
                }
            }
        }
    }
}

fn gelu_parts(x: f32) -> (f32, f32) {
    let s = (2.0 / PI).sqrt();
    let cube = 0.044715 * x * x * x;
    let tanh = (s * (x + cube)).tanh();
    (s, tanh)
}

/// Tanh approximation.
pub fn gelu_forward(out: &mut [f32], inp: &[f32]) {
    for (o, &x) in out.iter_mut().zip(inp) {
        let (_, tanh) = gelu_parts(x);
        *o = 0.5 * x * (1.0 + tanh);
    }
}

/// Accumulates into `dinp`.
pub fn gelu_backward(dinp: &mut [f32], inp: &[f32], dout: &[f32]) {
    for ((di, &x), &d) in dinp.iter_mut().zip(inp).zip(dout) {
        let (s, tanh) = gelu_parts(x);
        let sech2 = 1.0 - tanh * tanh;
        let local = 0.5 * (1.0 + tanh) + x * 0.5 * sech2 * s * (1.0 + 3.0 * 0.044715 * x * x);
        *di += local * d;
    }
}

pub fn residual_forward(out: &mut [f32], a: &[f32], b: &[f32]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

pub fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Column sums of a row-major matrix with `bias.len()` columns, added to `db`.
pub fn bias_backward(db: &mut [f32], dout: &[f32]) {
    for row in dout.chunks_exact(db.len()) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// Row-wise softmax of `T x V` logits.
pub fn softmax_forward(probs: &mut [f32], logits: &[f32], v: usize) {
    for (p, l) in probs.chunks_exact_mut(v).zip(logits.chunks_exact(v)) {
        let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (pi, &li) in p.iter_mut().zip(l) {
            *pi = (li - max).exp();
            sum += *pi;
        }
        p.iter_mut().for_each(|x| *x /= sum);
    }
}

/// Mean negative log-likelihood of `targets`, summed in f64.
pub fn crossentropy_forward(probs: &[f32], targets: &[usize], v: usize) -> f32 {
    let s: f64 = targets.iter().enumerate().map(|(t, &y)| -(probs[t * v + y] as f64).ln()).sum();
    (s / targets.len() as f64) as f32
}

/// Gradient of the mean loss with respect to the logits.
pub fn crossentropy_softmax_backward(dlogits: &mut [f32], probs: &[f32], targets: &[usize], v: usize) {
    let scale = 1.0 / targets.len() as f32;
    for (t, &y) in targets.iter().enumerate() {
        let (d, p) = (&mut dlogits[t * v..(t + 1) * v], &probs[t * v..(t + 1) * v]);
        for i in 0..v {
            let ind = if i == y { 1.0 } else { 0.0 };
            d[i] = (p[i] - ind) * scale;
        }
    }
}
