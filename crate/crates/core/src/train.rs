//! Small-scale trainer used to produce the fixture checkpoints: a forward
//! pass that keeps its activations, hand-written backpropagation, and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::gelu_f64;
use crate::model::{dot, linear_row, LayerNormParams, Linear, Model, LN_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub lr: f32,
    pub warmup: usize,
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 4,
            seq_len: 128,
            lr: 3e-3,
            warmup: 40,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

struct LnCache {
    xhat: Vec<f32>,
    inv: Vec<f32>,
}

struct BlockCache {
    x_in: Vec<f32>,
    ln1: LnCache,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// `[heads, t, t]`, row `i` filled for `j <= i`.
    probs: Vec<f32>,
    ctx: Vec<f32>,
    x_mid: Vec<f32>,
    ln2: LnCache,
    h2: Vec<f32>,
    f: Vec<f32>,
    g: Vec<f32>,
}

fn ln_forward(p: &LayerNormParams, x: &[f32], n: usize, out: &mut [f32]) -> LnCache {
    let rows = x.len() / n;
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let iv = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = iv as f32;
        for i in 0..n {
            let xh = ((xr[i] as f64 - mean) * iv) as f32;
            xhat[r * n + i] = xh;
            out[r * n + i] = xh * p.gamma[i] + p.beta[i];
        }
    }
    LnCache { xhat, inv }
}

fn ln_backward(p: &LayerNormParams, c: &LnCache, dy: &[f32], g: &mut LayerNormParams, dx: &mut [f32]) {
    let n = p.gamma.len();
    let mut dxhat = vec![0.0f32; n];
    for (r, &iv) in c.inv.iter().enumerate() {
        let xh = &c.xhat[r * n..(r + 1) * n];
        let d = &dy[r * n..(r + 1) * n];
        for i in 0..n {
            g.gamma[i] += d[i] * xh[i];
            g.beta[i] += d[i];
            dxhat[i] = d[i] * p.gamma[i];
        }
        let m1 = dxhat.iter().sum::<f32>() / n as f32;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / n as f32;
        for i in 0..n {
            dx[r * n + i] += iv * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

fn linear_forward(lin: &Linear, x: &[f32], out: &mut [f32]) {
    for (xr, o) in x.chunks_exact(lin.in_features).zip(out.chunks_exact_mut(lin.out_features)) {
        linear_row(lin, xr, o);
    }
}

#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Accumulate weight/bias gradients and add `dy W` into `dx`.
fn linear_backward(lin: &Linear, x: &[f32], dy: &[f32], g: &mut Linear, dx: Option<&mut [f32]>) {
    let (n_in, n_out) = (lin.in_features, lin.out_features);
    for (xr, dr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
        for (o, &d) in dr.iter().enumerate() {
            if d != 0.0 {
                axpy(d, xr, &mut g.weight[o * n_in..(o + 1) * n_in]);
            }
        }
        if let Some(b) = g.bias.as_mut() {
            axpy(1.0, dr, b);
        }
    }
    if let Some(dx) = dx {
        for (dxr, dr) in dx.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            for (o, &d) in dr.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, lin.row(o), dxr);
                }
            }
        }
    }
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Mean next-token loss of one sequence and its gradient, added into `grads`
/// scaled by `weight`.
pub fn loss_and_grad(model: &Model, seq: &[u32], grads: &mut Model, weight: f32) -> Result<f32> {
    let cfg = &model.config;
    if seq.len() < 2 || seq.len() - 1 > cfg.max_seq_len {
        return Err(Error::Invalid(format!("training sequence of {} tokens", seq.len())));
    }
    if model.token_drop.is_some() {
        return Err(Error::Invalid("training does not support token drop".into()));
    }
    let (d, v_sz, nh) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let dh = d / nh;
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let t = inputs.len();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = vec![0.0f32; t * d];
    for (i, &tok) in inputs.iter().enumerate() {
        let tr = &model.embed.tokens[tok as usize * d..(tok as usize + 1) * d];
        let pr = &model.embed.positions[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = tr[j] + pr[j];
        }
    }

    let mut caches = Vec::with_capacity(model.blocks.len());
    for b in &model.blocks {
        let ff = b.ff_width();
        let mut h1 = vec![0.0; t * d];
        let ln1 = ln_forward(&b.ln1, &x, d, &mut h1);
        let (mut q, mut k, mut v) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        linear_forward(&b.wq, &h1, &mut q);
        linear_forward(&b.wk, &h1, &mut k);
        linear_forward(&b.wv, &h1, &mut v);
        let mut probs = vec![0.0f32; nh * t * t];
        let mut ctx = vec![0.0f32; t * d];
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(&q[i * d + cols.start..i * d + cols.end], &k[j * d + cols.start..j * d + cols.end]) * scale;
                }
                let max = p.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s));
                let mut sum = 0.0f32;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                p.iter_mut().for_each(|pj| *pj *= inv);
                let c = &mut ctx[i * d + cols.start..i * d + cols.end];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(pj, &v[j * d + cols.start..j * d + cols.end], c);
                }
            }
        }
        let x_in = x.clone();
        let mut a = vec![0.0; t * d];
        linear_forward(&b.wo, &ctx, &mut a);
        x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
        let x_mid = x.clone();
        let mut h2 = vec![0.0; t * d];
        let ln2 = ln_forward(&b.ln2, &x, d, &mut h2);
        let mut f = vec![0.0; t * ff];
        linear_forward(&b.fc1, &h2, &mut f);
        let g: Vec<f32> = f.iter().map(|&z| gelu_f64(z as f64) as f32).collect();
        linear_forward(&b.fc2, &g, &mut a);
        x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
        caches.push(BlockCache {
            x_in,
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            ln2,
            h2,
            f,
            g,
        });
    }

    let mut hf = vec![0.0; t * d];
    let lnf = ln_forward(&model.head.ln, &x, d, &mut hf);
    let mut logits = vec![0.0; t * v_sz];
    linear_forward(&model.head.out, &hf, &mut logits);

    // softmax cross-entropy, gradient of the mean over positions
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; t * v_sz];
    for i in 0..t {
        let row = &logits[i * v_sz..(i + 1) * v_sz];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s)) as f64;
        let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[targets[i] as usize] as f64;
        let dr = &mut dlogits[i * v_sz..(i + 1) * v_sz];
        for (j, dz) in dr.iter_mut().enumerate() {
            *dz = ((row[j] as f64 - lse).exp() as f32) * weight / t as f32;
        }
        dr[targets[i] as usize] -= weight / t as f32;
    }

    let mut dhf = vec![0.0; t * d];
    linear_backward(&model.head.out, &hf, &dlogits, &mut grads.head.out, Some(&mut dhf));
    let mut dx = vec![0.0; t * d];
    ln_backward(&model.head.ln, &lnf, &dhf, &mut grads.head.ln, &mut dx);

    for (bi, (b, c)) in model.blocks.iter().zip(&caches).enumerate().rev() {
        let gb = &mut grads.blocks[bi];
        let ff = b.ff_width();
        // MLP branch
        let mut dg = vec![0.0; t * ff];
        linear_backward(&b.fc2, &c.g, &dx, &mut gb.fc2, Some(&mut dg));
        let df: Vec<f32> = dg.iter().zip(&c.f).map(|(&g, &z)| g * gelu_grad(z as f64) as f32).collect();
        let mut dh2 = vec![0.0; t * d];
        linear_backward(&b.fc1, &c.h2, &df, &mut gb.fc1, Some(&mut dh2));
        ln_backward(&b.ln2, &c.ln2, &dh2, &mut gb.ln2, &mut dx);
        let _ = &c.x_mid;
        // attention branch
        let mut dctx = vec![0.0; t * d];
        linear_backward(&b.wo, &c.ctx, &dx, &mut gb.wo, Some(&mut dctx));
        let (mut dq, mut dk, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        let mut dp = vec![0.0f32; t];
        for h in 0..nh {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let p = &c.probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let dci = &dctx[i * d + cols.start..i * d + cols.end];
                for (j, &pj) in p.iter().enumerate() {
                    dp[j] = dot(dci, &c.v[j * d + cols.start..j * d + cols.end]);
                    axpy(pj, dci, &mut dv[j * d + cols.start..j * d + cols.end]);
                }
                let pdp: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (j, &pj) in p.iter().enumerate() {
                    let ds = pj * (dp[j] - pdp) * scale;
                    if ds != 0.0 {
                        let (qi, kj) = (i * d + cols.start, j * d + cols.start);
                        axpy(ds, &c.k[kj..kj + dh], &mut dq[qi..qi + dh]);
                        axpy(ds, &c.q[qi..qi + dh], &mut dk[kj..kj + dh]);
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; t * d];
        linear_backward(&b.wq, &c.h1, &dq, &mut gb.wq, Some(&mut dh1));
        linear_backward(&b.wk, &c.h1, &dk, &mut gb.wk, Some(&mut dh1));
        linear_backward(&b.wv, &c.h1, &dv, &mut gb.wv, Some(&mut dh1));
        ln_backward(&b.ln1, &c.ln1, &dh1, &mut gb.ln1, &mut dx);
        let _ = &c.x_in;
    }

    for (i, &tok) in inputs.iter().enumerate() {
        let dr = &dx[i * d..(i + 1) * d];
        axpy(1.0, dr, &mut grads.embed.tokens[tok as usize * d..(tok as usize + 1) * d]);
        axpy(1.0, dr, &mut grads.embed.positions[i * d..(i + 1) * d]);
    }
    Ok((loss / t as f64) as f32)
}

fn zeros_like(model: &Model) -> Model {
    let mut g = model.clone();
    for p in g.params_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    g
}

/// Train `model` in place on random windows of `tokens`; returns the mean
/// loss of every step. Deterministic given the config.
pub fn train(
    model: &mut Model,
    tokens: &[u32],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    let window = cfg.seq_len + 1;
    if tokens.len() <= window || cfg.batch == 0 {
        return Err(Error::Invalid("training data shorter than one window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    let mut m: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f32>> = m.clone();
    let (b1, b2, eps) = (0.9f32, 0.95f32, 1e-8f32);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = zeros_like(model);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let start = rng.random_range(0..tokens.len() - window);
            loss += loss_and_grad(model, &tokens[start..start + window], &mut grads, 1.0 / cfg.batch as f32)?;
        }
        loss /= cfg.batch as f32;
        let norm = grads
            .params()
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|g| (*g as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32;
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let warm = ((step + 1) as f32 / cfg.warmup.max(1) as f32).min(1.0);
        let progress = step as f32 / cfg.steps.max(1) as f32;
        let lr = cfg.lr * warm * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()));
        let (c1, c2) = (1.0 - b1.powi(step as i32 + 1), 1.0 - b2.powi(step as i32 + 1));
        for ((p, g), (mi, vi)) in model
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                mi[j] = b1 * mi[j] + (1.0 - b1) * gj;
                vi[j] = b2 * vi[j] + (1.0 - b2) * gj * gj;
                p.data[j] -= lr * (mi[j] / c1) / ((vi[j] / c2).sqrt() + eps);
            }
        }
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}
