//! Post-norm transformer block: bidirectional multi-head attention with
//! rotary positions, then a gated MLP, each followed by residual add and
//! RMSNorm. Forward passes optionally record the intermediates needed for
//! the hand-written backward pass.

use crate::num::Real;
use ndarray::{s, Array2};

/// Precomputed rotation angles, `seq_len x head_dim/2`.
#[derive(Clone, Debug)]
pub struct Rope<F: Real> {
    cos: Array2<F>,
    sin: Array2<F>,
    head_dim: usize,
}

impl<F: Real> Rope<F> {
    pub fn new(seq_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((seq_len, half));
        let mut sin = Array2::zeros((seq_len, half));
        for p in 0..seq_len {
            for j in 0..half {
                let freq = base.powf(-(2.0 * j as f64) / head_dim as f64);
                let angle = p as f64 * freq;
                cos[[p, j]] = F::c(angle.cos());
                sin[[p, j]] = F::c(angle.sin());
            }
        }
        Rope { cos, sin, head_dim }
    }

    /// Rotate dimension pairs (2j, 2j+1) of every head slice in place.
    pub fn apply(&self, x: &mut Array2<F>) {
        let d = x.ncols();
        let heads = d / self.head_dim;
        let half = self.head_dim / 2;
        for p in 0..x.nrows() {
            for h in 0..heads {
                let off = h * self.head_dim;
                for j in 0..half {
                    let c = self.cos[[p, j]];
                    let s = self.sin[[p, j]];
                    let a = x[[p, off + 2 * j]];
                    let b = x[[p, off + 2 * j + 1]];
                    x[[p, off + 2 * j]] = a * c - b * s;
                    x[[p, off + 2 * j + 1]] = a * s + b * c;
                }
            }
        }
    }

    /// Inverse rotation (transpose of `apply`), used in the backward pass.
    pub fn apply_inverse(&self, x: &mut Array2<F>) {
        let d = x.ncols();
        let heads = d / self.head_dim;
        let half = self.head_dim / 2;
        for p in 0..x.nrows() {
            for h in 0..heads {
                let off = h * self.head_dim;
                for j in 0..half {
                    let c = self.cos[[p, j]];
                    let s = self.sin[[p, j]];
                    let a = x[[p, off + 2 * j]];
                    let b = x[[p, off + 2 * j + 1]];
                    x[[p, off + 2 * j]] = a * c + b * s;
                    x[[p, off + 2 * j + 1]] = b * c - a * s;
                }
            }
        }
    }
}

/// `x / sqrt(mean(x^2) + eps)` per row; no learned scale or bias.
pub fn rms_norm<F: Real>(x: &Array2<F>, eps: F) -> Array2<F> {
    let mut out = x.clone();
    rms_norm_inplace(&mut out, eps);
    out
}

pub fn rms_norm_inplace<F: Real>(x: &mut Array2<F>, eps: F) {
    let d = F::c(x.ncols() as f64);
    for mut row in x.rows_mut() {
        let ms = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / d;
        let inv = (ms + eps).sqrt().recip();
        row.mapv_inplace(|v| v * inv);
    }
}

/// Gradient of `rms_norm` with respect to its input `z`, given upstream `dy`.
fn rms_norm_backward<F: Real>(z: &Array2<F>, dy: &Array2<F>, eps: F) -> Array2<F> {
    let d = F::c(z.ncols() as f64);
    let mut dz = Array2::zeros(z.raw_dim());
    for ((zrow, dyrow), mut dzrow) in z
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dz.rows_mut())
    {
        let ms = zrow.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / d;
        let inv = (ms + eps).sqrt().recip();
        let dot = zrow
            .iter()
            .zip(dyrow.iter())
            .map(|(a, b)| *a * *b)
            .fold(F::zero(), |a, b| a + b);
        let coef = inv * inv * inv / d * dot;
        for ((dzv, dyv), zv) in dzrow.iter_mut().zip(dyrow.iter()).zip(zrow.iter()) {
            *dzv = inv * *dyv - coef * *zv;
        }
    }
    dz
}

use crate::num::sigmoid;

fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

fn softmax_rows_inplace<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        let inv = sum.recip();
        row.mapv_inplace(|v| v * inv);
    }
}

pub use super::params::BlockWeights;

/// Intermediates recorded by `block_forward` for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<F: Real> {
    x_in: Array2<F>,
    q_rot: Array2<F>,
    k_rot: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn_concat: Array2<F>,
    z1: Array2<F>,
    y1: Array2<F>,
    g: Array2<F>,
    u: Array2<F>,
    z2: Array2<F>,
}

/// Multi-head bidirectional attention with rotary positions, bias-free.
pub fn attention<F: Real>(
    x: &Array2<F>,
    w: &BlockWeights<F>,
    rope: &Rope<F>,
    n_heads: usize,
) -> Array2<F> {
    attention_with_cache(x, w, rope, n_heads).0
}

#[allow(clippy::type_complexity)]
fn attention_with_cache<F: Real>(
    x: &Array2<F>,
    w: &BlockWeights<F>,
    rope: &Rope<F>,
    n_heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>, Array2<F>, Vec<Array2<F>>, Array2<F>) {
    let seq = x.nrows();
    let d = x.ncols();
    let dh = d / n_heads;
    let scale = F::c(1.0 / (dh as f64).sqrt());

    let mut q = x.dot(&w.wq);
    let mut k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    rope.apply(&mut q);
    rope.apply(&mut k);

    let mut concat = Array2::zeros((seq, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows_inplace(&mut scores);
        let oh = scores.dot(&vh);
        concat.slice_mut(cols).assign(&oh);
        probs.push(scores);
    }
    let out = concat.dot(&w.wo);
    (out, q, k, v, probs, concat)
}

/// One post-norm block: `y1 = rms(x + attn(x))`, `y2 = rms(y1 + glu(y1))`.
pub fn block_forward<F: Real>(
    x: &Array2<F>,
    w: &BlockWeights<F>,
    rope: &Rope<F>,
    n_heads: usize,
    rms_eps: F,
    want_cache: bool,
) -> (Array2<F>, Option<BlockCache<F>>) {
    let (attn_out, q_rot, k_rot, v, probs, attn_concat) =
        attention_with_cache(x, w, rope, n_heads);

    let z1 = x + &attn_out;
    let y1 = rms_norm(&z1, rms_eps);

    let g = y1.dot(&w.wg);
    let u = y1.dot(&w.wu);
    let mut h = g.mapv(silu);
    h.zip_mut_with(&u, |a, b| *a *= *b);
    let mlp = h.dot(&w.wd);

    let z2 = &y1 + &mlp;
    let y2 = rms_norm(&z2, rms_eps);

    let cache = want_cache.then(|| BlockCache {
        x_in: x.clone(),
        q_rot,
        k_rot,
        v,
        probs,
        attn_concat,
        z1,
        y1,
        g,
        u,
        z2,
    });
    (y2, cache)
}

/// Backward through one block. Returns the gradient with respect to the block
/// input and accumulates weight gradients into `gw`.
pub fn block_backward<F: Real>(
    cache: &BlockCache<F>,
    w: &BlockWeights<F>,
    gw: &mut BlockWeights<F>,
    rope: &Rope<F>,
    n_heads: usize,
    rms_eps: F,
    dy2: &Array2<F>,
) -> Array2<F> {
    let d = cache.x_in.ncols();
    let dh = d / n_heads;
    let scale = F::c(1.0 / (dh as f64).sqrt());

    // Second residual + norm.
    let dz2 = rms_norm_backward(&cache.z2, dy2, rms_eps);

    // Gated MLP.
    let sg = cache.g.mapv(silu);
    let mut h = sg.clone();
    h.zip_mut_with(&cache.u, |a, b| *a *= *b);
    gw.wd += &h.t().dot(&dz2);
    let dh_up = dz2.dot(&w.wd.t());
    let mut du = dh_up.clone();
    du.zip_mut_with(&sg, |a, b| *a *= *b);
    let mut dg = dh_up;
    dg.zip_mut_with(&cache.u, |a, b| *a *= *b);
    dg.zip_mut_with(&cache.g, |a, b| *a *= silu_grad(*b));
    gw.wg += &cache.y1.t().dot(&dg);
    gw.wu += &cache.y1.t().dot(&du);
    let mut dy1 = dg.dot(&w.wg.t()) + du.dot(&w.wu.t());
    dy1 += &dz2; // residual branch

    // First residual + norm.
    let dz1 = rms_norm_backward(&cache.z1, &dy1, rms_eps);

    // Attention.
    gw.wo += &cache.attn_concat.t().dot(&dz1);
    let dconcat = dz1.dot(&w.wo.t());
    let seq = cache.x_in.nrows();
    let mut dq = Array2::zeros((seq, d));
    let mut dk = Array2::zeros((seq, d));
    let mut dv = Array2::zeros((seq, d));
    for h_idx in 0..n_heads {
        let cols = s![.., h_idx * dh..(h_idx + 1) * dh];
        let doh = dconcat.slice(cols);
        let p = &cache.probs[h_idx];
        let vh = cache.v.slice(cols);
        let qh = cache.q_rot.slice(cols);
        let kh = cache.k_rot.slice(cols);

        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let dp = doh.dot(&vh.t());
        // Softmax backward per row.
        let mut dscores = dp;
        for (mut drow, prow) in dscores.rows_mut().into_iter().zip(p.rows()) {
            let dot = drow
                .iter()
                .zip(prow.iter())
                .map(|(a, b)| *a * *b)
                .fold(F::zero(), |a, b| a + b);
            for (dv_, pv) in drow.iter_mut().zip(prow.iter()) {
                *dv_ = (*dv_ - dot) * *pv;
            }
        }
        dscores.mapv_inplace(|v| v * scale);
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
    }
    rope.apply_inverse(&mut dq);
    rope.apply_inverse(&mut dk);

    gw.wq += &cache.x_in.t().dot(&dq);
    gw.wk += &cache.x_in.t().dot(&dk);
    gw.wv += &cache.x_in.t().dot(&dv);

    let mut dx = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    dx += &dz1; // residual branch
    dx
}

/// Element-wise sum of the inputs followed by the block stack. Both recurrent
/// modules use this entry point; the merge makes the input list order
/// irrelevant.
pub struct ModuleCache<F: Real> {
    pub blocks: Vec<BlockCache<F>>,
}

pub fn module_forward<F: Real>(
    inputs: &[&Array2<F>],
    blocks: &[BlockWeights<F>],
    rope: &Rope<F>,
    n_heads: usize,
    rms_eps: F,
    want_cache: bool,
) -> (Array2<F>, Option<ModuleCache<F>>) {
    debug_assert!(!inputs.is_empty());
    let mut x = inputs[0].clone();
    for extra in &inputs[1..] {
        x += *extra;
    }
    let mut caches = want_cache.then(|| Vec::with_capacity(blocks.len()));
    for b in blocks {
        let (y, c) = block_forward(&x, b, rope, n_heads, rms_eps, want_cache);
        x = y;
        if let (Some(cs), Some(c)) = (&mut caches, c) {
            cs.push(c);
        }
    }
    (x, caches.map(|blocks| ModuleCache { blocks }))
}

/// Backward through a module stack; weight gradients are accumulated into
/// `gws` and the gradient with respect to the merged input is returned (it
/// applies to every member of the input list).
pub fn module_backward<F: Real>(
    cache: &ModuleCache<F>,
    blocks: &[BlockWeights<F>],
    gws: &mut [BlockWeights<F>],
    rope: &Rope<F>,
    n_heads: usize,
    rms_eps: F,
    dy: &Array2<F>,
) -> Array2<F> {
    let mut grad = dy.clone();
    for i in (0..blocks.len()).rev() {
        grad = block_backward(
            &cache.blocks[i],
            &blocks[i],
            &mut gws[i],
            rope,
            n_heads,
            rms_eps,
            &grad,
        );
    }
    grad
}
