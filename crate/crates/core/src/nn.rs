//! Dense building blocks for the frozen transformers: forward passes plus
//! backward passes with respect to the block *inputs* (the weights here never
//! receive gradients).

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::rng::Rng;

pub(crate) fn scaled_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

/// `y = x·Wᵀ + b` applied row-wise.
#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn init(rng: &mut Rng, input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: scaled_normal(rng, output, input, 1.0 / (input as f64).sqrt()),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward_input(&self, dy: &Array2<f64>) -> Array2<f64> {
        dy.dot(&self.weight)
    }

    pub fn digest(&self, h: &mut Sha256) {
        hash_array(h, self.weight.iter());
        if let Some(b) = &self.bias {
            hash_array(h, b.iter());
        }
    }
}

pub(crate) fn hash_array<'a>(h: &mut Sha256, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub(crate) struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let dim = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / dim;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / dim;
            *inv = 1.0 / (var + LN_EPS).sqrt();
            row *= *inv;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let dim = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, (g, xh)) in dxhat.rows().into_iter().zip(cache.xhat.rows()).enumerate() {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let inv = cache.inv_std[i];
            let mut out = dx.row_mut(i);
            for j in 0..g.len() {
                out[j] = inv / dim * (dim * g[j] - sum_g - xh[j] * sum_gx);
            }
        }
        dx
    }

    pub fn digest(&self, h: &mut Sha256) {
        hash_array(h, self.gamma.iter());
        hash_array(h, self.beta.iter());
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub causal: bool,
}

pub(crate) struct AttentionCache {
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
}

impl Attention {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize, causal: bool) -> Self {
        Self {
            qkv: Linear::init(rng, dim, 3 * dim, true),
            out: Linear::init(rng, dim, dim, true),
            heads,
            causal,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttentionCache) {
        let n = x.nrows();
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut concat = Array2::zeros((n, dim));
        let mut probs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = qkv.slice(s![.., head * hd..(head + 1) * hd]);
            let k = qkv.slice(s![.., dim + head * hd..dim + (head + 1) * hd]);
            let v = qkv.slice(s![.., 2 * dim + head * hd..2 * dim + (head + 1) * hd]);
            let mut scores = q.dot(&k.t()) * scale;
            for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                if self.causal {
                    row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - max).exp());
                let total = row.sum();
                row /= total;
            }
            concat
                .slice_mut(s![.., head * hd..(head + 1) * hd])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
        (self.out.forward(&concat), AttentionCache { qkv, probs })
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>) -> Array2<f64> {
        let dim = dy.ncols();
        let hd = dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dconcat = self.out.backward_input(dy);
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for head in 0..self.heads {
            let (qs, ks, vs) = (head * hd, dim + head * hd, 2 * dim + head * hd);
            let q = cache.qkv.slice(s![.., qs..qs + hd]);
            let k = cache.qkv.slice(s![.., ks..ks + hd]);
            let v = cache.qkv.slice(s![.., vs..vs + hd]);
            let p = &cache.probs[head];
            let d_out = dconcat.slice(s![.., head * hd..(head + 1) * hd]);
            let dp = d_out.dot(&v.t());
            let dv = p.t().dot(&d_out);
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(&dp - &row_dot) * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., qs..qs + hd]).assign(&dq);
            dqkv.slice_mut(s![.., ks..ks + hd]).assign(&dk);
            dqkv.slice_mut(s![.., vs..vs + hd]).assign(&dv);
        }
        self.qkv.backward_input(&dqkv)
    }

    pub fn digest(&self, h: &mut Sha256) {
        self.qkv.digest(h);
        self.out.digest(h);
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    pre_act: Array2<f64>,
}

impl Block {
    pub fn init(rng: &mut Rng, dim: usize, heads: usize, mlp_ratio: usize, causal: bool) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::init(rng, dim, heads, causal),
            ln2: LayerNorm::new(dim),
            fc1: Linear::init(rng, dim, mlp_ratio * dim, true),
            fc2: Linear::init(rng, mlp_ratio * dim, dim, true),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1);
        let x2 = x + &a;
        let (h2, ln2) = self.ln2.forward(&x2);
        let pre_act = self.fc1.forward(&h2);
        let m = self.fc2.forward(&pre_act.mapv(gelu));
        (
            x2 + m,
            BlockCache {
                ln1,
                attn,
                ln2,
                pre_act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.fc2.backward_input(dy);
        let dpre = dact * cache.pre_act.mapv(gelu_grad);
        let dh2 = self.fc1.backward_input(&dpre);
        let dx2 = dy + &self.ln2.backward(&cache.ln2, &dh2);
        let dh1 = self.attn.backward(&cache.attn, &dx2);
        &dx2 + &self.ln1.backward(&cache.ln1, &dh1)
    }

    pub fn digest(&self, h: &mut Sha256) {
        self.ln1.digest(h);
        self.attn.digest(h);
        self.ln2.digest(h);
        self.fc1.digest(h);
        self.fc2.digest(h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    /// Central-difference check of `d(sum(y ⊙ w))/dx` for a row-wise map.
    fn check_input_grad(
        x: &Array2<f64>,
        weights: &Array2<f64>,
        forward: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
    ) {
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fp = (forward(&xp) * weights).sum();
                let fm = (forward(&xm) * weights).sum();
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[[i, j]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(err < 1e-5, "({i},{j}) analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn layer_norm_backward() {
        let mut rng = rng_from_seed(1);
        let mut ln = LayerNorm::new(6);
        ln.gamma =
            Array1::from_shape_simple_fn(6, || 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal));
        let x = scaled_normal(&mut rng, 3, 6, 1.0);
        let w = scaled_normal(&mut rng, 3, 6, 1.0);
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &w);
        check_input_grad(&x, &w, |x| ln.forward(x).0, &dx);
    }

    #[test]
    fn attention_backward_causal_and_full() {
        for causal in [true, false] {
            let mut rng = rng_from_seed(2);
            let attn = Attention::init(&mut rng, 8, 2, causal);
            let x = scaled_normal(&mut rng, 5, 8, 1.0);
            let w = scaled_normal(&mut rng, 5, 8, 1.0);
            let (_, cache) = attn.forward(&x);
            let dx = attn.backward(&cache, &w);
            check_input_grad(&x, &w, |x| attn.forward(x).0, &dx);
        }
    }

    #[test]
    fn block_backward() {
        let mut rng = rng_from_seed(3);
        let block = Block::init(&mut rng, 8, 2, 4, true);
        let x = scaled_normal(&mut rng, 4, 8, 1.0);
        let w = scaled_normal(&mut rng, 4, 8, 1.0);
        let (_, cache) = block.forward_cached(&x);
        let dx = block.backward(&cache, &w);
        check_input_grad(&x, &w, |x| block.forward(x), &dx);
    }

    #[test]
    fn causal_rows_ignore_future_tokens() {
        let mut rng = rng_from_seed(4);
        let attn = Attention::init(&mut rng, 8, 2, true);
        let x = scaled_normal(&mut rng, 4, 8, 1.0);
        let mut x2 = x.clone();
        x2.row_mut(3).fill(5.0);
        let (a, _) = attn.forward(&x);
        let (b, _) = attn.forward(&x2);
        assert_eq!(a.slice(s![..3, ..]), b.slice(s![..3, ..]));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((numeric - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
