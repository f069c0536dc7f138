//! Parameterised building blocks shared by the architectures.

use rand::Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParameterStore, Tensor, Var};

type R<T> = Result<T, AutodiffError>;

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> R<Self> {
        Ok(Self {
            w: store.add_weight(&format!("{name}.w"), fan_in, fan_out, rng)?,
            b: store.add_bias(&format!("{name}.b"), fan_out)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> R<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Row layout helpers for sequences stored time-major (`row = t·B + b`).
pub(crate) struct Steps {
    pub batch: usize,
    pub len: usize,
    /// Per step, a `B × 1` column of 0/1 masks.
    pub masks: Vec<Tensor>,
}

impl Steps {
    pub fn rows(&self, t: usize) -> Vec<usize> {
        (t * self.batch..(t + 1) * self.batch).collect()
    }
}

/// Keeps the previous state where the step mask is 0.
fn masked_update(g: &mut Graph, prev: Var, new: Var, mask: Var) -> R<Var> {
    let d = g.sub(new, prev)?;
    let d = g.mul_col(d, mask)?;
    g.add(prev, d)
}

#[derive(Debug, Clone)]
pub(crate) struct GruLayer {
    wx: Linear,
    wh: Linear,
    hidden: usize,
}

impl GruLayer {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> R<Self> {
        Ok(Self {
            wx: Linear::new(store, &format!("{name}.x"), input, 3 * hidden, rng)?,
            wh: Linear::new(store, &format!("{name}.h"), hidden, 3 * hidden, rng)?,
            hidden,
        })
    }

    /// Runs over a time-major sequence; returns time-major hidden states.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, steps: &Steps) -> R<Var> {
        let h_dim = self.hidden;
        let xw = self.wx.forward(g, store, x)?;
        let mut h = g.constant(Tensor::zeros(steps.batch, h_dim));
        let mut outs = Vec::with_capacity(steps.len);
        for t in 0..steps.len {
            let xt = g.gather_rows(xw, &steps.rows(t))?;
            let hu = self.wh.forward(g, store, h)?;
            let xr = g.slice_cols(xt, 0, h_dim)?;
            let xz = g.slice_cols(xt, h_dim, h_dim)?;
            let xn = g.slice_cols(xt, 2 * h_dim, h_dim)?;
            let hr = g.slice_cols(hu, 0, h_dim)?;
            let hz = g.slice_cols(hu, h_dim, h_dim)?;
            let hn = g.slice_cols(hu, 2 * h_dim, h_dim)?;
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn)?;
            let n = g.add(xn, rn)?;
            let n = g.tanh(n);
            // h' = n + z ⊙ (h - n)
            let hm = g.sub(h, n)?;
            let zh = g.mul(z, hm)?;
            let h_new = g.add(n, zh)?;
            let m = g.constant(steps.masks[t].clone());
            h = masked_update(g, h, h_new, m)?;
            outs.push(h);
        }
        g.concat_rows(&outs)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LstmLayer {
    wx: Linear,
    wh: Linear,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> R<Self> {
        Ok(Self {
            wx: Linear::new(store, &format!("{name}.x"), input, 4 * hidden, rng)?,
            wh: Linear::new(store, &format!("{name}.h"), hidden, 4 * hidden, rng)?,
            hidden,
        })
    }

    /// Runs over a time-major sequence, optionally in reverse time order.
    /// Output rows stay in forward time order.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, steps: &Steps, reverse: bool) -> R<Var> {
        let h_dim = self.hidden;
        let xw = self.wx.forward(g, store, x)?;
        let mut h = g.constant(Tensor::zeros(steps.batch, h_dim));
        let mut c = g.constant(Tensor::zeros(steps.batch, h_dim));
        let mut outs = vec![h; steps.len];
        let order: Vec<usize> = if reverse { (0..steps.len).rev().collect() } else { (0..steps.len).collect() };
        for t in order {
            let xt = g.gather_rows(xw, &steps.rows(t))?;
            let hu = self.wh.forward(g, store, h)?;
            let gates = g.add(xt, hu)?;
            let i = g.slice_cols(gates, 0, h_dim)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h_dim, h_dim)?;
            let f = g.sigmoid(f);
            let cand = g.slice_cols(gates, 2 * h_dim, h_dim)?;
            let cand = g.tanh(cand);
            let o = g.slice_cols(gates, 3 * h_dim, h_dim)?;
            let o = g.sigmoid(o);
            let fc = g.mul(f, c)?;
            let ic = g.mul(i, cand)?;
            let c_new = g.add(fc, ic)?;
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc)?;
            let m = g.constant(steps.masks[t].clone());
            c = masked_update(g, c, c_new, m)?;
            h = masked_update(g, h, h_new, m)?;
            outs[t] = h;
        }
        g.concat_rows(&outs)
    }
}

/// Multi-head self-attention with fused query/key/value projection.
#[derive(Debug, Clone)]
pub(crate) struct SelfAttention {
    qkv: Linear,
    out: Linear,
    dim: usize,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> R<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            dim,
            heads,
        })
    }

    /// `x` is session-major with `block` rows per session.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, block: usize, key_mask: &[bool]) -> R<Var> {
        let qkv = self.qkv.forward(g, store, x)?;
        let q = g.slice_cols(qkv, 0, self.dim)?;
        let k = g.slice_cols(qkv, self.dim, self.dim)?;
        let v = g.slice_cols(qkv, 2 * self.dim, self.dim)?;
        let a = g.attention(q, k, v, self.heads, block, key_mask)?;
        self.out.forward(g, store, a)
    }
}

/// Post-norm encoder block: attention and a two-layer feed-forward, each
/// with a residual connection followed by layer normalisation.
#[derive(Debug, Clone)]
pub(crate) struct TransformerBlock {
    attn: SelfAttention,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> R<Self> {
        Ok(Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, block: usize, key_mask: &[bool]) -> R<Var> {
        let a = self.attn.forward(g, store, x, block, key_mask)?;
        let h = g.add(x, a)?;
        let h = g.layer_norm(h);
        let f = self.ff1.forward(g, store, h)?;
        let f = g.relu(f);
        let f = self.ff2.forward(g, store, f)?;
        let h2 = g.add(h, f)?;
        Ok(g.layer_norm(h2))
    }
}

/// Sinusoidal position table, `len × dim`.
pub(crate) fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
