//! Layers built on the autodiff graph.

use rand::Rng;

use super::{Graph, Init, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `x W (+ b)` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), vec![input, output], Init::Uniform { fan_in: input });
        let b = bias.then(|| store.add(format!("{name}.b"), vec![output], Init::Zeros));
        Self { w, b, input, output }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Single-channel same-padded 3D convolution.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: ParamId,
    pub ks: usize,
}

impl Conv3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ks: usize) -> Result<Self> {
        if ks % 2 == 0 || ks == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {ks}")));
        }
        let w = store.add(format!("{name}.w"), vec![ks, ks, ks], Init::Uniform { fan_in: ks * ks * ks });
        let b = store.add(format!("{name}.b"), vec![1], Init::Zeros);
        Ok(Self { w, b, ks })
    }

    /// `x [B, L, N, N] -> [B, L, N, N]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv3d_same(x, w, b)
    }
}

/// LSTM cell with separate forget/input/output/candidate weights over the
/// concatenation `[h_{t−1}, x_t]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: [ParamId; 4],
    pub b: [ParamId; 4],
    pub input: usize,
    pub hidden: usize,
}

/// A cell's parameters placed on a graph once per forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    w: [Var; 4],
    b: [Var; 4],
}

impl LstmCell {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize) -> Self {
        let fan_in = input + hidden;
        let gate = |store: &mut ParamStore<T>, g: &str| {
            store.add(format!("{name}.w_{g}"), vec![fan_in, hidden], Init::Uniform { fan_in })
        };
        let w = [gate(store, "f"), gate(store, "i"), gate(store, "o"), gate(store, "c")];
        let bias = |store: &mut ParamStore<T>, g: &str| store.add(format!("{name}.b_{g}"), vec![hidden], Init::Zeros);
        let b = [bias(store, "f"), bias(store, "i"), bias(store, "o"), bias(store, "c")];
        Self { w, b, input, hidden }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> BoundLstm {
        BoundLstm {
            w: self.w.map(|p| g.param(store, p)),
            b: self.b.map(|p| g.param(store, p)),
        }
    }
}

impl BoundLstm {
    /// One step on `x [B, input]` with state `h, c [B, hidden]`; returns
    /// `(h_t, C_t)`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hx = g.concat_last(&[h, x])?;
        let mut pre = [hx; 4];
        for k in 0..4 {
            let z = g.matmul(hx, self.w[k])?;
            pre[k] = g.add_bias(z, self.b[k])?;
        }
        let f = g.sigmoid(pre[0]);
        let i = g.sigmoid(pre[1]);
        let o = g.sigmoid(pre[2]);
        let cand = g.tanh(pre[3]);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Runs the cell over `x [B, L, d]` from zero state, in reverse time
    /// order when `reverse`; outputs are returned in original time order.
    pub fn run<T: Real>(&self, g: &mut Graph<T>, x: Var, hidden: usize, reverse: bool) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let (b, l) = (shape[0], shape[1]);
        let mut h = g.input(super::Tensor::zeros(vec![b, hidden]));
        let mut c = h;
        let mut out = vec![h; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let xt = g.select_time(x, t)?;
            let (hn, cn) = self.step(g, xt, h, c)?;
            h = hn;
            c = cn;
            out[t] = h;
        }
        Ok(out)
    }
}

/// Stacked bidirectional LSTM returning every step of the last layer.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("BiLSTM needs at least one layer".into()));
        }
        let layers = (0..layers)
            .map(|k| {
                let d = if k == 0 { input } else { 2 * hidden };
                (
                    LstmCell::new(store, &format!("{name}.{k}.fwd"), d, hidden),
                    LstmCell::new(store, &format!("{name}.{k}.bwd"), d, hidden),
                )
            })
            .collect();
        Ok(Self { layers, hidden })
    }

    /// `x [B, L, d] -> [B, L, 2·hidden]`, forward half first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut cur = x;
        for (fwd, bwd) in &self.layers {
            let (bf, bb) = (fwd.bind(g, store), bwd.bind(g, store));
            let hf = bf.run(g, cur, self.hidden, false)?;
            let hb = bb.run(g, cur, self.hidden, true)?;
            let steps = hf
                .iter()
                .zip(&hb)
                .map(|(&a, &b)| g.concat_last(&[a, b]))
                .collect::<Result<Vec<_>>>()?;
            cur = g.stack_time(&steps)?;
        }
        Ok(cur)
    }
}

/// Multi-head self-attention with bias-free Q/K/V/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wc: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide model width {dim}")));
        }
        let mut p = |s: &str| store.add(format!("{name}.w_{s}"), vec![dim, dim], Init::Uniform { fan_in: dim });
        Ok(Self {
            wq: p("q"),
            wk: p("k"),
            wv: p("v"),
            wc: p("c"),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x [B, L, D] -> [B, L, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }

    /// Output plus the per-head attention matrices `[B, L, L]`.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let proj = |g: &mut Graph<T>, id: ParamId| -> Result<Var> {
            let w = g.param(store, id);
            g.matmul(x, w)
        };
        let q = proj(g, self.wq)?;
        let k = proj(g, self.wk)?;
        let v = proj(g, self.wv)?;
        let dk = self.head_dim();
        let scale = T::one() / T::from_len(dk).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_last(q, h * dk, dk)?;
            let kh = g.slice_last(k, h * dk, dk)?;
            let vh = g.slice_last(v, h * dk, dk)?;
            let s = g.bmm_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax_last(s);
            weights.push(a);
            outs.push(g.bmm(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_last(&outs)? };
        let wc = g.param(store, self.wc);
        Ok((g.matmul(cat, wc)?, weights))
    }
}

/// Inverted dropout: in training, zero each element with probability `p`
/// and scale survivors by `1/(1−p)`; identity otherwise.
pub fn dropout<T: Real, R: Rng>(g: &mut Graph<T>, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let mask = (0..g.value(x).numel())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    g.mul_const(x, mask)
}
