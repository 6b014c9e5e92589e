//! Layers shared by the speech encoder, the text teacher and the acoustic model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = store.add_normal(format!("{name}.weight"), group, &[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), rng);
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[1, out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn weight_id(&self) -> usize {
        self.w
    }

    pub fn bias_id(&self) -> usize {
        self.b
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    gamma: usize,
    beta: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[1, dim], 1.0));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[1, dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Shape of a BERT-style encoder stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Longest input, CLS included.
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer required".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for CLS and one token".into()));
        }
        if self.vocab_size == 0 || self.ff_dim == 0 {
            return Err(Error::Config("vocab_size and ff_dim must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of [`Transformer`].
    pub fn num_params(&self) -> usize {
        let d = self.d_model;
        let f = self.ff_dim;
        let embeddings = self.vocab_size * d + self.max_len * d + 2 * d;
        let block = 2 * d + 4 * Linear::num_params(d, d) + 2 * d + Linear::num_params(d, f) + Linear::num_params(f, d);
        embeddings + self.layers * block + 2 * d
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer encoder with learned absolute position embeddings.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    tok: usize,
    pos: usize,
    emb_ln: LayerNorm,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

impl Transformer {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, group: ParamGroup, cfg: TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let tok = store.add_normal(format!("{prefix}.tok_emb"), group, &[cfg.vocab_size, d], 1.0, rng);
        let pos = store.add_normal(format!("{prefix}.pos_emb"), group, &[cfg.max_len, d], 0.5, rng);
        let emb_ln = LayerNorm::new(store, &format!("{prefix}.emb_ln"), group, d);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), group, d),
                    q: Linear::new(store, &format!("{p}.attn.q"), group, d, d, rng),
                    k: Linear::new(store, &format!("{p}.attn.k"), group, d, d, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), group, d, d, rng),
                    o: Linear::new(store, &format!("{p}.attn.o"), group, d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), group, d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), group, d, cfg.ff_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), group, cfg.ff_dim, d, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{prefix}.final_ln"), group, d);
        Self { cfg, tok, pos, emb_ln, blocks, final_ln }
    }

    /// Encodes `ids` (CLS already in place) into `[n, d_model]` states.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let n = ids.len();
        assert!(n <= self.cfg.max_len, "sequence longer than max_len");
        let tok = g.param(store, self.tok);
        let pos = g.param(store, self.pos);
        let e = g.embedding(tok, ids);
        let positions: Vec<usize> = (0..n).collect();
        let p = g.embedding(pos, &positions);
        let x = g.add(e, p);
        let mut x = self.emb_ln.forward(g, store, x);
        for b in &self.blocks {
            let h = b.ln1.forward(g, store, x);
            let a = self.attention(g, store, b, h);
            x = g.add(x, a);
            let h = b.ln2.forward(g, store, x);
            let h = b.ff1.forward(g, store, h);
            let h = g.gelu(h);
            let h = b.ff2.forward(g, store, h);
            x = g.add(x, h);
        }
        self.final_ln.forward(g, store, x)
    }

    fn attention(&self, g: &mut Graph, store: &ParamStore, b: &Block, x: Var) -> Var {
        let q = b.q.forward(g, store, x);
        let k = b.k.forward(g, store, x);
        let v = b.v.forward(g, store, x);
        let dh = self.cfg.d_model / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.cfg.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let s = g.matmul_t(qh, kh, false, true);
                let s = g.scale(s, scale);
                let p = g.softmax_rows(s);
                g.matmul(p, vh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        b.o.forward(g, store, cat)
    }
}

/// One direction of a GRU layer (gate order: reset, update, candidate).
#[derive(Clone, Debug)]
struct GruDirection {
    w_ih: usize,
    b_ih: usize,
    w_hh: usize,
    b_hh: usize,
}

impl GruDirection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, hidden: usize, rng: &mut R) -> Self {
        let std = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: store.add_normal(format!("{name}.w_ih"), group, &[input, 3 * hidden], std, rng),
            b_ih: store.add(format!("{name}.b_ih"), group, Tensor::zeros(&[1, 3 * hidden])),
            w_hh: store.add_normal(format!("{name}.w_hh"), group, &[hidden, 3 * hidden], std, rng),
            b_hh: store.add(format!("{name}.b_hh"), group, Tensor::zeros(&[1, 3 * hidden])),
        }
    }

    /// Runs over `x: [T, input]`, returning one `[1, hidden]` state per step
    /// in input order.
    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, hidden: usize, reverse: bool) -> Vec<Var> {
        let t_len = g.value(x).rows();
        let w_ih = g.param(store, self.w_ih);
        let b_ih = g.param(store, self.b_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_hh = g.param(store, self.b_hh);
        let xw = g.matmul(x, w_ih);
        let xw = g.add_row(xw, b_ih);
        let mut h = g.constant(Tensor::zeros(&[1, hidden]));
        let mut out = vec![h; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let xt = g.slice_rows(xw, t, 1);
            let hw = g.matmul(h, w_hh);
            let hw = g.add_row(hw, b_hh);
            let xr = g.slice_cols(xt, 0, hidden);
            let hr = g.slice_cols(hw, 0, hidden);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xz = g.slice_cols(xt, hidden, hidden);
            let hz = g.slice_cols(hw, hidden, hidden);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xn = g.slice_cols(xt, 2 * hidden, hidden);
            let hn = g.slice_cols(hw, 2 * hidden, hidden);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h
            let d = g.sub(h, n);
            let zd = g.mul(z, d);
            h = g.add(n, zd);
            out[t] = h;
        }
        out
    }
}

/// Bidirectional GRU layer: `[T, input] -> [T, 2 * hidden]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    fwd: GruDirection,
    bwd: GruDirection,
    pub hidden: usize,
}

impl BiGru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fwd: GruDirection::new(store, &format!("{name}.fwd"), group, input, hidden, rng),
            bwd: GruDirection::new(store, &format!("{name}.bwd"), group, input, hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let f = self.fwd.run(g, store, x, self.hidden, false);
        let b = self.bwd.run(g, store, x, self.hidden, true);
        let f = g.concat_rows(&f);
        let b = g.concat_rows(&b);
        g.concat_cols(&[f, b])
    }

    pub fn num_params(input: usize, hidden: usize) -> usize {
        2 * (input * 3 * hidden + 3 * hidden + hidden * 3 * hidden + 3 * hidden)
    }
}
