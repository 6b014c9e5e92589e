//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the graph through [`Graph::param`]; groups listed in the graph's
//! [`FreezeSet`] enter as constants and never receive gradients, so frozen
//! sub-networks cost a forward pass only.

use std::collections::HashMap;

use crate::params::{FreezeSet, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, bias: Var },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    MaxRows { a: Var, argmax: Vec<usize> },
    Sum(Var),
    Pick { a: Var, idx: Vec<(usize, usize)> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvToSeq(Var),
    Reshape(Var),
    /// Loss node whose gradient w.r.t. its input was computed in the forward pass.
    Precomputed { input: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Shape bookkeeping for one "same"-padded strided convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    /// Output length `ceil(n / stride)`, padding split as evenly as possible
    /// with the extra row at the bottom/right.
    pub fn same(in_ch: usize, out_ch: usize, in_h: usize, in_w: usize, k: (usize, usize), s: (usize, usize)) -> Self {
        let out_h = in_h.div_ceil(s.0);
        let out_w = in_w.div_ceil(s.1);
        let pad_h = ((out_h - 1) * s.0 + k.0).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * s.1 + k.1).saturating_sub(in_w);
        Self {
            in_ch,
            out_ch,
            in_h,
            in_w,
            kh: k.0,
            kw: k.1,
            sh: s.0,
            sw: s.1,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    #[inline]
    fn input_index(&self, oh: usize, ow: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let h = (oh * self.sh + i) as isize - self.pad_top as isize;
        let w = (ow * self.sw + j) as isize - self.pad_left as isize;
        if h < 0 || w < 0 || h >= self.in_h as isize || w >= self.in_w as isize {
            None
        } else {
            Some((h as usize, w as usize))
        }
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    frozen: FreezeSet,
    grad_enabled: bool,
    params: HashMap<ParamKey, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl Graph {
    /// Graph that tracks gradients for every parameter group not in `frozen`.
    pub fn new(frozen: FreezeSet) -> Self {
        Self { nodes: Vec::with_capacity(1024), frozen, grad_enabled: true, params: HashMap::new() }
    }

    /// Graph that tracks nothing; used for evaluation.
    pub fn inference() -> Self {
        Self { nodes: Vec::with_capacity(1024), frozen: FreezeSet::all(), grad_enabled: false, params: HashMap::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !requires_grad, "non-finite value from {op:?}");
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that always receives a gradient (used by gradient checks on inputs).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Brings parameter `index` of `store` into the graph, once per graph.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = ParamKey { store: store.uid(), index };
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let p = store.get(index);
        let trainable = !self.frozen.contains(p.group);
        let v = self.push(p.value.clone(), Op::Param, trainable);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = vec![0.0; m * n];
        gemm(av.data(), av.rows(), av.cols(), ta, bv.data(), bv.rows(), bv.cols(), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch in {op:?}");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let n = av.cols();
        assert_eq!(bv.len(), n, "bias width");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_slice_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow { a, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            softmax_in_place(t.row_slice_mut(r));
        }
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for r in 0..t.rows() {
            let row = t.row_slice_mut(r);
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(a);
        self.push(t, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::matrix(rows, n, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    /// Gathers rows `ids` of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tv.rows(), "embedding id {i} out of range {}", tv.rows());
            out.extend_from_slice(tv.row_slice(i));
        }
        let rg = self.rg(table);
        self.push(Tensor::matrix(ids.len(), d, out), Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let rows = av.rows();
        assert!(start + len <= av.cols());
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(rows, len, out), Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows);
            let c = pv.cols();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(pv.row_slice(r));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let c = av.cols();
        assert!(start + len <= av.rows());
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, c, out), Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c);
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::matrix(rows, c, out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Column-wise maximum over rows, `[T, n] -> [1, n]`. Ties route the
    /// gradient to the earliest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, n) = (av.rows(), av.cols());
        assert!(rows >= 1);
        let mut best = av.row_slice(0).to_vec();
        let mut argmax = vec![0; n];
        for r in 1..rows {
            for (j, &v) in av.row_slice(r).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row(best), Op::MaxRows { a, argmax }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gathers individual entries `(row, col)` into a `[1, k]` row.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let out = idx.iter().map(|&(r, j)| av.data()[r * c + j]).collect();
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::Pick { a, idx: idx.to_vec() }, rg)
    }

    /// 2D convolution of `[C_in, H, W]` by `[C_out, C_in, kh, kw]` plus a
    /// `[1, C_out]` bias, giving `[C_out, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let g = geom;
        let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
        for co in 0..g.out_ch {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = bv[co];
                    for ci in 0..g.in_ch {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                if let Some((h, ww)) = g.input_index(oh, ow, i, j) {
                                    acc += wv[((co * g.in_ch + ci) * g.kh + i) * g.kw + j]
                                        * xv[(ci * g.in_h + h) * g.in_w + ww];
                                }
                            }
                        }
                    }
                    out[(co * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![g.out_ch, g.out_h, g.out_w], out), Op::Conv2d { x, w, b, geom }, rg)
    }

    /// `[C, T, W] -> [T, C*W]`: one feature row per time step.
    pub fn conv_to_seq(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (c, t, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let mut out = vec![0.0; t * c * w];
        for ci in 0..c {
            for ti in 0..t {
                for wi in 0..w {
                    out[ti * c * w + ci * w + wi] = av.data()[(ci * t + ti) * w + wi];
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(t, c * w, out), Op::ConvToSeq(a), rg)
    }

    /// Reinterprets a `[T, D]` matrix as a one-channel `[1, T, D]` plane.
    pub fn as_plane(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let (t, d) = (av.rows(), av.cols());
        let rg = self.rg(a);
        self.push(av.reshape(vec![1, t, d]), Op::Reshape(a), rg)
    }

    /// Scalar loss with an externally computed gradient w.r.t. `input`.
    pub fn precomputed_loss(&mut self, input: Var, loss: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(input).shape());
        let rg = self.rg(input);
        self.push(Tensor::scalar(loss), Op::Precomputed { input, grad }, rg)
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; av.len()];
                    if !ta {
                        gemm(gy.data(), gy.rows(), gy.cols(), false, bv.data(), bv.rows(), bv.cols(), !tb, &mut da, false);
                    } else {
                        gemm(bv.data(), bv.rows(), bv.cols(), *tb, gy.data(), gy.rows(), gy.cols(), true, &mut da, false);
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bv.len()];
                    if !tb {
                        gemm(av.data(), av.rows(), av.cols(), !ta, gy.data(), gy.rows(), gy.cols(), false, &mut db, false);
                    } else {
                        gemm(gy.data(), gy.rows(), gy.cols(), true, av.data(), av.rows(), av.cols(), *ta, &mut db, false);
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, || gy.data().to_vec());
                self.acc_if(grads, *b, || gy.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, || gy.data().to_vec());
                self.acc_if(grads, *b, || gy.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc_if(grads, *a, || zip_map(gy.data(), bv.data(), |g, y| g * y));
                self.acc_if(grads, *b, || zip_map(gy.data(), av.data(), |g, x| g * x));
            }
            Op::AddRow { a, bias } => {
                self.acc_if(grads, *a, || gy.data().to_vec());
                self.acc_if(grads, *bias, || {
                    let mut db = vec![0.0; gy.cols()];
                    for r in 0..gy.rows() {
                        for (d, g) in db.iter_mut().zip(gy.row_slice(r)) {
                            *d += g;
                        }
                    }
                    db
                });
            }
            Op::Scale(a, s) => self.acc_if(grads, *a, || gy.data().iter().map(|g| g * s).collect()),
            Op::Tanh(a) => self.acc_if(grads, *a, || zip_map(gy.data(), y.data(), |g, t| g * (1.0 - t * t))),
            Op::Sigmoid(a) => self.acc_if(grads, *a, || zip_map(gy.data(), y.data(), |g, s| g * s * (1.0 - s))),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip_map(gy.data(), x.data(), |g, x| g * gelu_grad(x)));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                self.acc_if(grads, *a, || zip_map(gy.data(), x.data(), |g, x| g * sign(x)));
            }
            Op::SoftmaxRows(a) => self.acc_if(grads, *a, || {
                let mut dx = vec![0.0; y.len()];
                let c = y.cols();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                dx
            }),
            Op::LogSoftmaxRows(a) => self.acc_if(grads, *a, || {
                let mut dx = vec![0.0; y.len()];
                let c = y.cols();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gy.row_slice(r));
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dx[r * c + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                dx
            }),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = y.cols();
                let rows = y.rows();
                let g = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gy.data()[r * n + j] * xhat[r * n + j];
                        }
                    }
                    accumulate(grads, *gamma, self.value(*gamma).shape(), dg);
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += gy.data()[r * n + j];
                        }
                    }
                    accumulate(grads, *beta, self.value(*beta).shape(), db);
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * n];
                    let nf = n as f64;
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gy.data()[r * n + j] * g[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dxh = gy.data()[r * n + j] * g[j];
                            dx[r * n + j] = inv_std[r] / nf * (nf * dxh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    accumulate(grads, *x, y.shape(), dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                self.acc_if(grads, *table, || {
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += gy.data()[r * d + j];
                        }
                    }
                    dt
                });
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                self.acc_if(grads, *a, || {
                    let (rows, c, len) = (av.rows(), av.cols(), gy.cols());
                    let mut da = vec![0.0; av.len()];
                    for r in 0..rows {
                        da[r * c + start..r * c + start + len].copy_from_slice(gy.row_slice(r));
                    }
                    da
                });
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for r in 0..gy.rows() {
                            dp.extend_from_slice(&gy.data()[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, p, pv.shape(), dp);
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                self.acc_if(grads, *a, || {
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    da[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                    da
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.rg(p) {
                        accumulate(grads, p, pv.shape(), gy.data()[off..off + pv.len()].to_vec());
                    }
                    off += pv.len();
                }
            }
            Op::MaxRows { a, argmax } => {
                let av = self.value(*a);
                self.acc_if(grads, *a, || {
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (j, &r) in argmax.iter().enumerate() {
                        da[r * c + j] += gy.data()[j];
                    }
                    da
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let g = gy.item();
                self.acc_if(grads, *a, || vec![g; n]);
            }
            Op::Pick { a, idx } => {
                let av = self.value(*a);
                self.acc_if(grads, *a, || {
                    let c = av.cols();
                    let mut da = vec![0.0; av.len()];
                    for (k, &(r, j)) in idx.iter().enumerate() {
                        da[r * c + j] += gy.data()[k];
                    }
                    da
                });
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(gy, *x, *w, *b, *geom, grads),
            Op::ConvToSeq(a) => {
                let av = self.value(*a);
                self.acc_if(grads, *a, || {
                    let (c, t, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let mut da = vec![0.0; av.len()];
                    for ci in 0..c {
                        for ti in 0..t {
                            for wi in 0..w {
                                da[(ci * t + ti) * w + wi] = gy.data()[ti * c * w + ci * w + wi];
                            }
                        }
                    }
                    da
                });
            }
            Op::Reshape(a) => self.acc_if(grads, *a, || gy.data().to_vec()),
            Op::Precomputed { input, grad } => {
                let g = gy.item();
                self.acc_if(grads, *input, || grad.data().iter().map(|v| v * g).collect());
            }
        }
    }

    fn conv_backward(&self, gy: &Tensor, x: Var, w: Var, b: Var, g: ConvGeom, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gyd = gy.data();
        if self.rg(b) {
            let mut db = vec![0.0; g.out_ch];
            for (co, d) in db.iter_mut().enumerate() {
                *d = gyd[co * g.out_h * g.out_w..(co + 1) * g.out_h * g.out_w].iter().sum();
            }
            accumulate(grads, b, self.value(b).shape(), db);
        }
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if !need_x && !need_w {
            return;
        }
        let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
        let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
        for co in 0..g.out_ch {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let go = gyd[(co * g.out_h + oh) * g.out_w + ow];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..g.in_ch {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                if let Some((h, ww)) = g.input_index(oh, ow, i, j) {
                                    let wi = ((co * g.in_ch + ci) * g.kh + i) * g.kw + j;
                                    let xi = (ci * g.in_h + h) * g.in_w + ww;
                                    if need_w {
                                        dw[wi] += go * xv[xi];
                                    }
                                    if need_x {
                                        dx[xi] += go * wv[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, self.value(x).shape(), dx);
        }
        if need_w {
            accumulate(grads, w, self.value(w).shape(), dw);
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.rg(v) {
            accumulate(grads, v, self.value(v).shape(), f());
        }
    }

    /// Gradients of every trainable parameter that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamKey, Tensor)> {
        let mut out: Vec<(ParamKey, Tensor)> = self
            .params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .filter_map(|(k, v)| grads.get(*v).map(|g| (*k, g.clone())))
            .collect();
        out.sort_by_key(|(k, _)| (k.store, k.index));
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), delta)),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
