//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep.

use crate::tensor::gemm;
use crate::{Result, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

/// Per-channel batch statistics observed by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-average updates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    AddRowBias {
        x: usize,
        bias: usize,
    },
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Normalize {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    RowDot(usize, usize),
    LogSoftmaxRows {
        x: usize,
        mask: Option<Vec<bool>>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Sum(usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    KlDiv {
        p: usize,
        q: usize,
        floor: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// (batch, channels, spatial) view of a 2-D `(N, C)` or 4-D `(N, C, H, W)` tensor.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient (parameters, attacked inputs).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    /// Weighted sum of scalars or equally shaped tensors.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let (c0, v0) = *terms
            .first()
            .ok_or(TensorError::Empty("linear_combination"))?;
        let mut acc = self.scale(v0, c0);
        for &(c, v) in &terms[1..] {
            let s = self.scale(v, c);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, ka) = if trans_a {
            (ta.shape()[1], ta.shape()[0])
        } else {
            (ta.shape()[0], ta.shape()[1])
        };
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if ka != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            ka,
            n,
            ta.data(),
            trans_a,
            tb.data(),
            trans_b,
            out.data_mut(),
            0.0,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            out,
            Op::Matmul {
                a: a.0,
                b: b.0,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    /// `x (N, D) + bias (D)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.ndim() != 2 || tb.ndim() != 1 || tx.shape()[1] != tb.len() {
            return Err(mismatch("add_row_bias", tx, tb));
        }
        let d = tb.len();
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % d];
        }
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(
            out,
            Op::AddRowBias {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > 30.0 { v } else { v.exp().ln_1p() });
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Softplus(x.0), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Exp(x.0), rg)
    }

    /// 2-D convolution without bias. `x` is `(N, C, H, W)`, `w` is `(O, C, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (&[n, c, h, wd], &[o, cw, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv2d", tx, tw));
        };
        if c != cw || geom.stride == 0 || h + 2 * geom.padding < kh || wd + 2 * geom.padding < kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        let (ho, wo) = conv_out(h, wd, kh, kw, geom);
        let l = ho * wo;
        let ckk = c * kh * kw;
        let cols = im2col(tx.data(), n, c, h, wd, kh, kw, geom, ho, wo);
        let mut y = vec![0.0; o * n * l];
        gemm(o, ckk, n * l, tw.data(), false, &cols, false, &mut y, 0.0);
        // (O, N*L) -> (N, O, L)
        let mut out = vec![0.0; n * o * l];
        for oc in 0..o {
            for s in 0..n {
                let src = &y[oc * n * l + s * l..oc * n * l + (s + 1) * l];
                out[(s * o + oc) * l..(s * o + oc + 1) * l].copy_from_slice(src);
            }
        }
        let out = Tensor::new(vec![n, o, ho, wo], out)?;
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
                cols: if rg { cols } else { Vec::new() },
            },
            rg,
        ))
    }

    /// Training-mode normalization: per-channel statistics of this batch.
    /// Accepts `(N, C)` or `(N, C, H, W)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (n, c, hw) =
            channel_layout(tx.shape()).ok_or_else(|| mismatch("batch_norm", tx, tx))?;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                mean[ch] += tx.data()[base..base + hw].iter().sum::<f64>();
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                var[ch] += tx.data()[base..base + hw]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.affine_normalize(x, gamma, beta, &mean, inv_std, true)?;
        Ok((
            v,
            BatchStats {
                mean,
                var: unbiased,
            },
        ))
    }

    /// Evaluation-mode normalization with fixed statistics.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.affine_normalize(x, gamma, beta, mean, inv_std, false)
    }

    fn affine_normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c, hw) =
            channel_layout(tx.shape()).ok_or_else(|| mismatch("batch_norm", tx, tg))?;
        if tg.len() != c || tb.len() != c || mean.len() != c || inv_std.len() != c {
            return Err(mismatch("batch_norm", tx, tg));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let h = (tx.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = tg.data()[ch] * h + tb.data()[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::Normalize {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[n, c, h, w] = tx.shape() else {
            return Err(mismatch("global_avg_pool", tx, tx));
        };
        let hw = h * w;
        let data = tx
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::GlobalAvgPool(x.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Rows scaled to unit L2 norm. Rows with norm below `1e-12` are divided by
    /// `1e-12`; callers that need an error for zero rows must check first.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 {
            return Err(mismatch("normalize_rows", tx, tx));
        }
        let d = tx.shape()[1];
        let norms: Vec<f64> = tx
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i / d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::NormalizeRows { x: x.0, norms }, rg))
    }

    /// Row-wise inner products of two `(N, D)` matrices, giving `(N)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || ta.shape() != tb.shape() {
            return Err(mismatch("row_dot", ta, tb));
        }
        let d = ta.shape()[1];
        let data = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let out = Tensor::from_vec(data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::RowDot(a.0, b.0), rg))
    }

    /// Row-wise log-softmax of a 2-D tensor. Entries where `mask` is `false`
    /// are excluded from the normalizer and come out as `-inf`.
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || mask.as_ref().is_some_and(|m| m.len() != tx.len()) {
            return Err(mismatch("log_softmax_rows", tx, tx));
        }
        let d = tx.shape()[1];
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = vec![f64::NEG_INFINITY; tx.len()];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let idx = |j: usize| r * d + j;
            let max = (0..d)
                .filter(|&j| keep(idx(j)))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Empty("log_softmax_rows: fully masked row"));
            }
            let lse = max
                + (0..d)
                    .filter(|&j| keep(idx(j)))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..d).filter(|&j| keep(idx(j))) {
                out[idx(j)] = row[j] - lse;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::LogSoftmaxRows { x: x.0, mask }, rg))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || idx.len() != tx.shape()[0] {
            return Err(mismatch("gather", tx, tx));
        }
        let d = tx.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(TensorError::OutOfRange {
                op: "gather",
                index: bad,
                bound: d,
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &j)| tx.data()[r * d + j])
            .collect();
        let out = Tensor::from_vec(data);
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Gather { x: x.0, idx }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::SliceRows { x: x.0, start }, rg))
    }

    /// `Σ p log(p / max(q, floor))` with `0 · log 0 = 0`. Equal-length 1-D inputs.
    pub fn kl_div(&mut self, p: Var, q: Var, floor: f64) -> Result<Var> {
        let (tp, tq) = (self.value(p), self.value(q));
        if tp.len() != tq.len() {
            return Err(mismatch("kl_div", tp, tq));
        }
        let value = tp
            .data()
            .iter()
            .zip(tq.data())
            .map(|(&a, &b)| kl_term(a, b, floor))
            .sum();
        let rg = self.rg(&[p.0, q.0]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDiv {
                p: p.0,
                q: q.0,
                floor,
            },
            rg,
        ))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = &self.nodes[out.0].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(root.shape(), 1.0));
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, f: &dyn Fn() -> Tensor| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let d = f();
            match &mut grads[i] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|| g.clone());
                acc(*b, &|| g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, &|| g.clone());
                acc(*b, &|| g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|| zip_map(g, tb, |x, y| x * y));
                acc(*b, &|| zip_map(g, ta, |x, y| x * y));
            }
            Op::Scale(a, c) => acc(*a, &|| g.map(|v| v * c)),
            Op::Matmul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if *trans_a {
                    ta.shape()[0]
                } else {
                    ta.shape()[1]
                };
                // C = A B: dA = G Bᵀ, dB = Aᵀ G (adjusted for stored transposes).
                acc(*a, &|| {
                    let mut d = Tensor::zeros(ta.shape());
                    if *trans_a {
                        // A stored (k, m): dA_stored = op(B) Gᵀ
                        gemm(k, n, m, tb.data(), *trans_b, gd, true, d.data_mut(), 0.0);
                    } else {
                        gemm(m, n, k, gd, false, tb.data(), !*trans_b, d.data_mut(), 0.0);
                    }
                    d
                });
                acc(*b, &|| {
                    let mut d = Tensor::zeros(tb.shape());
                    if *trans_b {
                        // B stored (n, k): dB_stored = Gᵀ op(A)
                        gemm(n, m, k, gd, true, ta.data(), *trans_a, d.data_mut(), 0.0);
                    } else {
                        gemm(k, m, n, ta.data(), !*trans_a, gd, false, d.data_mut(), 0.0);
                    }
                    d
                });
            }
            Op::AddRowBias { x, bias } => {
                acc(*x, &|| g.clone());
                acc(*bias, &|| {
                    let d = val(*bias).len();
                    let mut out = vec![0.0; d];
                    for (i, v) in gd.iter().enumerate() {
                        out[i % d] += v;
                    }
                    Tensor::from_vec(out)
                });
            }
            Op::Relu(x) => acc(*x, &|| {
                zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
            }),
            Op::Softplus(x) => acc(*x, &|| {
                zip_map(g, val(*x), |gv, xv| gv / (1.0 + (-xv).exp()))
            }),
            Op::Exp(x) => acc(*x, &|| zip_map(g, &node.value, |gv, y| gv * y)),
            Op::Conv2d { x, w, geom, cols } => {
                let (tx, tw) = (val(*x), val(*w));
                let &[n, c, h, wd] = tx.shape() else {
                    unreachable!()
                };
                let &[o, _, kh, kw] = tw.shape() else {
                    unreachable!()
                };
                let (ho, wo) = conv_out(h, wd, kh, kw, *geom);
                let l = ho * wo;
                let ckk = c * kh * kw;
                // (N, O, L) -> (O, N*L)
                let mut gy = vec![0.0; o * n * l];
                for s in 0..n {
                    for oc in 0..o {
                        let src = &gd[(s * o + oc) * l..(s * o + oc + 1) * l];
                        gy[oc * n * l + s * l..oc * n * l + (s + 1) * l].copy_from_slice(src);
                    }
                }
                acc(*w, &|| {
                    let mut d = Tensor::zeros(tw.shape());
                    gemm(o, n * l, ckk, &gy, false, cols, true, d.data_mut(), 0.0);
                    d
                });
                acc(*x, &|| {
                    let mut dcols = vec![0.0; ckk * n * l];
                    gemm(ckk, o, n * l, tw.data(), true, &gy, false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, n, c, h, wd, kh, kw, *geom, ho, wo);
                    Tensor::new(tx.shape().to_vec(), dx).expect("conv2d input grad")
                });
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let tx = val(*x);
                let tg = val(*gamma);
                let (n, c, hw) = channel_layout(tx.shape()).expect("normalize layout");
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                acc(*gamma, &|| Tensor::from_vec(dgamma.clone()));
                acc(*beta, &|| Tensor::from_vec(dbeta.clone()));
                acc(*x, &|| {
                    let mut dx = vec![0.0; tx.len()];
                    let m = (n * hw) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let gm = tg.data()[ch];
                            for i in base..base + hw {
                                dx[i] = if *batch_stats {
                                    // dxhat = g * gamma; Σ dxhat = gamma * dbeta; Σ dxhat * xhat = gamma * dgamma
                                    gm * inv_std[ch] / m
                                        * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gm * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    Tensor::new(tx.shape().to_vec(), dx).expect("normalize input grad")
                });
            }
            Op::GlobalAvgPool(x) => acc(*x, &|| {
                let tx = val(*x);
                let hw = tx.shape()[2] * tx.shape()[3];
                let data = (0..tx.len()).map(|i| gd[i / hw] / hw as f64).collect();
                Tensor::new(tx.shape().to_vec(), data).expect("pool grad")
            }),
            Op::Reshape(x) => acc(*x, &|| {
                g.clone().reshape(val(*x).shape()).expect("reshape grad")
            }),
            Op::NormalizeRows { x, norms } => acc(*x, &|| {
                let y = &node.value;
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                Tensor::new(y.shape().to_vec(), dx).expect("normalize_rows grad")
            }),
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.shape()[1];
                acc(*a, &|| {
                    let data = (0..ta.len()).map(|i| gd[i / d] * tb.data()[i]).collect();
                    Tensor::new(ta.shape().to_vec(), data).expect("row_dot grad")
                });
                acc(*b, &|| {
                    let data = (0..tb.len()).map(|i| gd[i / d] * ta.data()[i]).collect();
                    Tensor::new(tb.shape().to_vec(), data).expect("row_dot grad")
                });
            }
            Op::LogSoftmaxRows { x, mask } => acc(*x, &|| {
                let y = &node.value;
                let d = y.shape()[1];
                let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.shape()[0] {
                    let gsum: f64 = (r * d..(r + 1) * d)
                        .filter(|&i| keep(i))
                        .map(|i| gd[i])
                        .sum();
                    for i in (r * d..(r + 1) * d).filter(|&i| keep(i)) {
                        dx[i] = gd[i] - y.data()[i].exp() * gsum;
                    }
                }
                Tensor::new(y.shape().to_vec(), dx).expect("log_softmax grad")
            }),
            Op::Gather { x, idx } => acc(*x, &|| {
                let tx = val(*x);
                let d = tx.shape()[1];
                let mut dx = Tensor::zeros(tx.shape());
                for (r, &j) in idx.iter().enumerate() {
                    dx.data_mut()[r * d + j] += gd[r];
                }
                dx
            }),
            Op::Sum(x) => acc(*x, &|| Tensor::full(val(*x).shape(), gd[0])),
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &i in ids {
                    let len = val(i).len();
                    let start = offset;
                    acc(i, &|| {
                        Tensor::new(val(i).shape().to_vec(), gd[start..start + len].to_vec())
                            .expect("concat grad")
                    });
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => acc(*x, &|| {
                let tx = val(*x);
                let w = tx.row_len();
                let mut dx = Tensor::zeros(tx.shape());
                dx.data_mut()[start * w..start * w + gd.len()].copy_from_slice(gd);
                dx
            }),
            Op::KlDiv { p, q, floor } => {
                let (tp, tq) = (val(*p), val(*q));
                let s = gd[0];
                acc(*p, &|| {
                    zip_map(tp, tq, |a, b| {
                        if a > 0.0 {
                            s * (a.ln() - b.max(*floor).ln() + 1.0)
                        } else {
                            0.0
                        }
                    })
                });
                acc(*q, &|| {
                    zip_map(tp, tq, |a, b| if b >= *floor { -s * a / b } else { 0.0 })
                });
            }
        }
    }
}

/// One summand of the smoothed KL divergence.
pub fn kl_term(p: f64, q: f64, floor: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - q.max(floor).ln())
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shapes")
}

fn conv_out(h: usize, w: usize, kh: usize, kw: usize, geom: ConvGeometry) -> (usize, usize) {
    (
        (h + 2 * geom.padding - kh) / geom.stride + 1,
        (w + 2 * geom.padding - kw) / geom.stride + 1,
    )
}

/// Columns laid out `(C*kh*kw, N*Ho*Wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let l = ho * wo;
    let width = n * l;
    let mut cols = vec![0.0; c * kh * kw * width];
    let pad = geom.padding as isize;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let dst = &mut cols[row * width..(row + 1) * width];
                for s in 0..n {
                    let plane = &x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + i) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out = &mut dst[s * l + oy * wo..s * l + (oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + j) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeometry,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let l = ho * wo;
    let width = n * l;
    let mut x = vec![0.0; n * c * h * w];
    let pad = geom.padding as isize;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let src = &cols[row * width..(row + 1) * width];
                for s in 0..n {
                    let plane = &mut x[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * geom.stride + i) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * geom.stride + j) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[s * l + oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
