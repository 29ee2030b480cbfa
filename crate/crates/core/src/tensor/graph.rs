//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] walks it in reverse.

use std::sync::Arc;

use super::attention::{self, AttentionGeometry};
use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::scalar::{gemm, MatView, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimensions of a 3×3, stride-1, zero-padded convolution over `[batch, h, w, c_in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3Dims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<T>, rstds: Vec<T> },
    Softmax { x: usize },
    GatherRows { x: usize, index: Arc<Vec<usize>> },
    MaskRows { x: usize, token: usize, mask: Vec<bool> },
    WindowAttention { qkv: usize, table: usize, geom: Arc<AttentionGeometry>, probs: Vec<T> },
    Conv3x3 { x: usize, w: usize, b: usize, dims: Conv3x3Dims },
    L1Loss { pred: usize, target: usize },
    Sum { x: usize },
    Reshape { x: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    released: bool,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), record: true }
    }

    /// Graph for pure evaluation: parameters are treated as constants, no
    /// backward state is saved and intermediate values may be released.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        assert!(!node.released, "value of node {} was released", v.0);
        &node.value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drop the stored value of every node in `from..self.len()` except `keep`.
    /// Only valid on inference graphs; released nodes can no longer be used.
    pub fn release_since(&mut self, from: usize, keep: &[Var]) {
        assert!(!self.record, "release_since is only valid on inference graphs");
        for (i, node) in self.nodes.iter_mut().enumerate().skip(from) {
            if keep.iter().any(|k| k.0 == i) || node.released {
                continue;
            }
            node.value = Tensor { shape: node.value.shape.clone(), data: Vec::new() };
            node.released = true;
        }
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, released: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.record && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(value, op, requires_grad))
    }

    fn live(&self, v: Var, op: &'static str) -> Result<&Tensor<T>> {
        let node = self.nodes.get(v.0).ok_or_else(|| TensorError::Contract {
            op,
            msg: format!("unknown node {}", v.0),
        })?;
        if node.released {
            return Err(TensorError::Contract { op, msg: format!("node {} was released", v.0) });
        }
        Ok(&node.value)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (x, y) = (self.live(a, op)?, self.live(b, op)?);
        if x.shape() != y.shape() {
            return Err(TensorError::Shape { op, lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        }
        Ok(())
    }

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.live(a, "matmul")?, self.live(b, "matmul")?);
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor { shape, data: out }, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Affine map `x[..., k] · w[k, n] + b[n]`, fused so the bias costs no
    /// extra pass over the output.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.live(x, "linear")?, self.live(w, "linear")?, self.live(b, "linear")?);
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(TensorError::Shape { op: "linear", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        let (m, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
        if bv.shape() != [n] {
            return Err(TensorError::Shape { op: "linear", lhs: vec![n], rhs: bv.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(T::one(), xv.data(), MatView::dense(m, k), wv.data(), MatView::dense(k, n), T::one(), &mut out, MatView::dense(m, n));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("linear", Tensor { shape, data: out }, Op::Linear { x: x.0, w: w.0, b: b.0 }, &[x.0, w.0, b.0])
    }

    /// Broadcast-add a `[n]` bias over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.live(x, "add_bias")?, self.live(bias, "add_bias")?);
        if bv.shape() != [xv.last_dim()] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        self.push("add_bias", value, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("add", value, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor { shape: av.shape().to_vec(), data };
        self.push("mul", value, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.live(x, "gelu")?;
        let mut out = vec![T::zero(); xv.len()];
        kernels::gelu_slice(xv.data(), &mut out);
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        self.push("gelu", value, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Layer normalisation over the last dimension followed by the affine
    /// `gamma`, `beta` (both `[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(TensorError::Contract { op: "layer_norm", msg: "eps must be positive".into() });
        }
        let xv = self.live(x, "layer_norm")?;
        let (gv, bv) = (self.live(gamma, "layer_norm")?, self.live(beta, "layer_norm")?);
        let c = xv.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); xv.len()];
        let (means, rstds) = kernels::layer_norm_rows(xv.data(), gv.data(), bv.data(), eps, &mut out);
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        let (means, rstds) = if self.record { (means, rstds) } else { (Vec::new(), Vec::new()) };
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, means, rstds },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.live(x, "softmax")?;
        let n = xv.last_dim();
        let mut out = xv.data().to_vec();
        kernels::softmax_rows(&mut out, n);
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        self.push("softmax", value, Op::Softmax { x: x.0 }, &[x.0])
    }

    /// Row gather on the `[rows, n]` view: `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.live(x, "gather_rows")?;
        let (rows, n) = (xv.rows(), xv.last_dim());
        if index.is_empty() || index.iter().any(|&i| i >= rows) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("index out of range for {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index.iter() {
            out.extend_from_slice(&xv.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor { shape: vec![index.len(), n], data: out };
        self.push("gather_rows", value, Op::GatherRows { x: x.0, index }, &[x.0])
    }

    /// Replace every row `i` of the `[rows, n]` view with `token` where `mask[i]`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.live(x, "mask_rows")?;
        let tv = self.live(token, "mask_rows")?;
        let (rows, n) = (xv.rows(), xv.last_dim());
        if tv.shape() != [n] || mask.len() != rows {
            return Err(TensorError::Shape {
                op: "mask_rows",
                lhs: xv.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for (row, &m) in out.chunks_exact_mut(n).zip(&mask) {
            if m {
                row.copy_from_slice(tv.data());
            }
        }
        let value = Tensor { shape: xv.shape().to_vec(), data: out };
        self.push("mask_rows", value, Op::MaskRows { x: x.0, token: token.0, mask }, &[x.0, token.0])
    }

    /// Fused windowed multi-head attention, see [`AttentionGeometry`].
    /// `qkv` is `[windows * M², 3C]`, `table` is `[(2M-1)², heads]`.
    pub fn window_attention(&mut self, qkv: Var, table: Var, geom: Arc<AttentionGeometry>) -> Result<Var> {
        let qv = self.live(qkv, "window_attention")?;
        let tv = self.live(table, "window_attention")?;
        let l = geom.tokens_per_window();
        let three_c = qv.last_dim();
        if three_c % 3 != 0 || qv.rows() != geom.windows() * l {
            return Err(TensorError::Contract {
                op: "window_attention",
                msg: format!("qkv shape {:?} does not match {} windows of {l}", qv.shape(), geom.windows()),
            });
        }
        let c = three_c / 3;
        if c % geom.heads() != 0 {
            return Err(TensorError::Contract {
                op: "window_attention",
                msg: format!("{c} channels not divisible by {} heads", geom.heads()),
            });
        }
        if tv.shape() != [geom.table_rows(), geom.heads()] {
            return Err(TensorError::Shape {
                op: "window_attention",
                lhs: vec![geom.table_rows(), geom.heads()],
                rhs: tv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); qv.rows() * c];
        let mut probs = vec![T::zero(); geom.windows() * geom.heads() * l * l];
        attention::forward(&geom, c, qv.data(), tv.data(), &mut out, &mut probs);
        let value = Tensor { shape: vec![qv.rows(), c], data: out };
        let probs = if self.record { probs } else { Vec::new() };
        self.push(
            "window_attention",
            value,
            Op::WindowAttention { qkv: qkv.0, table: table.0, geom, probs },
            &[qkv.0, table.0],
        )
    }

    /// 3×3 zero-padded convolution. `x` holds `[batch, h, w, c_in]` values,
    /// `w` is `[9 * c_in, c_out]` with rows ordered `(ky, kx, c_in)`, `b` is `[c_out]`.
    /// Output is `[batch * h * w, c_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, dims: Conv3x3Dims) -> Result<Var> {
        let xv = self.live(x, "conv3x3")?;
        let (wv, bv) = (self.live(w, "conv3x3")?, self.live(b, "conv3x3")?);
        let Conv3x3Dims { batch, height, width, c_in, c_out } = dims;
        let plane = height * width;
        if xv.len() != batch * plane * c_in || wv.shape() != [9 * c_in, c_out] || bv.shape() != [c_out] {
            return Err(TensorError::Shape { op: "conv3x3", lhs: xv.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        let mut out = vec![T::zero(); batch * plane * c_out];
        let mut cols = vec![T::zero(); plane * 9 * c_in];
        for n in 0..batch {
            let img = &xv.data()[n * plane * c_in..(n + 1) * plane * c_in];
            kernels::im2col3x3(img, height, width, c_in, &mut cols);
            let o = &mut out[n * plane * c_out..(n + 1) * plane * c_out];
            kernels::matmul_into(&cols, wv.data(), o, plane, 9 * c_in, c_out);
            for row in o.chunks_exact_mut(c_out) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let value = Tensor { shape: vec![batch * plane, c_out], data: out };
        self.push("conv3x3", value, Op::Conv3x3 { x: x.0, w: w.0, b: b.0, dims }, &[x.0, w.0, b.0])
    }

    /// Mean absolute error, a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let (p, t) = (self.value(pred), self.value(target));
        let mut acc = T::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            acc += (a - b).abs();
        }
        let value = Tensor::scalar(acc / T::of(p.len() as f64));
        self.push("l1_loss", value, Op::L1Loss { pred: pred.0, target: target.0 }, &[pred.0, target.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.live(x, "sum")?.sum());
        self.push("sum", value, Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.live(x, "reshape")?.clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(TensorError::Contract { op: "backward", msg: "graph was built for inference".into() });
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", root.value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Tensor { shape: self.nodes[i].value.shape.clone(), data }))
            .collect();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect() })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn take_acc(&self, grads: &mut [Option<Vec<T>>], i: usize) -> Vec<T> {
        grads[i].take().unwrap_or_else(|| vec![T::zero(); self.nodes[i].value.len()])
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| &self.nodes[i].value;
        // Accumulators are moved out of `grads` while written and merged back
        // afterwards, which stays correct when one node feeds several inputs.
        let take = |grads: &mut [Option<Vec<T>>], i: usize| -> Option<Vec<T>> {
            self.wants(i).then(|| self.take_acc(grads, i))
        };
        let mut pending: Vec<(usize, Vec<T>)> = Vec::with_capacity(3);
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                if let Some(mut da) = take(grads, a) {
                    gemm(T::one(), g, MatView::dense(m, n), bv.data(), MatView::dense(k, n).t(), T::one(), &mut da, MatView::dense(m, k));
                    pending.push((a, da));
                }
                if let Some(mut db) = take(grads, b) {
                    gemm(T::one(), av.data(), MatView::dense(m, k).t(), g, MatView::dense(m, n), T::one(), &mut db, MatView::dense(k, n));
                    pending.push((b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (m, k, n) = (xv.rows(), xv.last_dim(), wv.shape()[1]);
                if let Some(mut dx) = take(grads, x) {
                    gemm(T::one(), g, MatView::dense(m, n), wv.data(), MatView::dense(k, n).t(), T::one(), &mut dx, MatView::dense(m, k));
                    pending.push((x, dx));
                }
                if let Some(mut dw) = take(grads, w) {
                    gemm(T::one(), xv.data(), MatView::dense(m, k).t(), g, MatView::dense(m, n), T::one(), &mut dw, MatView::dense(k, n));
                    pending.push((w, dw));
                }
                if let Some(mut db) = take(grads, b) {
                    kernels::add_column_sums(g, n, &mut db);
                    pending.push((b, db));
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(mut dx) = take(grads, x) {
                    add_into(&mut dx, g);
                    pending.push((x, dx));
                }
                if let Some(mut db) = take(grads, bias) {
                    kernels::add_column_sums(g, db.len(), &mut db);
                    pending.push((bias, db));
                }
            }
            Op::Add { a, b } => {
                for i in [a, b] {
                    if let Some(mut d) = take(grads, i) {
                        add_into(&mut d, g);
                        pending.push((i, d));
                    }
                }
            }
            Op::Mul { a, b } => {
                for (i, other) in [(a, b), (b, a)] {
                    if let Some(mut d) = take(grads, i) {
                        for ((d, &gv), &ov) in d.iter_mut().zip(g).zip(val(other).data()) {
                            *d += gv * ov;
                        }
                        pending.push((i, d));
                    }
                }
            }
            Op::Gelu { x } => {
                if let Some(mut dx) = take(grads, x) {
                    kernels::gelu_backward_slice(val(x).data(), g, &mut dx);
                    pending.push((x, dx));
                }
            }
            Op::LayerNorm { x, gamma, beta, ref means, ref rstds } => {
                let mut dx = take(grads, x);
                let mut dg = take(grads, gamma);
                let mut db = take(grads, beta);
                kernels::layer_norm_rows_backward(
                    val(x).data(),
                    val(gamma).data(),
                    means,
                    rstds,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                pending.extend([(x, dx), (gamma, dg), (beta, db)].into_iter().filter_map(|(i, d)| d.map(|d| (i, d))));
            }
            Op::Softmax { x } => {
                if let Some(mut dx) = take(grads, x) {
                    let mut local = g.to_vec();
                    kernels::softmax_rows_backward(out.data(), &mut local, out.last_dim());
                    add_into(&mut dx, &local);
                    pending.push((x, dx));
                }
            }
            Op::GatherRows { x, ref index } => {
                if let Some(mut dx) = take(grads, x) {
                    let n = out.last_dim();
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut dx[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                    pending.push((x, dx));
                }
            }
            Op::MaskRows { x, token, ref mask } => {
                let n = out.last_dim();
                if let Some(mut dx) = take(grads, x) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut dx[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        }
                    }
                    pending.push((x, dx));
                }
                if let Some(mut dt) = take(grads, token) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(&mut dt, &g[r * n..(r + 1) * n]);
                        }
                    }
                    pending.push((token, dt));
                }
            }
            Op::WindowAttention { qkv, table, ref geom, ref probs } => {
                let mut dq = take(grads, qkv);
                let mut dt = take(grads, table);
                attention::backward(geom, out.last_dim(), val(qkv).data(), probs, g, dq.as_deref_mut(), dt.as_deref_mut());
                pending.extend([(qkv, dq), (table, dt)].into_iter().filter_map(|(i, d)| d.map(|d| (i, d))));
            }
            Op::Conv3x3 { x, w, b, dims } => {
                let Conv3x3Dims { batch, height, width, c_in, c_out } = dims;
                let plane = height * width;
                let (xv, wv) = (val(x).data(), val(w).data());
                let mut dx = take(grads, x);
                let mut dw = take(grads, w);
                let mut cols = vec![T::zero(); plane * 9 * c_in];
                for n in 0..batch {
                    let gimg = &g[n * plane * c_out..(n + 1) * plane * c_out];
                    if let Some(dw) = dw.as_deref_mut() {
                        kernels::im2col3x3(&xv[n * plane * c_in..(n + 1) * plane * c_in], height, width, c_in, &mut cols);
                        gemm(
                            T::one(),
                            &cols,
                            MatView::dense(plane, 9 * c_in).t(),
                            gimg,
                            MatView::dense(plane, c_out),
                            T::one(),
                            dw,
                            MatView::dense(9 * c_in, c_out),
                        );
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        gemm(
                            T::one(),
                            gimg,
                            MatView::dense(plane, c_out),
                            wv,
                            MatView::dense(9 * c_in, c_out).t(),
                            T::zero(),
                            &mut cols,
                            MatView::dense(plane, 9 * c_in),
                        );
                        kernels::col2im3x3(&cols, height, width, c_in, &mut dx[n * plane * c_in..(n + 1) * plane * c_in]);
                    }
                }
                pending.extend([(x, dx), (w, dw)].into_iter().filter_map(|(i, d)| d.map(|d| (i, d))));
                if let Some(mut db) = take(grads, b) {
                    kernels::add_column_sums(g, c_out, &mut db);
                    pending.push((b, db));
                }
            }
            Op::L1Loss { pred, target } => {
                let (p, t) = (val(pred).data(), val(target).data());
                let scale = g[0] / T::of(p.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                if let Some(mut dp) = take(grads, pred) {
                    for ((d, &a), &b) in dp.iter_mut().zip(p).zip(t) {
                        *d += sign(a - b);
                    }
                    pending.push((pred, dp));
                }
                if let Some(mut dt) = take(grads, target) {
                    for ((d, &a), &b) in dt.iter_mut().zip(p).zip(t) {
                        *d -= sign(a - b);
                    }
                    pending.push((target, dt));
                }
            }
            Op::Sum { x } => {
                if let Some(mut dx) = take(grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                    pending.push((x, dx));
                }
            }
            Op::Reshape { x } => {
                if let Some(mut dx) = take(grads, x) {
                    add_into(&mut dx, g);
                    pending.push((x, dx));
                }
            }
        }
        for (i, buf) in pending {
            match grads[i].as_mut() {
                Some(existing) => add_into(existing, &buf),
                None => grads[i] = Some(buf),
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`; all zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, or zeros when `v` does not reach the loss.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(t) => t,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
