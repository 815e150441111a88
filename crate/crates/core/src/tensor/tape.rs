//! Recorded operation graph with reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: ops append nodes in execution order, so the
//! node vector is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep that visits each node exactly once. A tape is
//! confined to one execution context; independent tapes may run concurrently.

use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::{expect_rank, same_shape, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Op<E: Scalar> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Affine { x: ValueId, mul: E },
    MatmulNN(ValueId, ValueId),
    MatmulNT(ValueId, ValueId),
    Linear { x: ValueId, w: ValueId, b: ValueId },
    Conv2d { x: ValueId, w: ValueId, b: Option<ValueId>, geom: ConvGeom, batch: usize },
    Relu(ValueId),
    Tanh(ValueId),
    Exp(ValueId),
    Log(ValueId),
    SoftmaxRows(ValueId),
    LogSoftmaxRows(ValueId),
    Diag(ValueId),
    ConcatCols(Vec<ValueId>),
    SumAll(ValueId),
    MeanAll(ValueId),
    L2NormalizeRows(ValueId),
    WeightedPool { features: ValueId, mask: ValueId },
    MapRows(ValueId),
    Reshape(ValueId),
}

struct Node<E: Scalar> {
    op: Op<E>,
    value: Tensor<E>,
    needs_grad: bool,
}

pub struct Tape<E: Scalar> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf that never receives a gradient (inputs, detached targets).
    pub fn constant(&self, value: Tensor<E>) -> ValueId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that accumulates a gradient (trainable parameter).
    pub fn param(&self, value: Tensor<E>) -> ValueId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: ValueId) -> Tensor<E> {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape_of(&self, id: ValueId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn push(&self, op: Op<E>, value: Tensor<E>, needs_grad: bool) -> ValueId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        ValueId(nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes.borrow()[id.0].needs_grad
    }

    fn any_needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|&id| self.needs(id))
    }

    pub fn add(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Add(a, b), t, self.any_needs(&[a, b])))
    }

    pub fn sub(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Sub(a, b), t, self.any_needs(&[a, b])))
    }

    pub fn mul(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(Op::Mul(a, b), t, self.any_needs(&[a, b])))
    }

    /// y = x * mul + add, elementwise with scalar constants.
    pub fn affine(&self, x: ValueId, mul: E, add: E) -> ValueId {
        let tx = self.value(x);
        let t = tx.map(|v| v * mul + add);
        self.push(Op::Affine { x, mul }, t, self.needs(x))
    }

    pub fn scale(&self, x: ValueId, mul: E) -> ValueId {
        self.affine(x, mul, E::zero())
    }

    pub fn matmul(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta.shape(), 2)?;
        expect_rank("matmul", tb.shape(), 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::mm_nn(&mut out, ta.data(), tb.data(), m, k, n);
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(Op::MatmulNN(a, b), t, self.any_needs(&[a, b])))
    }

    /// a [M,K] x b [N,K]^T -> [M,N]
    pub fn matmul_nt(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul_nt", ta.shape(), 2)?;
        expect_rank("matmul_nt", tb.shape(), 2)?;
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (n, k2) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        kernels::mm_nt(&mut out, ta.data(), tb.data(), m, k, n);
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(Op::MatmulNT(a, b), t, self.any_needs(&[a, b])))
    }

    /// x [B,I] * w [O,I]^T + bias [O] -> [B,O]
    pub fn linear(&self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_rank("linear", tx.shape(), 2)?;
        expect_rank("linear", tw.shape(), 2)?;
        expect_rank("linear", tb.shape(), 1)?;
        let (batch, in_dim) = (tx.shape()[0], tx.shape()[1]);
        let (out_dim, in_dim2) = (tw.shape()[0], tw.shape()[1]);
        if in_dim != in_dim2 || tb.shape()[0] != out_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); batch * out_dim];
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(tb.data());
        }
        kernels::mm_nt(&mut out, tx.data(), tw.data(), batch, in_dim, out_dim);
        let t = Tensor::from_parts(vec![batch, out_dim], out);
        Ok(self.push(Op::Linear { x, w, b }, t, self.any_needs(&[x, w, b])))
    }

    /// x [B,C,H,W] * w [O,C,kh,kw] -> [B,O,H',W'] with zero padding.
    pub fn conv2d(
        &self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let (tx, tw) = (self.value(x), self.value(w));
        expect_rank("conv2d", tx.shape(), 4)?;
        expect_rank("conv2d", tw.shape(), 4)?;
        let (batch, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, c2, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if c != c2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let geom = ConvGeom::new(c, h, wd, o, kh, kw, stride, pad).ok_or(TensorError::ShapeMismatch {
            op: "conv2d geometry",
            left: tx.shape().to_vec(),
            right: tw.shape().to_vec(),
        })?;
        let bias = match b {
            Some(bid) => {
                let tb = self.value(bid);
                expect_rank("conv2d bias", tb.shape(), 1)?;
                if tb.shape()[0] != o {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        left: tb.shape().to_vec(),
                        right: vec![o],
                    });
                }
                Some(tb)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(tx.data(), tw.data(), bias.as_ref().map(|t| t.data()), &geom, batch);
        let t = Tensor::from_parts(vec![batch, o, geom.out_h, geom.out_w], out);
        let mut ids = vec![x, w];
        if let Some(bid) = b {
            ids.push(bid);
        }
        Ok(self.push(
            Op::Conv2d { x, w, b, geom, batch },
            t,
            self.any_needs(&ids),
        ))
    }

    pub fn relu(&self, x: ValueId) -> ValueId {
        let t = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(Op::Relu(x), t, self.needs(x))
    }

    pub fn tanh(&self, x: ValueId) -> ValueId {
        let t = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), t, self.needs(x))
    }

    pub fn exp(&self, x: ValueId) -> ValueId {
        let t = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), t, self.needs(x))
    }

    pub fn log(&self, x: ValueId) -> ValueId {
        let t = self.value(x).map(|v| v.ln());
        self.push(Op::Log(x), t, self.needs(x))
    }

    pub fn softmax_rows(&self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        expect_rank("softmax_rows", tx.shape(), 2)?;
        let cols = tx.shape()[1];
        let mut out = vec![E::zero(); tx.numel()];
        kernels::softmax_rows(tx.data(), &mut out, cols);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::SoftmaxRows(x), t, self.needs(x)))
    }

    pub fn log_softmax_rows(&self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        expect_rank("log_softmax_rows", tx.shape(), 2)?;
        let cols = tx.shape()[1];
        let mut out = vec![E::zero(); tx.numel()];
        kernels::log_softmax_rows(tx.data(), &mut out, cols);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::LogSoftmaxRows(x), t, self.needs(x)))
    }

    /// Softmax over the spatial dims of [B,H,W] maps; each map sums to 1.
    pub fn spatial_softmax(&self, x: ValueId) -> Result<ValueId> {
        let shape = self.shape_of(x);
        expect_rank("spatial_softmax", &shape, 3)?;
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        let flat = self.reshape(x, &[b, h * w])?;
        let sm = self.softmax_rows(flat)?;
        self.reshape(sm, &[b, h, w])
    }

    /// Diagonal of a square matrix [B,B] -> [B].
    pub fn diag(&self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        expect_rank("diag", tx.shape(), 2)?;
        let b = tx.shape()[0];
        if tx.shape()[1] != b {
            return Err(TensorError::ShapeMismatch {
                op: "diag",
                left: tx.shape().to_vec(),
                right: vec![b, b],
            });
        }
        let data = (0..b).map(|i| tx.data()[i * b + i]).collect();
        let t = Tensor::from_parts(vec![b], data);
        Ok(self.push(Op::Diag(x), t, self.needs(x)))
    }

    /// Concatenate rank-2 tensors along the column (channel) axis.
    pub fn concat_cols(&self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let tensors: Vec<Tensor<E>> = xs.iter().map(|&id| self.value(id)).collect();
        let rows = tensors[0].shape().first().copied().unwrap_or(0);
        for t in &tensors {
            expect_rank("concat_cols", t.shape(), 2)?;
            if t.shape()[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: tensors[0].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let total_cols: usize = tensors.iter().map(|t| t.shape()[1]).sum();
        let mut out = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for t in &tensors {
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let t = Tensor::from_parts(vec![rows, total_cols], out);
        Ok(self.push(Op::ConcatCols(xs.to_vec()), t, self.any_needs(xs)))
    }

    pub fn sum_all(&self, x: ValueId) -> ValueId {
        let tx = self.value(x);
        let mut acc = E::zero();
        for &v in tx.data() {
            acc += v;
        }
        self.push(Op::SumAll(x), Tensor::scalar(acc), self.needs(x))
    }

    pub fn mean_all(&self, x: ValueId) -> ValueId {
        let tx = self.value(x);
        let mut acc = E::zero();
        for &v in tx.data() {
            acc += v;
        }
        let n = E::from_f64c(tx.numel() as f64);
        self.push(Op::MeanAll(x), Tensor::scalar(acc / n), self.needs(x))
    }

    /// Normalize each row of [B,D] to unit L2 norm.
    pub fn l2_normalize_rows(&self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        expect_rank("l2_normalize_rows", tx.shape(), 2)?;
        let d = tx.shape()[1];
        let mut out = vec![E::zero(); tx.numel()];
        for (xr, or) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let n = row_norm(xr);
            for (&v, o) in xr.iter().zip(or.iter_mut()) {
                *o = v / n;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::L2NormalizeRows(x), t, self.needs(x)))
    }

    /// Eq.-2 style pooling: sum over space of mask-weighted feature vectors.
    /// features [B,C,H,W], mask [B,H,W] -> [B,C].
    pub fn weighted_pool(&self, features: ValueId, mask: ValueId) -> Result<ValueId> {
        let (tf, tm) = (self.value(features), self.value(mask));
        expect_rank("weighted_pool", tf.shape(), 4)?;
        expect_rank("weighted_pool", tm.shape(), 3)?;
        let (b, c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2], tf.shape()[3]);
        if tm.shape() != [b, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_pool",
                left: tf.shape().to_vec(),
                right: tm.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = vec![E::zero(); b * c];
        for bi in 0..b {
            let mrow = &tm.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let plane = &tf.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                let mut acc = E::zero();
                for (&f, &m) in plane.iter().zip(mrow) {
                    acc += f * m;
                }
                out[bi * c + ci] = acc;
            }
        }
        let t = Tensor::from_parts(vec![b, c], out);
        Ok(self.push(
            Op::WeightedPool { features, mask },
            t,
            self.any_needs(&[features, mask]),
        ))
    }

    /// [B,C,H,W] -> [B*H*W, C], one row per spatial location.
    pub fn map_rows(&self, x: ValueId) -> Result<ValueId> {
        let tx = self.value(x);
        expect_rank("map_rows", tx.shape(), 4)?;
        let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let hw = h * w;
        let mut out = vec![E::zero(); tx.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &tx.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    out[(bi * hw + p) * c + ci] = v;
                }
            }
        }
        let t = Tensor::from_parts(vec![b * hw, c], out);
        Ok(self.push(Op::MapRows(x), t, self.needs(x)))
    }

    pub fn reshape(&self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), t, self.needs(x)))
    }

    /// True when every relu input element is at least `margin` away from 0,
    /// i.e. a finite-difference probe cannot cross a kink.
    /// True when no relu sits near its kink anywhere a perturbation could
    /// reach: inputs that do not require gradients never move under finite
    /// differences, so they are exempt.
    pub fn relu_inputs_clear_of(&self, margin: E) -> bool {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if let Op::Relu(x) = node.op {
                let input = &nodes[x.0];
                if input.needs_grad && input.value.data().iter().any(|&v| v.abs() < margin) {
                    return false;
                }
            }
        }
        true
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node;
    /// parameters that did not influence the loss read back as zeros.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut bufs: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        bufs[loss.0] = Some(vec![E::one()]);

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = bufs[idx].take() else { continue };
            backprop_node(&nodes, idx, &g, &mut bufs);
            bufs[idx] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(bufs)
            .map(|(node, buf)| buf.map(|b| Tensor::from_parts(node.value.shape().to_vec(), b)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn row_norm<E: Scalar>(row: &[E]) -> E {
    let mut acc = E::zero();
    for &v in row {
        acc += v * v;
    }
    let n = acc.sqrt();
    let floor = E::from_f64c(1e-12);
    if n > floor {
        n
    } else {
        floor
    }
}

fn accumulate<E: Scalar>(
    nodes: &[Node<E>],
    bufs: &mut [Option<Vec<E>>],
    id: ValueId,
    write: impl FnOnce(&mut [E]),
) {
    if !nodes[id.0].needs_grad {
        return;
    }
    let buf = bufs[id.0].get_or_insert_with(|| vec![E::zero(); nodes[id.0].value.numel()]);
    write(buf);
}

fn backprop_node<E: Scalar>(nodes: &[Node<E>], idx: usize, g: &[E], bufs: &mut [Option<Vec<E>>]) {
    let node = &nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, bufs, *a, |buf| add_into(buf, g));
            accumulate(nodes, bufs, *b, |buf| add_into(buf, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, bufs, *a, |buf| add_into(buf, g));
            accumulate(nodes, bufs, *b, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(nodes, bufs, *a, |buf| {
                for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(tb.data()) {
                    *o += gv * bv;
                }
            });
            accumulate(nodes, bufs, *b, |buf| {
                for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ta.data()) {
                    *o += gv * av;
                }
            });
        }
        Op::Affine { x, mul } => {
            let m = *mul;
            accumulate(nodes, bufs, *x, |buf| {
                for (o, &gv) in buf.iter_mut().zip(g) {
                    *o += gv * m;
                }
            });
        }
        Op::MatmulNN(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            accumulate(nodes, bufs, *a, |buf| kernels::mm_nt(buf, g, tb.data(), m, n, k));
            accumulate(nodes, bufs, *b, |buf| kernels::mm_tn(buf, ta.data(), g, m, k, n));
        }
        Op::MatmulNT(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[0];
            accumulate(nodes, bufs, *a, |buf| kernels::mm_nn(buf, g, tb.data(), m, n, k));
            accumulate(nodes, bufs, *b, |buf| kernels::mm_tn(buf, g, ta.data(), m, n, k));
        }
        Op::Linear { x, w, b } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let (batch, in_dim) = (tx.shape()[0], tx.shape()[1]);
            let out_dim = tw.shape()[0];
            accumulate(nodes, bufs, *x, |buf| kernels::mm_nn(buf, g, tw.data(), batch, out_dim, in_dim));
            accumulate(nodes, bufs, *w, |buf| kernels::mm_tn(buf, g, tx.data(), batch, out_dim, in_dim));
            accumulate(nodes, bufs, *b, |buf| {
                for grow in g.chunks(out_dim) {
                    for (o, &gv) in buf.iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
            });
        }
        Op::Conv2d { x, w, b, geom, batch } => {
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            let need_dx = nodes[x.0].needs_grad;
            let (dx, dw, db) = kernels::conv2d_backward(tx.data(), tw.data(), g, geom, *batch, need_dx);
            if need_dx {
                accumulate(nodes, bufs, *x, |buf| add_into(buf, &dx));
            }
            accumulate(nodes, bufs, *w, |buf| add_into(buf, &dw));
            if let Some(bid) = b {
                accumulate(nodes, bufs, *bid, |buf| add_into(buf, &db));
            }
        }
        Op::Relu(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, bufs, *x, |buf| {
                for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(tx.data()) {
                    if xv > E::zero() {
                        *o += gv;
                    }
                }
            });
        }
        Op::Tanh(x) => {
            let ty = &node.value;
            accumulate(nodes, bufs, *x, |buf| {
                for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(ty.data()) {
                    *o += gv * (E::one() - yv * yv);
                }
            });
        }
        Op::Exp(x) => {
            let ty = &node.value;
            accumulate(nodes, bufs, *x, |buf| {
                for ((o, &gv), &yv) in buf.iter_mut().zip(g).zip(ty.data()) {
                    *o += gv * yv;
                }
            });
        }
        Op::Log(x) => {
            let tx = &nodes[x.0].value;
            accumulate(nodes, bufs, *x, |buf| {
                for ((o, &gv), &xv) in buf.iter_mut().zip(g).zip(tx.data()) {
                    *o += gv / xv;
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let ty = &node.value;
            let cols = ty.shape()[1];
            accumulate(nodes, bufs, *x, |buf| {
                for ((orow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(ty.data().chunks(cols)) {
                    let mut s = E::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        s += gv * yv;
                    }
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (gv - s);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(x) => {
            let ty = &node.value;
            let cols = ty.shape()[1];
            accumulate(nodes, bufs, *x, |buf| {
                for ((orow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(ty.data().chunks(cols)) {
                    let mut s = E::zero();
                    for &gv in grow {
                        s += gv;
                    }
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += gv - yv.exp() * s;
                    }
                }
            });
        }
        Op::Diag(x) => {
            let b = node.value.shape()[0];
            accumulate(nodes, bufs, *x, |buf| {
                for (i, &gv) in g.iter().enumerate() {
                    buf[i * b + i] += gv;
                }
            });
        }
        Op::ConcatCols(xs) => {
            let rows = node.value.shape()[0];
            let total = node.value.shape()[1];
            let mut offset = 0;
            for &xid in xs {
                let c = nodes[xid.0].value.shape()[1];
                let off = offset;
                accumulate(nodes, bufs, xid, |buf| {
                    for r in 0..rows {
                        let src = &g[r * total + off..r * total + off + c];
                        add_into(&mut buf[r * c..(r + 1) * c], src);
                    }
                });
                offset += c;
            }
        }
        Op::SumAll(x) => {
            let gv = g[0];
            accumulate(nodes, bufs, *x, |buf| {
                for o in buf.iter_mut() {
                    *o += gv;
                }
            });
        }
        Op::MeanAll(x) => {
            let n = E::from_f64c(nodes[x.0].value.numel() as f64);
            let gv = g[0] / n;
            accumulate(nodes, bufs, *x, |buf| {
                for o in buf.iter_mut() {
                    *o += gv;
                }
            });
        }
        Op::L2NormalizeRows(x) => {
            let tx = &nodes[x.0].value;
            let ty = &node.value;
            let d = ty.shape()[1];
            accumulate(nodes, bufs, *x, |buf| {
                for (((orow, grow), yrow), xrow) in buf
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(ty.data().chunks(d))
                    .zip(tx.data().chunks(d))
                {
                    let n = row_norm(xrow);
                    let mut s = E::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        s += gv * yv;
                    }
                    for ((o, &gv), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += (gv - yv * s) / n;
                    }
                }
            });
        }
        Op::WeightedPool { features, mask } => {
            let (tf, tm) = (&nodes[features.0].value, &nodes[mask.0].value);
            let (b, c, h, w) = (tf.shape()[0], tf.shape()[1], tf.shape()[2], tf.shape()[3]);
            let hw = h * w;
            accumulate(nodes, bufs, *features, |buf| {
                for bi in 0..b {
                    let mrow = &tm.data()[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let gv = g[bi * c + ci];
                        let plane = &mut buf[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for (o, &m) in plane.iter_mut().zip(mrow) {
                            *o += gv * m;
                        }
                    }
                }
            });
            accumulate(nodes, bufs, *mask, |buf| {
                for bi in 0..b {
                    let mrow = &mut buf[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let gv = g[bi * c + ci];
                        let plane = &tf.data()[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for (o, &f) in mrow.iter_mut().zip(plane) {
                            *o += gv * f;
                        }
                    }
                }
            });
        }
        Op::MapRows(x) => {
            let tx = &nodes[x.0].value;
            let (b, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
            let hw = h * w;
            accumulate(nodes, bufs, *x, |buf| {
                for bi in 0..b {
                    for ci in 0..c {
                        let plane = &mut buf[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        for (p, o) in plane.iter_mut().enumerate() {
                            *o += g[(bi * hw + p) * c + ci];
                        }
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, bufs, *x, |buf| add_into(buf, g));
        }
    }
}

fn add_into<E: Scalar>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug)]
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node; zeros when the node never influenced the loss.
    pub fn of(&self, tape: &Tape<E>, id: ValueId) -> Tensor<E> {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&tape.shape_of(id)),
        }
    }
}
