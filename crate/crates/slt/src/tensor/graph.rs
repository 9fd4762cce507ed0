//! Computation graph: primitives recorded in execution order, reverse-mode
//! gradients in one backward sweep.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// y = x·w + b (b broadcast over rows)
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// y = a·b, both rank 2
    MatMul { a: NodeId, b: NodeId },
    /// y[i,:] = x[i,:] + row
    AddRow { x: NodeId, row: NodeId },
    /// y[i,:] = x[i,:] ⊙ row
    MulRow { x: NodeId, row: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    /// Zero-padded strided 2-D convolution over (T, F, depth) input with a
    /// (K, kh, kw, depth) filter bank; output length is ceil(L/stride) per axis.
    Conv2d { input: NodeId, filters: NodeId, bias: NodeId, stride: (usize, usize) },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    /// Row `index` of a rank-2 tensor as a (1, C) matrix.
    Row { x: NodeId, index: usize },
    Reshape { x: NodeId },
    Transpose { x: NodeId },
    /// -log softmax(logits)[target], scalar output
    CrossEntropy { logits: NodeId, target: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records primitive applications in execution order. Operands always precede
/// their consumers, so one reverse sweep visits every node exactly once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.idx()].value
    }

    /// Insert a constant or parameter leaf.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value: t, op: Op::Leaf });
        id
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, opname: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{opname} output")));
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// y = x·w + b. `x` may be rank 1 (one row) or rank 2; `b` must have one
    /// value per output column.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, k, rank1) = row_view(self.value(x))?;
        let wt = self.value(w);
        if wt.rank() != 2 || wt.dim(0) != k {
            return Err(Error::Shape(format!(
                "affine: x shape {:?} incompatible with w shape {:?}",
                self.value(x).shape(),
                wt.shape()
            )));
        }
        let cols = wt.dim(1);
        let bt = self.value(b);
        if bt.numel() != cols {
            return Err(Error::Shape(format!(
                "affine: bias shape {:?} does not match {cols} output columns",
                bt.shape()
            )));
        }
        let mut out = vec![T::zero(); rows * cols];
        matmul_acc(self.value(x).data(), wt.data(), &mut out, rows, k, cols);
        let bd = self.value(b).data();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] + bd[c];
            }
        }
        let shape = if rank1 { vec![cols] } else { vec![rows, cols] };
        self.push(Tensor { shape, data: out }, Op::Affine { x, w, b }, "affine")
    }

    /// y = a·b for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.rank() != 2 || bt.rank() != 2 || at.dim(1) != bt.dim(0) {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let (m, k, n) = (at.dim(0), at.dim(1), bt.dim(1));
        let mut out = vec![T::zero(); m * n];
        matmul_acc(at.data(), bt.data(), &mut out, m, k, n);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, "matmul")
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.check_row_broadcast("add_row", x, row)?;
        let xd = self.value(x).data();
        let rd = self.value(row).data();
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            for c in 0..cols {
                out.push(xd[r * cols + c] + rd[c]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::AddRow { x, row }, "add_row")
    }

    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.check_row_broadcast("mul_row", x, row)?;
        let xd = self.value(x).data();
        let rd = self.value(row).data();
        let mut out = Vec::with_capacity(xd.len());
        for r in 0..rows {
            for c in 0..cols {
                out.push(xd[r * cols + c] * rd[c]);
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor { shape, data: out }, Op::MulRow { x, row }, "mul_row")
    }

    fn check_row_broadcast(&self, opname: &str, x: NodeId, row: NodeId) -> Result<(usize, usize)> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!("{opname}: x must be rank 2, got {:?}", xt.shape())));
        }
        let (rows, cols) = (xt.dim(0), xt.dim(1));
        if self.value(row).numel() != cols {
            return Err(Error::Shape(format!(
                "{opname}: row shape {:?} does not match {cols} columns",
                self.value(row).shape()
            )));
        }
        Ok((rows, cols))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        opname: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId> {
        let at = self.value(a);
        let bt = self.value(b);
        if at.shape() != bt.shape() {
            return Err(Error::Shape(format!(
                "{opname}: shape {:?} vs {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = at.shape().to_vec();
        self.push(Tensor { shape, data }, mk(a, b), opname)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| v * c).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Scale { x, c }, "scale")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.tanh()).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Tanh { x }, "tanh")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        let one = T::one();
        let data = xt.data().iter().map(|&v| one / (one + (-v).exp())).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sigmoid { x }, "sigmoid")
    }

    /// Softmax along `axis`; max-subtraction makes it exactly shift-invariant.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xt = self.value(x);
        if axis >= xt.rank().max(1) {
            return Err(Error::Shape(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                xt.shape()
            )));
        }
        let mut data = xt.data().to_vec();
        for_each_lane(xt.shape(), axis, |offsets| {
            let mut max = T::neg_infinity();
            for &o in offsets {
                if data[o] > max {
                    max = data[o];
                }
            }
            let mut sum = T::zero();
            for &o in offsets {
                let e = (data[o] - max).exp();
                data[o] = e;
                sum = sum + e;
            }
            for &o in offsets {
                data[o] = data[o] / sum;
            }
        });
        let shape = xt.shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softmax { x, axis }, "softmax")
    }

    /// Strided zero-padded convolution. Input (T, F, D), filters (K, kh, kw, D),
    /// bias (K,); output (ceil(T/sh), ceil(F/sw), K). Padding is split with the
    /// smaller half leading, so even extents need no leading pad.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let it = self.value(input);
        let ft = self.value(filters);
        if it.rank() != 3 || ft.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} filters {:?}",
                it.shape(),
                ft.shape()
            )));
        }
        let (t, f, d) = (it.dim(0), it.dim(1), it.dim(2));
        let (k, kh, kw, fd) = (ft.dim(0), ft.dim(1), ft.dim(2), ft.dim(3));
        if t == 0 {
            return Err(Error::Shape("conv2d: empty input (zero frames)".into()));
        }
        if fd != d {
            return Err(Error::Shape(format!(
                "conv2d: input depth {d} does not match filter depth {fd}"
            )));
        }
        if self.value(bias).numel() != k {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {k} filters",
                self.value(bias).shape()
            )));
        }
        let geom = ConvGeom::new(t, f, kh, kw, stride);
        let (ot, of) = (geom.out_t, geom.out_f);
        let mut out = vec![T::zero(); ot * of * k];
        let id = it.data();
        let fdta = ft.data();
        let bd = self.value(bias).data();
        for oy in 0..ot {
            for ox in 0..of {
                for kk in 0..k {
                    let mut acc = bd[kk];
                    for iy in 0..kh {
                        let ty = oy as isize * stride.0 as isize - geom.pad_t as isize + iy as isize;
                        if ty < 0 || ty >= t as isize {
                            continue;
                        }
                        for ix in 0..kw {
                            let tx = ox as isize * stride.1 as isize - geom.pad_f as isize + ix as isize;
                            if tx < 0 || tx >= f as isize {
                                continue;
                            }
                            let ibase = (ty as usize * f + tx as usize) * d;
                            let fbase = ((kk * kh + iy) * kw + ix) * d;
                            for dd in 0..d {
                                acc = acc + id[ibase + dd] * fdta[fbase + dd];
                            }
                        }
                    }
                    out[(oy * of + ox) * k + kk] = acc;
                }
            }
        }
        self.push(
            Tensor { shape: vec![ot, of, k], data: out },
            Op::Conv2d { input, filters, bias, stride },
            "conv2d",
        )
    }

    /// Contiguous slice of length `len` starting at `start` along `axis`
    /// (rank 1 or 2 input).
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let xt = self.value(x);
        if axis >= xt.rank() || start + len > xt.dim(axis) {
            return Err(Error::Shape(format!(
                "narrow: [{start}, {start}+{len}) on axis {axis} of {:?}",
                xt.shape()
            )));
        }
        let (shape, data) = match xt.rank() {
            1 => (vec![len], xt.data()[start..start + len].to_vec()),
            2 => {
                let (r, c) = (xt.dim(0), xt.dim(1));
                if axis == 0 {
                    (vec![len, c], xt.data()[start * c..(start + len) * c].to_vec())
                } else {
                    let mut d = Vec::with_capacity(r * len);
                    for i in 0..r {
                        d.extend_from_slice(&xt.data()[i * c + start..i * c + start + len]);
                    }
                    (vec![r, len], d)
                }
            }
            _ => return Err(Error::Shape(format!("narrow: rank {} unsupported", xt.rank()))),
        };
        self.push(Tensor { shape, data }, Op::Narrow { x, axis, start, len }, "narrow")
    }

    /// Concatenate rank-2 tensors along `axis` (or rank-1 along axis 0).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no operands".into()));
        }
        let rank = self.value(parts[0]).rank();
        if rank == 1 && axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                let pt = self.value(p);
                if pt.rank() != 1 {
                    return Err(Error::Shape("concat: mixed ranks".into()));
                }
                data.extend_from_slice(pt.data());
            }
            let n = data.len();
            return self.push(
                Tensor { shape: vec![n], data },
                Op::Concat { parts: parts.to_vec(), axis },
                "concat",
            );
        }
        if rank != 2 || axis > 1 {
            return Err(Error::Shape(format!("concat: rank {rank} axis {axis} unsupported")));
        }
        let fixed = self.value(parts[0]).dim(1 - axis);
        for &p in parts {
            let pt = self.value(p);
            if pt.rank() != 2 || pt.dim(1 - axis) != fixed {
                return Err(Error::Shape(format!(
                    "concat: shape {:?} mismatches fixed extent {fixed} on axis {}",
                    pt.shape(),
                    1 - axis
                )));
            }
        }
        let (shape, data) = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                rows += self.value(p).dim(0);
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, fixed], data)
        } else {
            let rows = fixed;
            let total: usize = parts.iter().map(|&p| self.value(p).dim(1)).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &p in parts {
                    let pt = self.value(p);
                    let c = pt.dim(1);
                    data.extend_from_slice(&pt.data()[r * c..(r + 1) * c]);
                }
            }
            (vec![rows, total], data)
        };
        self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Row `index` of a rank-2 tensor, as a (1, C) matrix. Also the embedding
    /// lookup: `row(E, symbol)` with scatter-add backward into that row.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xt = self.value(x);
        if xt.rank() != 2 || index >= xt.dim(0) {
            return Err(Error::Shape(format!("row: index {index} of {:?}", xt.shape())));
        }
        let c = xt.dim(1);
        let data = xt.data()[index * c..(index + 1) * c].to_vec();
        self.push(Tensor { shape: vec![1, c], data }, Op::Row { x, index }, "row")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xt = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != xt.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} to {:?}",
                xt.shape(),
                shape
            )));
        }
        let data = xt.data().to_vec();
        self.push(Tensor { shape, data }, Op::Reshape { x }, "reshape")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Shape(format!("transpose: rank {} input", xt.rank())));
        }
        let (r, c) = (xt.dim(0), xt.dim(1));
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xt.data()[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose { x }, "transpose")
    }

    /// loss = -log softmax(logits)[target], computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let lt = self.value(logits);
        let v = lt.numel();
        if lt.rank() > 2 || (lt.rank() == 2 && lt.dim(0) != 1) {
            return Err(Error::Shape(format!(
                "cross_entropy: logits must be a single score vector, got {:?}",
                lt.shape()
            )));
        }
        if target >= v {
            return Err(Error::Shape(format!(
                "cross_entropy: target index {target} out of range for vocabulary of {v}"
            )));
        }
        let d = lt.data();
        let max = d.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &z in d {
            sum = sum + (z - max).exp();
        }
        let loss = max + sum.ln() - d[target];
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, "cross_entropy")
    }

    /// Reverse sweep from a scalar `loss` node. Gradients are deterministic:
    /// the same graph always yields bitwise-identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx()] = Some(Tensor {
            shape: self.value(loss).shape().to_vec(),
            data: vec![T::one()],
        });
        for idx in (0..=loss.idx()).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        if !gy.all_finite() {
            return Err(Error::NonFinite(format!("gradient flowing into node {idx}")));
        }
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, k, _) = row_view(self.value(*x)).expect("validated at forward");
                let cols = self.value(*w).dim(1);
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                {
                    let gx = self.grad_slot(grads, *x);
                    // gx += gy · wᵀ
                    for r in 0..rows {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for c in 0..cols {
                                acc = acc + gy.data()[r * cols + c] * wd[kk * cols + c];
                            }
                            gx[r * k + kk] = gx[r * k + kk] + acc;
                        }
                    }
                }
                {
                    let gw = self.grad_slot(grads, *w);
                    // gw += xᵀ · gy
                    for kk in 0..k {
                        for c in 0..cols {
                            let mut acc = T::zero();
                            for r in 0..rows {
                                acc = acc + xd[r * k + kk] * gy.data()[r * cols + c];
                            }
                            gw[kk * cols + c] = gw[kk * cols + c] + acc;
                        }
                    }
                }
                {
                    let gb = self.grad_slot(grads, *b);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] = gb[c] + gy.data()[r * cols + c];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k, n) = (at.dim(0), at.dim(1), bt.dim(1));
                {
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + gy.data()[i * n + j] * bt.data()[kk * n + j];
                            }
                            ga[i * k + kk] = ga[i * k + kk] + acc;
                        }
                    }
                }
                {
                    let gb = self.grad_slot(grads, *b);
                    for kk in 0..k {
                        for j in 0..n {
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc = acc + at.data()[i * k + kk] * gy.data()[i * n + j];
                            }
                            gb[kk * n + j] = gb[kk * n + j] + acc;
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                let cols = self.value(*row).numel();
                let rows = gy.numel() / cols;
                {
                    let gx = self.grad_slot(grads, *x);
                    for (g, &v) in gx.iter_mut().zip(gy.data()) {
                        *g = *g + v;
                    }
                }
                {
                    let gr = self.grad_slot(grads, *row);
                    for r in 0..rows {
                        for c in 0..cols {
                            gr[c] = gr[c] + gy.data()[r * cols + c];
                        }
                    }
                }
            }
            Op::MulRow { x, row } => {
                let cols = self.value(*row).numel();
                let rows = gy.numel() / cols;
                let xd = self.value(*x).data();
                let rd = self.value(*row).data();
                {
                    let gx = self.grad_slot(grads, *x);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] = gx[r * cols + c] + gy.data()[r * cols + c] * rd[c];
                        }
                    }
                }
                {
                    let gr = self.grad_slot(grads, *row);
                    for r in 0..rows {
                        for c in 0..cols {
                            gr[c] = gr[c] + gy.data()[r * cols + c] * xd[r * cols + c];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    let g = self.grad_slot(grads, side);
                    for (gv, &v) in g.iter_mut().zip(gy.data()) {
                        *gv = *gv + v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                {
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..gy.numel() {
                        ga[i] = ga[i] + gy.data()[i] * bd[i];
                    }
                }
                {
                    let gb = self.grad_slot(grads, *b);
                    for i in 0..gy.numel() {
                        gb[i] = gb[i] + gy.data()[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = self.grad_slot(grads, *x);
                for (g, &v) in gx.iter_mut().zip(gy.data()) {
                    *g = *g + v * *c;
                }
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let gx = self.grad_slot(grads, *x);
                for i in 0..gy.numel() {
                    gx[i] = gx[i] + gy.data()[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let gx = self.grad_slot(grads, *x);
                for i in 0..gy.numel() {
                    gx[i] = gx[i] + gy.data()[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let gx = self.grad_slot(grads, *x);
                for_each_lane(node.value.shape(), *axis, |offsets| {
                    let mut dot = T::zero();
                    for &o in offsets {
                        dot = dot + gy.data()[o] * y[o];
                    }
                    for &o in offsets {
                        gx[o] = gx[o] + y[o] * (gy.data()[o] - dot);
                    }
                });
            }
            Op::Conv2d { input, filters, bias, stride } => {
                let it = self.value(*input);
                let ft = self.value(*filters);
                let (t, f, d) = (it.dim(0), it.dim(1), it.dim(2));
                let (k, kh, kw, _) = (ft.dim(0), ft.dim(1), ft.dim(2), ft.dim(3));
                let geom = ConvGeom::new(t, f, kh, kw, *stride);
                let (ot, of) = (geom.out_t, geom.out_f);
                let id = it.data().to_vec();
                let fd = ft.data().to_vec();
                {
                    let gb = self.grad_slot(grads, *bias);
                    for oy in 0..ot {
                        for ox in 0..of {
                            for kk in 0..k {
                                gb[kk] = gb[kk] + gy.data()[(oy * of + ox) * k + kk];
                            }
                        }
                    }
                }
                for (slot, into_input) in [(*input, true), (*filters, false)] {
                    let gs = self.grad_slot(grads, slot);
                    for oy in 0..ot {
                        for ox in 0..of {
                            for kk in 0..k {
                                let g = gy.data()[(oy * of + ox) * k + kk];
                                for iy in 0..kh {
                                    let ty = oy as isize * stride.0 as isize - geom.pad_t as isize
                                        + iy as isize;
                                    if ty < 0 || ty >= t as isize {
                                        continue;
                                    }
                                    for ix in 0..kw {
                                        let tx = ox as isize * stride.1 as isize
                                            - geom.pad_f as isize
                                            + ix as isize;
                                        if tx < 0 || tx >= f as isize {
                                            continue;
                                        }
                                        let ibase = (ty as usize * f + tx as usize) * d;
                                        let fbase = ((kk * kh + iy) * kw + ix) * d;
                                        for dd in 0..d {
                                            if into_input {
                                                gs[ibase + dd] =
                                                    gs[ibase + dd] + g * fd[fbase + dd];
                                            } else {
                                                gs[fbase + dd] =
                                                    gs[fbase + dd] + g * id[ibase + dd];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xt = self.value(*x);
                let gx = self.grad_slot(grads, *x);
                match xt.rank() {
                    1 => {
                        for i in 0..*len {
                            gx[start + i] = gx[start + i] + gy.data()[i];
                        }
                    }
                    2 => {
                        let c = xt.dim(1);
                        if *axis == 0 {
                            for i in 0..len * c {
                                gx[start * c + i] = gx[start * c + i] + gy.data()[i];
                            }
                        } else {
                            let r = xt.dim(0);
                            for i in 0..r {
                                for j in 0..*len {
                                    gx[i * c + start + j] =
                                        gx[i * c + start + j] + gy.data()[i * len + j];
                                }
                            }
                        }
                    }
                    _ => unreachable!("validated at forward"),
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        let gp = self.grad_slot(grads, p);
                        for i in 0..n {
                            gp[i] = gp[i] + gy.data()[offset + i];
                        }
                        offset += n;
                    }
                } else {
                    let rows = node.value.dim(0);
                    let total = node.value.dim(1);
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).dim(1);
                        let gp = self.grad_slot(grads, p);
                        for r in 0..rows {
                            for j in 0..c {
                                gp[r * c + j] = gp[r * c + j] + gy.data()[r * total + offset + j];
                            }
                        }
                        offset += c;
                    }
                }
            }
            Op::Row { x, index } => {
                let c = node.value.numel();
                let gx = self.grad_slot(grads, *x);
                for j in 0..c {
                    gx[index * c + j] = gx[index * c + j] + gy.data()[j];
                }
            }
            Op::Reshape { x } => {
                let gx = self.grad_slot(grads, *x);
                for (g, &v) in gx.iter_mut().zip(gy.data()) {
                    *g = *g + v;
                }
            }
            Op::Transpose { x } => {
                let (c, r) = (node.value.dim(0), node.value.dim(1));
                let gx = self.grad_slot(grads, *x);
                for i in 0..c {
                    for j in 0..r {
                        gx[j * c + i] = gx[j * c + i] + gy.data()[i * r + j];
                    }
                }
            }
            Op::CrossEntropy { logits, target } => {
                let lt = self.value(*logits);
                let d = lt.data();
                let max = d.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for &z in d {
                    sum = sum + (z - max).exp();
                }
                let g = gy.data()[0];
                let gl = self.grad_slot(grads, *logits);
                for i in 0..d.len() {
                    let p = (d[i] - max).exp() / sum;
                    let delta = if i == *target { T::one() } else { T::zero() };
                    gl[i] = gl[i] + g * (p - delta);
                }
            }
        }
        Ok(())
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], id: NodeId) -> &'a mut [T] {
        let slot = &mut grads[id.idx()];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        slot.as_mut().unwrap().data_mut()
    }
}

/// Gradients per node, indexed by [`NodeId`]. Nodes not reachable from the
/// loss have no entry; [`Gradients::get_or_zeros`] reports those as exact
/// zero.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.idx()].as_ref()
    }

    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match &self.grads[id.idx()] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Bound graph nodes for one recurrent cell: packed input transform
/// `wx (in, 4m)`, recurrent transform `wh (m, 4m)` and gate bias `b (4m,)`,
/// gate order `[input, forget, candidate, output]`.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentCellNodes {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
}

/// One step of a standard 4-gate long short-term memory cell.
///
/// `c_prev`/`h_prev` are (1, m), `x` is (1, in); returns the updated
/// `(cell, hidden)` pair, differentiable through both.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    cell: RecurrentCellNodes,
    c_prev: NodeId,
    h_prev: NodeId,
    x: NodeId,
) -> Result<(NodeId, NodeId)> {
    let m4 = g.value(cell.wx).dim(1);
    if m4 % 4 != 0 {
        return Err(Error::Shape(format!("lstm_step: packed gate width {m4} not divisible by 4")));
    }
    let m = m4 / 4;
    if g.value(c_prev).numel() != m || g.value(h_prev).numel() != m {
        return Err(Error::Shape(format!(
            "lstm_step: state shapes {:?}/{:?} do not match cell size {m}",
            g.value(c_prev).shape(),
            g.value(h_prev).shape()
        )));
    }
    let zx = g.affine(x, cell.wx, cell.b)?;
    let zh = g.matmul(h_prev, cell.wh)?;
    let z = g.add(zx, zh)?;
    let i_pre = g.narrow(z, 1, 0, m)?;
    let f_pre = g.narrow(z, 1, m, m)?;
    let g_pre = g.narrow(z, 1, 2 * m, m)?;
    let o_pre = g.narrow(z, 1, 3 * m, m)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let cand = g.tanh(g_pre)?;
    let o = g.sigmoid(o_pre)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.mul(o, c_act)?;
    Ok((c, h))
}

/// Convolution output geometry under the ceil(L/stride) zero-padding rule.
pub struct ConvGeom {
    pub out_t: usize,
    pub out_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

impl ConvGeom {
    pub fn new(t: usize, f: usize, kh: usize, kw: usize, stride: (usize, usize)) -> Self {
        let out_t = t.div_ceil(stride.0);
        let out_f = f.div_ceil(stride.1);
        let total_t = ((out_t - 1) * stride.0 + kh).saturating_sub(t);
        let total_f = ((out_f - 1) * stride.1 + kw).saturating_sub(f);
        ConvGeom { out_t, out_f, pad_t: total_t / 2, pad_f: total_f / 2 }
    }
}

fn row_view<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, bool)> {
    match t.rank() {
        1 => Ok((1, t.dim(0), true)),
        2 => Ok((t.dim(0), t.dim(1), false)),
        r => Err(Error::Shape(format!("expected rank 1 or 2, got rank {r}"))),
    }
}

fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// Visit every lane along `axis`: calls `f` with the flat offsets of one lane
/// at a time, in deterministic order.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    if shape.is_empty() {
        f(&[0]);
        return;
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut offsets = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, off) in offsets.iter_mut().enumerate() {
                *off = (o * len + k) * inner + i;
            }
            f(&offsets);
        }
    }
}
