//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its result
//! and the ids of its inputs, so node ids are already in topological order.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients for every node, leaves included. All arithmetic is f64 and the
//! evaluation order is fixed, which keeps runs bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    /// Position in the tape; indexes the gradient vector from
    /// [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Matrix plus a 1 x cols row vector broadcast over rows.
    AddBias(NodeId, NodeId),
    /// Elementwise multiply by a 1x1 scalar node.
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Row(NodeId, usize),
    MeanRows(NodeId),
    SumAll(NodeId),
    SoftmaxRows(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Rows of `table` selected by index; used for token embeddings.
    Gather(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), 1.0);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -1.0);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::Shape(format!(
                "add_bias: {:?} + {:?}",
                vx.shape(),
                vb.shape()
            )));
        }
        let mut v = vx.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddBias(x, bias)))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Shape("mul_scalar: scalar operand must be 1x1".into()));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::MulScalar(x, s)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddConst(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape("concat_cols: row count mismatch".into()));
            }
            cols += self.value(p).cols();
        }
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p).clone();
            for r in 0..rows {
                v.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(Error::Shape("concat_rows: column count mismatch".into()));
            }
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start >= end || end > vx.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {end}) of {} cols",
                vx.cols()
            )));
        }
        let mut v = Tensor::zeros(vx.rows(), end - start);
        for r in 0..vx.rows() {
            v.row_mut(r).copy_from_slice(&vx.row(r)[start..end]);
        }
        Ok(self.push(v, Op::SliceCols(x, start, end)))
    }

    pub fn row(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if idx >= vx.rows() {
            return Err(Error::Shape(format!(
                "row {idx} of {} rows",
                vx.rows()
            )));
        }
        let v = Tensor::row_vector(vx.row(idx).to_vec());
        Ok(self.push(v, Op::Row(x, idx)))
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let mut acc = vec![0.0; cols];
        for r in 0..rows {
            for (a, &e) in acc.iter_mut().zip(vx.row(r)) {
                *a += e;
            }
        }
        let inv = 1.0 / rows as f64;
        let v = Tensor::row_vector(acc.into_iter().map(|a| a * inv).collect());
        self.push(v, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut v = vx.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| 1.0 / (1.0 + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::sqrt);
        self.push(v, Op::Sqrt(x))
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::recip);
        self.push(v, Op::Recip(x))
    }

    /// Per-row layer normalization with learned gain and bias (both 1 x cols).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let cols = vx.cols();
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(id).shape() != (1, cols) {
                return Err(Error::Shape(format!("layer_norm {what} must be 1x{cols}")));
            }
        }
        let vg = self.value(gain).clone();
        let vb = self.value(bias).clone();
        let mut v = vx.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * inv_std * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * vt.cols());
        for &i in indices {
            if i >= vt.rows() {
                return Err(Error::InvalidInput(format!(
                    "gather index {i} out of {} rows",
                    vt.rows()
                )));
            }
            data.extend_from_slice(vt.row(i));
        }
        let v = Tensor::from_vec(indices.len(), vt.cols(), data)?;
        Ok(self.push(v, Op::Gather(table, indices.to_vec())))
    }

    // ---- composite helpers ----

    /// `x (n x d_in) * w (d_in x d_out) + b (1 x d_out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        Ok(self.sum_all(prod))
    }

    /// Sum of squares as a 1x1 node.
    pub fn squared_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let sq = self.mul(x, x)?;
        Ok(self.sum_all(sq))
    }

    /// Run the reverse sweep from `root` (must be 1x1) and return per-node
    /// gradients; entries stay `None` for nodes the root does not depend on.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape("backward root must be a 1x1 scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(grads)
    }

    fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accum(grads, *a, grad.clone());
                Self::accum(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                Self::accum(grads, *a, grad.clone());
                Self::accum(grads, *b, grad.map(|e| -e));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&g, &y)| g * y)
                        .collect(),
                )
                .expect("mul backward shape");
                let gb = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(va.data())
                        .map(|(&g, &x)| g * x)
                        .collect(),
                )
                .expect("mul backward shape");
                Self::accum(grads, *a, ga);
                Self::accum(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                Self::accum(grads, *x, grad.clone());
                let mut gb = Tensor::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    for (o, &g) in gb.row_mut(0).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                Self::accum(grads, *b, gb);
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                Self::accum(grads, *x, grad.map(|g| g * sv));
                let gs = grad
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &xv)| g * xv)
                    .sum();
                Self::accum(grads, *s, Tensor::scalar(gs));
            }
            Op::Scale(x, c) => {
                let c = *c;
                Self::accum(grads, *x, grad.map(|g| g * c));
            }
            Op::AddConst(x) => {
                Self::accum(grads, *x, grad.clone());
            }
            Op::MatMul(a, b) => {
                let ga = grad
                    .matmul(&self.value(*b).transpose())
                    .expect("matmul backward a");
                let gb = self
                    .value(*a)
                    .transpose()
                    .matmul(grad)
                    .expect("matmul backward b");
                Self::accum(grads, *a, ga);
                Self::accum(grads, *b, gb);
            }
            Op::Transpose(x) => {
                Self::accum(grads, *x, grad.transpose());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut gp = Tensor::zeros(grad.rows(), cols);
                    for r in 0..grad.rows() {
                        gp.row_mut(r)
                            .copy_from_slice(&grad.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    Self::accum(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut gp = Tensor::zeros(rows, grad.cols());
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(grad.row(offset + r));
                    }
                    offset += rows;
                    Self::accum(grads, p, gp);
                }
            }
            Op::SliceCols(x, start, _end) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..grad.rows() {
                    gx.row_mut(r)[*start..*start + grad.cols()].copy_from_slice(grad.row(r));
                }
                Self::accum(grads, *x, gx);
            }
            Op::Row(x, idx) => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                gx.row_mut(*idx).copy_from_slice(grad.row(0));
                Self::accum(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let inv = 1.0 / vx.rows() as f64;
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for (o, &g) in gx.row_mut(r).iter_mut().zip(grad.row(0)) {
                        *o = g * inv;
                    }
                }
                Self::accum(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let vx = self.value(*x);
                let g = grad.item();
                Self::accum(grads, *x, Tensor::zeros(vx.rows(), vx.cols()).map(|_| g));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(&s, &g)| s * g).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accum(grads, *x, gx);
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &xv)| if xv > 0.0 { g } else { 0.0 })
                        .collect(),
                )
                .expect("relu backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * (1.0 - yv * yv))
                        .collect(),
                )
                .expect("tanh backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * yv * (1.0 - yv))
                        .collect(),
                )
                .expect("sigmoid backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * yv)
                        .collect(),
                )
                .expect("exp backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Ln(x) => {
                let vx = self.value(*x);
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &xv)| g / xv)
                        .collect(),
                )
                .expect("ln backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * 0.5 / yv)
                        .collect(),
                )
                .expect("sqrt backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::Recip(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    grad.rows(),
                    grad.cols(),
                    grad.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| -g * yv * yv)
                        .collect(),
                )
                .expect("recip backward shape");
                Self::accum(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let cols = vx.cols();
                let n = cols as f64;
                let mut gx = Tensor::zeros(vx.rows(), cols);
                let mut ggain = Tensor::zeros(1, cols);
                let mut gbias = Tensor::zeros(1, cols);
                for r in 0..vx.rows() {
                    let xr = vx.row(r);
                    let gr = grad.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    // x_hat = (x - mean) * inv_std; d x_hat = g * gain
                    let xhat: Vec<f64> = xr.iter().map(|&e| (e - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(vg.data())
                        .map(|(&g, &gn)| g * gn)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n;
                    for j in 0..cols {
                        gx.row_mut(r)[j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        ggain.row_mut(0)[j] += gr[j] * xhat[j];
                        gbias.row_mut(0)[j] += gr[j];
                    }
                }
                Self::accum(grads, *x, gx);
                Self::accum(grads, *gain, ggain);
                Self::accum(grads, *bias, gbias);
            }
            Op::Gather(table, indices) => {
                let vt = self.value(*table);
                let mut gt = Tensor::zeros(vt.rows(), vt.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &g) in gt.row_mut(i).iter_mut().zip(grad.row(r)) {
                        *o += g;
                    }
                }
                Self::accum(grads, *table, gt);
            }
        }
    }
}
