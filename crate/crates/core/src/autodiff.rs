//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse. Parameters live outside
//! the graph and enter it as leaves tagged with their [`ParamId`].
//!
//! [`Graph::grad_block`] is the identity on values and transmits no gradient
//! at all: nothing upstream of it is ever visited by the backward pass.

use std::collections::{BTreeMap, HashMap};

use crate::error::{GimError, Result};
use crate::kernels::{self, Conv1dGeom, Conv2dGeom, MatView};
use crate::tensor::{permute_raw, strides, Tensor};

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub u32);

/// A named, trainable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor,
}

/// Hands out unique parameter ids in construction order.
#[derive(Debug, Default)]
pub struct ParamIds {
    next: u32,
}

impl ParamIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(next: u32) -> Self {
        Self { next }
    }

    pub fn alloc(&mut self) -> ParamId {
        let id = ParamId(self.next);
        self.next += 1;
        id
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    GradBlock,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddBias { x: Var, bias: Var, axis: usize },
    Matmul(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    MeanAxes { x: Var, out_index: Vec<usize>, count: usize },
    LogSoftmax { x: Var, axis: usize },
    GatherNll { x: Var, index: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    IndexRows { x: Var, index: Vec<usize> },
    BagScores { pred: Var, bag: Var },
    Stack { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Byte counts of what a graph currently holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphBytes {
    pub params: usize,
    pub inputs: usize,
    pub activations: usize,
}

impl GraphBytes {
    pub fn total(&self) -> usize {
        self.params + self.inputs + self.activations
    }
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
    /// Largest number of gradient bytes alive at once during the pass.
    pub peak_bytes: usize,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Ids whose gradient has at least one nonzero entry.
    pub fn touched(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, g)| !g.is_all_zero())
            .map(|(id, _)| *id)
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn bytes(&self) -> GraphBytes {
        let mut b = GraphBytes::default();
        for n in &self.nodes {
            let sz = n.value.size_bytes();
            match n.op {
                Op::Param(_) => b.params += sz,
                Op::Input => b.inputs += sz,
                _ => b.activations += sz,
            }
        }
        b
    }

    /// Parameters registered on this graph.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars.keys().copied()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant data; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Input)
    }

    /// A leaf that collects its gradient (used for checks on inputs).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.param_vars.get(&p.id) {
            return v;
        }
        let v = self.push(p.value.clone(), true, Op::Param(p.id));
        self.param_vars.insert(p.id, v);
        v
    }

    /// Identity forward, zero gradient backward.
    pub fn grad_block(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, false, Op::GradBlock)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GimError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(t, rg, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// Adds `bias` (1D, length `shape[axis]`) broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(bias) != [xs[axis]] {
            return Err(GimError::shape("add_bias", &xs, self.shape(bias)));
        }
        let (outer, n, inner) = kernels::split_axis(&xs, axis);
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(xs, data), rg, Op::AddBias { x, bias, axis }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GimError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatView::new(self.value(a).data(), m, k),
            MatView::new(self.value(b).data(), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::Matmul(a, b)))
    }

    /// 2D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(GimError::invalid(
                "transpose",
                format!("expected a matrix, got shape {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    /// `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(GimError::shape("conv1d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(GimError::shape("conv1d", &ws, self.shape(b)));
            }
        }
        let out_len = kernels::conv_out_len(xs[2], ws[2], stride, pad)?;
        let geom = Conv1dGeom {
            batch: xs[0],
            c_in: xs[1],
            len: xs[2],
            c_out: ws[0],
            kernel: ws[2],
            stride,
            pad,
            out_len,
        };
        let out = kernels::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(vec![geom.batch, geom.c_out, out_len], out);
        Ok(self.push(t, rg, Op::Conv1d { x, w, b, geom }))
    }

    /// `x: [batch, c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, `b: [c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(GimError::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(GimError::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h: kernels::conv_out_len(xs[2], ws[2], stride, pad)?,
            out_w: kernels::conv_out_len(xs[3], ws[3], stride, pad)?,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.out_h, geom.out_w], out);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(t, rg, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(t, rg, Op::Tanh(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, rg, Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_pool(x, &axes).expect("all axes are valid")
    }

    /// Mean over `axes`; the reduced axes are dropped (a full reduction gives `[1]`).
    pub fn mean_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if axes.is_empty() || axes.iter().any(|&a| a >= rank) {
            return Err(GimError::invalid(
                "mean_pool",
                format!("axes {axes:?} invalid for shape {shape:?}"),
            ));
        }
        let reduced: Vec<bool> = (0..rank).map(|a| axes.contains(&a)).collect();
        let mut out_shape: Vec<usize> = (0..rank).filter(|&a| !reduced[a]).map(|a| shape[a]).collect();
        let count: usize = (0..rank).filter(|&a| reduced[a]).map(|a| shape[a]).product();
        let kept_strides = {
            let s = strides(&out_shape);
            let mut full = vec![0usize; rank];
            let mut j = 0;
            for a in 0..rank {
                if !reduced[a] {
                    full[a] = s[j];
                    j += 1;
                }
            }
            full
        };
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let numel: usize = shape.iter().product();
        let mut out_index = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..numel {
            out_index.push(off);
            for a in (0..rank).rev() {
                idx[a] += 1;
                off += kept_strides[a];
                if idx[a] < shape[a] {
                    break;
                }
                off -= kept_strides[a] * shape[a];
                idx[a] = 0;
            }
        }
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in self.value(x).data().iter().zip(&out_index) {
            out[o] += v;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::MeanAxes { x, out_index, count },
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GimError::invalid(
                "log_softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let out = kernels::log_softmax(self.value(x).data(), outer, n, inner);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::LogSoftmax { x, axis }))
    }

    /// Mean negative log-probability: `-(1/A) * sum_a logp[a, index[a]]` for `logp: [A, N]`.
    pub fn gather_cross_entropy(&mut self, logp: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(logp).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(GimError::shape("gather_cross_entropy", &shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[1]) {
            return Err(GimError::invalid(
                "gather_cross_entropy",
                format!("class index {bad} out of range for {} columns", shape[1]),
            ));
        }
        let data = self.value(logp).data();
        let total: f64 = index.iter().enumerate().map(|(a, &i)| data[a * shape[1] + i]).sum();
        let loss = -total / index.len() as f64;
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::GatherNll {
                x: logp,
                index: index.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Gathers entries of the leading axis: `out[i] = x[index[i]]`.
    pub fn index_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if index.is_empty() {
            return Err(GimError::invalid("index_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(GimError::invalid(
                "index_rows",
                format!("row {bad} out of range for shape {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * inner);
        for &i in index {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::IndexRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    /// Row-wise scores of each bag entry: `pred: [A, d]`, `bag: [A, N, d]` -> `[A, N]`.
    pub fn bag_scores(&mut self, pred: Var, bag: Var) -> Result<Var> {
        let (ps, bs) = (self.shape(pred).to_vec(), self.shape(bag).to_vec());
        if ps.len() != 2 || bs.len() != 3 || ps[0] != bs[0] || ps[1] != bs[2] {
            return Err(GimError::shape("bag_scores", &ps, &bs));
        }
        let (a, n, d) = (bs[0], bs[1], bs[2]);
        let (p, b) = (self.value(pred).data(), self.value(bag).data());
        let mut out = vec![0.0; a * n];
        for i in 0..a {
            let pi = &p[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &b[(i * n + j) * d..(i * n + j + 1) * d];
                out[i * n + j] = dot(pi, bj);
            }
        }
        let rg = self.rg(pred) || self.rg(bag);
        Ok(self.push(Tensor::from_parts(vec![a, n], out), rg, Op::BagScores { pred, bag }))
    }

    /// Stacks equally shaped nodes along a new axis at position `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| GimError::invalid("stack", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        if axis > shape.len() {
            return Err(GimError::invalid("stack", format!("axis {axis} out of range")));
        }
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(GimError::shape("stack", &shape, self.shape(p)));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let k = parts.len();
        let mut out = vec![0.0; outer * k * inner];
        for (pi, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for o in 0..outer {
                out[(o * k + pi) * inner..(o * k + pi + 1) * inner]
                    .copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, k);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Stack {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(GimError::invalid(
                "slice",
                format!("[{start}, {}) along axis {axis} out of range for {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, out), rg, Op::Slice { x, axis, start }))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter registered on the graph gets an entry in the result;
    /// parameters and leaves the loss does not reach get an all-zero tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GimError::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut live = 0usize;
        let mut peak = 0usize;
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
            live = 8;
            peak = 8;
        }
        let mut leaves = HashMap::new();
        let mut params = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            match node.op {
                Op::Param(id) => {
                    params.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                    continue;
                }
                Op::Leaf => {
                    leaves.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                    continue;
                }
                _ => {}
            }
            self.backprop_node(node, &g, &mut grads, &mut live);
            peak = peak.max(live);
            live -= g.len() * 8;
        }
        for (&id, &v) in &self.param_vars {
            params
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.shape(v)));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                leaves
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            params,
            leaves,
            peak_bytes: peak,
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], live: &mut usize) {
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(&self.nodes, grads, live, $v)
            };
        }
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) | Op::GradBlock => {}
            Op::Add(a, b) => {
                if let Some(da) = slot!(*a) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = slot!(*b) {
                    axpy(db, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot!(*a) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = slot!(*b) {
                    axpy(db, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = slot!(*a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(dx) = slot!(*x) {
                    axpy(dx, *s, g);
                }
            }
            Op::AddBias { x, bias, axis } => {
                if let Some(dx) = slot!(*x) {
                    axpy(dx, 1.0, g);
                }
                if let Some(db) = slot!(*bias) {
                    let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                    for o in 0..outer {
                        for (j, acc) in db.iter_mut().enumerate().take(n) {
                            let base = (o * n + j) * inner;
                            *acc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gv = MatView::new(g, m, n);
                if let Some(da) = slot!(*a) {
                    kernels::gemm(gv, MatView::new(self.value(*b).data(), k, n).t(), 1.0, da);
                }
                if let Some(db) = slot!(*b) {
                    kernels::gemm(MatView::new(self.value(*a).data(), m, k).t(), gv, 1.0, db);
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = slot!(*x).map(std::mem::take);
                let mut dw = slot!(*w).map(std::mem::take);
                let mut db = match b { Some(b) => slot!(*b).map(std::mem::take), None => None };
                kernels::conv1d_backward(
                    geom,
                    xv,
                    wv,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = slot!(*x).map(std::mem::take);
                let mut dw = slot!(*w).map(std::mem::take);
                let mut db = match b { Some(b) => slot!(*b).map(std::mem::take), None => None };
                kernels::conv2d_backward(
                    geom,
                    xv,
                    wv,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = slot!(*x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(dx) = slot!(*x) {
                    for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(dx) = slot!(*x) {
                    for ((d, &gi), &t) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - t * t);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAxes { x, out_index, count } => {
                let inv = 1.0 / *count as f64;
                if let Some(dx) = slot!(*x) {
                    for (d, &o) in dx.iter_mut().zip(out_index) {
                        *d += g[o] * inv;
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = kernels::split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(dx) = slot!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let gsum: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] += g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::GatherNll { x, index } => {
                let cols = self.shape(*x)[1];
                let scale = g[0] / index.len() as f64;
                if let Some(dx) = slot!(*x) {
                    for (a, &i) in index.iter().enumerate() {
                        dx[a * cols + i] -= scale;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot!(*x) {
                    axpy(dx, 1.0, g);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(dx) = slot!(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                    axpy(dx, 1.0, permute_raw(&gt, &inverse).data());
                }
            }
            Op::IndexRows { x, index } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                if let Some(dx) = slot!(*x) {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut dx[i * inner..(i + 1) * inner], 1.0, &g[r * inner..(r + 1) * inner]);
                    }
                }
            }
            Op::BagScores { pred, bag } => {
                let bs = self.shape(*bag);
                let (a, n, d) = (bs[0], bs[1], bs[2]);
                let (pv, bv) = (self.value(*pred).data(), self.value(*bag).data());
                if let Some(dp) = slot!(*pred) {
                    for i in 0..a {
                        let dpi = &mut dp[i * d..(i + 1) * d];
                        for j in 0..n {
                            axpy(dpi, g[i * n + j], &bv[(i * n + j) * d..(i * n + j + 1) * d]);
                        }
                    }
                }
                if let Some(db) = slot!(*bag) {
                    for i in 0..a {
                        let pi = &pv[i * d..(i + 1) * d];
                        for j in 0..n {
                            axpy(&mut db[(i * n + j) * d..(i * n + j + 1) * d], g[i * n + j], pi);
                        }
                    }
                }
            }
            Op::Stack { parts, axis } => {
                let shape = self.shape(parts[0]);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let k = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(dp) = slot!(p) {
                        for o in 0..outer {
                            axpy(
                                &mut dp[o * inner..(o + 1) * inner],
                                1.0,
                                &g[(o * k + pi) * inner..(o * k + pi + 1) * inner],
                            );
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = kernels::split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(dx) = slot!(*x) {
                    for o in 0..outer {
                        axpy(
                            &mut dx[(o * n + start) * inner..(o * n + start + len) * inner],
                            1.0,
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], live: &mut usize, v: Var) -> Option<&'a mut Vec<f64>> {
    if v.0 >= grads.len() || !nodes[v.0].requires_grad {
        return None;
    }
    let entry = &mut grads[v.0];
    if entry.is_none() {
        let n = nodes[v.0].value.numel();
        *live += n * 8;
        *entry = Some(vec![0.0; n]);
    }
    entry.as_mut()
}

fn restore(grads: &mut [Option<Vec<f64>>], v: Var, buf: Option<Vec<f64>>) {
    if let Some(buf) = buf {
        grads[v.0] = Some(buf);
    }
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_block_forward_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]));
        let y = g.grad_block(x);
        assert_eq!(g.value(y).data(), &[1.5, -2.0]);
    }

    #[test]
    fn grad_block_sends_exact_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.5, -2.0]));
        let y = g.grad_block(x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert!(gx.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn blocked_factor_is_constant() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]));
        let b = g.grad_block(x);
        let y = g.mul(b, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.input(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = g.input(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[-1., 0., 2.]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);
    }

    #[test]
    fn conv1d_hand_case() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 5], &[1.; 5]));
        let w = g.input(t(&[1, 1, 3], &[1.; 3]));
        let y = g.conv1d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3]);
        assert_eq!(g.value(y).data(), &[3., 3., 3.]);
    }

    #[test]
    fn conv1d_zero_padding_and_stride() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 4], &[1., 2., 3., 4.]));
        let w = g.input(t(&[1, 1, 3], &[1., 1., 1.]));
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        // windows [0,1,2], [2,3,4]
        assert_eq!(g.value(y).data(), &[3., 9.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn unreached_params_get_zero() {
        let mut ids = ParamIds::new();
        let p = Param {
            id: ids.alloc(),
            name: "p".into(),
            value: t(&[2], &[1., 1.]),
        };
        let q = Param {
            id: ids.alloc(),
            name: "q".into(),
            value: t(&[2], &[5., 5.]),
        };
        let mut g = Graph::new();
        let pv = g.param(&p);
        let qv = g.param(&q);
        let blocked = g.grad_block(qv);
        let y = g.mul(pv, blocked).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(p.id).unwrap().data(), &[5., 5.]);
        let gq = grads.param(q.id).unwrap();
        assert!(gq.data().iter().all(|v| v.to_bits() == 0));
        assert_eq!(grads.touched(), vec![p.id]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 4.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn mean_pool_over_inner_axes() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let y = g.mean_pool(x, &[0, 2]).unwrap();
        assert_eq!(g.shape(y), &[2]);
        assert_eq!(g.value(y).data(), &[(1. + 2. + 5. + 6.) / 4., (3. + 4. + 7. + 8.) / 4.]);
    }
}
