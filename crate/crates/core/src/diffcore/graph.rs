//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward is a single reverse sweep.

use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Variable,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy { v: NodeId, s: NodeId },
    Sum(NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax { x: NodeId, cols: usize },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LogClamped { x: NodeId, floor: f64 },
    Cosine { a: NodeId, b: NodeId },
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sum(_) => "sum",
            Op::Affine { .. } => "affine",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogClamped { .. } => "log",
            Op::Cosine { .. } => "cosine",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to parameters and variables.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    variables: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Graph::variable`].
    pub fn variable(&self, id: NodeId) -> Option<&Tensor> {
        self.variables.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    clamp_events: usize,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over contiguous blocks of `cols` values.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Unfold a `c×h×w` image into `(c·9)×(h·w)` columns for a 3×3, stride 1,
/// zero-padded convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut x[ch * hw + sy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Number of times [`Graph::log_clamped`] hit its floor.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by node {id} ({})",
                op.name()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        self.push(store.get(id).clone(), Op::Param(id), store.requires_grad(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, factor), ng)
    }

    /// Multiply every element of `v` by the one-element node `s`.
    pub fn scale_by(&mut self, v: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).item()?;
        let vv = self.value(v);
        let data = vv.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(vv.shape().to_vec(), data)?;
        let ng = self.needs(v) || self.needs(s);
        self.push(t, Op::ScaleBy { v, s }, ng)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum(a), ng)
    }

    /// `x · w + b` where `x` is `[inp]` or `[rows, inp]` and `w` is `[inp, out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 {
            return Err(Error::contract(format!(
                "affine: weight must be rank 2, got {:?}",
                vw.shape()
            )));
        }
        let (inp, out) = (vw.shape()[0], vw.shape()[1]);
        let (rows, out_shape) = match vx.shape() {
            [n] if *n == inp => (1, vec![out]),
            [r, n] if *n == inp => (*r, vec![*r, out]),
            s => {
                return Err(Error::contract(format!(
                    "affine: input {s:?} incompatible with weight {:?}",
                    vw.shape()
                )))
            }
        };
        let mut data = vec![0.0; rows * out];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [out] {
                return Err(Error::contract(format!(
                    "affine: bias {:?} does not match output width {out}",
                    vb.shape()
                )));
            }
            for row in data.chunks_mut(out) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm_nn(vx.data(), vw.data(), &mut data, rows, inp, out);
        let t = Tensor::new(out_shape, data)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(
            t,
            Op::Affine {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            ng,
        )
    }

    /// 3×3, stride 1, zero-padded convolution. `x: [n, c, h, w]`,
    /// `w: [o, c, 3, 3]`, `b: [o]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = match vx.shape() {
            &[n, c, h, w] => (n, c, h, w),
            s => return Err(Error::contract(format!("conv2d: input must be rank 4, got {s:?}"))),
        };
        let o = match vw.shape() {
            &[o, wc, 3, 3] if wc == c => o,
            s => {
                return Err(Error::contract(format!(
                    "conv2d: weight {s:?} incompatible with {c} input channels"
                )))
            }
        };
        if vb.shape() != [o] || wd < 2 {
            return Err(Error::contract(format!(
                "conv2d: bias {:?} / width {wd} invalid",
                vb.shape()
            )));
        }
        let hw = h * wd;
        let k = c * 9;
        let mut col = vec![0.0; k * hw];
        let mut out = vec![0.0; n * o * hw];
        for s in 0..n {
            im2col(&vx.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut col);
            let dst = &mut out[s * o * hw..(s + 1) * o * hw];
            for (oc, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(vb.data()[oc]);
            }
            gemm_nn(vw.data(), &col, dst, o, k, hw);
        }
        let t = Tensor::new(vec![n, o, h, wd], out)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(t, Op::Conv2d { x, w, b }, ng)
    }

    /// 2×2 max-pool with stride 2 over `[n, c, h, w]`; odd trailing rows and
    /// columns are dropped. Ties go to the first element in row-major order.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (n, c, h, w) = match vx.shape() {
            &[n, c, h, w] if h >= 2 && w >= 2 => (n, c, h, w),
            s => return Err(Error::contract(format!("max_pool2: bad input shape {s:?}"))),
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let src = vx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.needs(x);
        self.push(t, Op::MaxPool2 { x, argmax }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), ng)
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let cols = *vx
            .shape()
            .last()
            .filter(|&&c| c > 0)
            .ok_or_else(|| Error::contract("softmax: empty input"))?;
        let t = Tensor::new(vx.shape().to_vec(), softmax_rows(vx.data(), cols))?;
        let ng = self.needs(x);
        self.push(t, Op::Softmax { x, cols }, ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`; `logits: [rows, classes]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let vl = self.value(logits);
        let (rows, cols) = match vl.shape() {
            &[r, c] if r == targets.len() && r > 0 => (r, c),
            s => {
                return Err(Error::contract(format!(
                    "softmax_cross_entropy: logits {s:?} vs {} targets",
                    targets.len()
                )))
            }
        };
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::contract(format!(
                "softmax_cross_entropy: target {t} out of {cols} classes"
            )));
        }
        let probs = softmax_rows(vl.data(), cols);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            // log-sum-exp form keeps the loss finite when a probability underflows
            let row = &vl.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= rows as f64;
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Natural log of `max(x, floor)`. Each clamped element increments
    /// [`Graph::clamp_events`] and passes no gradient.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let clamped = self.value(x).data().iter().filter(|&&v| v < floor).count();
        self.clamp_events += clamped;
        self.unary(x, |v| v.max(floor).ln(), Op::LogClamped { x, floor })
    }

    /// Cosine similarity of two equal-length vectors. Zero-norm inputs are an
    /// error rather than being regularized.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 {
            return Err(Error::contract(format!("cosine: expected vectors, got {:?}", va.shape())));
        }
        same_shape("cosine", va, vb)?;
        let s = cosine_similarity(va.data(), vb.data())?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Cosine { a, b }, ng)
    }

    /// Concatenate flat values of the given nodes into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat: no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng)
    }

    /// Flat values `[start, start + len)` as a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.numel() || len == 0 {
            return Err(Error::contract(format!(
                "slice [{start}, {}) out of {} values",
                start + len,
                vx.numel()
            )));
        }
        let t = Tensor::vector(vx.data()[start..start + len].to_vec());
        let ng = self.needs(x);
        self.push(t, Op::Slice { x, start }, ng)
    }

    /// Reverse sweep from a one-element `loss` node. The graph is not modified.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, node {} has shape {:?}",
                loss.0,
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient at node {i} ({})",
                    node.op.name()
                )));
            }
            self.propagate(i, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.nodes[id.0].value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Variable => {
                out.variables
                    .insert(NodeId(i), Tensor::new(node.value.shape().to_vec(), g.to_vec())?);
            }
            Op::Param(pid) => {
                let entry = out
                    .params
                    .entry(*pid)
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
                for (acc, v) in entry.data_mut().iter_mut().zip(g) {
                    *acc += v;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, v), bv) in ga.iter_mut().zip(g).zip(vb) {
                        *d += v * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, v), av) in gb.iter_mut().zip(g).zip(va) {
                        *d += v * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += f * v);
                }
            }
            Op::ScaleBy { v, s } => {
                let factor = self.value(*s).data()[0];
                let vv = self.value(*v).data();
                if let Some(gv) = self.slot(grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x);
                }
                if let Some(gs) = self.slot(grads, *s) {
                    gs[0] += g.iter().zip(vv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Affine {
                x,
                w,
                b,
                rows,
                inp,
                out: width,
            } => {
                let (vx, vw) = (self.value(x).data(), self.value(w).data());
                if let Some(gx) = self.slot(grads, x) {
                    gemm_nt(g, vw, gx, rows, width, inp);
                }
                if let Some(gw) = self.slot(grads, w) {
                    gemm_tn(vx, g, gw, inp, rows, width);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, b) {
                        for row in g.chunks(width) {
                            gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b } => {
                let vx = self.value(x);
                let vw = self.value(w);
                let (n, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let o = vw.shape()[0];
                let hw = h * wd;
                let k = c * 9;
                if let Some(gb) = self.slot(grads, b) {
                    for s in 0..n {
                        for (oc, plane) in g[s * o * hw..(s + 1) * o * hw].chunks(hw).enumerate() {
                            gb[oc] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let want_w = self.nodes[w.0].needs_grad;
                let want_x = self.nodes[x.0].needs_grad;
                if want_w || want_x {
                    let mut col = vec![0.0; k * hw];
                    let mut gw_acc = vec![0.0; o * k];
                    let mut gx_acc = if want_x { vec![0.0; vx.numel()] } else { Vec::new() };
                    for s in 0..n {
                        let gs = &g[s * o * hw..(s + 1) * o * hw];
                        if want_w {
                            im2col(&vx.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, &mut col);
                            gemm_nt(gs, &col, &mut gw_acc, o, hw, k);
                        }
                        if want_x {
                            col.fill(0.0);
                            gemm_tn(vw.data(), gs, &mut col, k, o, hw);
                            col2im_add(&col, c, h, wd, &mut gx_acc[s * c * hw..(s + 1) * c * hw]);
                        }
                    }
                    if let Some(gw) = self.slot(grads, w) {
                        gw.iter_mut().zip(&gw_acc).for_each(|(d, v)| *d += v);
                    }
                    if let Some(gx) = self.slot(grads, x) {
                        gx.iter_mut().zip(&gx_acc).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (&src, v) in argmax.iter().zip(g) {
                        gx[src] += v;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, v), yv) in gx.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, v), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, v), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += v * (1.0 - yv * yv);
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((drow, grow), yrow) in
                        gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                if let Some(gl) = self.slot(grads, *logits) {
                    let scale = g[0] / rows as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
            &Op::LogClamped { x, floor } => {
                let vx = self.value(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((d, v), xv) in gx.iter_mut().zip(g).zip(vx) {
                        if *xv >= floor {
                            *d += v / xv;
                        }
                    }
                }
            }
            &Op::Cosine { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = y[0];
                let up = g[0];
                if let Some(ga) = self.slot(grads, a) {
                    for ((d, av), bv) in ga.iter_mut().zip(va).zip(vb) {
                        *d += up * (bv / (na * nb) - s * av / (na * na));
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((d, av), bv) in gb.iter_mut().zip(va).zip(vb) {
                        *d += up * (av / (na * nb) - s * bv / (nb * nb));
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, v)| *d += v);
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, start } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Ok(())
    }
}

/// Cosine similarity `u·v / (|u| |v|)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::contract(format!(
            "cosine: lengths {} and {} differ or are empty",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero-norm vector"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
