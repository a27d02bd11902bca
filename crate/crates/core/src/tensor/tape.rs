//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] is a topologically ordered list of operator nodes built
//! define-by-run: every op evaluates immediately and records enough to run
//! the backward pass. Accumulation order is fixed everywhere, so identical
//! inputs give bit-identical outputs.

use super::{Element, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// inputs: x [B,Ci,H,W], w [Co,Ci,k,k], b [Co]; same padding, stride 1.
    Conv2d { k: usize },
    /// inputs: x [B,F], w [F,O], b [O].
    Dense,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Relu,
    Tanh,
    /// Softmax over the last axis, treating leading axes as rows.
    SoftmaxRows,
    /// ln(max(x, floor)); zero gradient in the clamped region.
    LnClamped(f64),
    /// inputs: x [B,C,H,W], gamma [C], beta [C]; normalizes over C at each
    /// (b,h,w) location.
    LayerNormSpatial,
    /// Channel concatenation of [B,Ci,H,W] inputs.
    ConcatChannels,
    Reshape,
    SumAll,
    MeanAll,
    /// input [groups*per_group, C, H, W] -> [groups, C, H, W].
    /// Per output element the masked contributions are summed in value order
    /// so the result is invariant to input permutation, bit for bit.
    GroupSum {
        groups: usize,
        per_group: usize,
        scale: f64,
        mask: Vec<bool>,
    },
    /// input [B,F] -> [B]; out[b] = x[b, idx[b]].
    SelectCols(Vec<usize>),
    StopGrad,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Dense => "dense",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::SoftmaxRows => "softmax",
            Op::LnClamped(_) => "ln",
            Op::LayerNormSpatial => "layer_norm",
            Op::ConcatChannels => "concat",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::GroupSum { .. } => "group_sum",
            Op::SelectCols(_) => "select_cols",
            Op::StopGrad => "stop_grad",
        }
    }
}

struct Node<E> {
    value: Tensor<E>,
    op: Op,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Gradients produced by [`Tape::backward`], addressed by node id.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient for a node, or a zero tensor of the node's shape if the node
    /// did not participate in the loss.
    pub fn get(&self, id: NodeId, shape: &[usize]) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_opt(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }
}

fn shape_err(context: &str, detail: String) -> TensorError {
    TensorError::Shape {
        context: context.into(),
        detail,
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<E>, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite {
                node: self.nodes.len(),
                op: op.name().into(),
            });
        }
        let needs_grad = match op {
            Op::StopGrad => false,
            Op::Leaf => false, // overridden by leaf()
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert an input tensor. `track_grad` marks the leaf as a gradient
    /// target (parameters, or inputs whose sensitivity is under test).
    pub fn leaf(&mut self, value: Tensor<E>, track_grad: bool) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, vec![])?;
        self.nodes[id.0].needs_grad = track_grad;
        Ok(id)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize) -> Result<NodeId> {
        if k != 1 && k != 3 {
            return Err(TensorError::Usage(format!("conv2d kernel {k} unsupported")));
        }
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 {
            return Err(shape_err(
                "conv2d",
                format!("ranks x{:?} w{:?} b{:?}", xs, ws, bs),
            ));
        }
        let (bt, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[0];
        if ws[1] != ci || ws[2] != k || ws[3] != k || bs[0] != co {
            return Err(shape_err(
                "conv2d",
                format!("x{:?} incompatible with w{:?} b{:?} k={}", xs, ws, bs, k),
            ));
        }
        let mut out = Tensor::zeros(&[bt, co, h, wd]);
        conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
            bt,
            ci,
            co,
            h,
            wd,
            k,
        );
        self.push(out, Op::Conv2d { k }, vec![x, w, b])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(shape_err(
                "dense",
                format!("x{:?} w{:?} b{:?}", xs, ws, bs),
            ));
        }
        let (bt, f, o) = (xs[0], xs[1], ws[1]);
        let mut out = Tensor::zeros(&[bt, o]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = self.value(b).data();
            let od = out.data_mut();
            for bi in 0..bt {
                let row = &mut od[bi * o..(bi + 1) * o];
                row.copy_from_slice(bd);
                for fi in 0..f {
                    let xv = xd[bi * f + fi];
                    let wrow = &wd[fi * o..(fi + 1) * o];
                    for oi in 0..o {
                        row[oi] = row[oi] + xv * wrow[oi];
                    }
                }
            }
        }
        self.push(out, Op::Dense, vec![x, w, b])
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let data = av
                .iter()
                .zip(bv)
                .map(|(&x, &y)| match op {
                    Op::Add => x + y,
                    Op::Sub => x - y,
                    Op::Mul => x * y,
                    _ => unreachable!(),
                })
                .collect();
            Tensor {
                shape: self.shape(a).to_vec(),
                data,
            }
        };
        self.push(out, op, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cv = E::from_f64(c);
        let out = self.value(x).map(|v| v * cv);
        self.push(out, Op::ScalarMul(c), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(out, Op::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh, vec![x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let f = *xs.last().ok_or_else(|| shape_err("softmax", "rank 0".into()))?;
        let rows = self.value(x).len() / f;
        let mut out = self.value(x).clone();
        {
            let d = out.data_mut();
            for r in 0..rows {
                let row = &mut d[r * f..(r + 1) * f];
                let mut m = row[0];
                for &v in row.iter() {
                    if v > m {
                        m = v;
                    }
                }
                let mut sum = E::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        self.push(out, Op::SoftmaxRows, vec![x])
    }

    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        let fl = E::from_f64(floor);
        let mut clamped = 0usize;
        let out = Tensor {
            shape: self.shape(x).to_vec(),
            data: self
                .value(x)
                .data()
                .iter()
                .map(|&v| {
                    if v < fl {
                        clamped += 1;
                        fl.ln()
                    } else {
                        v.ln()
                    }
                })
                .collect(),
        };
        if clamped > 0 {
            log::warn!("ln_clamped: {clamped} values clamped at probability floor {floor}");
        }
        self.push(out, Op::LnClamped(floor), vec![x])
    }

    pub fn layer_norm_spatial(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("layer_norm", format!("x{:?}", xs)));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma{:?} beta{:?} for C={}",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            ));
        }
        let (bt, h, w) = (xs[0], xs[2], xs[3]);
        let mut out = Tensor::zeros(&xs);
        layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            out.data_mut(),
            bt,
            c,
            h * w,
        );
        self.push(out, Op::LayerNormSpatial, vec![x, gamma, beta])
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(shape_err("concat", format!("{:?}", first)));
        }
        let (bt, h, w) = (first[0], first[2], first[3]);
        let mut ctotal = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != bt || s[2] != h || s[3] != w {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            ctotal += s[1];
        }
        let plane = h * w;
        let mut out = Tensor::zeros(&[bt, ctotal, h, w]);
        {
            let od = out.data_mut();
            for bi in 0..bt {
                let mut coff = 0;
                for &p in parts {
                    let ci = self.nodes[p.0].value.shape()[1];
                    let src = &self.nodes[p.0].value.data()[bi * ci * plane..(bi + 1) * ci * plane];
                    od[(bi * ctotal + coff) * plane..(bi * ctotal + coff + ci) * plane]
                        .copy_from_slice(src);
                    coff += ci;
                }
            }
        }
        self.push(out, Op::ConcatChannels, parts.to_vec())
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape, vec![x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = E::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), Op::SumAll, vec![x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(TensorError::Usage("mean of empty tensor".into()));
        }
        let mut s = E::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        let m = s / E::from_f64(n as f64);
        self.push(Tensor::scalar(m), Op::MeanAll, vec![x])
    }

    /// Permutation-invariant masked sum over groups of `per_group` leading
    /// entries, scaled by `scale`. Contributions to each output element are
    /// summed in ascending value order, so any reordering of the group gives
    /// a bit-identical result.
    pub fn group_sum(
        &mut self,
        x: NodeId,
        groups: usize,
        per_group: usize,
        scale: f64,
        mask: &[bool],
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[0] != groups * per_group {
            return Err(shape_err(
                "group_sum",
                format!("x{:?} for {}x{} groups", xs, groups, per_group),
            ));
        }
        if mask.len() != groups * per_group {
            return Err(shape_err(
                "group_sum",
                format!("mask len {} != {}", mask.len(), groups * per_group),
            ));
        }
        let elem = xs[1] * xs[2] * xs[3];
        let sc = E::from_f64(scale);
        let mut out = Tensor::zeros(&[groups, xs[1], xs[2], xs[3]]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            let mut buf: Vec<E> = Vec::with_capacity(per_group);
            for g in 0..groups {
                for e in 0..elem {
                    buf.clear();
                    for i in 0..per_group {
                        let row = g * per_group + i;
                        if mask[row] {
                            buf.push(xd[row * elem + e]);
                        }
                    }
                    buf.sort_by(|a, b| a.total_order(b));
                    let mut s = E::zero();
                    for &v in buf.iter() {
                        s = s + v;
                    }
                    od[g * elem + e] = s * sc;
                }
            }
        }
        self.push(
            out,
            Op::GroupSum {
                groups,
                per_group,
                scale,
                mask: mask.to_vec(),
            },
            vec![x],
        )
    }

    pub fn select_cols(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != indices.len() {
            return Err(shape_err(
                "select_cols",
                format!("x{:?} with {} indices", xs, indices.len()),
            ));
        }
        let f = xs[1];
        for &i in indices {
            if i >= f {
                return Err(TensorError::Usage(format!("column {} out of range {}", i, f)));
            }
        }
        let xd = self.value(x).data();
        let data = indices
            .iter()
            .enumerate()
            .map(|(b, &i)| xd[b * f + i])
            .collect();
        let out = Tensor {
            shape: vec![indices.len()],
            data,
        };
        self.push(out, Op::SelectCols(indices.to_vec()), vec![x])
    }

    pub fn stop_grad(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad, vec![x])
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(E::one()));
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let gout = grads[idx].take().unwrap();
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<E>>],
        target: NodeId,
        delta: Tensor<E>,
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        idx: usize,
        gout: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Conv2d { k } => {
                let xs = self.shape(ins[0]);
                let ws = self.shape(ins[1]);
                let (bt, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let co = ws[0];
                if self.nodes[ins[0].0].needs_grad {
                    let mut dx = Tensor::zeros(xs);
                    conv2d_backward_input(
                        gout.data(),
                        self.value(ins[1]).data(),
                        dx.data_mut(),
                        bt,
                        ci,
                        co,
                        h,
                        w,
                        *k,
                    );
                    self.accumulate(grads, ins[0], dx);
                }
                if self.nodes[ins[1].0].needs_grad {
                    let mut dw = Tensor::zeros(ws);
                    conv2d_backward_weight(
                        gout.data(),
                        self.value(ins[0]).data(),
                        dw.data_mut(),
                        bt,
                        ci,
                        co,
                        h,
                        w,
                        *k,
                    );
                    self.accumulate(grads, ins[1], dw);
                }
                if self.nodes[ins[2].0].needs_grad {
                    let mut db = Tensor::zeros(&[co]);
                    let plane = h * w;
                    for bi in 0..bt {
                        for c in 0..co {
                            let mut s = E::zero();
                            for &g in &gout.data()[(bi * co + c) * plane..(bi * co + c + 1) * plane]
                            {
                                s = s + g;
                            }
                            db.data_mut()[c] = db.data()[c] + s;
                        }
                    }
                    self.accumulate(grads, ins[2], db);
                }
            }
            Op::Dense => {
                let xs = self.shape(ins[0]);
                let ws = self.shape(ins[1]);
                let (bt, f, o) = (xs[0], xs[1], ws[1]);
                let xd = self.value(ins[0]).data();
                let wd = self.value(ins[1]).data();
                if self.nodes[ins[0].0].needs_grad {
                    let mut dx = Tensor::zeros(xs);
                    let dxd = dx.data_mut();
                    for bi in 0..bt {
                        for fi in 0..f {
                            let mut s = E::zero();
                            let wrow = &wd[fi * o..(fi + 1) * o];
                            let grow = &gout.data()[bi * o..(bi + 1) * o];
                            for oi in 0..o {
                                s = s + wrow[oi] * grow[oi];
                            }
                            dxd[bi * f + fi] = s;
                        }
                    }
                    self.accumulate(grads, ins[0], dx);
                }
                if self.nodes[ins[1].0].needs_grad {
                    let mut dw = Tensor::zeros(ws);
                    let dwd = dw.data_mut();
                    for bi in 0..bt {
                        let grow = &gout.data()[bi * o..(bi + 1) * o];
                        for fi in 0..f {
                            let xv = xd[bi * f + fi];
                            let wrow = &mut dwd[fi * o..(fi + 1) * o];
                            for oi in 0..o {
                                wrow[oi] = wrow[oi] + xv * grow[oi];
                            }
                        }
                    }
                    self.accumulate(grads, ins[1], dw);
                }
                if self.nodes[ins[2].0].needs_grad {
                    let mut db = Tensor::zeros(&[o]);
                    for bi in 0..bt {
                        for oi in 0..o {
                            db.data_mut()[oi] = db.data()[oi] + gout.data()[bi * o + oi];
                        }
                    }
                    self.accumulate(grads, ins[2], db);
                }
            }
            Op::Add => {
                self.accumulate(grads, ins[0], gout.clone());
                self.accumulate(grads, ins[1], gout.clone());
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], gout.clone());
                self.accumulate(grads, ins[1], gout.map(|v| -v));
            }
            Op::Mul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                if self.nodes[ins[0].0].needs_grad {
                    let mut d = gout.clone();
                    for (g, &bv) in d.data_mut().iter_mut().zip(b.data()) {
                        *g = *g * bv;
                    }
                    self.accumulate(grads, ins[0], d);
                }
                if self.nodes[ins[1].0].needs_grad {
                    let mut d = gout.clone();
                    for (g, &av) in d.data_mut().iter_mut().zip(a.data()) {
                        *g = *g * av;
                    }
                    self.accumulate(grads, ins[1], d);
                }
            }
            Op::ScalarMul(c) => {
                let cv = E::from_f64(*c);
                self.accumulate(grads, ins[0], gout.map(|v| v * cv));
            }
            Op::Relu => {
                let x = self.value(ins[0]);
                let mut d = gout.clone();
                for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= E::zero() {
                        *g = E::zero();
                    }
                }
                self.accumulate(grads, ins[0], d);
            }
            Op::Tanh => {
                let y = &node.value;
                let mut d = gout.clone();
                for (g, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *g = *g * (E::one() - yv * yv);
                }
                self.accumulate(grads, ins[0], d);
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let f = *y.shape().last().unwrap();
                let rows = y.len() / f;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yv = &y.data()[r * f..(r + 1) * f];
                    let gv = &gout.data()[r * f..(r + 1) * f];
                    let mut dot = E::zero();
                    for i in 0..f {
                        dot = dot + yv[i] * gv[i];
                    }
                    let dd = &mut d.data_mut()[r * f..(r + 1) * f];
                    for i in 0..f {
                        dd[i] = yv[i] * (gv[i] - dot);
                    }
                }
                self.accumulate(grads, ins[0], d);
            }
            Op::LnClamped(floor) => {
                let fl = E::from_f64(*floor);
                let x = self.value(ins[0]);
                let mut d = gout.clone();
                for (g, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *g = if xv < fl { E::zero() } else { *g / xv };
                }
                self.accumulate(grads, ins[0], d);
            }
            Op::LayerNormSpatial => {
                let xs = self.shape(ins[0]);
                let (bt, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let x = self.value(ins[0]).data();
                let gamma = self.value(ins[1]).data();
                let mut dx = Tensor::zeros(xs);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                layer_norm_backward(
                    x,
                    gamma,
                    gout.data(),
                    dx.data_mut(),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                    bt,
                    c,
                    plane,
                );
                self.accumulate(grads, ins[0], dx);
                self.accumulate(grads, ins[1], dgamma);
                self.accumulate(grads, ins[2], dbeta);
            }
            Op::ConcatChannels => {
                let os = node.value.shape();
                let (bt, ctotal, plane) = (os[0], os[1], os[2] * os[3]);
                let mut coff = 0;
                for &p in ins {
                    let ci = self.shape(p)[1];
                    if self.nodes[p.0].needs_grad {
                        let mut d = Tensor::zeros(self.shape(p));
                        for bi in 0..bt {
                            let src = &gout.data()[(bi * ctotal + coff) * plane
                                ..(bi * ctotal + coff + ci) * plane];
                            d.data_mut()[bi * ci * plane..(bi + 1) * ci * plane]
                                .copy_from_slice(src);
                        }
                        self.accumulate(grads, p, d);
                    }
                    coff += ci;
                }
            }
            Op::Reshape => {
                let d = gout.clone().reshaped(self.shape(ins[0]))?;
                self.accumulate(grads, ins[0], d);
            }
            Op::SumAll => {
                let g = gout.item();
                self.accumulate(
                    grads,
                    ins[0],
                    Tensor::filled(self.shape(ins[0]), g),
                );
            }
            Op::MeanAll => {
                let n = self.value(ins[0]).len();
                let g = gout.item() / E::from_f64(n as f64);
                self.accumulate(
                    grads,
                    ins[0],
                    Tensor::filled(self.shape(ins[0]), g),
                );
            }
            Op::GroupSum {
                groups,
                per_group,
                scale,
                mask,
            } => {
                let xs = self.shape(ins[0]);
                let elem = xs[1] * xs[2] * xs[3];
                let sc = E::from_f64(*scale);
                let mut d = Tensor::zeros(xs);
                {
                    let dd = d.data_mut();
                    for g in 0..*groups {
                        let grow = &gout.data()[g * elem..(g + 1) * elem];
                        for i in 0..*per_group {
                            let row = g * per_group + i;
                            if mask[row] {
                                let drow = &mut dd[row * elem..(row + 1) * elem];
                                for e in 0..elem {
                                    drow[e] = grow[e] * sc;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, ins[0], d);
            }
            Op::SelectCols(indices) => {
                let xs = self.shape(ins[0]);
                let f = xs[1];
                let mut d = Tensor::zeros(xs);
                for (b, &i) in indices.iter().enumerate() {
                    d.data_mut()[b * f + i] = gout.data()[b];
                }
                self.accumulate(grads, ins[0], d);
            }
        }
        Ok(())
    }
}

fn conv2d_forward<E: Element>(
    x: &[E],
    w: &[E],
    b: &[E],
    out: &mut [E],
    bt: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for bi in 0..bt {
        for c_out in 0..co {
            let orow = &mut out[(bi * co + c_out) * plane..(bi * co + c_out + 1) * plane];
            for v in orow.iter_mut() {
                *v = b[c_out];
            }
            for c_in in 0..ci {
                let xp = &x[(bi * ci + c_in) * plane..(bi * ci + c_in + 1) * plane];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[((c_out * ci + c_in) * k + kh) * k + kw];
                        let dy = kh as isize - pad;
                        let dx = kw as isize - pad;
                        shifted_axpy(orow, xp, h, wd, dy, dx, wv);
                    }
                }
            }
        }
    }
}

/// out[h][w] += a * x[h+dy][w+dx] over the valid range.
fn shifted_axpy<E: Element>(
    out: &mut [E],
    x: &[E],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    a: E,
) {
    let (h, w) = (h as isize, w as isize);
    let r0 = 0.max(-dy);
    let r1 = h.min(h - dy);
    let c0 = 0.max(-dx);
    let c1 = w.min(w - dx);
    if r1 <= r0 || c1 <= c0 {
        return;
    }
    for r in r0..r1 {
        let o_off = (r * w) as usize;
        let x_off = ((r + dy) * w + dx) as usize;
        let orow = &mut out[o_off + c0 as usize..o_off + c1 as usize];
        let xrow = &x[(x_off as isize + c0) as usize..(x_off as isize + c1) as usize];
        for (ov, &xv) in orow.iter_mut().zip(xrow) {
            *ov = *ov + a * xv;
        }
    }
}

/// sum over valid range of gout[h][w] * x[h+dy][w+dx].
fn shifted_dot<E: Element>(gout: &[E], x: &[E], h: usize, w: usize, dy: isize, dx: isize) -> E {
    let (h, w) = (h as isize, w as isize);
    let r0 = 0.max(-dy);
    let r1 = h.min(h - dy);
    let c0 = 0.max(-dx);
    let c1 = w.min(w - dx);
    let mut s = E::zero();
    if r1 <= r0 || c1 <= c0 {
        return s;
    }
    for r in r0..r1 {
        let g_off = (r * w) as usize;
        let x_off = ((r + dy) * w + dx) as usize;
        let grow = &gout[g_off + c0 as usize..g_off + c1 as usize];
        let xrow = &x[(x_off as isize + c0) as usize..(x_off as isize + c1) as usize];
        for (&gv, &xv) in grow.iter().zip(xrow) {
            s = s + gv * xv;
        }
    }
    s
}

fn conv2d_backward_input<E: Element>(
    gout: &[E],
    w: &[E],
    dx: &mut [E],
    bt: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for bi in 0..bt {
        for c_in in 0..ci {
            let drow = &mut dx[(bi * ci + c_in) * plane..(bi * ci + c_in + 1) * plane];
            for c_out in 0..co {
                let gp = &gout[(bi * co + c_out) * plane..(bi * co + c_out + 1) * plane];
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = w[((c_out * ci + c_in) * k + kh) * k + kw];
                        let dy = kh as isize - pad;
                        let dxs = kw as isize - pad;
                        // forward: out[p] += wv * x[p + shift], so
                        // dx[p] += wv * gout[p - shift].
                        shifted_axpy(drow, gp, h, wd, -dy, -dxs, wv);
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<E: Element>(
    gout: &[E],
    x: &[E],
    dw: &mut [E],
    bt: usize,
    ci: usize,
    co: usize,
    h: usize,
    wd: usize,
    k: usize,
) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for bi in 0..bt {
        for c_out in 0..co {
            let gp = &gout[(bi * co + c_out) * plane..(bi * co + c_out + 1) * plane];
            for c_in in 0..ci {
                let xp = &x[(bi * ci + c_in) * plane..(bi * ci + c_in + 1) * plane];
                for kh in 0..k {
                    for kw in 0..k {
                        let dy = kh as isize - pad;
                        let dxs = kw as isize - pad;
                        let idx = ((c_out * ci + c_in) * k + kh) * k + kw;
                        dw[idx] = dw[idx] + shifted_dot(gp, xp, h, wd, dy, dxs);
                    }
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm_forward<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    out: &mut [E],
    bt: usize,
    c: usize,
    plane: usize,
) {
    let eps = E::from_f64(LN_EPS);
    let cn = E::from_f64(c as f64);
    for bi in 0..bt {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mean = E::zero();
            for ch in 0..c {
                mean = mean + x[base + ch * plane + p];
            }
            mean = mean / cn;
            let mut var = E::zero();
            for ch in 0..c {
                let d = x[base + ch * plane + p] - mean;
                var = var + d * d;
            }
            var = var / cn;
            let inv = (var + eps).sqrt().recip();
            for ch in 0..c {
                let xhat = (x[base + ch * plane + p] - mean) * inv;
                out[base + ch * plane + p] = gamma[ch] * xhat + beta[ch];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<E: Element>(
    x: &[E],
    gamma: &[E],
    gout: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
    bt: usize,
    c: usize,
    plane: usize,
) {
    let eps = E::from_f64(LN_EPS);
    let cn = E::from_f64(c as f64);
    for bi in 0..bt {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mean = E::zero();
            for ch in 0..c {
                mean = mean + x[base + ch * plane + p];
            }
            mean = mean / cn;
            let mut var = E::zero();
            for ch in 0..c {
                let d = x[base + ch * plane + p] - mean;
                var = var + d * d;
            }
            var = var / cn;
            let inv = (var + eps).sqrt().recip();
            let mut mean_dxhat = E::zero();
            let mut mean_dxhat_xhat = E::zero();
            for ch in 0..c {
                let xhat = (x[base + ch * plane + p] - mean) * inv;
                let g = gout[base + ch * plane + p];
                dgamma[ch] = dgamma[ch] + g * xhat;
                dbeta[ch] = dbeta[ch] + g;
                let dxhat = g * gamma[ch];
                mean_dxhat = mean_dxhat + dxhat;
                mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
            }
            mean_dxhat = mean_dxhat / cn;
            mean_dxhat_xhat = mean_dxhat_xhat / cn;
            for ch in 0..c {
                let xhat = (x[base + ch * plane + p] - mean) * inv;
                let dxhat = gout[base + ch * plane + p] * gamma[ch];
                dx[base + ch * plane + p] =
                    inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}
