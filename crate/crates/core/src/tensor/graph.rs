use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations together with their attributes.
///
/// Binary elementwise ops accept a right operand whose shape (leading unit
/// extents ignored) equals the trailing extents of the left operand; it is
/// tiled over the remaining leading positions. A single-element right
/// operand broadcasts everywhere.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Leaf,
    /// `[n, k] x [k, m]`, or `[n, k] x [m, k]^T` when `transpose_rhs`.
    MatMul { transpose_rhs: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Keeps the reduced axis with extent 1.
    Mean { axis: usize },
    /// Keeps the reduced axis with extent 1; `None` sums everything into `[1]`.
    Sum { axis: Option<usize> },
    /// `(x - mean) / sqrt(var + eps)` along `axis`, population variance.
    InstanceNorm { axis: usize, eps: f64 },
    Concat { axis: usize },
    Gather { axis: usize, indices: Vec<usize> },
    /// Positions where `mask` is true are replaced by `fill` and receive no gradient.
    MaskedFill { mask: Vec<bool>, fill: f64 },
    /// The `k` largest entries along `axis`, in descending order, ties to the
    /// lowest index. Selected indices are available through [`Graph::indices`].
    TopK { k: usize, axis: usize },
}

struct Node {
    value: Tensor,
    op: Primitive,
    parents: Vec<Var>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    aux: Vec<f64>,
    indices: Vec<usize>,
}

/// A define-by-run computation graph.
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

    /// Drops every node created after the first `len` nodes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.push(Node {
            value,
            op: Primitive::Leaf,
            parents: Vec::new(),
            requires_grad,
            grad,
            aux: Vec::new(),
            indices: Vec::new(),
        })
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn op(&self, v: Var) -> &Primitive {
        &self.nodes[v.0].op
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf that requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Integer side channel of a `TopK` node.
    pub fn indices(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].indices
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    // ---------------------------------------------------------------------
    // Convenience wrappers

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Softmax { axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::LogSoftmax { axis }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axis: None }, &[a])
    }

    pub fn instance_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Primitive::InstanceNorm { axis, eps }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn gather(&mut self, a: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { axis, indices }, &[a])
    }

    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        self.apply(Primitive::MaskedFill { mask, fill }, &[a])
    }

    /// Returns the selected values and their indices along `axis`.
    pub fn topk(&mut self, a: Var, k: usize, axis: usize) -> Result<(Var, Vec<usize>)> {
        let v = self.apply(Primitive::TopK { k, axis }, &[a])?;
        Ok((v, self.nodes[v.0].indices.clone()))
    }

    // ---------------------------------------------------------------------
    // Forward

    /// Records `kind` applied to `inputs` and computes its value.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match &kind {
            Primitive::Leaf => false,
            Primitive::MatMul { .. } | Primitive::Add | Primitive::Sub | Primitive::Mul => {
                inputs.len() == 2
            }
            Primitive::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::Invalid(alloc::format!(
                "{kind:?} does not take {} inputs",
                inputs.len()
            )));
        }
        let mut aux = Vec::new();
        let mut indices = Vec::new();
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&kind, &vals, &mut aux, &mut indices)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: kind,
            parents: inputs.to_vec(),
            requires_grad,
            grad: None,
            aux,
            indices,
        }))
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Accumulates `d root / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rlen = self.nodes[root.0].value.len();
        if rlen != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.dims().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.op == Primitive::Leaf {
                leaf_updates.push((id, g));
                continue;
            }
            backward_node(&self.nodes, node, &g, &mut grads);
        }

        for (id, g) in leaf_updates {
            if let Some(acc) = self.nodes[id].grad.as_mut() {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, ts: &[&Tensor]) -> Error {
    Error::Shape { op, dims: ts.iter().map(|t| t.dims().to_vec()).collect() }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.shape().rank() {
        return Err(shape_err(op, &[t]));
    }
    Ok(())
}

/// Whether `rhs` can be tiled over `lhs`.
fn broadcastable(lhs: &Tensor, rhs: &Tensor) -> bool {
    if lhs.dims() == rhs.dims() || rhs.len() == 1 {
        return true;
    }
    let r = rhs.dims();
    let first = r.iter().position(|&d| d != 1).unwrap_or(r.len());
    let r = &r[first..];
    let l = lhs.dims();
    r.len() <= l.len() && &l[l.len() - r.len()..] == r
}

fn elementwise(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_shape(x.shape().clone(), data).expect("same shape")
}

fn forward(kind: &Primitive, xs: &[&Tensor], aux: &mut Vec<f64>, idx: &mut Vec<usize>) -> Result<Tensor> {
    match kind {
        Primitive::Leaf => unreachable!(),
        Primitive::MatMul { transpose_rhs } => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape().rank() != 2 || b.shape().rank() != 2 {
                return Err(shape_err("matmul", xs));
            }
            let (n, k) = (a.dims()[0], a.dims()[1]);
            let (bk, m) = if *transpose_rhs {
                (b.dims()[1], b.dims()[0])
            } else {
                (b.dims()[0], b.dims()[1])
            };
            if bk != k {
                return Err(shape_err("matmul", xs));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; n * m];
            if *transpose_rhs {
                for i in 0..n {
                    let ar = &ad[i * k..(i + 1) * k];
                    for j in 0..m {
                        let br = &bd[j * k..(j + 1) * k];
                        out[i * m + j] = dot(ar, br);
                    }
                }
            } else {
                for i in 0..n {
                    let orow = &mut out[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let br = &bd[p * m..(p + 1) * m];
                        for (o, &bv) in orow.iter_mut().zip(br) {
                            *o += av * bv;
                        }
                    }
                }
            }
            Tensor::new(&[n, m], out)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (xs[0], xs[1]);
            if !broadcastable(a, b) {
                let name = match kind {
                    Primitive::Add => "add",
                    Primitive::Sub => "sub",
                    _ => "mul",
                };
                return Err(shape_err(name, xs));
            }
            let bd = b.data();
            let bl = bd.len();
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[i % bl];
                    match kind {
                        Primitive::Add => x + y,
                        Primitive::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Tensor::from_shape(a.shape().clone(), data)
        }
        Primitive::Scale(c) => Ok(elementwise(xs[0], |v| v * c)),
        Primitive::Tanh => Ok(elementwise(xs[0], math::tanh)),
        Primitive::Sigmoid => Ok(elementwise(xs[0], math::sigmoid)),
        Primitive::Relu => Ok(elementwise(xs[0], |v| if v > 0.0 { v } else { 0.0 })),
        Primitive::Exp => Ok(elementwise(xs[0], math::exp)),
        Primitive::Log => Ok(elementwise(xs[0], math::ln)),
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let x = xs[0];
            check_axis("softmax", x, *axis)?;
            let (outer, len, inner) = x.shape().split(*axis);
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            let log = matches!(kind, Primitive::LogSoftmax { .. });
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + r;
                    let mut arg = 0;
                    for i in 1..len {
                        if xd[at(i)] > xd[at(arg)] {
                            arg = i;
                        }
                    }
                    let mx = xd[at(arg)];
                    if mx == f64::NEG_INFINITY {
                        return Err(Error::AllMasked);
                    }
                    if !mx.is_finite() {
                        return Err(Error::NonFinite(alloc::format!("softmax input {mx}")));
                    }
                    // The max term contributes exactly 1; log1p keeps tiny tails.
                    let mut rest = 0.0;
                    for i in (0..len).filter(|&i| i != arg) {
                        rest += math::exp(xd[at(i)] - mx);
                    }
                    let s = 1.0 + rest;
                    let ls = math::ln_1p(rest);
                    for i in 0..len {
                        let z = xd[at(i)] - mx;
                        out[at(i)] = if log { z - ls } else { math::exp(z) / s };
                    }
                }
            }
            Tensor::from_shape(x.shape().clone(), out)
        }
        Primitive::Mean { axis } | Primitive::Sum { axis: Some(axis) } => {
            let x = xs[0];
            check_axis("reduce", x, *axis)?;
            let (outer, len, inner) = x.shape().split(*axis);
            let xd = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for r in 0..inner {
                        out[o * inner + r] += xd[(o * len + i) * inner + r];
                    }
                }
            }
            if matches!(kind, Primitive::Mean { .. }) {
                let c = 1.0 / len as f64;
                out.iter_mut().for_each(|v| *v *= c);
            }
            Tensor::from_shape(x.shape().with_axis(*axis, 1), out)
        }
        Primitive::Sum { axis: None } => Ok(Tensor::scalar(xs[0].data().iter().sum())),
        Primitive::InstanceNorm { axis, eps } => {
            let x = xs[0];
            check_axis("instance_norm", x, *axis)?;
            let (outer, len, inner) = x.shape().split(*axis);
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            aux.reserve(outer * inner);
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + r;
                    let mean = (0..len).map(|i| xd[at(i)]).sum::<f64>() / len as f64;
                    let var = (0..len).map(|i| { let d = xd[at(i)] - mean; d * d }).sum::<f64>() / len as f64;
                    let inv = 1.0 / math::sqrt(var + eps);
                    for i in 0..len {
                        out[at(i)] = (xd[at(i)] - mean) * inv;
                    }
                    aux.push(inv);
                }
            }
            Tensor::from_shape(x.shape().clone(), out)
        }
        Primitive::Concat { axis } => {
            let first = xs[0];
            check_axis("concat", first, *axis)?;
            let rank = first.shape().rank();
            let mut total = 0;
            for t in xs {
                if t.shape().rank() != rank
                    || (0..rank).any(|d| d != *axis && t.dims()[d] != first.dims()[d])
                {
                    return Err(shape_err("concat", xs));
                }
                total += t.dims()[*axis];
            }
            let shape = first.shape().with_axis(*axis, total);
            let (outer, _, inner) = shape.split(*axis);
            let mut out = Vec::with_capacity(shape.len());
            for o in 0..outer {
                for t in xs {
                    let block = t.dims()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::from_shape(shape, out)
        }
        Primitive::Gather { axis, indices } => {
            let x = xs[0];
            check_axis("gather", x, *axis)?;
            let (outer, len, inner) = x.shape().split(*axis);
            if indices.is_empty() || indices.iter().any(|&i| i >= len) {
                return Err(Error::Shape {
                    op: "gather",
                    dims: vec![x.dims().to_vec(), indices.clone()],
                });
            }
            let xd = x.data();
            let mut out = Vec::with_capacity(outer * indices.len() * inner);
            for o in 0..outer {
                for &i in indices {
                    let s = (o * len + i) * inner;
                    out.extend_from_slice(&xd[s..s + inner]);
                }
            }
            Tensor::from_shape(x.shape().with_axis(*axis, indices.len()), out)
        }
        Primitive::MaskedFill { mask, fill } => {
            let x = xs[0];
            if mask.len() != x.len() {
                return Err(Error::Shape {
                    op: "masked_fill",
                    dims: vec![x.dims().to_vec(), vec![mask.len()]],
                });
            }
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { *fill } else { v })
                .collect();
            Tensor::from_shape(x.shape().clone(), data)
        }
        Primitive::TopK { k, axis } => {
            let x = xs[0];
            check_axis("topk", x, *axis)?;
            let (outer, len, inner) = x.shape().split(*axis);
            if *k == 0 || *k > len {
                return Err(Error::Shape { op: "topk", dims: vec![x.dims().to_vec(), vec![*k]] });
            }
            let xd = x.data();
            let shape = x.shape().with_axis(*axis, *k);
            let mut out = vec![0.0; shape.len()];
            let mut order: Vec<usize> = Vec::with_capacity(len);
            idx.resize(shape.len(), 0);
            for o in 0..outer {
                for r in 0..inner {
                    let at = |i: usize| (o * len + i) * inner + r;
                    order.clear();
                    order.extend(0..len);
                    // Stable sort: equal values keep ascending index order.
                    order.sort_by(|&p, &q| {
                        xd[at(q)].partial_cmp(&xd[at(p)]).unwrap_or(core::cmp::Ordering::Equal)
                    });
                    for (j, &i) in order.iter().take(*k).enumerate() {
                        let dst = (o * k + j) * inner + r;
                        out[dst] = xd[at(i)];
                        idx[dst] = i;
                    }
                }
            }
            Tensor::from_shape(shape, out)
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], p: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[p.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(grads[p.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let ps = &node.parents;
    let y = node.value.data();
    match &node.op {
        Primitive::Leaf => {}
        Primitive::MatMul { transpose_rhs } => {
            let (a, b) = (&nodes[ps[0].0].value, &nodes[ps[1].0].value);
            let (n, k) = (a.dims()[0], a.dims()[1]);
            let m = node.value.dims()[1];
            let (ad, bd) = (a.data(), b.data());
            if let Some(da) = slot(grads, nodes, ps[0]) {
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let dar = &mut da[i * k..(i + 1) * k];
                    if *transpose_rhs {
                        // dA = G B, B is [m, k]
                        for (j, &gv) in gr.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &bv) in dar.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *d += gv * bv;
                            }
                        }
                    } else {
                        // dA = G B^T, B is [k, m]
                        for (p, d) in dar.iter_mut().enumerate() {
                            *d += dot(gr, &bd[p * m..(p + 1) * m]);
                        }
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, ps[1]) {
                for i in 0..n {
                    let gr = &g[i * m..(i + 1) * m];
                    let ar = &ad[i * k..(i + 1) * k];
                    if *transpose_rhs {
                        // dB = G^T A, B is [m, k]
                        for (j, &gv) in gr.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, &av) in db[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *d += gv * av;
                            }
                        }
                    } else {
                        // dB = A^T G, B is [k, m]
                        for (p, &av) in ar.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let (a, b) = (nodes[ps[0].0].value.data(), nodes[ps[1].0].value.data());
            let bl = b.len();
            let is_mul = matches!(node.op, Primitive::Mul);
            if let Some(da) = slot(grads, nodes, ps[0]) {
                for i in 0..g.len() {
                    da[i] += if is_mul { g[i] * b[i % bl] } else { g[i] };
                }
            }
            if let Some(db) = slot(grads, nodes, ps[1]) {
                let sign = if matches!(node.op, Primitive::Sub) { -1.0 } else { 1.0 };
                for i in 0..g.len() {
                    db[i % bl] += if is_mul { g[i] * a[i] } else { sign * g[i] };
                }
            }
        }
        Primitive::Scale(c) => {
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for (d, &gv) in d.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
        }
        Primitive::Tanh | Primitive::Sigmoid | Primitive::Relu | Primitive::Exp | Primitive::Log => {
            let x = nodes[ps[0].0].value.data();
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for i in 0..g.len() {
                    let local = match node.op {
                        Primitive::Tanh => 1.0 - y[i] * y[i],
                        Primitive::Sigmoid => y[i] * (1.0 - y[i]),
                        Primitive::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Primitive::Exp => y[i],
                        _ => 1.0 / x[i],
                    };
                    d[i] += g[i] * local;
                }
            }
        }
        Primitive::Softmax { axis } | Primitive::LogSoftmax { axis } => {
            let (outer, len, inner) = node.value.shape().split(*axis);
            let log = matches!(node.op, Primitive::LogSoftmax { .. });
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + r;
                        if log {
                            let gs: f64 = (0..len).map(|i| g[at(i)]).sum();
                            for i in 0..len {
                                let gi = g[at(i)];
                                d[at(i)] += -math::exp_m1(y[at(i)]) * gi - math::exp(y[at(i)]) * (gs - gi);
                            }
                        } else {
                            let gy: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                d[at(i)] += y[at(i)] * (g[at(i)] - gy);
                            }
                        }
                    }
                }
            }
        }
        Primitive::Mean { axis } | Primitive::Sum { axis: Some(axis) } => {
            let x = &nodes[ps[0].0].value;
            let (outer, len, inner) = x.shape().split(*axis);
            let c = if matches!(node.op, Primitive::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for o in 0..outer {
                    for i in 0..len {
                        for r in 0..inner {
                            d[(o * len + i) * inner + r] += c * g[o * inner + r];
                        }
                    }
                }
            }
        }
        Primitive::Sum { axis: None } => {
            if let Some(d) = slot(grads, nodes, ps[0]) {
                d.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Primitive::InstanceNorm { axis, .. } => {
            let (outer, len, inner) = node.value.shape().split(*axis);
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + r;
                        let inv = node.aux[o * inner + r];
                        let n = len as f64;
                        let gm = (0..len).map(|i| g[at(i)]).sum::<f64>() / n;
                        let gym = (0..len).map(|i| g[at(i)] * y[at(i)]).sum::<f64>() / n;
                        for i in 0..len {
                            d[at(i)] += inv * (g[at(i)] - gm - y[at(i)] * gym);
                        }
                    }
                }
            }
        }
        Primitive::Concat { axis } => {
            let (outer, _, inner) = node.value.shape().split(*axis);
            let total_block = node.value.dims()[*axis] * inner;
            let mut offset = 0;
            for &p in ps {
                let ext = nodes[p.0].value.dims()[*axis];
                let block = ext * inner;
                if let Some(d) = slot(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[o * total_block + offset..o * total_block + offset + block];
                        for (dv, &gv) in d[o * block..(o + 1) * block].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                offset += block;
            }
        }
        Primitive::Gather { axis, indices } => {
            let x = &nodes[ps[0].0].value;
            let (outer, len, inner) = x.shape().split(*axis);
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for o in 0..outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let s = (o * len + i) * inner;
                        let gs = (o * indices.len() + j) * inner;
                        for r in 0..inner {
                            d[s + r] += g[gs + r];
                        }
                    }
                }
            }
        }
        Primitive::MaskedFill { mask, .. } => {
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for i in 0..g.len() {
                    if !mask[i] {
                        d[i] += g[i];
                    }
                }
            }
        }
        Primitive::TopK { k, axis } => {
            let x = &nodes[ps[0].0].value;
            let (outer, len, inner) = x.shape().split(*axis);
            if let Some(d) = slot(grads, nodes, ps[0]) {
                for o in 0..outer {
                    for j in 0..*k {
                        for r in 0..inner {
                            let src = (o * k + j) * inner + r;
                            let i = node.indices[src];
                            d[(o * len + i) * inner + r] += g[src];
                        }
                    }
                }
            }
        }
    }
}
