//! Define-then-run compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, which is therefore a
//! topological order. Shapes are static and checked when a node is added;
//! leaf values are bound before each [`Graph::evaluate`]. Value and gradient
//! buffers are kept between runs so a graph built once (for example an
//! unrolled training step) can be re-evaluated with new leaf values without
//! reallocating.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, differentiable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    ReduceSum(NodeId),
    SigmoidCrossEntropy { logits: NodeId, targets: NodeId },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::ReduceSum(_) => "reduce_sum",
            Op::SigmoidCrossEntropy { .. } => "sigmoid_cross_entropy",
        }
    }
}

/// How the right operand of an elementwise binary op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is one row repeated over all leading dimensions
    Row(usize),
    Scalar,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    size: usize,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    values: Vec<Vec<S>>,
    bound: Vec<bool>,
    grads: Vec<Vec<S>>,
    evaluated: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_between(nodes: &[Node], a: NodeId, b: NodeId) -> Option<Broadcast> {
    let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
    if sa == sb {
        Some(Broadcast::Same)
    } else if sb.len() == 1 && sb[0] == 1 {
        Some(Broadcast::Scalar)
    } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
        Some(Broadcast::Row(sb[0]))
    } else {
        None
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            values: Vec::new(),
            bound: Vec::new(),
            grads: Vec::new(),
            evaluated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Primitive name of a node, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.label()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf { differentiable, .. } => *differentiable,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Sigmoid(a) | Op::Tanh(a) | Op::ReduceSum(a) => self.nodes[a.0].needs_grad,
            Op::Slice { input, .. } => self.nodes[input.0].needs_grad,
            Op::Concat { inputs, .. } => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
            Op::SigmoidCrossEntropy { logits, targets } => {
                self.nodes[logits.0].needs_grad || self.nodes[targets.0].needs_grad
            }
        };
        let size = shape.iter().product();
        self.nodes.push(Node {
            op,
            shape,
            size,
            needs_grad,
        });
        self.values.push(Vec::new());
        self.bound.push(false);
        self.grads.push(Vec::new());
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Add a named input. Differentiable leaves receive gradients on backward.
    pub fn leaf(&mut self, name: &str, shape: &[usize], differentiable: bool) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_err("leaf", format!("`{name}` has invalid shape {shape:?}")));
        }
        if self.leaves.contains_key(name) {
            return Err(Error::Invalid(format!("leaf `{name}` declared twice")));
        }
        let id = self.push(
            Op::Leaf {
                name: name.to_string(),
                differentiable,
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    fn broadcast_kind(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Broadcast> {
        broadcast_between(&self.nodes, a, b).ok_or_else(|| {
            let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
            self.shape_err(op, format!("cannot broadcast {sb:?} onto {sa:?}"))
        })
    }

    /// Elementwise sum; `b` may be a row vector or a one-element tensor.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_kind(a, b, "add")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a, b), shape))
    }

    /// Elementwise product; `b` may be a row vector or a one-element tensor.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_kind(a, b, "mul")?;
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Tanh(a), shape)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(first) = inputs.first() else {
            return Err(self.shape_err("concat", "no inputs".into()));
        };
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(self.shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for id in inputs {
            let s = &self.nodes[id.0].shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(self.shape_err("concat", format!("{s:?} incompatible with {base:?}")));
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.nodes[input.0].shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(self.shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                input,
                axis,
                start,
                len,
            },
            shape,
        ))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum(a), vec![1])
    }

    /// Elementwise `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (sl, st) = (&self.nodes[logits.0].shape, &self.nodes[targets.0].shape);
        if sl != st {
            return Err(self.shape_err("sigmoid_cross_entropy", format!("{sl:?} vs {st:?}")));
        }
        let shape = sl.clone();
        Ok(self.push(Op::SigmoidCrossEntropy { logits, targets }, shape))
    }

    /// Copy `values` into the leaf's slot.
    pub fn bind_id(&mut self, id: NodeId, values: &[S]) -> Result<()> {
        let node = &self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::Invalid(format!("node {} is not a leaf", id.0)));
        }
        if values.len() != node.size {
            return Err(Error::Shape {
                node: id.0,
                op: "leaf",
                detail: format!("expected {} values for {:?}, got {}", node.size, node.shape, values.len()),
            });
        }
        let slot = &mut self.values[id.0];
        slot.clear();
        slot.extend_from_slice(values);
        self.bound[id.0] = true;
        self.evaluated = false;
        Ok(())
    }

    pub fn bind(&mut self, name: &str, value: &Tensor<S>) -> Result<()> {
        let id = self
            .leaf_id(name)
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))?;
        if value.shape() != self.nodes[id.0].shape.as_slice() {
            return Err(Error::Shape {
                node: id.0,
                op: "leaf",
                detail: format!(
                    "`{name}` declared {:?}, bound {:?}",
                    self.nodes[id.0].shape,
                    value.shape()
                ),
            });
        }
        self.bind_id(id, value.data())
    }

    /// Bind the given leaves, evaluate, and return the requested node values.
    pub fn forward(
        &mut self,
        leaf_values: &HashMap<String, Tensor<S>>,
        outputs: &[NodeId],
    ) -> Result<Vec<Tensor<S>>> {
        for (name, v) in leaf_values {
            self.bind(name, v)?;
        }
        self.evaluate()?;
        outputs.iter().map(|&id| self.value(id)).collect()
    }

    /// Evaluate every non-leaf node in order.
    pub fn evaluate(&mut self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, .. } = &node.op {
                if !self.bound[i] {
                    return Err(Error::UnboundLeaf(name.clone()));
                }
            }
        }
        for i in 0..self.nodes.len() {
            self.eval_node(i);
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize) {
        let node = &self.nodes[i];
        if matches!(node.op, Op::Leaf { .. }) {
            return;
        }
        let mut out = std::mem::take(&mut self.values[i]);
        out.clear();
        out.resize(node.size, S::zero());
        let vals = &self.values;
        match &node.op {
            Op::Leaf { .. } => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                S::gemm(sa[0], sa[1], sb[1], &vals[a.0], false, &vals[b.0], false, &mut out, false);
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_add = matches!(node.op, Op::Add(..));
                let (x, y) = (&vals[a.0], &vals[b.0]);
                let f = |p: S, q: S| if is_add { p + q } else { p * q };
                match broadcast_between(&self.nodes, *a, *b).expect("checked at construction") {
                    Broadcast::Same => {
                        for ((o, &p), &q) in out.iter_mut().zip(x).zip(y) {
                            *o = f(p, q);
                        }
                    }
                    Broadcast::Scalar => {
                        let q = y[0];
                        for (o, &p) in out.iter_mut().zip(x) {
                            *o = f(p, q);
                        }
                    }
                    Broadcast::Row(n) => {
                        for (orow, xrow) in out.chunks_mut(n).zip(x.chunks(n)) {
                            for ((o, &p), &q) in orow.iter_mut().zip(xrow).zip(y) {
                                *o = f(p, q);
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                for (o, &p) in out.iter_mut().zip(&vals[a.0]) {
                    *o = p.sigmoid();
                }
            }
            Op::Tanh(a) => {
                for (o, &p) in out.iter_mut().zip(&vals[a.0]) {
                    *o = p.tanh();
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let width = self.nodes[id.0].shape[*axis] * inner;
                    let src = &vals[id.0];
                    for r in 0..outer {
                        let dst = r * total * inner + offset;
                        out[dst..dst + width].copy_from_slice(&src[r * width..(r + 1) * width]);
                    }
                    offset += width;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let (outer, full, inner) = split_axis(&self.nodes[input.0].shape, *axis);
                let width = len * inner;
                let src = &vals[input.0];
                for r in 0..outer {
                    let s = r * full * inner + start * inner;
                    out[r * width..(r + 1) * width].copy_from_slice(&src[s..s + width]);
                }
            }
            Op::ReduceSum(a) => {
                out[0] = vals[a.0].iter().copied().sum();
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                for ((o, &x), &y) in out.iter_mut().zip(&vals[logits.0]).zip(&vals[targets.0]) {
                    *o = x.max(S::zero()) - x * y + (-x.abs()).exp().ln_1p();
                }
            }
        }
        self.values[i] = out;
    }

    pub fn value(&self, id: NodeId) -> Result<Tensor<S>> {
        let v = self.value_slice(id)?;
        Tensor::new(self.nodes[id.0].shape.clone(), v.to_vec())
    }

    pub fn value_slice(&self, id: NodeId) -> Result<&[S]> {
        let is_leaf = matches!(self.nodes[id.0].op, Op::Leaf { .. });
        if (is_leaf && !self.bound[id.0]) || (!is_leaf && !self.evaluated) {
            return Err(Error::NotEvaluated);
        }
        Ok(&self.values[id.0])
    }

    /// Populate gradient slots with d(output[component])/d(node).
    ///
    /// `component` may be omitted only for single-element outputs. Leaves
    /// that do not influence the output get exact zeros.
    pub fn backward_from(&mut self, output: NodeId, component: Option<usize>) -> Result<()> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out_size = self.nodes[output.0].size;
        let comp = match component {
            Some(c) if c < out_size => c,
            Some(c) => {
                return Err(Error::Invalid(format!(
                    "component {c} out of range for {out_size} elements"
                )))
            }
            None if out_size == 1 => 0,
            None => return Err(Error::NonScalarOutput(out_size)),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let g = &mut self.grads[i];
            g.clear();
            if node.needs_grad && i <= output.0 {
                g.resize(node.size, S::zero());
            }
        }
        if !self.nodes[output.0].needs_grad {
            return Ok(());
        }
        self.grads[output.0][comp] = S::one();
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let values = &self.values;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let needs = |id: &NodeId| nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if needs(a) {
                    S::gemm(m, n, k, g, false, &values[b.0], true, &mut grads[a.0], true);
                }
                if needs(b) {
                    S::gemm(k, m, n, &values[a.0], true, g, false, &mut grads[b.0], true);
                }
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_add = matches!(node.op, Op::Add(..));
                let bc = broadcast_between(nodes, *a, *b).expect("checked at construction");
                if needs(a) {
                    let ga = &mut grads[a.0];
                    if is_add {
                        for (d, &s) in ga.iter_mut().zip(g) {
                            *d += s;
                        }
                    } else {
                        let y = &values[b.0];
                        match bc {
                            Broadcast::Same => {
                                for ((d, &s), &q) in ga.iter_mut().zip(g).zip(y) {
                                    *d += s * q;
                                }
                            }
                            Broadcast::Scalar => {
                                for (d, &s) in ga.iter_mut().zip(g) {
                                    *d += s * y[0];
                                }
                            }
                            Broadcast::Row(n) => {
                                for (drow, grow) in ga.chunks_mut(n).zip(g.chunks(n)) {
                                    for ((d, &s), &q) in drow.iter_mut().zip(grow).zip(y) {
                                        *d += s * q;
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(b) {
                    let gb = &mut grads[b.0];
                    let x = &values[a.0];
                    let term = |s: S, p: S| if is_add { s } else { s * p };
                    match bc {
                        Broadcast::Same => {
                            for ((d, &s), &p) in gb.iter_mut().zip(g).zip(x) {
                                *d += term(s, p);
                            }
                        }
                        Broadcast::Scalar => {
                            let mut acc = S::zero();
                            for (&s, &p) in g.iter().zip(x) {
                                acc += term(s, p);
                            }
                            gb[0] += acc;
                        }
                        Broadcast::Row(n) => {
                            for (grow, xrow) in g.chunks(n).zip(x.chunks(n)) {
                                for ((d, &s), &p) in gb.iter_mut().zip(grow).zip(xrow) {
                                    *d += term(s, p);
                                }
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &values[i];
                for ((d, &s), &v) in grads[a.0].iter_mut().zip(g).zip(y) {
                    *d += s * v * (S::one() - v);
                }
            }
            Op::Tanh(a) => {
                let y = &values[i];
                for ((d, &s), &v) in grads[a.0].iter_mut().zip(g).zip(y) {
                    *d += s * (S::one() - v * v);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for id in inputs {
                    let width = nodes[id.0].shape[*axis] * inner;
                    if needs(id) {
                        let gi = &mut grads[id.0];
                        for r in 0..outer {
                            let src = r * total * inner + offset;
                            for (d, &s) in gi[r * width..(r + 1) * width]
                                .iter_mut()
                                .zip(&g[src..src + width])
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += width;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let (outer, full, inner) = split_axis(&nodes[input.0].shape, *axis);
                let width = len * inner;
                let gi = &mut grads[input.0];
                for r in 0..outer {
                    let dst = r * full * inner + start * inner;
                    for (d, &s) in gi[dst..dst + width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d += s;
                    }
                }
            }
            Op::ReduceSum(a) => {
                let s = g[0];
                for d in grads[a.0].iter_mut() {
                    *d += s;
                }
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                if needs(logits) {
                    for ((d, &s), (&x, &y)) in grads[logits.0]
                        .iter_mut()
                        .zip(g)
                        .zip(values[logits.0].iter().zip(&values[targets.0]))
                    {
                        *d += s * (x.sigmoid() - y);
                    }
                }
                if needs(targets) {
                    for ((d, &s), &x) in grads[targets.0].iter_mut().zip(g).zip(&values[logits.0]) {
                        *d -= s * x;
                    }
                }
            }
        }
    }

    /// Gradient slot of a node after [`Graph::backward_from`]; `None` when
    /// the node is not differentiable.
    pub fn grad_slice(&self, id: NodeId) -> Option<&[S]> {
        let g = &self.grads[id.0];
        if self.nodes[id.0].needs_grad && g.len() == self.nodes[id.0].size {
            Some(g)
        } else {
            None
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grad_slice(id)
            .map(|g| Tensor::new(self.nodes[id.0].shape.clone(), g.to_vec()).expect("grad shape"))
    }

    /// Run the backward pass and collect gradients of every differentiable leaf.
    pub fn backward(
        &mut self,
        output: NodeId,
        component: Option<usize>,
    ) -> Result<HashMap<String, Tensor<S>>> {
        self.backward_from(output, component)?;
        let mut out = HashMap::new();
        for (name, &id) in &self.leaves {
            let node = &self.nodes[id.0];
            if node.needs_grad {
                let g = self
                    .grad(id)
                    .unwrap_or_else(|| Tensor::zeros(&node.shape));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2], true).unwrap();
        let mut b = HashMap::new();
        b.insert("x".to_string(), Tensor::vector(vec![2.0, 3.0]));
        let out = g.forward(&b, &[x]).unwrap();
        assert_eq!(out[0].data(), &[2.0, 3.0]);
        let grads = g.backward(x, Some(0)).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[1], false).unwrap();
        let y = g.sigmoid(x);
        g.bind("x", &Tensor::scalar(0.0)).unwrap();
        g.evaluate().unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[0.5]);
    }

    #[test]
    fn chained_sigmoid_tanh_matches_scalar_reference() {
        // reference evaluated without the graph
        let reference = (1.0f64 / (1.0 + (-0.0f64).exp())).tanh();
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[1], true).unwrap();
        let s = g.sigmoid(x);
        let y = g.tanh(s);
        g.bind("x", &Tensor::scalar(0.0)).unwrap();
        g.evaluate().unwrap();
        assert_eq!(g.value(y).unwrap().data()[0], reference);
    }

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[3], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.reduce_sum(sq);
        g.bind("x", &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        g.evaluate().unwrap();
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x", &[2], true).unwrap();
        let _w = g.leaf("w", &[2], true).unwrap();
        let y = g.reduce_sum(x);
        g.bind("x", &Tensor::vector(vec![1.0, 2.0])).unwrap();
        g.bind("w", &Tensor::vector(vec![5.0, 6.0])).unwrap();
        g.evaluate().unwrap();
        let grads = g.backward(y, None).unwrap();
        assert_eq!(grads["w"].data(), &[0.0, 0.0]);
        assert_eq!(grads["x"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn errors_are_structured() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf("a", &[2, 3], true).unwrap();
        let b = g.leaf("b", &[2, 3], true).unwrap();
        match g.matmul(a, b) {
            Err(Error::Shape { op, node, .. }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let s = g.add(a, b).unwrap();
        assert!(matches!(g.evaluate(), Err(Error::UnboundLeaf(_))));
        assert!(matches!(g.backward(s, Some(0)), Err(Error::NotEvaluated)));
        g.bind("a", &Tensor::zeros(&[2, 3])).unwrap();
        g.bind("b", &Tensor::zeros(&[2, 3])).unwrap();
        g.evaluate().unwrap();
        assert!(matches!(g.backward(s, None), Err(Error::NonScalarOutput(6))));
        assert!(g.bind("a", &Tensor::zeros(&[3, 2])).is_err());
        assert!(matches!(g.bind("zz", &Tensor::zeros(&[1])), Err(Error::UnknownLeaf(_))));
    }

    #[test]
    fn forward_is_bit_identical_on_repeat() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf("a", &[2, 3], true).unwrap();
        let b = g.leaf("b", &[3, 2], true).unwrap();
        let m = g.matmul(a, b).unwrap();
        let t = g.tanh(m);
        let mut bind = HashMap::new();
        bind.insert(
            "a".to_string(),
            Tensor::new(vec![2, 3], vec![0.1, -0.3, 0.7, 1.1, 0.2, -0.9]).unwrap(),
        );
        bind.insert(
            "b".to_string(),
            Tensor::new(vec![3, 2], vec![0.5, 0.25, -1.5, 0.3, 0.8, -0.1]).unwrap(),
        );
        let first = g.forward(&bind, &[t]).unwrap();
        let second = g.forward(&bind, &[t]).unwrap();
        assert_eq!(first, second);
    }
}
