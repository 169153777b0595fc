//! LSTM computations expressed on the autodiff graph.
//!
//! [`UnrolledLoss`] is the full backpropagation-through-time training
//! objective. [`StepGraph`] is a single timestep evaluated for many rows at
//! once, with the previous recurrent states held constant; it yields
//! per-timestep gradients of the output with respect to the current input or
//! the current activation of one layer.

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::synthgen::LabeledSeries;

use super::params::{LstmParams, ModelSpec};

struct LayerIds {
    w: NodeId,
    b: NodeId,
}

fn param_leaves<S: Scalar>(g: &mut Graph<S>, spec: &ModelSpec, differentiable: bool) -> Result<(Vec<LayerIds>, NodeId, NodeId)> {
    let h = spec.hidden_size;
    let mut layers = Vec::with_capacity(spec.n_layers);
    for l in 0..spec.n_layers {
        let w = g.leaf(&format!("layer{l}.w"), &[spec.layer_input(l) + h, 4 * h], differentiable)?;
        let b = g.leaf(&format!("layer{l}.b"), &[4 * h], differentiable)?;
        layers.push(LayerIds { w, b });
    }
    let hw = g.leaf("head.w", &[h, spec.n_targets], differentiable)?;
    let hb = g.leaf("head.b", &[spec.n_targets], differentiable)?;
    Ok((layers, hw, hb))
}

fn param_ids(layers: &[LayerIds], hw: NodeId, hb: NodeId) -> Vec<NodeId> {
    let mut ids: Vec<NodeId> = layers.iter().flat_map(|l| [l.w, l.b]).collect();
    ids.push(hw);
    ids.push(hb);
    ids
}

/// One LSTM cell: returns the new `(h, c)`.
fn cell<S: Scalar>(
    g: &mut Graph<S>,
    ids: &LayerIds,
    hidden: usize,
    input: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let cat = g.concat(&[input, h_prev], 1)?;
    let z = g.matmul(cat, ids.w)?;
    let z = g.add(z, ids.b)?;
    let zi = g.slice(z, 1, 0, hidden)?;
    let zf = g.slice(z, 1, hidden, hidden)?;
    let zg = g.slice(z, 1, 2 * hidden, hidden)?;
    let zo = g.slice(z, 1, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let fc = g.mul(f, c_prev)?;
    let ic = g.mul(i, cand)?;
    let c = g.add(fc, ic)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

fn bind_params<S: Scalar>(g: &mut Graph<S>, ids: &[NodeId], params: &LstmParams<S>) -> Result<()> {
    for (&id, buf) in ids.iter().zip(params.buffers()) {
        g.bind_id(id, buf)?;
    }
    Ok(())
}

/// Mean sigmoid cross-entropy over batch, timesteps and targets for a batch
/// of equal-length series, unrolled over the whole length.
#[derive(Debug)]
pub struct UnrolledLoss<S> {
    graph: Graph<S>,
    spec: ModelSpec,
    batch: usize,
    length: usize,
    params: Vec<NodeId>,
    x: Vec<NodeId>,
    y: Vec<NodeId>,
    logits: Vec<NodeId>,
    loss: NodeId,
    x_buf: Vec<S>,
    y_buf: Vec<S>,
}

impl<S: Scalar> UnrolledLoss<S> {
    pub fn new(spec: ModelSpec, batch: usize, length: usize) -> Result<Self> {
        spec.validate()?;
        if batch == 0 || length == 0 {
            return Err(Error::Config("batch size and series length must be >= 1".into()));
        }
        let (n_h, n_k, n_l) = (spec.hidden_size, spec.n_targets, spec.n_layers);
        let mut g = Graph::new();
        let (layers, hw, hb) = param_leaves(&mut g, &spec, true)?;
        let mut h = Vec::with_capacity(n_l);
        let mut c = Vec::with_capacity(n_l);
        for l in 0..n_l {
            h.push(g.leaf(&format!("h0.{l}"), &[batch, n_h], false)?);
            c.push(g.leaf(&format!("c0.{l}"), &[batch, n_h], false)?);
        }
        let scale = g.leaf("scale", &[1], false)?;
        let mut xs = Vec::with_capacity(length);
        let mut ys = Vec::with_capacity(length);
        let mut logits = Vec::with_capacity(length);
        let mut total: Option<NodeId> = None;
        for t in 0..length {
            let x = g.leaf(&format!("x.{t}"), &[batch, spec.input_size], false)?;
            let y = g.leaf(&format!("y.{t}"), &[batch, n_k], false)?;
            let mut input = x;
            for l in 0..n_l {
                let (hn, cn) = cell(&mut g, &layers[l], n_h, input, h[l], c[l])?;
                h[l] = hn;
                c[l] = cn;
                input = hn;
            }
            let z = g.matmul(input, hw)?;
            let z = g.add(z, hb)?;
            let ce = g.sigmoid_cross_entropy(z, y)?;
            let s = g.reduce_sum(ce);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
            xs.push(x);
            ys.push(y);
            logits.push(z);
        }
        let loss = g.mul(total.expect("length >= 1"), scale)?;
        let zeros = vec![S::zero(); batch * n_h];
        for l in 0..n_l {
            let (hid, cid) = (g.leaf_id(&format!("h0.{l}")).unwrap(), g.leaf_id(&format!("c0.{l}")).unwrap());
            g.bind_id(hid, &zeros)?;
            g.bind_id(cid, &zeros)?;
        }
        g.bind_id(scale, &[S::from_f64_lossy(1.0 / (batch * length * n_k) as f64)])?;
        Ok(Self {
            graph: g,
            spec,
            batch,
            length,
            params: param_ids(&layers, hw, hb),
            x: xs,
            y: ys,
            logits,
            loss,
            x_buf: Vec::new(),
            y_buf: Vec::new(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn logits_node(&self, t: usize) -> NodeId {
        self.logits[t]
    }

    pub fn graph(&self) -> &Graph<S> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph<S> {
        &mut self.graph
    }

    pub fn set_params(&mut self, params: &LstmParams<S>) -> Result<()> {
        if params.spec != self.spec {
            return Err(Error::Invalid("parameters do not match the graph's model spec".into()));
        }
        bind_params(&mut self.graph, &self.params, params)
    }

    /// Bind one parameter buffer, in [`LstmParams::named_tensors`] order.
    pub fn set_param(&mut self, index: usize, values: &[S]) -> Result<()> {
        self.graph.bind_id(self.params[index], values)
    }

    pub fn set_batch(&mut self, series: &[&LabeledSeries]) -> Result<()> {
        if series.len() != self.batch {
            return Err(Error::Invalid(format!("batch of {} series, graph expects {}", series.len(), self.batch)));
        }
        for s in series {
            if s.length != self.length || s.n_features != self.spec.input_size || s.n_targets != self.spec.n_targets {
                return Err(Error::Invalid(format!(
                    "series shape {}x{} (targets {}) does not match the graph",
                    s.length, s.n_features, s.n_targets
                )));
            }
        }
        for t in 0..self.length {
            self.x_buf.clear();
            self.y_buf.clear();
            for s in series {
                self.x_buf.extend(s.x_at(t).iter().map(|&v| S::from_f64_lossy(v)));
                self.y_buf
                    .extend((0..s.n_targets).map(|k| if s.label(t, k) == 1 { S::one() } else { S::zero() }));
            }
            self.graph.bind_id(self.x[t], &self.x_buf)?;
            self.graph.bind_id(self.y[t], &self.y_buf)?;
        }
        Ok(())
    }

    /// Forward and backward; returns the loss. Gradients are then available
    /// through [`UnrolledLoss::param_grad`].
    pub fn loss_and_grad(&mut self) -> Result<S> {
        self.graph.evaluate()?;
        let loss = self.graph.value_slice(self.loss)?[0];
        self.graph.backward_from(self.loss, None)?;
        Ok(loss)
    }

    pub fn param_grad(&self, index: usize) -> &[S] {
        self.graph
            .grad_slice(self.params[index])
            .expect("every parameter reaches the loss")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }
}

/// Where the differentiated input of a [`StepGraph`] enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepInput {
    /// The feature vector `x_t`.
    Features,
    /// The hidden output `a_{t,l}` of the given layer.
    Layer(usize),
}

/// Which head value is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Probability,
    Logit,
}

/// One timestep of the network for `rows` independent rows.
#[derive(Debug)]
pub struct StepGraph<S> {
    graph: Graph<S>,
    first_layer: usize,
    n_layers: usize,
    input: NodeId,
    h_prev: Vec<Option<NodeId>>,
    c_prev: Vec<Option<NodeId>>,
    output: NodeId,
    target_sums: Vec<NodeId>,
}

impl<S: Scalar> StepGraph<S> {
    pub fn new(params: &LstmParams<S>, rows: usize, input: StepInput, kind: OutputKind) -> Result<Self> {
        let spec = params.spec;
        let (n_h, n_l) = (spec.hidden_size, spec.n_layers);
        let (first_layer, width) = match input {
            StepInput::Features => (0, spec.input_size),
            StepInput::Layer(l) if l < n_l => (l + 1, n_h),
            StepInput::Layer(l) => {
                return Err(Error::Invalid(format!("layer {l} out of range for a {n_l}-layer model")));
            }
        };
        if rows == 0 {
            return Err(Error::Invalid("step graph needs at least one row".into()));
        }
        let mut g = Graph::new();
        let (layers, hw, hb) = param_leaves(&mut g, &spec, false)?;
        let x = g.leaf("input", &[rows, width], true)?;
        let mut h_prev = vec![None; n_l];
        let mut c_prev = vec![None; n_l];
        let mut cur = x;
        for l in first_layer..n_l {
            let hp = g.leaf(&format!("h_prev.{l}"), &[rows, n_h], false)?;
            let cp = g.leaf(&format!("c_prev.{l}"), &[rows, n_h], false)?;
            h_prev[l] = Some(hp);
            c_prev[l] = Some(cp);
            cur = cell(&mut g, &layers[l], n_h, cur, hp, cp)?.0;
        }
        let z = g.matmul(cur, hw)?;
        let z = g.add(z, hb)?;
        let output = match kind {
            OutputKind::Probability => g.sigmoid(z),
            OutputKind::Logit => z,
        };
        let mut target_sums = Vec::with_capacity(spec.n_targets);
        for k in 0..spec.n_targets {
            let col = g.slice(output, 1, k, 1)?;
            target_sums.push(g.reduce_sum(col));
        }
        bind_params(&mut g, &param_ids(&layers, hw, hb), params)?;
        Ok(Self {
            graph: g,
            first_layer,
            n_layers: n_l,
            input: x,
            h_prev,
            c_prev,
            output,
            target_sums,
        })
    }

    /// Layers whose previous states must be supplied.
    pub fn state_layers(&self) -> std::ops::Range<usize> {
        self.first_layer..self.n_layers
    }

    pub fn set_input(&mut self, values: &[S]) -> Result<()> {
        self.graph.bind_id(self.input, values)
    }

    pub fn set_state(&mut self, layer: usize, h: &[S], c: &[S]) -> Result<()> {
        let (Some(hp), Some(cp)) = (self.h_prev[layer], self.c_prev[layer]) else {
            return Err(Error::Invalid(format!("layer {layer} has no recurrent input in this step graph")));
        };
        self.graph.bind_id(hp, h)?;
        self.graph.bind_id(cp, c)
    }

    /// Evaluate and differentiate target `k`. Rows are independent, so the
    /// gradient of the per-target row sum gives each row's own gradient.
    /// Returns `(outputs rows x K, gradient rows x width)`.
    pub fn gradient(&mut self, k: usize) -> Result<(Vec<S>, Vec<S>)> {
        let &sum = self
            .target_sums
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("target {k} out of range")))?;
        self.graph.evaluate()?;
        let out = self.graph.value_slice(self.output)?.to_vec();
        self.graph.backward_from(sum, None)?;
        let grad = self.graph.grad_slice(self.input).expect("input is differentiable").to_vec();
        Ok((out, grad))
    }

    pub fn graph_mut(&mut self) -> &mut Graph<S> {
        &mut self.graph
    }

    pub fn target_node(&self, k: usize) -> NodeId {
        self.target_sums[k]
    }
}
