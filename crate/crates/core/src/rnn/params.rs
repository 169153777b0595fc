use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Stacked LSTM architecture with one sigmoid head per target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub input_size: usize,
    pub n_targets: usize,
}

impl ModelSpec {
    pub fn paper(input_size: usize, n_targets: usize) -> Self {
        Self {
            n_layers: 3,
            hidden_size: 64,
            input_size,
            n_targets,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_size == 0 || self.input_size == 0 || self.n_targets == 0 {
            return Err(Error::Config(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_size
        } else {
            self.hidden_size
        }
    }
}

/// One LSTM layer. `w` maps `[input, h_prev]` (row) to the four gate
/// pre-activations laid out as `[input | forget | candidate | output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `(input_size + hidden_size) x 4*hidden_size`, row-major.
    pub w: Vec<S>,
    /// `4*hidden_size`.
    pub b: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<S> {
    pub spec: ModelSpec,
    pub layers: Vec<LayerParams<S>>,
    /// `hidden_size x n_targets`.
    pub head_w: Vec<S>,
    pub head_b: Vec<S>,
}

impl<S: Scalar> LstmParams<S> {
    pub fn zeros(spec: ModelSpec) -> Self {
        let h = spec.hidden_size;
        let layers = (0..spec.n_layers)
            .map(|l| {
                let input = spec.layer_input(l);
                LayerParams {
                    input_size: input,
                    hidden_size: h,
                    w: vec![S::zero(); (input + h) * 4 * h],
                    b: vec![S::zero(); 4 * h],
                }
            })
            .collect();
        Self {
            spec,
            layers,
            head_w: vec![S::zero(); h * spec.n_targets],
            head_b: vec![S::zero(); spec.n_targets],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, with the
    /// forget-gate bias shifted to +1.
    pub fn init(spec: ModelSpec, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(spec);
        let h = spec.hidden_size;
        let mut fill = |v: &mut [S], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in v.iter_mut() {
                *x = S::from_f64_lossy(rng.random_range(-bound..bound));
            }
        };
        for layer in &mut p.layers {
            let fan_in = layer.input_size + h;
            fill(&mut layer.w, fan_in);
            fill(&mut layer.b, fan_in);
            for v in &mut layer.b[h..2 * h] {
                *v += S::one();
            }
        }
        fill(&mut p.head_w, h);
        fill(&mut p.head_b, h);
        p
    }

    pub fn cast<T: Scalar>(&self) -> LstmParams<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::from_f64_lossy(x.as_f64())).collect::<Vec<T>>();
        LstmParams {
            spec: self.spec,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    input_size: l.input_size,
                    hidden_size: l.hidden_size,
                    w: conv(&l.w),
                    b: conv(&l.b),
                })
                .collect(),
            head_w: conv(&self.head_w),
            head_b: conv(&self.head_b),
        }
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let h = self.spec.hidden_size;
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{l}.w"),
                Tensor::new(vec![layer.input_size + h, 4 * h], layer.w.clone()).expect("layer shape"),
            ));
            out.push((format!("layer{l}.b"), Tensor::vector(layer.b.clone())));
        }
        out.push((
            "head.w".into(),
            Tensor::new(vec![h, self.spec.n_targets], self.head_w.clone()).expect("head shape"),
        ));
        out.push(("head.b".into(), Tensor::vector(self.head_b.clone())));
        out
    }

    /// Mutable views of every parameter buffer, in `named_tensors` order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn buffers(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = Vec::new();
        for layer in &self.layers {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn from_named(spec: ModelSpec, tensors: &[(String, Tensor<S>)]) -> Result<Self> {
        let mut p = Self::zeros(spec);
        let expected: Vec<(String, Vec<usize>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((want_name, want_shape), (name, t)) in expected.iter().zip(tensors) {
            if want_name != name || want_shape.as_slice() != t.shape() {
                return Err(Error::Invalid(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        for (buf, (_, t)) in p.buffers_mut().into_iter().zip(tensors) {
            buf.copy_from_slice(t.data());
        }
        Ok(p)
    }

    pub fn all_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn n_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }
}
