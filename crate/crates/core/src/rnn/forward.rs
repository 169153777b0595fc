//! Direct forward evaluation, one series at a time.
//!
//! Mirrors the graph formulation operation for operation so values agree
//! with the autodiff path to rounding.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{LayerParams, LstmParams};

/// One LSTM layer update for `rows` independent rows, in place on `h`/`c`.
fn layer_step<S: Scalar>(
    layer: &LayerParams<S>,
    rows: usize,
    input: &[S],
    h: &mut [S],
    c: &mut [S],
    concat: &mut Vec<S>,
    z: &mut Vec<S>,
) {
    let (n_in, n_h) = (layer.input_size, layer.hidden_size);
    let width = n_in + n_h;
    concat.clear();
    for r in 0..rows {
        concat.extend_from_slice(&input[r * n_in..(r + 1) * n_in]);
        concat.extend_from_slice(&h[r * n_h..(r + 1) * n_h]);
    }
    z.resize(rows * 4 * n_h, S::zero());
    S::gemm(rows, width, 4 * n_h, concat, false, &layer.w, false, z, false);
    for r in 0..rows {
        let zr = &mut z[r * 4 * n_h..(r + 1) * 4 * n_h];
        for (v, b) in zr.iter_mut().zip(&layer.b) {
            *v += *b;
        }
        let hr = &mut h[r * n_h..(r + 1) * n_h];
        let cr = &mut c[r * n_h..(r + 1) * n_h];
        for j in 0..n_h {
            let i_g = zr[j].sigmoid();
            let f_g = zr[n_h + j].sigmoid();
            let g_g = zr[2 * n_h + j].tanh();
            let o_g = zr[3 * n_h + j].sigmoid();
            cr[j] = f_g * cr[j] + i_g * g_g;
            hr[j] = o_g * cr[j].tanh();
        }
    }
}

/// Recurrent state plus scratch buffers for stepping a single series.
#[derive(Clone, Debug)]
pub struct Stepper<'a, S> {
    params: &'a LstmParams<S>,
    h: Vec<Vec<S>>,
    c: Vec<Vec<S>>,
    logits: Vec<S>,
    concat: Vec<S>,
    z: Vec<S>,
}

impl<'a, S: Scalar> Stepper<'a, S> {
    /// Zero initial state.
    pub fn new(params: &'a LstmParams<S>) -> Self {
        let spec = params.spec;
        Self {
            params,
            h: vec![vec![S::zero(); spec.hidden_size]; spec.n_layers],
            c: vec![vec![S::zero(); spec.hidden_size]; spec.n_layers],
            logits: vec![S::zero(); spec.n_targets],
            concat: Vec::new(),
            z: Vec::new(),
        }
    }

    pub fn hidden(&self, layer: usize) -> &[S] {
        &self.h[layer]
    }

    pub fn cell(&self, layer: usize) -> &[S] {
        &self.c[layer]
    }

    pub fn logits(&self) -> &[S] {
        &self.logits
    }

    pub fn set_state(&mut self, layer: usize, h: &[S], c: &[S]) {
        self.h[layer].copy_from_slice(h);
        self.c[layer].copy_from_slice(c);
    }

    /// Advance every layer by one timestep and refresh the head output.
    pub fn step(&mut self, x: &[S]) {
        let n_layers = self.params.spec.n_layers;
        for l in 0..n_layers {
            let (below, rest) = self.h.split_at_mut(l);
            let input: &[S] = if l == 0 { x } else { &below[l - 1] };
            layer_step(
                &self.params.layers[l],
                1,
                input,
                &mut rest[0],
                &mut self.c[l],
                &mut self.concat,
                &mut self.z,
            );
        }
        self.head();
    }

    /// Replace the hidden output of `layer` at the current step with
    /// `activation`, then advance only the layers above it and the head.
    ///
    /// Layers above `layer` must hold their previous-step states.
    pub fn step_above(&mut self, layer: usize, activation: &[S]) {
        self.h[layer].copy_from_slice(activation);
        for l in layer + 1..self.params.spec.n_layers {
            let (below, rest) = self.h.split_at_mut(l);
            layer_step(
                &self.params.layers[l],
                1,
                &below[l - 1],
                &mut rest[0],
                &mut self.c[l],
                &mut self.concat,
                &mut self.z,
            );
        }
        self.head();
    }

    fn head(&mut self) {
        let spec = self.params.spec;
        let top = &self.h[spec.n_layers - 1];
        S::gemm(1, spec.hidden_size, spec.n_targets, top, false, &self.params.head_w, false, &mut self.logits, false);
        for (v, b) in self.logits.iter_mut().zip(&self.params.head_b) {
            *v += *b;
        }
    }
}

/// Hidden states, cell states and head logits for every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Run<S> {
    pub length: usize,
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_targets: usize,
    /// `length x n_layers x hidden_size`.
    pub h: Vec<S>,
    /// `length x n_layers x hidden_size`.
    pub c: Vec<S>,
    /// `length x n_targets`.
    pub logits: Vec<S>,
}

impl<S: Scalar> Run<S> {
    pub fn hidden(&self, t: usize, layer: usize) -> &[S] {
        let o = (t * self.n_layers + layer) * self.hidden_size;
        &self.h[o..o + self.hidden_size]
    }

    pub fn cell(&self, t: usize, layer: usize) -> &[S] {
        let o = (t * self.n_layers + layer) * self.hidden_size;
        &self.c[o..o + self.hidden_size]
    }

    pub fn logit(&self, t: usize, k: usize) -> S {
        self.logits[t * self.n_targets + k]
    }
}

pub(crate) fn check_input<S>(params: &LstmParams<S>, x: &[S], length: usize) -> Result<()> {
    if length == 0 {
        return Err(Error::Invalid("series has no timesteps".into()));
    }
    let d = params.spec.input_size;
    if x.len() != length * d {
        return Err(Error::Invalid(format!(
            "series has {} values, expected {length} timesteps x {d} features",
            x.len()
        )));
    }
    Ok(())
}

/// Full forward pass over one series (`length x input_size`, row-major).
pub fn run<S: Scalar>(params: &LstmParams<S>, x: &[S], length: usize) -> Result<Run<S>> {
    check_input(params, x, length)?;
    let spec = params.spec;
    let (d, n_l, n_h) = (spec.input_size, spec.n_layers, spec.hidden_size);
    let mut out = Run {
        length,
        n_layers: n_l,
        hidden_size: n_h,
        n_targets: spec.n_targets,
        h: Vec::with_capacity(length * n_l * n_h),
        c: Vec::with_capacity(length * n_l * n_h),
        logits: Vec::with_capacity(length * spec.n_targets),
    };
    let mut st = Stepper::new(params);
    for t in 0..length {
        st.step(&x[t * d..(t + 1) * d]);
        for l in 0..n_l {
            out.h.extend_from_slice(st.hidden(l));
            out.c.extend_from_slice(st.cell(l));
        }
        out.logits.extend_from_slice(st.logits());
    }
    Ok(out)
}
