use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::SeedTree;
use crate::scalar::Scalar;
use crate::stats;
use crate::synthgen::LabeledSeries;

use super::forward::{run, Run, Stepper};
use super::graphs::{OutputKind, StepGraph, StepInput, UnrolledLoss};
use super::params::{LstmParams, ModelSpec};

const MODEL_FORMAT: &str = "tcav-model/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 32,
            steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Hidden outputs `a_{t,l}` of every layer at every timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub length: usize,
    pub n_layers: usize,
    pub hidden_size: usize,
    /// `length x n_layers x hidden_size`.
    pub a: Vec<f64>,
}

impl ActivationTrace {
    pub fn at(&self, t: usize, layer: usize) -> &[f64] {
        let o = (t * self.n_layers + layer) * self.hidden_size;
        &self.a[o..o + self.hidden_size]
    }
}

/// Pooled classification metrics over every (series, timestep, target).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub n_series: usize,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: LstmParams<f64>,
    pub train_config: TrainConfig,
    /// Training loss per optimizer step.
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    spec: ModelSpec,
    train_config: TrainConfig,
    history: Vec<f64>,
    tensors: Vec<io::TensorEntry>,
}

fn check_series(spec: &ModelSpec, s: &LabeledSeries) -> Result<()> {
    if s.n_features != spec.input_size || s.n_targets != spec.n_targets {
        return Err(Error::Invalid(format!(
            "series has {} features / {} targets, model expects {} / {}",
            s.n_features, s.n_targets, spec.input_size, spec.n_targets
        )));
    }
    if s.length == 0 {
        return Err(Error::Invalid("series has no timesteps".into()));
    }
    Ok(())
}

struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    fn new(params: &LstmParams<S>) -> Self {
        let zeros: Vec<Vec<S>> = params.buffers().iter().map(|b| vec![S::zero(); b.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Train with Adam on uniformly sampled mini-batches. `on_step` receives the
/// step index and its loss.
pub fn train_with<F>(
    spec: ModelSpec,
    series: &[&LabeledSeries],
    config: &TrainConfig,
    on_step: F,
) -> Result<TrainedModel>
where
    F: FnMut(usize, f64),
{
    match config.precision {
        Precision::F32 => train_generic::<f32, F>(spec, series, config, on_step),
        Precision::F64 => train_generic::<f64, F>(spec, series, config, on_step),
    }
}

pub fn train(spec: ModelSpec, series: &[&LabeledSeries], config: &TrainConfig) -> Result<TrainedModel> {
    train_with(spec, series, config, |_, _| {})
}

fn train_generic<S: Scalar, F: FnMut(usize, f64)>(
    spec: ModelSpec,
    series: &[&LabeledSeries],
    config: &TrainConfig,
    mut on_step: F,
) -> Result<TrainedModel> {
    spec.validate()?;
    config.validate()?;
    let first = series
        .first()
        .ok_or_else(|| Error::Invalid("no training series".into()))?;
    for s in series {
        check_series(&spec, s)?;
        if s.length != first.length {
            return Err(Error::Invalid("training series must share one length".into()));
        }
    }
    let seeds = SeedTree::new(config.seed);
    let mut params = LstmParams::<f64>::init(spec, &mut seeds.stream("init")).cast::<S>();
    let mut batch_rng = seeds.stream("batches");
    let mut graph = UnrolledLoss::<S>::new(spec, config.batch_size, first.length)?;
    graph.set_params(&params)?;
    let mut adam = Adam::new(&params);
    let (b1, b2) = (config.beta1, config.beta2);
    let mut history = Vec::with_capacity(config.steps);
    let n = series.len();
    let mut batch: Vec<&LabeledSeries> = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        if n >= config.batch_size {
            batch.extend(index::sample(&mut batch_rng, n, config.batch_size).iter().map(|i| series[i]));
        } else {
            batch.extend((0..config.batch_size).map(|_| series[batch_rng.random_range(0..n)]));
        }
        graph.set_batch(&batch)?;
        let loss = graph.loss_and_grad()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        history.push(loss);
        on_step(step, loss);

        adam.t += 1;
        let c1 = 1.0 - b1.powi(adam.t);
        let c2 = 1.0 - b2.powi(adam.t);
        let step_size = S::from_f64_lossy(config.learning_rate * c2.sqrt() / c1);
        let eps_hat = S::from_f64_lossy(config.epsilon * c2.sqrt());
        let (b1s, b2s) = (S::from_f64_lossy(b1), S::from_f64_lossy(b2));
        let (one_b1, one_b2) = (S::one() - b1s, S::one() - b2s);
        for (i, buf) in params.buffers_mut().into_iter().enumerate() {
            let g = graph.param_grad(i);
            let (m, v) = (&mut adam.m[i], &mut adam.v[i]);
            for j in 0..buf.len() {
                m[j] = b1s * m[j] + one_b1 * g[j];
                v[j] = b2s * v[j] + one_b2 * g[j] * g[j];
                buf[j] -= step_size * m[j] / (v[j].sqrt() + eps_hat);
            }
        }
        for (i, buf) in params.buffers().into_iter().enumerate() {
            graph.set_param(i, buf)?;
        }
    }
    let params = params.cast::<f64>();
    if !params.all_finite() {
        return Err(Error::Diverged { step: config.steps });
    }
    Ok(TrainedModel {
        params,
        train_config: config.clone(),
        history,
    })
}

impl TrainedModel {
    pub fn from_params(params: LstmParams<f64>) -> Self {
        Self {
            params,
            train_config: TrainConfig::default(),
            history: Vec::new(),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        self.params.spec
    }

    pub fn run(&self, s: &LabeledSeries) -> Result<Run<f64>> {
        check_series(&self.params.spec, s)?;
        run(&self.params, &s.x, s.length)
    }

    /// Per-timestep probabilities, `length x n_targets`.
    pub fn predict(&self, s: &LabeledSeries) -> Result<Vec<f64>> {
        Ok(self.run(s)?.logits.into_iter().map(f64::sigmoid).collect())
    }

    pub fn activations(&self, s: &LabeledSeries) -> Result<ActivationTrace> {
        let r = self.run(s)?;
        Ok(ActivationTrace {
            length: r.length,
            n_layers: r.n_layers,
            hidden_size: r.hidden_size,
            a: r.h,
        })
    }

    fn check_target(&self, k: usize) -> Result<()> {
        if k >= self.params.spec.n_targets {
            return Err(Error::Invalid(format!("target {k} out of range")));
        }
        Ok(())
    }

    /// Bind the previous-step states of rows `times` into a step graph.
    fn bind_states(&self, g: &mut StepGraph<f64>, r: &Run<f64>, times: &[usize]) -> Result<()> {
        let n_h = r.hidden_size;
        for l in g.state_layers() {
            let mut h = Vec::with_capacity(times.len() * n_h);
            let mut c = Vec::with_capacity(times.len() * n_h);
            for &t in times {
                if t == 0 {
                    h.extend(std::iter::repeat_n(0.0, n_h));
                    c.extend(std::iter::repeat_n(0.0, n_h));
                } else {
                    h.extend_from_slice(r.hidden(t - 1, l));
                    c.extend_from_slice(r.cell(t - 1, l));
                }
            }
            g.set_state(l, &h, &c)?;
        }
        Ok(())
    }

    /// Gradient of output `k` at each listed timestep with respect to the
    /// same timestep's activation at `layer`, holding earlier states fixed.
    /// Returns `times.len() x hidden_size`.
    pub fn grad_output_wrt_activation_at(
        &self,
        s: &LabeledSeries,
        layer: usize,
        times: &[usize],
        k: usize,
        kind: OutputKind,
    ) -> Result<Vec<f64>> {
        let r = self.run(s)?;
        self.activation_gradients(&r, layer, times, k, kind)
    }

    /// As [`TrainedModel::grad_output_wrt_activation_at`], reusing a forward
    /// pass already computed with [`TrainedModel::run`].
    pub fn activation_gradients(
        &self,
        r: &Run<f64>,
        layer: usize,
        times: &[usize],
        k: usize,
        kind: OutputKind,
    ) -> Result<Vec<f64>> {
        self.check_target(k)?;
        if let Some(&t) = times.iter().find(|&&t| t >= r.length) {
            return Err(Error::Invalid(format!("timestep {t} out of range")));
        }
        let mut g = StepGraph::new(&self.params, times.len().max(1), StepInput::Layer(layer), kind)?;
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let input: Vec<f64> = times.iter().flat_map(|&t| r.hidden(t, layer).iter().copied()).collect();
        g.set_input(&input)?;
        self.bind_states(&mut g, r, times)?;
        Ok(g.gradient(k)?.1)
    }

    pub fn grad_output_wrt_activation(
        &self,
        s: &LabeledSeries,
        layer: usize,
        t: usize,
        k: usize,
    ) -> Result<Vec<f64>> {
        self.grad_output_wrt_activation_at(s, layer, &[t], k, OutputKind::Probability)
    }

    /// Instantaneous input gradients `dF_t/dx_t` at each listed timestep,
    /// `times.len() x input_size`.
    pub fn grad_output_wrt_inputs_at(&self, s: &LabeledSeries, times: &[usize], k: usize) -> Result<Vec<f64>> {
        self.check_target(k)?;
        let r = self.run(s)?;
        if let Some(&t) = times.iter().find(|&&t| t >= r.length) {
            return Err(Error::Invalid(format!("timestep {t} out of range")));
        }
        if times.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = StepGraph::new(&self.params, times.len(), StepInput::Features, OutputKind::Probability)?;
        let input: Vec<f64> = times.iter().flat_map(|&t| s.x_at(t).iter().copied()).collect();
        g.set_input(&input)?;
        self.bind_states(&mut g, &r, times)?;
        Ok(g.gradient(k)?.1)
    }

    pub fn grad_output_wrt_inputs(&self, s: &LabeledSeries, t1: usize, k: usize) -> Result<Vec<f64>> {
        self.grad_output_wrt_inputs_at(s, &[t1], k)
    }

    /// Output `k` at timestep `t` after replacing `a_{t,layer}` by
    /// `activation`, computed without the graph.
    pub fn output_with_activation(
        &self,
        s: &LabeledSeries,
        layer: usize,
        t: usize,
        activation: &[f64],
        k: usize,
        kind: OutputKind,
    ) -> Result<f64> {
        self.check_target(k)?;
        let spec = self.params.spec;
        if layer >= spec.n_layers || t >= s.length || activation.len() != spec.hidden_size {
            return Err(Error::Invalid("layer, timestep or activation size out of range".into()));
        }
        let r = self.run(s)?;
        let mut st = Stepper::new(&self.params);
        if t > 0 {
            for l in 0..spec.n_layers {
                st.set_state(l, r.hidden(t - 1, l), r.cell(t - 1, l));
            }
        }
        st.step_above(layer, activation);
        let z = st.logits()[k];
        Ok(match kind {
            OutputKind::Probability => z.sigmoid(),
            OutputKind::Logit => z,
        })
    }

    /// Fraction of (timestep, target) cells where `p >= 0.5` matches the label.
    pub fn per_sequence_accuracy(&self, s: &LabeledSeries) -> Result<f64> {
        let p = self.predict(s)?;
        let hits = p
            .iter()
            .zip(&s.y)
            .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
            .count();
        Ok(hits as f64 / p.len() as f64)
    }

    pub fn evaluate(&self, series: &[&LabeledSeries]) -> Result<ModelMetrics> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in series {
            scores.extend(self.predict(s)?);
            labels.extend(s.y.iter().map(|&y| y == 1));
        }
        if scores.is_empty() {
            return Err(Error::Invalid("no series to evaluate".into()));
        }
        Ok(ModelMetrics {
            accuracy: stats::accuracy(&scores, &labels, 0.5)?,
            balanced_accuracy: stats::balanced_accuracy(&scores, &labels, 0.5)?,
            auroc: stats::auroc(&scores, &labels)?,
            auprc: stats::auprc(&scores, &labels)?,
            n_series: series.len(),
            n_points: scores.len(),
        })
    }

    /// Write `model.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors = io::save_tensors(&dir.join("params.bin"), &self.params.named_tensors())?;
        io::write_json(
            &dir.join("model.json"),
            &ModelFile {
                format: MODEL_FORMAT.into(),
                spec: self.params.spec,
                train_config: self.train_config.clone(),
                history: self.history.clone(),
                tensors,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.json");
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path.display().to_string()));
        }
        let meta: ModelFile = io::read_json(&meta_path)?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::Invalid(format!("unsupported model format {}", meta.format)));
        }
        meta.spec.validate()?;
        let tensors = io::load_tensors(&dir.join("params.bin"), &meta.tensors)?;
        let params = LstmParams::from_named(meta.spec, &tensors)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            params,
            train_config: meta.train_config,
            history: meta.history,
        })
    }
}
