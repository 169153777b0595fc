//! Concept activation vectors.
//!
//! A CAV is the unit normal of a logistic-regression boundary separating
//! activations collected from concept series and control series. Samples can
//! be taken at the window end, at every step of the window, or as the change
//! across the window.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::numerics::Tensor;
use crate::rng::SeedTree;
use crate::rnn::ActivationTrace;
use crate::stats::{self, MetricReport, Resample, SignificanceResult, MAX_RESAMPLE_RETRIES};

const ARCHIVE_FORMAT: &str = "tcav-cav/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    EndPoint,
    FullWindow,
    Difference,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::EndPoint, Strategy::FullWindow, Strategy::Difference];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::EndPoint => "end_point",
            Strategy::FullWindow => "full_window",
            Strategy::Difference => "difference",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown strategy `{s}`")))
    }
}

/// Inclusive timestep window `[t_start, t_end]` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub t_start: usize,
    pub t_end: usize,
}

impl Window {
    pub fn new(t_start: usize, t_end: usize) -> Self {
        Self { t_start, t_end }
    }

    fn check(&self, length: usize) -> Result<()> {
        if self.t_start > self.t_end || self.t_end >= length {
            return Err(Error::Invalid(format!(
                "window [{}, {}] invalid for a series of length {length}",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}

/// Labelled activation samples for one layer. Each sample remembers the
/// series (unit) it came from so resampling can act on whole series.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    /// `n x dim`, row-major.
    pub x: Vec<f64>,
    pub labels: Vec<bool>,
    pub unit: Vec<usize>,
    pub unit_labels: Vec<bool>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn collect_cav_samples(
    concept: &[(&ActivationTrace, Window)],
    control: &[(&ActivationTrace, Window)],
    layer: usize,
    strategy: Strategy,
) -> Result<SampleSet> {
    if concept.is_empty() || control.is_empty() {
        return Err(Error::Invalid("concept and control groups must both be non-empty".into()));
    }
    let first = concept[0].0;
    if layer >= first.n_layers {
        return Err(Error::Invalid(format!("layer {layer} out of range")));
    }
    let dim = first.hidden_size;
    let mut set = SampleSet {
        dim,
        x: Vec::new(),
        labels: Vec::new(),
        unit: Vec::new(),
        unit_labels: Vec::new(),
    };
    for (group, label) in [(concept, true), (control, false)] {
        for &(trace, w) in group {
            if trace.n_layers != first.n_layers || trace.hidden_size != dim {
                return Err(Error::Invalid("traces disagree on layer count or width".into()));
            }
            w.check(trace.length)?;
            let unit = set.unit_labels.len();
            set.unit_labels.push(label);
            let mut push = |row: &mut dyn Iterator<Item = f64>| {
                set.x.extend(row);
                set.labels.push(label);
                set.unit.push(unit);
            };
            match strategy {
                Strategy::EndPoint => push(&mut trace.at(w.t_end, layer).iter().copied()),
                Strategy::FullWindow => {
                    for t in w.t_start..=w.t_end {
                        push(&mut trace.at(t, layer).iter().copied());
                    }
                }
                Strategy::Difference => {
                    let (a, b) = (trace.at(w.t_end, layer), trace.at(w.t_start, layer));
                    push(&mut a.iter().zip(b).map(|(x, y)| x - y));
                }
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Ridge penalty on the weights (not the bias), added to the mean loss.
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Gradient norm above which hitting the iteration cap is an error.
    pub failure_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            tolerance: 1e-8,
            max_iterations: 5000,
            failure_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        crate::Scalar::sigmoid(self.decision(x))
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Weighted L2-regularized logistic regression by damped Newton iterations.
///
/// `weights` gives each row's multiplicity; rows with weight 0 are ignored.
pub fn fit_logistic(
    x: &[f64],
    dim: usize,
    labels: &[bool],
    weights: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<LogisticModel> {
    let n_all = labels.len();
    if x.len() != n_all * dim || weights.is_some_and(|w| w.len() != n_all) {
        return Err(Error::Invalid("sample matrix, labels and weights disagree in length".into()));
    }
    let rows: Vec<usize> = (0..n_all)
        .filter(|&i| weights.is_none_or(|w| w[i] > 0.0))
        .collect();
    let w_of = |i: usize| weights.map_or(1.0, |w| w[i]);
    let has = |c: bool| rows.iter().any(|&i| labels[i] == c);
    if !has(true) || !has(false) {
        return Err(Error::SingleClass("logistic regression"));
    }
    if rows.len() < 4 {
        return Err(Error::Invalid(format!("{} samples; at least 4 are needed", rows.len())));
    }
    let n = rows.len();
    let p = dim + 1;
    let xm = DMatrix::from_fn(n, p, |r, c| if c < dim { x[rows[r] * dim + c] } else { 1.0 });
    let y = DVector::from_fn(n, |r, _| if labels[rows[r]] { 1.0 } else { 0.0 });
    let sw = DVector::from_fn(n, |r, _| w_of(rows[r]));
    let total_w: f64 = sw.sum();
    let lam = opts.l2;

    let objective = |theta: &DVector<f64>| -> f64 {
        let z = &xm * theta;
        let data: f64 = (0..n).map(|r| sw[r] * (softplus(z[r]) - y[r] * z[r])).sum::<f64>() / total_w;
        let reg: f64 = theta.rows(0, dim).norm_squared() * lam / 2.0;
        data + reg
    };

    let mut theta = DVector::<f64>::zeros(p);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < opts.max_iterations {
        let z = &xm * &theta;
        let prob = z.map(crate::Scalar::sigmoid);
        let resid = DVector::from_fn(n, |r, _| sw[r] * (prob[r] - y[r]) / total_w);
        let mut grad = xm.tr_mul(&resid);
        for j in 0..dim {
            grad[j] += lam * theta[j];
        }
        grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("logistic gradient".into()));
        }
        if grad_norm < opts.tolerance {
            break;
        }
        iterations += 1;
        let mut scaled = xm.clone();
        for r in 0..n {
            let s = sw[r] * prob[r] * (1.0 - prob[r]) / total_w;
            scaled.row_mut(r).scale_mut(s);
        }
        let mut hess = xm.tr_mul(&scaled);
        for j in 0..dim {
            hess[(j, j)] += lam;
        }
        let mut ridge = 0.0;
        let step = loop {
            let mut h = hess.clone();
            for j in 0..p {
                h[(j, j)] += ridge;
            }
            if let Some(chol) = h.cholesky() {
                break chol.solve(&grad);
            }
            ridge = if ridge == 0.0 { 1e-10 } else { ridge * 10.0 };
            if ridge > 1e6 {
                return Err(Error::NoConvergence { iterations, grad_norm });
            }
        };
        let f0 = objective(&theta);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            if objective(&cand) <= f0 - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    if grad_norm >= opts.tolerance && grad_norm > opts.failure_tolerance {
        return Err(Error::NoConvergence { iterations, grad_norm });
    }
    Ok(LogisticModel {
        weights: theta.rows(0, dim).iter().copied().collect(),
        bias: theta[dim],
        iterations,
        grad_norm,
    })
}

/// Metrics of a fitted model on the listed rows of a sample set.
fn score_rows(model: &LogisticModel, samples: &SampleSet, rows: &[usize], labels: &[bool]) -> Result<MetricReport> {
    let scores: Vec<f64> = rows.iter().map(|&i| model.probability(samples.row(i))).collect();
    let y: Vec<bool> = rows.iter().map(|&i| labels[i]).collect();
    MetricReport::compute(&scores, &y, 0.5)
}

/// Per-timestep classification of held-out series with a frozen CAV model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub accuracy: f64,
    /// Accuracy over series of the concept group.
    pub accuracy_concept_group: f64,
    pub accuracy_control_group: f64,
    pub n_points: usize,
    /// Lag used for difference vectors, if any.
    pub lag: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept: String,
    pub layer: usize,
    pub strategy: Strategy,
    /// Unit-norm weight direction.
    pub direction: Vec<f64>,
    pub model: LogisticModel,
    /// Metrics on the full fit set.
    pub fit_report: MetricReport,
    pub significance: Option<SignificanceResult>,
    pub generalization: Option<GeneralizationReport>,
}

/// Fit the released CAV on all samples.
pub fn fit_cav(samples: &SampleSet, concept: &str, layer: usize, strategy: Strategy, opts: &FitOptions) -> Result<Cav> {
    let model = fit_logistic(&samples.x, samples.dim, &samples.labels, None, opts)?;
    let norm = model.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::NonFinite("CAV weight vector has zero norm".into()));
    }
    let direction = model.weights.iter().map(|w| w / norm).collect();
    let all: Vec<usize> = (0..samples.len()).collect();
    let fit_report = score_rows(&model, samples, &all, &samples.labels)?;
    Ok(Cav {
        concept: concept.to_string(),
        layer,
        strategy,
        direction,
        model,
        fit_report,
        significance: None,
        generalization: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignificanceOptions {
    pub bootstraps: usize,
    pub permutations_per_bootstrap: usize,
    pub alpha: f64,
    pub stratified: bool,
}

impl Default for SignificanceOptions {
    fn default() -> Self {
        Self {
            bootstraps: 100,
            permutations_per_bootstrap: 10,
            alpha: 0.05,
            stratified: true,
        }
    }
}

fn in_bag_weights(samples: &SampleSet, resample: &Resample) -> Vec<f64> {
    samples.unit.iter().map(|&u| resample.counts[u] as f64).collect()
}

/// Bootstrap over series with out-of-bag scoring, plus label-permuted refits
/// inside every round to build the null distribution.
pub fn assess_significance(
    samples: &SampleSet,
    sig: &SignificanceOptions,
    opts: &FitOptions,
    seeds: &SeedTree,
) -> Result<SignificanceResult> {
    let mut nulls = Vec::with_capacity(sig.bootstraps * sig.permutations_per_bootstrap);
    let reports = stats::bootstrap_eval(&samples.unit_labels, sig.bootstraps, sig.stratified, seeds, |_, rs, rng| {
        let weights = in_bag_weights(samples, rs);
        let oob: Vec<usize> = (0..samples.len())
            .filter(|&i| rs.counts[samples.unit[i]] == 0)
            .collect();
        let model = fit_logistic(&samples.x, samples.dim, &samples.labels, Some(&weights), opts)?;
        let report = score_rows(&model, samples, &oob, &samples.labels)?;
        for _ in 0..sig.permutations_per_bootstrap {
            let mut tries = 0;
            let permuted = loop {
                let unit_perm = stats::permute_labels(&samples.unit_labels, rng);
                let in_bag = |c: bool| rs.drawn().any(|(u, _)| unit_perm[u] == c);
                if in_bag(true) && in_bag(false) {
                    break unit_perm;
                }
                tries += 1;
                if tries >= MAX_RESAMPLE_RETRIES {
                    return Err(Error::ResampleRetries(MAX_RESAMPLE_RETRIES));
                }
            };
            let labels: Vec<bool> = samples.unit.iter().map(|&u| permuted[u]).collect();
            let null_model = fit_logistic(&samples.x, samples.dim, &labels, Some(&weights), opts)?;
            nulls.push(score_rows(&null_model, samples, &oob, &samples.labels)?);
        }
        Ok(report)
    })?;
    SignificanceResult::from_reports(reports, nulls, sig.alpha)
}

/// Directions of CAVs refit on series-level permuted labels.
pub fn permuted_directions(samples: &SampleSet, n: usize, opts: &FitOptions, seeds: &SeedTree) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .map(|i| {
            let mut rng = seeds.stream(&format!("null/{i}"));
            for _ in 0..MAX_RESAMPLE_RETRIES {
                let perm = stats::permute_labels(&samples.unit_labels, &mut rng);
                let labels: Vec<bool> = samples.unit.iter().map(|&u| perm[u]).collect();
                match fit_logistic(&samples.x, samples.dim, &labels, None, opts) {
                    Ok(m) => {
                        let norm = m.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            return Ok(m.weights.iter().map(|w| w / norm).collect());
                        }
                    }
                    Err(Error::SingleClass(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Err(Error::ResampleRetries(MAX_RESAMPLE_RETRIES))
        })
        .collect()
}

/// Classify every timestep of every series with the frozen model.
///
/// `labels[i][t]` is the ground-truth presence at `t`; `groups[i]` marks
/// concept-group series. With `lag = Some(dt)` the inputs are the lagged
/// differences `a_t - a_{t-dt}` for `t >= dt`.
pub fn eval_generalization(
    cav: &Cav,
    traces: &[&ActivationTrace],
    labels: &[Vec<bool>],
    groups: &[bool],
    lag: Option<usize>,
) -> Result<GeneralizationReport> {
    if traces.len() != labels.len() || traces.len() != groups.len() {
        return Err(Error::Invalid("traces, labels and groups disagree in length".into()));
    }
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    let mut diff = vec![0.0; cav.direction.len()];
    for ((trace, lab), &group) in traces.iter().zip(labels).zip(groups) {
        if cav.layer >= trace.n_layers || trace.hidden_size != cav.direction.len() {
            return Err(Error::Invalid("trace does not match the CAV layer".into()));
        }
        if lab.len() != trace.length {
            return Err(Error::Invalid("label count differs from series length".into()));
        }
        let first = lag.unwrap_or(0);
        for t in first..trace.length {
            let a = trace.at(t, cav.layer);
            let p = match lag {
                Some(dt) => {
                    let b = trace.at(t - dt, cav.layer);
                    for ((d, x), y) in diff.iter_mut().zip(a).zip(b) {
                        *d = x - y;
                    }
                    cav.model.probability(&diff)
                }
                None => cav.model.probability(a),
            };
            let g = usize::from(!group);
            counts[g] += 1;
            if (p >= 0.5) == lab[t] {
                hits[g] += 1;
            }
        }
    }
    let n = counts[0] + counts[1];
    if n == 0 {
        return Err(Error::Invalid("no timesteps to evaluate".into()));
    }
    let frac = |h: usize, c: usize| if c == 0 { f64::NAN } else { h as f64 / c as f64 };
    Ok(GeneralizationReport {
        accuracy: frac(hits[0] + hits[1], n),
        accuracy_concept_group: frac(hits[0], counts[0]),
        accuracy_control_group: frac(hits[1], counts[1]),
        n_points: n,
        lag,
    })
}

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    layer: usize,
    strategy: Strategy,
    bias: f64,
    iterations: usize,
    grad_norm: f64,
    fit_report: MetricReport,
    significance: Option<SignificanceResult>,
    generalization: Option<GeneralizationReport>,
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    concept: String,
    entries: Vec<ArchiveEntry>,
    tensors: Vec<io::TensorEntry>,
}

fn tensor_name(layer: usize, strategy: Strategy, what: &str) -> String {
    format!("layer{layer}.{strategy}.{what}")
}

/// Write `cav.json` and `directions.bin` for one concept into `dir`.
pub fn save_cavs(dir: &Path, concept: &str, cavs: &[Cav]) -> Result<()> {
    let mut tensors = Vec::new();
    let mut entries = Vec::new();
    for c in cavs {
        if c.concept != concept {
            return Err(Error::Invalid(format!("CAV for {} saved under {concept}", c.concept)));
        }
        tensors.push((tensor_name(c.layer, c.strategy, "direction"), Tensor::vector(c.direction.clone())));
        tensors.push((tensor_name(c.layer, c.strategy, "weights"), Tensor::vector(c.model.weights.clone())));
        entries.push(ArchiveEntry {
            layer: c.layer,
            strategy: c.strategy,
            bias: c.model.bias,
            iterations: c.model.iterations,
            grad_norm: c.model.grad_norm,
            fit_report: c.fit_report,
            significance: c.significance.clone(),
            generalization: c.generalization.clone(),
        });
    }
    let manifest = io::save_tensors(&dir.join("directions.bin"), &tensors)?;
    io::write_json(
        &dir.join("cav.json"),
        &Archive {
            format: ARCHIVE_FORMAT.into(),
            concept: concept.into(),
            entries,
            tensors: manifest,
        },
    )
}

pub fn load_cavs(dir: &Path) -> Result<Vec<Cav>> {
    let path = dir.join("cav.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let archive: Archive = io::read_json(&path)?;
    if archive.format != ARCHIVE_FORMAT {
        return Err(Error::Invalid(format!("unsupported CAV archive format {}", archive.format)));
    }
    let tensors: BTreeMap<String, Tensor<f64>> = io::load_tensors(&dir.join("directions.bin"), &archive.tensors)?
        .into_iter()
        .collect();
    let get = |name: String| {
        tensors
            .get(&name)
            .map(|t| t.data().to_vec())
            .ok_or(Error::MissingArtifact(name))
    };
    archive
        .entries
        .into_iter()
        .map(|e| {
            Ok(Cav {
                concept: archive.concept.clone(),
                layer: e.layer,
                strategy: e.strategy,
                direction: get(tensor_name(e.layer, e.strategy, "direction"))?,
                model: LogisticModel {
                    weights: get(tensor_name(e.layer, e.strategy, "weights"))?,
                    bias: e.bias,
                    iterations: e.iterations,
                    grad_norm: e.grad_norm,
                },
                fit_report: e.fit_report,
                significance: e.significance,
                generalization: e.generalization,
            })
        })
        .collect()
}
