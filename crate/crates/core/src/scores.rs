//! Per-timestep concept scores.
//!
//! tCA is the cosine between an activation (or its change over a lag) and a
//! CAV. CS is the derivative of the output along the CAV direction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cav::{self, Cav, FitOptions, SampleSet};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::SeedTree;
use crate::rnn::{ActivationTrace, OutputKind, TrainedModel};
use crate::stats;
use crate::synthgen::{Alignment, LabeledSeries};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Tca,
    Cs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "lag")]
pub enum TcaMode {
    Instant,
    Difference(usize),
}

impl Default for TcaMode {
    fn default() -> Self {
        TcaMode::Difference(25)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub kind: ScoreKind,
    pub concept: String,
    pub layer: usize,
    pub series_id: usize,
    pub lag: Option<usize>,
    /// `None` where the score is undefined (the first `lag` steps).
    pub values: Vec<Option<f64>>,
    /// Steps where the compared vector had zero norm and the score was set to 0.
    pub degenerate: Vec<bool>,
}

/// Cosine trajectory of one layer's activations against `direction`.
pub fn tca_values(
    trace: &ActivationTrace,
    layer: usize,
    direction: &[f64],
    mode: TcaMode,
) -> Result<(Vec<Option<f64>>, Vec<bool>)> {
    if layer >= trace.n_layers || direction.len() != trace.hidden_size {
        return Err(Error::Invalid(format!(
            "direction for layer {layer} (width {}) does not match the trace",
            direction.len()
        )));
    }
    let lag = match mode {
        TcaMode::Instant => 0,
        TcaMode::Difference(0) => return Err(Error::Invalid("difference lag must be >= 1".into())),
        TcaMode::Difference(dt) => dt,
    };
    let v_norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut values = vec![None; trace.length];
    let mut degenerate = vec![false; trace.length];
    let mut u = vec![0.0; direction.len()];
    for t in lag.min(trace.length)..trace.length {
        let a = trace.at(t, layer);
        if lag == 0 {
            u.copy_from_slice(a);
        } else {
            for ((d, x), y) in u.iter_mut().zip(a).zip(trace.at(t - lag, layer)) {
                *d = x - y;
            }
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || v_norm == 0.0 {
            values[t] = Some(0.0);
            degenerate[t] = true;
        } else {
            let dot: f64 = u.iter().zip(direction).map(|(a, b)| a * b).sum();
            values[t] = Some((dot / (norm * v_norm)).clamp(-1.0, 1.0));
        }
    }
    Ok((values, degenerate))
}

pub fn tca(trace: &ActivationTrace, cav: &Cav, mode: TcaMode, series_id: usize) -> Result<ScoreSeries> {
    let (values, degenerate) = tca_values(trace, cav.layer, &cav.direction, mode)?;
    Ok(ScoreSeries {
        kind: ScoreKind::Tca,
        concept: cav.concept.clone(),
        layer: cav.layer,
        series_id,
        lag: match mode {
            TcaMode::Instant => None,
            TcaMode::Difference(dt) => Some(dt),
        },
        values,
        degenerate,
    })
}

/// Directional derivative of output `k` along the CAV at every timestep.
pub fn cs(
    model: &TrainedModel,
    series: &LabeledSeries,
    cav: &Cav,
    k: usize,
    kind: OutputKind,
    series_id: usize,
) -> Result<ScoreSeries> {
    let times: Vec<usize> = (0..series.length).collect();
    let grads = model.grad_output_wrt_activation_at(series, cav.layer, &times, k, kind)?;
    cs_from_gradients(&grads, cav, series_id)
}

/// CS from precomputed activation gradients (`length x hidden_size`).
pub fn cs_from_gradients(grads: &[f64], cav: &Cav, series_id: usize) -> Result<ScoreSeries> {
    let h = cav.direction.len();
    if h == 0 || grads.len() % h != 0 {
        return Err(Error::Invalid("CAV width does not match the gradients".into()));
    }
    let length = grads.len() / h;
    let values = grads
        .chunks_exact(h)
        .map(|g| Some(g.iter().zip(&cav.direction).map(|(a, b)| a * b).sum()))
        .collect();
    Ok(ScoreSeries {
        kind: ScoreKind::Cs,
        concept: cav.concept.clone(),
        layer: cav.layer,
        series_id,
        lag: None,
        values,
        degenerate: vec![false; length],
    })
}

/// Mean and standard deviation per aligned slot over the series defined there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(with = "io::nan_as_null")]
    pub mean: Vec<f64>,
    #[serde(with = "io::nan_as_null")]
    pub std: Vec<f64>,
    pub n: Vec<usize>,
}

impl Trajectory {
    /// Mean of the slot means over `[from, to]`, skipping empty slots.
    pub fn window_mean(&self, from: usize, to: usize) -> f64 {
        let vals: Vec<f64> = (from..=to.min(self.mean.len().saturating_sub(1)))
            .filter(|&t| self.n[t] > 0)
            .map(|t| self.mean[t])
            .collect();
        stats::mean_std(&vals).0
    }
}

pub fn aggregate_scores(series: &[&ScoreSeries], alignments: &[Alignment]) -> Result<Trajectory> {
    if series.is_empty() {
        return Err(Error::Invalid("no score series to aggregate".into()));
    }
    if series.len() != alignments.len() {
        return Err(Error::Invalid("one alignment is needed per score series".into()));
    }
    let first = series[0];
    let slots = alignments.iter().map(|a| a.length).max().unwrap_or(0);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); slots];
    for (s, a) in series.iter().zip(alignments) {
        if s.kind != first.kind || s.layer != first.layer || s.concept != first.concept {
            return Err(Error::Invalid("score series differ in kind, layer or concept".into()));
        }
        for (t, v) in s.values.iter().enumerate() {
            if let (Some(v), Some(slot)) = (v, a.slot(t)) {
                buckets[slot].push(*v);
            }
        }
    }
    let mut out = Trajectory {
        mean: Vec::with_capacity(slots),
        std: Vec::with_capacity(slots),
        n: Vec::with_capacity(slots),
    };
    for b in buckets {
        let (m, s) = stats::mean_std(&b);
        out.mean.push(m);
        out.std.push(s);
        out.n.push(b.len());
    }
    Ok(out)
}

/// Spread of tCA under label-permuted CAVs for one series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullBand {
    #[serde(with = "io::nan_as_null")]
    pub mean: Vec<f64>,
    #[serde(with = "io::nan_as_null")]
    pub std: Vec<f64>,
    #[serde(with = "io::nan_as_null")]
    pub q05: Vec<f64>,
    #[serde(with = "io::nan_as_null")]
    pub q95: Vec<f64>,
    pub n_null: usize,
    /// Fewer than two null vectors: the band has no width.
    pub degenerate: bool,
}

impl NullBand {
    /// Whether `score` rises above the 95% quantile at any `t >= from`.
    pub fn exceeded_after(&self, score: &ScoreSeries, from: usize) -> bool {
        score
            .values
            .iter()
            .enumerate()
            .skip(from)
            .any(|(t, v)| matches!(v, Some(v) if *v > self.q95[t]))
    }
}

pub fn null_band(trace: &ActivationTrace, layer: usize, directions: &[Vec<f64>], mode: TcaMode) -> Result<NullBand> {
    if directions.is_empty() {
        return Err(Error::Invalid("no null directions".into()));
    }
    let runs: Vec<Vec<Option<f64>>> = directions
        .iter()
        .map(|d| tca_values(trace, layer, d, mode).map(|r| r.0))
        .collect::<Result<_>>()?;
    let mut band = NullBand {
        mean: Vec::with_capacity(trace.length),
        std: Vec::with_capacity(trace.length),
        q05: Vec::with_capacity(trace.length),
        q95: Vec::with_capacity(trace.length),
        n_null: directions.len(),
        degenerate: directions.len() < 2,
    };
    for t in 0..trace.length {
        let col: Vec<f64> = runs.iter().filter_map(|r| r[t]).collect();
        let (m, s) = stats::mean_std(&col);
        band.mean.push(m);
        band.std.push(s);
        band.q05.push(stats::quantile(&col, 0.05));
        band.q95.push(stats::quantile(&col, 0.95));
    }
    Ok(band)
}

/// Fit `n_null` label-permuted CAVs from `samples` and return the tCA band
/// they induce on `trace`.
pub fn null_tca(
    trace: &ActivationTrace,
    samples: &SampleSet,
    layer: usize,
    mode: TcaMode,
    n_null: usize,
    opts: &FitOptions,
    seeds: &SeedTree,
) -> Result<NullBand> {
    let dirs = cav::permuted_directions(samples, n_null, opts, seeds)?;
    null_band(trace, layer, &dirs, mode)
}

/// CSV with columns `aligned_t,cohort,mean,std,n`; empty slots are skipped.
pub fn write_trajectories_csv(path: &Path, cohorts: &[(String, &Trajectory)]) -> Result<()> {
    let mut rows = Vec::new();
    for (name, tr) in cohorts {
        for t in 0..tr.mean.len() {
            if tr.n[t] == 0 {
                continue;
            }
            rows.push(vec![
                t.to_string(),
                name.clone(),
                io::csv_num(tr.mean[t]),
                io::csv_num(tr.std[t]),
                tr.n[t].to_string(),
            ]);
        }
    }
    io::write_csv(path, &["aligned_t", "cohort", "mean", "std", "n"], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(a: Vec<f64>, length: usize, hidden: usize) -> ActivationTrace {
        ActivationTrace {
            length,
            n_layers: 1,
            hidden_size: hidden,
            a,
        }
    }

    #[test]
    fn cosine_extremes() {
        // steps: (0,0) (1,0) (2,0) (2,1)
        let t = trace(vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 2.0, 1.0], 4, 2);
        let (v, deg) = tca_values(&t, 0, &[1.0, 0.0], TcaMode::Difference(1)).unwrap();
        assert_eq!(v[0], None);
        assert_eq!(v[1], Some(1.0));
        assert_eq!(v[3], Some(0.0));
        assert!(!deg[1]);
        let (v, _) = tca_values(&t, 0, &[-1.0, 0.0], TcaMode::Difference(1)).unwrap();
        assert_eq!(v[1], Some(-1.0));
        let (v, deg) = tca_values(&t, 0, &[1.0, 0.0], TcaMode::Instant).unwrap();
        assert_eq!((v[0], deg[0]), (Some(0.0), true));
        assert!(tca_values(&t, 0, &[1.0, 0.0], TcaMode::Difference(0)).is_err());
    }

    fn score(values: Vec<f64>) -> ScoreSeries {
        ScoreSeries {
            kind: ScoreKind::Tca,
            concept: "C".into(),
            layer: 0,
            series_id: 0,
            lag: None,
            degenerate: vec![false; values.len()],
            values: values.into_iter().map(Some).collect(),
        }
    }

    #[test]
    fn aggregation_examples() {
        let a = score(vec![1.0, -2.0, 3.0]);
        let b = score(vec![-1.0, 2.0, -3.0]);
        let id = Alignment { offset: 0, length: 3 };
        let single = aggregate_scores(&[&a], &[id]).unwrap();
        assert_eq!(single.mean, vec![1.0, -2.0, 3.0]);
        assert_eq!(single.std, vec![0.0; 3]);
        let pair = aggregate_scores(&[&a, &b], &[id, id]).unwrap();
        assert_eq!(pair.mean, vec![0.0; 3]);
        let shifted = aggregate_scores(&[&a], &[Alignment { offset: 1, length: 3 }]).unwrap();
        assert_eq!(shifted.n, vec![0, 1, 1]);
        assert_eq!(shifted.mean[1], 1.0);
        assert!(aggregate_scores(&[], &[]).is_err());
    }

    #[test]
    fn single_null_direction_is_degenerate() {
        let t = trace(vec![0.0, 1.0, 1.0, 0.0], 2, 2);
        let band = null_band(&t, 0, &[vec![1.0, 0.0]], TcaMode::Instant).unwrap();
        assert!(band.degenerate);
        assert_eq!(band.std, vec![0.0, 0.0]);
    }
}
