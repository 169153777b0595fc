//! Feature attributions: instantaneous input gradients and single-cell
//! occlusion, with global rankings across series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rnn::{Stepper, TrainedModel};
use crate::synthgen::{FeatureKind, LabeledSeries};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradient,
    Occlusion,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Occlusion => "occlusion",
        }
    }
}

/// Per (timestep, feature) scores for one series and target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub method: Method,
    pub target: usize,
    pub length: usize,
    pub n_features: usize,
    /// Raw signed values, `length x n_features`.
    pub raw: Vec<f64>,
    /// Values used for ranking, `length x n_features`: L1-normalized
    /// absolute gradients per timestep, or raw occlusion differences.
    pub scores: Vec<f64>,
}

impl AttributionTable {
    pub fn score(&self, t: usize, d: usize) -> f64 {
        self.scores[t * self.n_features + d]
    }
}

pub fn gradient_attr(model: &TrainedModel, series: &LabeledSeries, k: usize) -> Result<AttributionTable> {
    let times: Vec<usize> = (0..series.length).collect();
    let raw = model.grad_output_wrt_inputs_at(series, &times, k)?;
    let d = series.n_features;
    let mut scores = Vec::with_capacity(raw.len());
    for row in raw.chunks_exact(d) {
        let total: f64 = row.iter().map(|g| g.abs()).sum();
        if total > 0.0 {
            scores.extend(row.iter().map(|g| g.abs() / total));
        } else {
            scores.extend(std::iter::repeat_n(0.0, d));
        }
    }
    Ok(AttributionTable {
        method: Method::Gradient,
        target: k,
        length: series.length,
        n_features: d,
        raw,
        scores,
    })
}

/// `o[t][i] = F_t(x) - F_t(x with x[t][i] = 0)`.
///
/// The unoccluded prefix up to `t - 1` is shared, so only the occluded step
/// itself is recomputed.
pub fn occlusion_attr(model: &TrainedModel, series: &LabeledSeries, k: usize) -> Result<AttributionTable> {
    if k >= model.spec().n_targets {
        return Err(Error::Invalid(format!("target {k} out of range")));
    }
    let run = model.run(series)?;
    let spec = model.spec();
    let d = series.n_features;
    let mut raw = Vec::with_capacity(series.length * d);
    let mut x = vec![0.0; d];
    for t in 0..series.length {
        let base = run.logit(t, k).sigmoid();
        for i in 0..d {
            let mut st = Stepper::new(&model.params);
            if t > 0 {
                for l in 0..spec.n_layers {
                    st.set_state(l, run.hidden(t - 1, l), run.cell(t - 1, l));
                }
            }
            x.copy_from_slice(series.x_at(t));
            x[i] = 0.0;
            st.step(&x);
            raw.push(base - st.logits()[k].sigmoid());
        }
    }
    Ok(AttributionTable {
        method: Method::Occlusion,
        target: k,
        length: series.length,
        n_features: d,
        scores: raw.clone(),
        raw,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub rank: usize,
    pub feature: usize,
    pub mean_score: f64,
}

/// Mean over timesteps, then over series; sorted descending with ties broken
/// by feature index. With `absolute`, scores enter as magnitudes.
pub fn global_ranking(tables: &[&AttributionTable], absolute: bool) -> Result<Vec<RankedFeature>> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Invalid("no attribution tables to rank".into()))?;
    let d = first.n_features;
    let mut sums = vec![0.0; d];
    for tab in tables {
        if tab.n_features != d {
            return Err(Error::Invalid("attribution tables differ in feature count".into()));
        }
        for i in 0..d {
            let per_series: f64 = (0..tab.length)
                .map(|t| {
                    let v = tab.score(t, i);
                    if absolute {
                        v.abs()
                    } else {
                        v
                    }
                })
                .sum::<f64>()
                / tab.length as f64;
            sums[i] += per_series;
        }
    }
    let mut ranked: Vec<(usize, f64)> = sums
        .into_iter()
        .map(|s| s / tables.len() as f64)
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(r, (feature, mean_score))| RankedFeature {
            rank: r + 1,
            feature,
            mean_score,
        })
        .collect())
}

fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Numerical => "numerical",
        FeatureKind::Binary => "binary",
    }
}

/// CSV with columns `rank,feature_id,kind,mean_score`.
pub fn write_ranking_csv(path: &Path, ranking: &[RankedFeature], kinds: &[FeatureKind]) -> Result<()> {
    let rows = ranking_rows(ranking, kinds)?;
    io::write_csv(path, &["rank", "feature_id", "kind", "mean_score"], &rows)
}

pub(crate) fn ranking_rows(ranking: &[RankedFeature], kinds: &[FeatureKind]) -> Result<Vec<Vec<String>>> {
    ranking
        .iter()
        .map(|r| {
            let kind = kinds
                .get(r.feature)
                .ok_or_else(|| Error::Invalid(format!("feature {} has no kind", r.feature)))?;
            Ok(vec![
                r.rank.to_string(),
                r.feature.to_string(),
                kind_name(*kind).to_string(),
                io::csv_num(r.mean_score),
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(scores: Vec<f64>, length: usize, n_features: usize) -> AttributionTable {
        AttributionTable {
            method: Method::Occlusion,
            target: 0,
            length,
            n_features,
            raw: scores.clone(),
            scores,
        }
    }

    #[test]
    fn ranking_sorts_means_and_breaks_ties_by_index() {
        let a = table(vec![0.1, 0.5, 0.5, 0.3, 0.5, 0.5], 2, 3);
        let r = global_ranking(&[&a], false).unwrap();
        let order: Vec<usize> = r.iter().map(|f| f.feature).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert!((r[2].mean_score - 0.2).abs() < 1e-15);
        let b = table(vec![0.9, 0.0, 0.0, 0.9, 0.0, 0.0], 2, 3);
        let ab = global_ranking(&[&a, &b], false).unwrap();
        let ba = global_ranking(&[&b, &a], false).unwrap();
        assert_eq!(ab, ba);
        assert!(global_ranking(&[], true).is_err());
    }

    #[test]
    fn absolute_ranking_uses_magnitudes() {
        let a = table(vec![-1.0, 0.5], 1, 2);
        assert_eq!(global_ranking(&[&a], true).unwrap()[0].feature, 0);
        assert_eq!(global_ranking(&[&a], false).unwrap()[0].feature, 1);
    }
}
