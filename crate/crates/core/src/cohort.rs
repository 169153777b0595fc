//! Control-cohort construction: shared standardization, minimum-L1 matching
//! by the Hungarian method, and per-series timestep sampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cav::Window;
use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;

const STD_FLOOR: f64 = 1e-12;

/// Per-column mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Statistics of a row-major `n x m` matrix.
    pub fn from_rows(rows: &[f64], m: usize) -> Result<Self> {
        if m == 0 || rows.is_empty() || rows.len() % m != 0 {
            return Err(Error::Invalid(format!("{} values do not form rows of width {m}", rows.len())));
        }
        let n = (rows.len() / m) as f64;
        let mut mean = vec![0.0; m];
        for r in rows.chunks_exact(m) {
            for (s, v) in mean.iter_mut().zip(r) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|s| *s /= n);
        let mut var = vec![0.0; m];
        for r in rows.chunks_exact(m) {
            for ((s, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn hash(&self) -> Result<String> {
        io::json_hash(self)
    }
}

fn check_width(features: &[f64], stats: &ColumnStats) -> Result<()> {
    let m = stats.width();
    if m == 0 || stats.std.len() != m || features.len() % m != 0 {
        return Err(Error::Invalid(format!(
            "{} values do not match {m} standardization columns",
            features.len()
        )));
    }
    Ok(())
}

/// `(x - mean) / std` per column; columns with `std < 1e-12` are only centered.
pub fn standardize(features: &[f64], stats: &ColumnStats) -> Result<Vec<f64>> {
    check_width(features, stats)?;
    let m = stats.width();
    Ok(features
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % m;
            let c = v - stats.mean[j];
            if stats.std[j] < STD_FLOOR {
                c
            } else {
                c / stats.std[j]
            }
        })
        .collect())
}

pub fn destandardize(features: &[f64], stats: &ColumnStats) -> Result<Vec<f64>> {
    check_width(features, stats)?;
    let m = stats.width();
    Ok(features
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let j = i % m;
            let s = if stats.std[j] < STD_FLOOR { 1.0 } else { stats.std[j] };
            v * s + stats.mean[j]
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, column)` pairs ordered by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost injective assignment of `n` rows to `p >= n` columns of a
/// row-major cost matrix (shortest augmenting paths with potentials).
pub fn hungarian(cost: &[f64], n: usize, p: usize) -> Result<Assignment> {
    if n > p {
        return Err(Error::Invalid(format!("{n} rows cannot be assigned to {p} columns")));
    }
    if cost.len() != n * p {
        return Err(Error::Invalid(format!("cost matrix has {} entries, expected {n} x {p}", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix entry".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let c = |i: usize, j: usize| cost[(i - 1) * p + (j - 1)];
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; p + 1];
    let mut owner = vec![0usize; p + 1];
    let mut way = vec![0usize; p + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; p + 1];
        let mut used = vec![false; p + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=p {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=p {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=p)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i * p + j]).sum();
    Ok(Assignment { pairs, total_cost })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchProblem {
    /// `n x m`, row-major.
    pub concept: Vec<f64>,
    /// `p x m`, row-major.
    pub candidates: Vec<f64>,
    pub stats: ColumnStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub assignment: Assignment,
    /// L1 distance of each pair, in `assignment.pairs` order.
    pub distances: Vec<f64>,
    /// Selected candidate indices, in concept-row order.
    pub selected: Vec<usize>,
}

pub fn match_controls(problem: &MatchProblem) -> Result<MatchResult> {
    let m = problem.stats.width();
    let a = standardize(&problem.concept, &problem.stats)?;
    let b = standardize(&problem.candidates, &problem.stats)?;
    let (n, p) = (a.len() / m, b.len() / m);
    let mut cost = Vec::with_capacity(n * p);
    for ra in a.chunks_exact(m) {
        for rb in b.chunks_exact(m) {
            cost.push(ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum());
        }
    }
    let assignment = hungarian(&cost, n, p)?;
    let distances = assignment.pairs.iter().map(|&(i, j)| cost[i * p + j]).collect();
    let selected = assignment.pairs.iter().map(|&(_, j)| j).collect();
    Ok(MatchResult {
        assignment,
        distances,
        selected,
    })
}

/// JSON document describing one matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub total_cost: f64,
    pub stats_hash: String,
}

impl MatchReport {
    pub fn new(result: &MatchResult, stats: &ColumnStats) -> Result<Self> {
        Ok(Self {
            pairs: result.assignment.pairs.clone(),
            distances: result.distances.clone(),
            total_cost: result.assignment.total_cost,
            stats_hash: stats.hash()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    EqualInterval,
    TruePositive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSample {
    pub timesteps: Vec<usize>,
    /// Set when a true-positive draw found nothing to sample.
    pub empty_warning: bool,
}

/// Pick up to `n` timesteps inside `window`. `true_positive[t]` marks steps
/// with a positive prediction on a positive label and is required by the
/// true-positive strategy.
pub fn sample_timesteps(
    window: Window,
    n: usize,
    strategy: SamplingStrategy,
    true_positive: Option<&[bool]>,
    rng: &mut Rng,
) -> Result<TimestepSample> {
    if window.t_start > window.t_end {
        return Err(Error::Invalid(format!("window [{}, {}] is empty", window.t_start, window.t_end)));
    }
    let len = window.t_end - window.t_start + 1;
    let pick = |pool: &[usize], rng: &mut Rng| -> Vec<usize> {
        if pool.len() <= n {
            return pool.to_vec();
        }
        let mut out: Vec<usize> = index::sample(rng, pool.len(), n).iter().map(|i| pool[i]).collect();
        out.sort_unstable();
        out
    };
    let timesteps = match strategy {
        SamplingStrategy::Random => {
            let pool: Vec<usize> = (window.t_start..=window.t_end).collect();
            pick(&pool, rng)
        }
        SamplingStrategy::EqualInterval => {
            if n == 0 {
                Vec::new()
            } else if n == 1 {
                vec![window.t_start]
            } else {
                let mut out: Vec<usize> = (0..n)
                    .map(|j| window.t_start + j * (len - 1) / (n - 1))
                    .collect();
                out.dedup();
                out
            }
        }
        SamplingStrategy::TruePositive => {
            let mask = true_positive
                .ok_or_else(|| Error::Invalid("true-positive sampling needs predictions and labels".into()))?;
            if window.t_end >= mask.len() {
                return Err(Error::Invalid("window extends past the prediction mask".into()));
            }
            let pool: Vec<usize> = (window.t_start..=window.t_end).filter(|&t| mask[t]).collect();
            let out = pick(&pool, rng);
            return Ok(TimestepSample {
                empty_warning: out.is_empty(),
                timesteps: out,
            });
        }
    };
    Ok(TimestepSample {
        timesteps,
        empty_warning: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn standardize_examples() {
        let id = ColumnStats {
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        let x = vec![1.5, -2.0, 3.0, 4.0];
        assert_eq!(standardize(&x, &id).unwrap(), x);
        let rows = vec![5.0, 1.0, 5.0, 3.0];
        let stats = ColumnStats::from_rows(&rows, 2).unwrap();
        let z = standardize(&rows, &stats).unwrap();
        assert_eq!(z[0], 0.0);
        assert_eq!(z[2], 0.0);
        let back = destandardize(&z, &stats).unwrap();
        assert!(back.iter().zip(&rows).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(standardize(&[1.0, 2.0, 3.0], &stats).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&[1.0, 2.0, 3.0, 1.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let diag = hungarian(&[0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0], 3, 3).unwrap();
        assert_eq!(diag.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(hungarian(&[7.5], 1, 1).unwrap().total_cost, 7.5);
        assert!(hungarian(&[1.0, 2.0], 2, 1).is_err());
        assert!(hungarian(&[f64::NAN], 1, 1).is_err());
        // ties resolve to the lowest column
        assert_eq!(hungarian(&[1.0, 1.0, 1.0], 1, 3).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn matching_prefers_exact_duplicates() {
        let concept = vec![0.0, 1.0, 2.0, 5.0, -1.0, 3.0];
        let mut candidates = vec![9.0, 9.0, -4.0, 7.0];
        candidates.extend_from_slice(&concept[4..6]);
        candidates.extend_from_slice(&concept[0..2]);
        candidates.extend_from_slice(&concept[2..4]);
        let stats = ColumnStats::from_rows(&candidates, 2).unwrap();
        let r = match_controls(&MatchProblem {
            concept,
            candidates,
            stats,
        })
        .unwrap();
        assert_eq!(r.selected, vec![3, 4, 2]);
        assert_eq!(r.assignment.total_cost, 0.0);
    }

    #[test]
    fn timestep_sampling() {
        let mut rng = SeedTree::new(3).stream("t");
        let all = sample_timesteps(Window::new(0, 9), 10, SamplingStrategy::EqualInterval, None, &mut rng).unwrap();
        assert_eq!(all.timesteps, (0..10).collect::<Vec<_>>());
        let ends = sample_timesteps(Window::new(0, 9), 2, SamplingStrategy::EqualInterval, None, &mut rng).unwrap();
        assert_eq!(ends.timesteps, vec![0, 9]);
        let draw = |seed| {
            let mut r = SeedTree::new(seed).stream("t");
            sample_timesteps(Window::new(5, 50), 10, SamplingStrategy::Random, None, &mut r).unwrap()
        };
        assert_eq!(draw(1), draw(1));
        assert_eq!(draw(1).timesteps.len(), 10);
        let none = sample_timesteps(Window::new(0, 3), 2, SamplingStrategy::TruePositive, Some(&[false; 4]), &mut rng)
            .unwrap();
        assert!(none.empty_warning && none.timesteps.is_empty());
        assert!(sample_timesteps(Window::new(0, 3), 2, SamplingStrategy::TruePositive, None, &mut rng).is_err());
    }
}
