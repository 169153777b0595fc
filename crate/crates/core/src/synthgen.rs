//! Synthetic concept benchmark.
//!
//! Each concept is a latent binary variable that, when present, switches on
//! at a change point: linked numerical features gain a sinusoid on top of
//! Gaussian noise, linked binary features become mostly on, and the
//! concept's label channel turns positive.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::{Rng, SeedTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub amplitude: f64,
    /// Period in timesteps.
    pub period: f64,
}

impl Default for Pattern {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            period: 10.0,
        }
    }
}

fn default_binary_on_prob() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    /// p(d | C) for every feature d.
    pub feature_likelihoods: Vec<f64>,
    /// p(y | C): chance the label follows the concept's presence flag.
    pub label_likelihood: f64,
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default = "default_binary_on_prob")]
    pub binary_on_prob: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One label channel per concept.
    Independent,
    /// A single label channel driven by all concepts being present.
    JointAnd,
    /// A single label channel driven by any concept being present.
    JointOr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangepointMode {
    /// Uniform over all timesteps `0..T`.
    Uniform,
    Fixed(usize),
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_series: usize,
    pub series_length: usize,
    pub n_features: usize,
    pub feature_kinds: Vec<FeatureKind>,
    pub concepts: Vec<ConceptSpec>,
    pub scenario: Scenario,
    pub noise_std: f64,
    pub concept_prevalence: f64,
    pub changepoint_mode: ChangepointMode,
    /// Train / validation / test proportions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// p(y | ·) for the combined presence flag of joint scenarios.
    #[serde(default = "default_one")]
    pub joint_label_likelihood: f64,
    pub seed: u64,
}

impl DatasetConfig {
    /// Two concepts on disjoint halves of ten numerical features, each
    /// driving its own label with certainty.
    pub fn paper(seed: u64) -> Self {
        let n_features = 10;
        let half = |first: bool| -> Vec<f64> {
            (0..n_features)
                .map(|d| if (d < 5) == first { 1.0 } else { 0.0 })
                .collect()
        };
        Self {
            n_series: 10_000,
            series_length: 100,
            n_features,
            feature_kinds: vec![FeatureKind::Numerical; n_features],
            concepts: vec![
                ConceptSpec {
                    name: "C1".into(),
                    feature_likelihoods: half(true),
                    label_likelihood: 1.0,
                    pattern: Pattern::default(),
                    binary_on_prob: 0.95,
                },
                ConceptSpec {
                    name: "C2".into(),
                    feature_likelihoods: half(false),
                    label_likelihood: 1.0,
                    pattern: Pattern::default(),
                    binary_on_prob: 0.95,
                },
            ],
            scenario: Scenario::Independent,
            noise_std: 0.5,
            concept_prevalence: 0.5,
            changepoint_mode: ChangepointMode::Uniform,
            split: default_split(),
            joint_label_likelihood: 1.0,
            seed,
        }
    }

    pub fn n_targets(&self) -> usize {
        match self.scenario {
            Scenario::Independent => self.concepts.len(),
            Scenario::JointAnd | Scenario::JointOr => 1,
        }
    }

    pub fn concept_index(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown concept `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.series_length < 2 {
            return bad(format!("series_length must be >= 2, got {}", self.series_length));
        }
        if self.n_features == 0 || self.feature_kinds.len() != self.n_features {
            return bad(format!(
                "{} feature kinds for {} features",
                self.feature_kinds.len(),
                self.n_features
            ));
        }
        if self.concepts.is_empty() {
            return bad("at least one concept is required".into());
        }
        for c in &self.concepts {
            if c.feature_likelihoods.len() != self.n_features {
                return bad(format!("concept {} has {} feature likelihoods", c.name, c.feature_likelihoods.len()));
            }
            if !c.feature_likelihoods.iter().all(|&p| prob(p)) || !prob(c.label_likelihood) || !prob(c.binary_on_prob) {
                return bad(format!("concept {} has a probability outside [0, 1]", c.name));
            }
            if !(c.pattern.period >= 2.0) || !c.pattern.amplitude.is_finite() {
                return bad(format!("concept {} pattern period must be >= 2", c.name));
            }
        }
        let mut names: Vec<&str> = self.concepts.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.concepts.len() {
            return bad("concept names must be unique".into());
        }
        if !prob(self.concept_prevalence) || !prob(self.joint_label_likelihood) {
            return bad("prevalence and joint label likelihood must be in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if let ChangepointMode::Fixed(t) = self.changepoint_mode {
            if t < 1 || t >= self.series_length {
                return bad(format!("fixed change point {t} outside [1, {})", self.series_length));
            }
        }
        if self.split.iter().any(|&p| !(p > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split proportions {:?} must be positive and sum to 1", self.split));
        }
        Ok(())
    }
}

/// One generated series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSeries {
    pub length: usize,
    pub n_features: usize,
    pub n_targets: usize,
    /// `length x n_features`, row-major.
    pub x: Vec<f64>,
    /// `length x n_targets`, row-major, 0/1.
    pub y: Vec<u8>,
    /// Presence flag per concept.
    pub delta: Vec<bool>,
    /// Change point per concept (0-based).
    pub t_start: Vec<usize>,
    /// `lambda[c][d]`: concept `c` manifests in feature `d`.
    pub lambda: Vec<Vec<bool>>,
}

impl LabeledSeries {
    pub fn x_at(&self, t: usize) -> &[f64] {
        &self.x[t * self.n_features..(t + 1) * self.n_features]
    }

    pub fn label(&self, t: usize, k: usize) -> u8 {
        self.y[t * self.n_targets + k]
    }

    /// Whether concept `c` is present at timestep `t`.
    pub fn concept_present_at(&self, c: usize, t: usize) -> bool {
        self.delta[c] && t >= self.t_start[c]
    }
}

/// Generate one series from its own random stream.
pub fn sample_series(config: &DatasetConfig, rng: &mut Rng) -> LabeledSeries {
    let t_len = config.series_length;
    let d_len = config.n_features;
    let n_c = config.concepts.len();
    let mut t_start = Vec::with_capacity(n_c);
    let mut delta = Vec::with_capacity(n_c);
    let mut follows = Vec::with_capacity(n_c);
    let mut lambda = Vec::with_capacity(n_c);
    for c in &config.concepts {
        t_start.push(match config.changepoint_mode {
            ChangepointMode::Uniform => rng.random_range(0..t_len),
            ChangepointMode::Fixed(t) => t,
        });
        delta.push(rng.random_bool(config.concept_prevalence));
        follows.push(rng.random_bool(c.label_likelihood));
        lambda.push(
            c.feature_likelihoods
                .iter()
                .map(|&p| rng.random_bool(p))
                .collect::<Vec<bool>>(),
        );
    }
    let joint_follows = rng.random_bool(config.joint_label_likelihood);

    let noise = Normal::new(0.0, config.noise_std).expect("validated noise std");
    let mut x = vec![0.0; t_len * d_len];
    for d in 0..d_len {
        let active: Vec<usize> = (0..n_c).filter(|&c| delta[c] && lambda[c][d]).collect();
        match config.feature_kinds[d] {
            FeatureKind::Numerical => {
                for t in 0..t_len {
                    let mut v = noise.sample(rng);
                    for &c in &active {
                        if t >= t_start[c] {
                            let p = config.concepts[c].pattern;
                            v += p.amplitude * (2.0 * PI * (t - t_start[c]) as f64 / p.period).sin();
                        }
                    }
                    x[t * d_len + d] = v;
                }
            }
            FeatureKind::Binary => {
                let onset = active.iter().map(|&c| (t_start[c], c)).min();
                for t in 0..t_len {
                    let p_on = match onset {
                        Some((ts, c)) if t >= ts => config.concepts[c].binary_on_prob,
                        _ => 0.5,
                    };
                    x[t * d_len + d] = f64::from(u8::from(rng.random_bool(p_on)));
                }
            }
        }
    }

    let n_k = config.n_targets();
    let mut y = vec![0u8; t_len * n_k];
    let mut write_channel = |k: usize, positive: bool, onset: usize| {
        if positive {
            for t in onset..t_len {
                y[t * n_k + k] = 1;
            }
        }
    };
    match config.scenario {
        Scenario::Independent => {
            for c in 0..n_c {
                // label equals delta with probability p(y|C), else its complement
                let positive = delta[c] == follows[c];
                write_channel(c, positive, t_start[c]);
            }
        }
        Scenario::JointAnd | Scenario::JointOr => {
            let and = config.scenario == Scenario::JointAnd;
            let combined = if and { delta.iter().all(|&d| d) } else { delta.iter().any(|&d| d) };
            let onset = if combined {
                let present = (0..n_c).filter(|&c| delta[c]).map(|c| t_start[c]);
                if and { present.max() } else { present.min() }
            } else {
                t_start.iter().copied().min()
            }
            .expect("at least one concept");
            write_channel(0, combined == joint_follows, onset);
        }
    }

    LabeledSeries {
        length: t_len,
        n_features: d_len,
        n_targets: n_k,
        x,
        y,
        delta,
        t_start,
        lambda,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub series: Vec<LabeledSeries>,
    pub splits: Splits,
}

/// Generate `n_series` series; series `i` draws from stream `series/{i}`.
pub fn sample_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    if config.n_series < 3 {
        return Err(Error::Config(format!(
            "need at least 3 series to split, got {}",
            config.n_series
        )));
    }
    let seeds = SeedTree::new(config.seed);
    let series = (0..config.n_series)
        .map(|i| sample_series(config, &mut seeds.stream(&format!("series/{i}"))))
        .collect();
    let splits = make_splits(config.n_series, config.split, &mut seeds.stream("split"));
    Ok(Dataset {
        config: config.clone(),
        series,
        splits,
    })
}

fn make_splits(n: usize, split: [f64; 3], rng: &mut Rng) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut n_valid = ((split[1] * n as f64).round() as usize).max(1);
    let mut n_test = ((split[2] * n as f64).round() as usize).max(1);
    while n_valid + n_test >= n {
        if n_valid >= n_test {
            n_valid -= 1;
        } else {
            n_test -= 1;
        }
    }
    let n_train = n - n_valid - n_test;
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..n_train + n_valid].to_vec();
    let mut test = idx[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Splits { train, valid, test }
}

/// Offset that moves one series' change point onto a shared pivot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub offset: isize,
    pub length: usize,
}

impl Alignment {
    /// Original timestep shown at aligned slot `slot`, or `None` when the
    /// slot falls outside the series.
    pub fn source(&self, slot: usize) -> Option<usize> {
        let t = slot as isize - self.offset;
        (t >= 0 && (t as usize) < self.length).then_some(t as usize)
    }

    /// Aligned slot of original timestep `t`, if it lands inside `[0, length)`.
    pub fn slot(&self, t: usize) -> Option<usize> {
        let s = t as isize + self.offset;
        (s >= 0 && (s as usize) < self.length).then_some(s as usize)
    }
}

pub fn align_to_changepoint(
    series: &[&LabeledSeries],
    concept: usize,
    pivot: usize,
) -> Result<Vec<Alignment>> {
    series
        .iter()
        .map(|s| {
            let ts = *s
                .t_start
                .get(concept)
                .ok_or_else(|| Error::Invalid(format!("concept index {concept} not in series")))?;
            Ok(Alignment {
                offset: pivot as isize - ts as isize,
                length: s.length,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SeriesMeta {
    delta: Vec<bool>,
    t_start: Vec<usize>,
    lambda: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    config: DatasetConfig,
    splits: Splits,
    series: Vec<SeriesMeta>,
}

const DATASET_FORMAT: &str = "tcav-dataset/1";

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn n_targets(&self) -> usize {
        self.config.n_targets()
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&LabeledSeries> {
        idx.iter().map(|&i| &self.series[i]).collect()
    }

    /// Write `meta.json` and `data.bin` into `dir`.
    ///
    /// `data.bin` holds little-endian f64 values: for each series in order,
    /// its `T x D` features row-major, then its `T x K` labels row-major.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = DatasetMeta {
            format: DATASET_FORMAT.into(),
            config: self.config.clone(),
            splits: self.splits.clone(),
            series: self
                .series
                .iter()
                .map(|s| SeriesMeta {
                    delta: s.delta.clone(),
                    t_start: s.t_start.clone(),
                    lambda: s.lambda.clone(),
                })
                .collect(),
        };
        let mut data = Vec::new();
        for s in &self.series {
            data.extend_from_slice(&s.x);
            data.extend(s.y.iter().map(|&v| f64::from(v)));
        }
        io::write_atomic(&dir.join("data.bin"), &io::f64_to_le_bytes(&data))?;
        io::write_json(&dir.join("meta.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = io::read_json(&dir.join("meta.json"))?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::Invalid(format!("unsupported dataset format {}", meta.format)));
        }
        let cfg = meta.config;
        let data = io::le_bytes_to_f64(&io::read_bytes(&dir.join("data.bin"))?)?;
        let (t, d, k) = (cfg.series_length, cfg.n_features, cfg.n_targets());
        let per = t * (d + k);
        if data.len() != per * meta.series.len() || meta.series.len() != cfg.n_series {
            return Err(Error::Invalid(format!(
                "data.bin has {} values, expected {}",
                data.len(),
                per * cfg.n_series
            )));
        }
        let series = meta
            .series
            .into_iter()
            .zip(data.chunks(per))
            .map(|(m, chunk)| LabeledSeries {
                length: t,
                n_features: d,
                n_targets: k,
                x: chunk[..t * d].to_vec(),
                y: chunk[t * d..].iter().map(|&v| u8::from(v != 0.0)).collect(),
                delta: m.delta,
                t_start: m.t_start,
                lambda: m.lambda,
            })
            .collect();
        Ok(Dataset {
            config: cfg,
            series,
            splits: meta.splits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> DatasetConfig {
        DatasetConfig {
            n_series: n,
            ..DatasetConfig::paper(seed)
        }
    }

    #[test]
    fn zero_feature_likelihood_gives_pure_noise() {
        let mut cfg = small(20, 1);
        for c in &mut cfg.concepts {
            c.feature_likelihoods = vec![0.0; 10];
        }
        let ds = sample_dataset(&cfg).unwrap();
        for s in &ds.series {
            assert!(s.lambda.iter().flatten().all(|&l| !l));
            for (c, &present) in s.delta.iter().enumerate() {
                let positives = (0..s.length).filter(|&t| s.label(t, c) == 1).count();
                let want = if present { s.length - s.t_start[c] } else { 0 };
                assert_eq!(positives, want);
            }
        }
        // features are exactly what an unlinked generator draws: no pattern mass
        let mean_abs: f64 = ds.series.iter().flat_map(|s| s.x.iter()).map(|v| v.abs()).sum::<f64>()
            / (20.0 * 1000.0);
        // E|N(0, 0.5)| = 0.5 * sqrt(2/pi) ~ 0.399
        assert!((mean_abs - 0.399).abs() < 0.02, "{mean_abs}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small(5, 42);
        let a = sample_series(&cfg, &mut SeedTree::new(9).stream("s"));
        let b = sample_series(&cfg, &mut SeedTree::new(9).stream("s"));
        assert_eq!(a, b);
        assert_eq!(sample_dataset(&cfg).unwrap().series, sample_dataset(&cfg).unwrap().series);
    }

    #[test]
    fn splits_partition_indices() {
        let ds = sample_dataset(&small(10, 3)).unwrap();
        assert_eq!(ds.series.len(), 10);
        let mut all: Vec<usize> = ds
            .splits
            .train
            .iter()
            .chain(&ds.splits.valid)
            .chain(&ds.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(ds.splits.train.len(), 8);
        assert!(sample_dataset(&small(2, 3)).is_err());
    }

    #[test]
    fn labels_never_precede_change_points() {
        let ds = sample_dataset(&small(200, 5)).unwrap();
        for s in &ds.series {
            for c in 0..2 {
                for t in 0..s.t_start[c] {
                    assert_eq!(s.label(t, c), 0);
                }
                if !s.delta[c] {
                    assert!((0..s.length).all(|t| s.label(t, c) == 0));
                }
            }
        }
    }

    #[test]
    fn joint_scenarios_have_one_channel() {
        for scenario in [Scenario::JointAnd, Scenario::JointOr] {
            let cfg = DatasetConfig {
                scenario,
                ..small(200, 8)
            };
            let ds = sample_dataset(&cfg).unwrap();
            for s in &ds.series {
                assert_eq!(s.n_targets, 1);
                let any_pos = s.y.iter().any(|&v| v == 1);
                let expected = match scenario {
                    Scenario::JointAnd => s.delta.iter().all(|&d| d),
                    _ => s.delta.iter().any(|&d| d),
                };
                assert_eq!(any_pos, expected);
            }
        }
    }

    #[test]
    fn binary_features_switch_on_after_change_point() {
        let mut cfg = small(400, 12);
        cfg.feature_kinds[0] = FeatureKind::Binary;
        cfg.changepoint_mode = ChangepointMode::Fixed(50);
        let ds = sample_dataset(&cfg).unwrap();
        let (mut before, mut nb, mut after, mut na) = (0.0, 0.0, 0.0, 0.0);
        for s in ds.series.iter().filter(|s| s.delta[0]) {
            for t in 0..100 {
                let v = s.x_at(t)[0];
                assert!(v == 0.0 || v == 1.0);
                if t < 50 {
                    before += v;
                    nb += 1.0;
                } else {
                    after += v;
                    na += 1.0;
                }
            }
        }
        assert!((before / nb - 0.5).abs() < 0.03);
        assert!((after / na - 0.95).abs() < 0.02);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = small(10, 1);
        cfg.changepoint_mode = ChangepointMode::Fixed(0);
        assert!(cfg.validate().is_err());
        let mut cfg = small(10, 1);
        cfg.concepts[0].pattern.period = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small(10, 1);
        cfg.concepts[1].label_likelihood = 1.5;
        assert!(cfg.validate().is_err());
        assert!(cfg.concept_index("C9").is_err());
    }

    #[test]
    fn alignment_offsets() {
        let cfg = DatasetConfig {
            changepoint_mode: ChangepointMode::Fixed(30),
            ..small(3, 1)
        };
        let ds = sample_dataset(&cfg).unwrap();
        let refs: Vec<&LabeledSeries> = ds.series.iter().collect();
        let al = align_to_changepoint(&refs, 0, 50).unwrap();
        assert_eq!(al[0].offset, 20);
        assert!((0..20).all(|slot| al[0].source(slot).is_none()));
        assert_eq!(al[0].source(50), Some(30));
        assert_eq!(al[0].slot(30), Some(50));
        let same = align_to_changepoint(&refs, 0, 30).unwrap();
        assert_eq!(same[0].offset, 0);
        assert!(align_to_changepoint(&refs, 5, 50).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = sample_dataset(&small(6, 4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.series, ds.series);
        assert_eq!(back.splits, ds.splits);
        assert_eq!(back.config, ds.config);
    }
}
