use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cav::{FitOptions, SignificanceOptions, Strategy};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::SeedTree;
use crate::rnn::{ModelSpec, OutputKind, TrainConfig};
use crate::scores::TcaMode;
use crate::synthgen::DatasetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Smoke,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "smoke" => Ok(Profile::Smoke),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected paper or smoke)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavSection {
    /// Concept names; empty means every concept in the dataset.
    pub concepts: Vec<String>,
    pub strategies: Vec<Strategy>,
    /// Layers to probe; empty means all.
    pub layers: Vec<usize>,
    /// Window end = change point + `window_length`.
    pub window_length: usize,
    pub n_concept_series: usize,
    pub n_control_series: usize,
    /// Minimum per-sequence accuracy for a validation series to be used.
    pub accuracy_filter: f64,
    /// Held-out validation series for generalization and scores.
    pub n_eval_series: usize,
    pub fit: FitOptions,
    pub significance: SignificanceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub tca_mode: TcaMode,
    /// Aligned position of every change point.
    pub pivot: usize,
    /// Strategy of the CAVs used for trajectories.
    pub strategy: Strategy,
    pub cs_output: OutputKind,
    pub n_null: usize,
    /// Layers with null bands; empty means the top layer only.
    pub null_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    pub enabled: bool,
    pub occlusion: bool,
    /// Test series used for rankings.
    pub n_series: usize,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub cav: CavSection,
    pub scores: ScoreSection,
    pub attribution: AttributionSection,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Smoke => Self::smoke(),
        }
    }

    pub fn paper() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/paper"),
            dataset: DatasetConfig::paper(0),
            model: ModelSection {
                n_layers: 3,
                hidden_size: 64,
            },
            training: TrainConfig::default(),
            cav: CavSection {
                concepts: Vec::new(),
                strategies: Strategy::ALL.to_vec(),
                layers: Vec::new(),
                window_length: 25,
                n_concept_series: 50,
                n_control_series: 50,
                accuracy_filter: 0.8,
                n_eval_series: 500,
                fit: FitOptions::default(),
                significance: SignificanceOptions::default(),
            },
            scores: ScoreSection {
                tca_mode: TcaMode::Difference(25),
                pivot: 50,
                strategy: Strategy::FullWindow,
                cs_output: OutputKind::Probability,
                n_null: 100,
                null_layers: Vec::new(),
            },
            attribution: AttributionSection {
                enabled: true,
                occlusion: true,
                n_series: 200,
                top_k: 5,
            },
        }
    }

    /// Small, fast configuration that still exercises every stage.
    pub fn smoke() -> Self {
        let mut c = Self::paper();
        c.output_dir = PathBuf::from("runs/smoke");
        c.dataset.n_series = 60;
        c.dataset.split = [0.5, 0.3, 0.2];
        c.model.hidden_size = 16;
        c.training.steps = 100;
        c.training.batch_size = 8;
        c.cav.n_concept_series = 6;
        c.cav.n_control_series = 6;
        c.cav.accuracy_filter = 0.0;
        c.cav.n_eval_series = 10;
        c.cav.significance.bootstraps = 10;
        c.cav.significance.permutations_per_bootstrap = 2;
        c.scores.n_null = 5;
        c.attribution.n_series = 5;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Value = io::read_json(path)?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let c: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Apply `path=value` overrides to leaves of the JSON form; `value` is
    /// parsed as JSON when possible and taken as a string otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = self.to_value();
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form path=value")))?;
            set_path(&mut v, path, raw)?;
        }
        Self::from_value(v)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            n_layers: self.model.n_layers,
            hidden_size: self.model.hidden_size,
            input_size: self.dataset.n_features,
            n_targets: self.dataset.n_targets(),
        }
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    /// Dataset configuration with its seed derived from the master seed.
    pub fn dataset_config(&self) -> DatasetConfig {
        let mut d = self.dataset.clone();
        d.seed = self.seeds().subtree("dataset").master();
        d
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.training.clone();
        t.seed = self.seeds().subtree("train").master();
        t
    }

    pub fn concepts(&self) -> Vec<String> {
        if self.cav.concepts.is_empty() {
            self.dataset.concepts.iter().map(|c| c.name.clone()).collect()
        } else {
            self.cav.concepts.clone()
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        if self.cav.layers.is_empty() {
            (0..self.model.n_layers).collect()
        } else {
            self.cav.layers.clone()
        }
    }

    pub fn null_layers(&self) -> Vec<usize> {
        if self.scores.null_layers.is_empty() {
            vec![self.model.n_layers - 1]
        } else {
            self.scores.null_layers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset.validate()?;
        self.model_spec().validate()?;
        self.training.validate()?;
        for c in &self.cav.concepts {
            self.dataset.concept_index(c).map_err(|_| Error::Config(format!("unknown concept `{c}`")))?;
        }
        let n_l = self.model.n_layers;
        if let Some(l) = self.cav.layers.iter().chain(&self.scores.null_layers).find(|&&l| l >= n_l) {
            return bad(format!("layer {l} out of range for a {n_l}-layer model"));
        }
        if self.cav.strategies.is_empty() {
            return bad("at least one CAV strategy is required".into());
        }
        if !self.cav.strategies.contains(&self.scores.strategy) {
            return bad(format!("score strategy {} is not among the CAV strategies", self.scores.strategy));
        }
        if self.cav.window_length == 0 || self.cav.window_length >= self.dataset.series_length {
            return bad(format!("window length {} must lie in [1, series length)", self.cav.window_length));
        }
        if self.cav.n_concept_series < 2 || self.cav.n_control_series < 2 {
            return bad("CAVs need at least two concept and two control series".into());
        }
        if !(0.0..=1.0).contains(&self.cav.accuracy_filter) {
            return bad("accuracy filter must lie in [0, 1]".into());
        }
        let s = &self.cav.significance;
        if s.bootstraps == 0 || s.permutations_per_bootstrap == 0 || !(s.alpha > 0.0 && s.alpha < 1.0) {
            return bad("significance needs >= 1 bootstrap, >= 1 permutation and alpha in (0, 1)".into());
        }
        if let TcaMode::Difference(dt) = self.scores.tca_mode {
            if dt == 0 || dt >= self.dataset.series_length {
                return bad(format!("tCA lag {dt} must lie in [1, series length)"));
            }
        }
        if self.scores.pivot >= self.dataset.series_length {
            return bad("pivot must lie inside the series".into());
        }
        if self.scores.n_null == 0 || self.cav.n_eval_series == 0 {
            return bad("null count and evaluation series count must be >= 1".into());
        }
        if self.attribution.top_k == 0 || self.attribution.top_k > self.dataset.n_features {
            return bad("attribution top_k must lie in [1, n_features]".into());
        }
        Ok(())
    }
}

fn set_path(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = cur;
        cur = match here {
            Value::Object(map) => map
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{}`", parts[..=i].join("."))))?,
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{part}` in `{path}` is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range ({len}) in `{path}`")))?
            }
            _ => return Err(Error::Config(format!("`{}` is not an object", parts[..i].join(".")))),
        };
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid_and_serialize() {
        for p in [Profile::Paper, Profile::Smoke] {
            let c = ExperimentConfig::profile(p);
            c.validate().unwrap();
            assert_eq!(ExperimentConfig::from_value(c.to_value()).unwrap(), c);
        }
    }

    #[test]
    fn dotted_overrides() {
        let c = ExperimentConfig::paper()
            .with_overrides(&[
                "training.steps=7".into(),
                "dataset.concepts.1.pattern.period=4".into(),
                "output_dir=elsewhere".into(),
            ])
            .unwrap();
        assert_eq!(c.training.steps, 7);
        assert_eq!(c.dataset.concepts[1].pattern.period, 4.0);
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        let err = ExperimentConfig::paper().with_overrides(&["training.stepz=7".into()]).unwrap_err();
        assert!(err.is_validation());
        assert!(ExperimentConfig::paper().with_overrides(&["cav.layers=[5]".into()]).is_err());
    }

    #[test]
    fn derived_seeds_follow_master() {
        let a = ExperimentConfig::paper();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.dataset_config().seed, b.dataset_config().seed);
        assert_ne!(a.train_config().seed, a.dataset_config().seed);
    }
}
