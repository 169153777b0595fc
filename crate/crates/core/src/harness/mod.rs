//! Config-driven experiment pipeline.
//!
//! Stages run in order (generate, train, evaluate, cav, scores, attribute,
//! report). Each stage writes its artifacts under the output directory
//! together with a stamp holding a hash of the configuration it depends on;
//! a rerun skips every stage whose stamp still matches.

mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use config::{AttributionSection, CavSection, ExperimentConfig, ModelSection, Profile, ScoreSection};
pub use report::{emit_reports, CavRow, RunSummary};
pub use stages::{
    AttributionSummary, CavSelection, CohortTrajectory, NullSummary, RankingRecord, ScoresSummary,
};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "TCAV_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Train,
    Evaluate,
    Cav,
    Scores,
    Attribute,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Train,
        Stage::Evaluate,
        Stage::Cav,
        Stage::Scores,
        Stage::Attribute,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Cav => "cav",
            Stage::Scores => "scores",
            Stage::Attribute => "attribute",
            Stage::Report => "report",
        }
    }

    /// Directory (relative to the output root) holding the stage's artifacts.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Generate => "dataset",
            Stage::Train => "model",
            Stage::Evaluate => "eval",
            Stage::Cav => "cavs",
            Stage::Scores => "scores",
            Stage::Attribute => "attribution",
            Stage::Report => "reports",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Resumed,
    Skipped,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub output_dir: PathBuf,
    /// Paths relative to `output_dir`.
    pub artifacts: Vec<String>,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub summary: Option<RunSummary>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        io::read_json(&p)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Progress lines on stderr.
    pub verbose: bool,
}

/// Run every stage up to and including `last`.
pub fn run_until(config: &ExperimentConfig, last: Stage, options: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_json(&dir.join("config.json"), config)?;
    let mut pipeline = stages::Pipeline::new(config, options);
    let mut records = Vec::new();
    let mut failure = None;
    for stage in Stage::ALL.into_iter().filter(|s| *s <= last) {
        if stage == Stage::Attribute && !config.attribution.enabled {
            records.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                seconds: 0.0,
                error: None,
            });
            continue;
        }
        let start = Instant::now();
        let outcome = pipeline.run_stage(stage);
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok(resumed) => records.push(StageRecord {
                stage,
                status: if resumed { StageStatus::Resumed } else { StageStatus::Ran },
                seconds,
                error: None,
            }),
            Err(e) => {
                records.push(StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    seconds,
                    error: Some(e.to_string()),
                });
                failure = Some(Error::Stage {
                    stage: stage.name().into(),
                    source: Box::new(e),
                });
                break;
            }
        }
    }
    let summary = if failure.is_none() && last == Stage::Report {
        Some(report::load_summary(&dir)?)
    } else {
        None
    };
    let manifest = RunManifest {
        config_hash: io::json_hash(config)?,
        output_dir: dir.clone(),
        artifacts: list_artifacts(&dir)?,
        versions: versions(),
        stages: records,
        summary,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Full pipeline including report emission.
pub fn run_experiment(config: &ExperimentConfig, options: RunOptions) -> Result<RunManifest> {
    run_until(config, Stage::Report, options)
}

fn versions() -> BTreeMap<String, String> {
    let mut v = BTreeMap::new();
    v.insert("tcav-core".into(), env!("CARGO_PKG_VERSION").into());
    v.insert("dataset_format".into(), "tcav-dataset/1".into());
    v.insert("model_format".into(), "tcav-model/1".into());
    v.insert("cav_format".into(), "tcav-cav/1".into());
    v
}

fn list_artifacts(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, cur: &Path, out: &mut Vec<String>) -> Result<()> {
        let entries = std::fs::read_dir(cur).map_err(|e| Error::io(cur, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(cur, e))?;
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p.strip_prefix(root).expect("under root").display().to_string());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
