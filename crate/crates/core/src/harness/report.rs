use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution;
use crate::cav::{self, Strategy};
use crate::error::{Error, Result};
use crate::io;
use crate::rnn::ModelMetrics;
use crate::synthgen::FeatureKind;

use super::stages::{AttributionSummary, CavSelection, ScoresSummary};
use super::{ExperimentConfig, Stage};

/// One line of the CAV quality table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavRow {
    pub concept: String,
    pub layer: usize,
    pub strategy: Strategy,
    pub boot_balanced_accuracy: f64,
    pub boot_balanced_accuracy_std: f64,
    pub boot_auroc: f64,
    pub boot_auroc_std: f64,
    pub test_accuracy: Option<f64>,
    pub test_accuracy_concept_group: Option<f64>,
    pub test_accuracy_control_group: Option<f64>,
    pub p_balanced_accuracy: f64,
    pub p_auroc: f64,
    pub significant: bool,
    pub significant_bonferroni: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelMetrics,
    pub cav_table: Vec<CavRow>,
    pub scores: ScoresSummary,
    pub attribution: Option<AttributionSummary>,
}

impl RunSummary {
    pub fn cav_row(&self, concept: &str, layer: usize, strategy: Strategy) -> Option<&CavRow> {
        self.cav_table
            .iter()
            .find(|r| r.concept == concept && r.layer == layer && r.strategy == strategy)
    }
}

fn require(p: PathBuf) -> Result<PathBuf> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(p.display().to_string()))
    }
}

fn cav_table(dir: &Path) -> Result<Vec<CavRow>> {
    let cav_dir = dir.join(Stage::Cav.dir());
    let selection: CavSelection = io::read_json(&require(cav_dir.join("selection.json"))?)?;
    let mut cavs = Vec::new();
    for sel in &selection.concepts {
        cavs.extend(cav::load_cavs(&require(cav_dir.join(&sel.concept))?)?);
    }
    let n_layers = {
        let mut l: Vec<usize> = cavs.iter().map(|c| c.layer).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    let comparisons = selection.concepts.len() * n_layers;
    cavs.iter()
        .map(|c| {
            let sig = c.significance.as_ref().ok_or_else(|| {
                Error::MissingArtifact(format!("significance for {} {} layer {}", c.concept, c.strategy, c.layer))
            })?;
            let (acc_std, auc_std) = sig.bootstrap_std();
            let g = c.generalization.as_ref();
            Ok(CavRow {
                concept: c.concept.clone(),
                layer: c.layer,
                strategy: c.strategy,
                boot_balanced_accuracy: sig.observed.balanced_accuracy,
                boot_balanced_accuracy_std: acc_std,
                boot_auroc: sig.observed.auroc,
                boot_auroc_std: auc_std,
                test_accuracy: g.map(|g| g.accuracy),
                test_accuracy_concept_group: g.map(|g| g.accuracy_concept_group),
                test_accuracy_control_group: g.map(|g| g.accuracy_control_group),
                p_balanced_accuracy: sig.p_balanced_acc,
                p_auroc: sig.p_auroc,
                significant: sig.significant,
                significant_bonferroni: sig.significant_bonferroni(comparisons),
            })
        })
        .collect()
}

/// Gather stage outputs into one summary; errors name the first missing
/// artifact.
pub(super) fn load_summary(dir: &Path) -> Result<RunSummary> {
    let model = io::read_json(&require(dir.join(Stage::Evaluate.dir()).join("metrics.json"))?)?;
    let cav_table = cav_table(dir)?;
    let scores = io::read_json(&require(dir.join(Stage::Scores.dir()).join("summary.json"))?)?;
    let attr = dir.join(Stage::Attribute.dir()).join("summary.json");
    let attribution = if attr.exists() { Some(io::read_json(&attr)?) } else { None };
    Ok(RunSummary {
        model,
        cav_table,
        scores,
        attribution,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, io::csv_num)
}

/// Write `reports/` from the stage artifacts under `dir`.
pub fn emit_reports(dir: &Path) -> Result<RunSummary> {
    let summary = load_summary(dir)?;
    let out = dir.join(Stage::Report.dir());

    let rows: Vec<Vec<String>> = summary
        .cav_table
        .iter()
        .map(|r| {
            vec![
                r.concept.clone(),
                r.layer.to_string(),
                r.strategy.name().into(),
                io::csv_num(r.boot_balanced_accuracy),
                io::csv_num(r.boot_balanced_accuracy_std),
                io::csv_num(r.boot_auroc),
                io::csv_num(r.boot_auroc_std),
                opt(r.test_accuracy),
                opt(r.test_accuracy_concept_group),
                opt(r.test_accuracy_control_group),
                io::csv_num(r.p_balanced_accuracy),
                io::csv_num(r.p_auroc),
                r.significant.to_string(),
                r.significant_bonferroni.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &out.join("cav_table.csv"),
        &[
            "concept",
            "layer",
            "strategy",
            "boot_balanced_accuracy",
            "boot_balanced_accuracy_std",
            "boot_auroc",
            "boot_auroc_std",
            "test_accuracy",
            "test_accuracy_concept_group",
            "test_accuracy_control_group",
            "p_balanced_accuracy",
            "p_auroc",
            "significant",
            "significant_bonferroni",
        ],
        &rows,
    )?;

    super::stages::write_trajectories(&out, &summary.scores)?;

    let kinds: Vec<FeatureKind> = {
        let cfg: ExperimentConfig = io::read_json(&require(dir.join("config.json"))?)?;
        cfg.dataset.feature_kinds
    };
    let mut rows = Vec::new();
    if let Some(a) = &summary.attribution {
        for r in &a.rankings {
            for row in attribution::ranking_rows(&r.ranking, &kinds)? {
                let mut full = vec![r.method.name().to_string(), r.target.to_string(), r.aggregate.clone()];
                full.extend(row);
                rows.push(full);
            }
        }
    }
    io::write_csv(
        &out.join("feature_ranking.csv"),
        &["method", "target", "aggregate", "rank", "feature_id", "kind", "mean_score"],
        &rows,
    )?;
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
