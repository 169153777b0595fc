use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{self, Method, RankedFeature};
use crate::cav::{self, Cav, SampleSet, Strategy, Window};
use crate::error::{Error, Result};
use crate::io;
use crate::rnn::{self, ActivationTrace, Run, TrainedModel};
use crate::scores::{self, ScoreKind, ScoreSeries, TcaMode, Trajectory};
use crate::synthgen::{self, Dataset, LabeledSeries, Scenario};

use super::{ExperimentConfig, RunOptions, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSelection {
    pub concept: String,
    /// Validation series (dataset indices) with the concept present.
    pub concept_series: Vec<usize>,
    pub control_series: Vec<usize>,
    pub n_eligible_concept: usize,
    pub n_eligible_control: usize,
}

/// Which validation series built the CAVs and which were held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavSelection {
    pub window_length: usize,
    pub n_passing_filter: usize,
    pub n_valid: usize,
    pub concepts: Vec<ConceptSelection>,
    pub eval_series: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortTrajectory {
    pub kind: ScoreKind,
    pub concept: String,
    pub layer: usize,
    pub target: Option<usize>,
    /// `present` or `absent`.
    pub cohort: String,
    pub trajectory: Trajectory,
}

impl CohortTrajectory {
    pub fn label(&self) -> String {
        match self.target {
            Some(k) => format!("{}:layer{}:y{k}:{}", self.concept, self.layer, self.cohort),
            None => format!("{}:layer{}:{}", self.concept, self.layer, self.cohort),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub concept: String,
    pub layer: usize,
    pub n_null: usize,
    pub n_series: usize,
    /// Share of present-concept series whose tCA exceeds the 95% null
    /// quantile at some step at or after the change point.
    pub exit_fraction: f64,
    /// Same, but only before the change point.
    pub pre_change_exit_fraction: f64,
    /// Largest |mean| of the series-averaged, aligned null band.
    pub max_abs_mean: f64,
    /// Largest |mean| of any single series' null band.
    pub max_abs_mean_per_series: f64,
    pub mean_band: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresSummary {
    pub pivot: usize,
    pub tca_mode: TcaMode,
    pub strategy: Strategy,
    pub n_series: usize,
    pub trajectories: Vec<CohortTrajectory>,
    pub null: Vec<NullSummary>,
}

impl ScoresSummary {
    pub fn find(
        &self,
        kind: ScoreKind,
        concept: &str,
        layer: usize,
        target: Option<usize>,
        cohort: &str,
    ) -> Option<&Trajectory> {
        self.trajectories
            .iter()
            .find(|c| c.kind == kind && c.concept == concept && c.layer == layer && c.target == target && c.cohort == cohort)
            .map(|c| &c.trajectory)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub method: Method,
    /// `absolute` or `signed`.
    pub aggregate: String,
    pub target: usize,
    pub ranking: Vec<RankedFeature>,
    /// Mean score over linked features after their change point, for series
    /// with the governing concept present.
    pub linked_after_change: Option<f64>,
    pub unlinked_after_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub n_series: usize,
    pub top_k: usize,
    /// Features each target's concepts can manifest in.
    pub linked_features: Vec<Vec<usize>>,
    pub rankings: Vec<RankingRecord>,
}

impl AttributionSummary {
    pub fn top_features(&self, method: Method, aggregate: &str, target: usize) -> Option<Vec<usize>> {
        self.rankings
            .iter()
            .find(|r| r.method == method && r.aggregate == aggregate && r.target == target)
            .map(|r| r.ranking.iter().take(self.top_k).map(|f| f.feature).collect())
    }
}

pub(super) struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    dir: PathBuf,
    options: RunOptions,
    dataset: Option<Dataset>,
    model: Option<TrainedModel>,
    traces: HashMap<usize, ActivationTrace>,
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    stage: Stage,
    hash: String,
}

impl<'a> Pipeline<'a> {
    pub(super) fn new(config: &'a ExperimentConfig, options: RunOptions) -> Self {
        Self {
            config,
            dir: config.output_dir.clone(),
            options,
            dataset: None,
            model: None,
            traces: HashMap::new(),
        }
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.options.verbose {
            eprintln!("[tcav] {}", msg.as_ref());
        }
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.dir())
    }

    fn stage_hash(&self, stage: Stage) -> Result<String> {
        let c = self.config;
        let v = match stage {
            Stage::Generate => json!([c.dataset_config()]),
            Stage::Train | Stage::Evaluate => {
                json!([self.stage_hash(Stage::Generate)?, c.model_spec(), c.train_config()])
            }
            Stage::Cav => json!([self.stage_hash(Stage::Train)?, c.cav, c.seed]),
            Stage::Scores => json!([self.stage_hash(Stage::Cav)?, c.scores]),
            Stage::Attribute => json!([self.stage_hash(Stage::Train)?, c.attribution]),
            Stage::Report => json!(["report"]),
        };
        io::json_hash(&json!([stage, v]))
    }

    fn is_done(&self, stage: Stage, files: &[&str]) -> Result<bool> {
        let d = self.stage_dir(stage);
        let p = d.join("stamp.json");
        if !p.exists() || files.iter().any(|f| !d.join(f).exists()) {
            return Ok(false);
        }
        let stamp: Stamp = io::read_json(&p)?;
        Ok(stamp.stage == stage && stamp.hash == self.stage_hash(stage)?)
    }

    fn stamp(&self, stage: Stage) -> Result<()> {
        io::write_json(
            &self.stage_dir(stage).join("stamp.json"),
            &Stamp {
                stage,
                hash: self.stage_hash(stage)?,
            },
        )
    }

    /// Run one stage, or confirm its artifacts are current. Returns whether
    /// it was resumed from disk.
    pub(super) fn run_stage(&mut self, stage: Stage) -> Result<bool> {
        let files: &[&str] = match stage {
            Stage::Generate => &["meta.json", "data.bin"],
            Stage::Train => &["model.json", "params.bin"],
            Stage::Evaluate => &["metrics.json"],
            Stage::Cav => &["selection.json"],
            Stage::Scores => &["summary.json", "tca_trajectories.csv", "cs_trajectories.csv"],
            Stage::Attribute => &["summary.json"],
            Stage::Report => &[],
        };
        if stage != Stage::Report && self.is_done(stage, files)? {
            self.log(format!("{}: up to date", stage.name()));
            return Ok(true);
        }
        self.log(format!("{}: running", stage.name()));
        match stage {
            Stage::Generate => self.generate()?,
            Stage::Train => self.train()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Cav => self.cav()?,
            Stage::Scores => self.scores()?,
            Stage::Attribute => self.attribute()?,
            Stage::Report => {
                super::report::emit_reports(&self.dir)?;
                return Ok(false);
            }
        }
        self.stamp(stage)?;
        Ok(false)
    }

    fn dataset(&mut self) -> Result<&Dataset> {
        if self.dataset.is_none() {
            self.dataset = Some(Dataset::load(&self.stage_dir(Stage::Generate))?);
        }
        Ok(self.dataset.as_ref().expect("loaded"))
    }

    fn model(&mut self) -> Result<&TrainedModel> {
        if self.model.is_none() {
            self.model = Some(TrainedModel::load(&self.stage_dir(Stage::Train))?);
        }
        Ok(self.model.as_ref().expect("loaded"))
    }

    fn load_both(&mut self) -> Result<(&Dataset, &TrainedModel)> {
        self.dataset()?;
        self.model()?;
        Ok((self.dataset.as_ref().unwrap(), self.model.as_ref().unwrap()))
    }

    fn trace(&mut self, idx: usize) -> Result<&ActivationTrace> {
        if !self.traces.contains_key(&idx) {
            let (ds, model) = self.load_both()?;
            let t = model.activations(&ds.series[idx])?;
            self.traces.insert(idx, t);
        }
        Ok(&self.traces[&idx])
    }

    fn generate(&mut self) -> Result<()> {
        let ds = synthgen::sample_dataset(&self.config.dataset_config())?;
        ds.save(&self.stage_dir(Stage::Generate))?;
        self.dataset = Some(ds);
        Ok(())
    }

    fn train(&mut self) -> Result<()> {
        let spec = self.config.model_spec();
        let tc = self.config.train_config();
        let verbose = self.options.verbose;
        let every = (tc.steps / 20).max(1);
        let ds = self.dataset()?;
        let series = ds.select(&ds.splits.train);
        let model = rnn::train_with(spec, &series, &tc, |step, loss| {
            if verbose && (step % every == 0 || step + 1 == tc.steps) {
                eprintln!("[tcav] train: step {step} loss {loss:.5}");
            }
        })?;
        model.save(&self.stage_dir(Stage::Train))?;
        self.model = Some(model);
        Ok(())
    }

    fn evaluate(&mut self) -> Result<()> {
        let (ds, model) = self.load_both()?;
        let metrics = model.evaluate(&ds.select(&ds.splits.test))?;
        self.log(format!(
            "evaluate: accuracy {:.4} auroc {:.4} auprc {:.4}",
            metrics.accuracy, metrics.auroc, metrics.auprc
        ));
        io::write_json(&self.stage_dir(Stage::Evaluate).join("metrics.json"), &metrics)
    }

    fn window(&self, s: &LabeledSeries, ci: usize) -> Window {
        let t0 = s.t_start[ci];
        Window::new(t0, t0 + self.config.cav.window_length)
    }

    fn select(&mut self) -> Result<CavSelection> {
        let cfg = self.config;
        let seeds = cfg.seeds();
        let (ds, model) = self.load_both()?;
        let valid = ds.splits.valid.clone();
        let mut passing = Vec::new();
        for &i in &valid {
            if model.per_sequence_accuracy(&ds.series[i])? >= cfg.cav.accuracy_filter {
                passing.push(i);
            }
        }
        let mut used = BTreeSet::new();
        let mut concepts = Vec::new();
        for name in cfg.concepts() {
            let ci = ds.config.concept_index(&name)?;
            let fits = |i: &usize| ds.series[*i].t_start[ci] + cfg.cav.window_length < ds.series[*i].length;
            let mut pos: Vec<usize> = passing.iter().copied().filter(|i| fits(i) && ds.series[*i].delta[ci]).collect();
            let mut neg: Vec<usize> = passing.iter().copied().filter(|i| fits(i) && !ds.series[*i].delta[ci]).collect();
            let (n_pos, n_neg) = (pos.len(), neg.len());
            let mut rng = seeds.stream(&format!("cav/{name}/select"));
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            pos.truncate(cfg.cav.n_concept_series);
            neg.truncate(cfg.cav.n_control_series);
            if pos.len() < 2 || neg.len() < 2 {
                return Err(Error::Invalid(format!(
                    "concept {name}: only {} concept and {} control validation series are eligible",
                    pos.len(),
                    neg.len()
                )));
            }
            used.extend(pos.iter().chain(&neg).copied());
            concepts.push(ConceptSelection {
                concept: name,
                concept_series: pos,
                control_series: neg,
                n_eligible_concept: n_pos,
                n_eligible_control: n_neg,
            });
        }
        let mut rest: Vec<usize> = valid.iter().copied().filter(|i| !used.contains(i)).collect();
        rest.shuffle(&mut seeds.stream("cav/eval"));
        rest.truncate(cfg.cav.n_eval_series);
        if rest.is_empty() {
            return Err(Error::Invalid("no validation series left for evaluation".into()));
        }
        Ok(CavSelection {
            window_length: cfg.cav.window_length,
            n_passing_filter: passing.len(),
            n_valid: valid.len(),
            concepts,
            eval_series: rest,
        })
    }

    fn samples(&mut self, sel: &ConceptSelection, layer: usize, strategy: Strategy) -> Result<SampleSet> {
        let ci = self.dataset()?.config.concept_index(&sel.concept)?;
        for &i in sel.concept_series.iter().chain(&sel.control_series) {
            self.trace(i)?;
        }
        let ds = self.dataset.as_ref().expect("loaded");
        let group = |idx: &[usize]| -> Vec<(&ActivationTrace, Window)> {
            idx.iter().map(|i| (&self.traces[i], self.window(&ds.series[*i], ci))).collect()
        };
        cav::collect_cav_samples(&group(&sel.concept_series), &group(&sel.control_series), layer, strategy)
    }

    fn cav(&mut self) -> Result<()> {
        let cfg = self.config;
        let seeds = cfg.seeds();
        let selection = self.select()?;
        self.log(format!(
            "cav: {} of {} validation series pass the accuracy filter",
            selection.n_passing_filter, selection.n_valid
        ));
        for &i in &selection.eval_series {
            self.trace(i)?;
        }
        for sel in &selection.concepts {
            let ci = self.dataset()?.config.concept_index(&sel.concept)?;
            let mut out = Vec::new();
            for &strategy in &cfg.cav.strategies {
                for layer in cfg.layers() {
                    let samples = self.samples(sel, layer, strategy)?;
                    let mut c = cav::fit_cav(&samples, &sel.concept, layer, strategy, &cfg.cav.fit)?;
                    let sub = seeds.subtree(&format!("cav/{}/{strategy}/layer{layer}", sel.concept));
                    let sig = cav::assess_significance(&samples, &cfg.cav.significance, &cfg.cav.fit, &sub)?;
                    let ds = self.dataset.as_ref().expect("loaded");
                    let traces: Vec<&ActivationTrace> = selection.eval_series.iter().map(|i| &self.traces[i]).collect();
                    let labels: Vec<Vec<bool>> = selection
                        .eval_series
                        .iter()
                        .map(|&i| {
                            let s = &ds.series[i];
                            (0..s.length).map(|t| s.concept_present_at(ci, t)).collect()
                        })
                        .collect();
                    let groups: Vec<bool> = selection.eval_series.iter().map(|&i| ds.series[i].delta[ci]).collect();
                    let lag = (strategy == Strategy::Difference).then_some(cfg.cav.window_length);
                    c.generalization = Some(cav::eval_generalization(&c, &traces, &labels, &groups, lag)?);
                    self.log(format!(
                        "cav: {} {strategy} layer {layer}: boot bal.acc {:.4} auroc {:.4} p {:.4}/{:.4} test acc {:.4}",
                        sel.concept,
                        sig.observed.balanced_accuracy,
                        sig.observed.auroc,
                        sig.p_balanced_acc,
                        sig.p_auroc,
                        c.generalization.as_ref().map_or(f64::NAN, |g| g.accuracy)
                    ));
                    c.significance = Some(sig);
                    out.push(c);
                }
            }
            cav::save_cavs(&self.stage_dir(Stage::Cav).join(&sel.concept), &sel.concept, &out)?;
        }
        io::write_json(&self.stage_dir(Stage::Cav).join("selection.json"), &selection)
    }

    fn load_selection(&self) -> Result<CavSelection> {
        let p = self.stage_dir(Stage::Cav).join("selection.json");
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        io::read_json(&p)
    }

    fn scores(&mut self) -> Result<()> {
        let cfg = self.config;
        let seeds = cfg.seeds();
        let selection = self.load_selection()?;
        let mut cavs: BTreeMap<(String, usize), Cav> = BTreeMap::new();
        for sel in &selection.concepts {
            for c in cav::load_cavs(&self.stage_dir(Stage::Cav).join(&sel.concept))? {
                if c.strategy == cfg.scores.strategy {
                    cavs.insert((c.concept.clone(), c.layer), c);
                }
            }
        }
        let layers = cfg.layers();
        let mode = cfg.scores.tca_mode;
        let n_targets = cfg.dataset.n_targets();
        let eval = selection.eval_series.clone();
        let (ds, model) = self.load_both()?;
        let runs: Vec<Run<f64>> = eval.iter().map(|&i| model.run(&ds.series[i])).collect::<Result<_>>()?;

        // scores[(kind, concept, layer, target)][series position]
        let mut all: BTreeMap<(ScoreKind, String, usize, Option<usize>), Vec<ScoreSeries>> = BTreeMap::new();
        for (pos, run) in runs.iter().enumerate() {
            let trace = ActivationTrace {
                length: run.length,
                n_layers: run.n_layers,
                hidden_size: run.hidden_size,
                a: run.h.clone(),
            };
            for &layer in &layers {
                let mut grads = Vec::with_capacity(n_targets);
                let times: Vec<usize> = (0..run.length).collect();
                for k in 0..n_targets {
                    grads.push(model.activation_gradients(run, layer, &times, k, cfg.scores.cs_output)?);
                }
                for sel in &selection.concepts {
                    let Some(c) = cavs.get(&(sel.concept.clone(), layer)) else {
                        return Err(Error::MissingArtifact(format!(
                            "{} CAV for {} layer {layer}",
                            cfg.scores.strategy, sel.concept
                        )));
                    };
                    all.entry((ScoreKind::Tca, sel.concept.clone(), layer, None))
                        .or_default()
                        .push(scores::tca(&trace, c, mode, eval[pos])?);
                    for (k, g) in grads.iter().enumerate() {
                        all.entry((ScoreKind::Cs, sel.concept.clone(), layer, Some(k)))
                            .or_default()
                            .push(scores::cs_from_gradients(g, c, eval[pos])?);
                    }
                }
            }
        }

        let mut trajectories = Vec::new();
        for ((kind, concept, layer, target), series) in &all {
            let ci = ds.config.concept_index(concept)?;
            let members: Vec<&LabeledSeries> = eval.iter().map(|&i| &ds.series[i]).collect();
            let align = synthgen::align_to_changepoint(&members, ci, cfg.scores.pivot)?;
            for (cohort, present) in [("present", true), ("absent", false)] {
                let idx: Vec<usize> = (0..eval.len()).filter(|&p| members[p].delta[ci] == present).collect();
                if idx.is_empty() {
                    continue;
                }
                let s: Vec<&ScoreSeries> = idx.iter().map(|&p| &series[p]).collect();
                let a: Vec<_> = idx.iter().map(|&p| align[p]).collect();
                trajectories.push(CohortTrajectory {
                    kind: *kind,
                    concept: concept.clone(),
                    layer: *layer,
                    target: *target,
                    cohort: cohort.into(),
                    trajectory: scores::aggregate_scores(&s, &a)?,
                });
            }
        }

        let mut null = Vec::new();
        let traces: Vec<ActivationTrace> = runs
            .into_iter()
            .map(|r| ActivationTrace {
                length: r.length,
                n_layers: r.n_layers,
                hidden_size: r.hidden_size,
                a: r.h,
            })
            .collect();
        for sel in &selection.concepts {
            for layer in cfg.null_layers() {
                let samples = self.samples(sel, layer, cfg.scores.strategy)?;
                let sub = seeds.subtree(&format!("scores/{}/layer{layer}", sel.concept));
                let dirs = cav::permuted_directions(&samples, cfg.scores.n_null, &cfg.cav.fit, &sub)?;
                let ds = self.dataset.as_ref().expect("loaded");
                let ci = ds.config.concept_index(&sel.concept)?;
                let true_scores = &all[&(ScoreKind::Tca, sel.concept.clone(), layer, None)];
                let mut exits = 0;
                let mut pre_exits = 0;
                let mut band_means = Vec::new();
                let mut aligns = Vec::new();
                let mut max_single: f64 = 0.0;
                for (pos, &i) in eval.iter().enumerate() {
                    let s = &ds.series[i];
                    if !s.delta[ci] {
                        continue;
                    }
                    let band = scores::null_band(&traces[pos], layer, &dirs, mode)?;
                    let ts = s.t_start[ci];
                    if band.exceeded_after(&true_scores[pos], ts) {
                        exits += 1;
                    }
                    let pre = ScoreSeries {
                        values: true_scores[pos].values[..ts].to_vec(),
                        ..true_scores[pos].clone()
                    };
                    if band.exceeded_after(&pre, 0) {
                        pre_exits += 1;
                    }
                    max_single = band
                        .mean
                        .iter()
                        .filter(|m| m.is_finite())
                        .fold(max_single, |acc, m| acc.max(m.abs()));
                    band_means.push(ScoreSeries {
                        kind: ScoreKind::Tca,
                        concept: sel.concept.clone(),
                        layer,
                        series_id: i,
                        lag: None,
                        values: band.mean.iter().map(|m| m.is_finite().then_some(*m)).collect(),
                        degenerate: vec![false; s.length],
                    });
                    aligns.push(synthgen::align_to_changepoint(&[s], ci, cfg.scores.pivot)?[0]);
                }
                let n = band_means.len();
                if n == 0 {
                    continue;
                }
                let refs: Vec<&ScoreSeries> = band_means.iter().collect();
                let mean_band = scores::aggregate_scores(&refs, &aligns)?;
                let max_abs_mean = mean_band
                    .mean
                    .iter()
                    .zip(&mean_band.n)
                    .filter(|(_, &c)| c > 0)
                    .fold(0.0_f64, |acc, (m, _)| acc.max(m.abs()));
                self.log(format!(
                    "scores: {} layer {layer} null band: exit fraction {:.3}, max |mean| {:.4}",
                    sel.concept,
                    exits as f64 / n as f64,
                    max_abs_mean
                ));
                null.push(NullSummary {
                    concept: sel.concept.clone(),
                    layer,
                    n_null: dirs.len(),
                    n_series: n,
                    exit_fraction: exits as f64 / n as f64,
                    pre_change_exit_fraction: pre_exits as f64 / n as f64,
                    max_abs_mean,
                    max_abs_mean_per_series: max_single,
                    mean_band,
                });
            }
        }

        let summary = ScoresSummary {
            pivot: cfg.scores.pivot,
            tca_mode: mode,
            strategy: cfg.scores.strategy,
            n_series: eval.len(),
            trajectories,
            null,
        };
        let dir = self.stage_dir(Stage::Scores);
        write_trajectories(&dir, &summary)?;
        io::write_json(&dir.join("summary.json"), &summary)
    }

    fn attribute(&mut self) -> Result<()> {
        let cfg = self.config;
        let dir = self.stage_dir(Stage::Attribute);
        let (ds, model) = self.load_both()?;
        let test: Vec<usize> = ds.splits.test.iter().copied().take(cfg.attribution.n_series).collect();
        let n_targets = ds.config.n_targets();
        let linked_features: Vec<Vec<usize>> = (0..n_targets)
            .map(|k| {
                let concepts: Vec<usize> = match ds.config.scenario {
                    Scenario::Independent => vec![k],
                    _ => (0..ds.config.concepts.len()).collect(),
                };
                (0..ds.config.n_features)
                    .filter(|&d| concepts.iter().any(|&c| ds.config.concepts[c].feature_likelihoods[d] > 0.0))
                    .collect()
            })
            .collect();
        let mut rankings = Vec::new();
        let mut methods = vec![Method::Gradient];
        if cfg.attribution.occlusion {
            methods.push(Method::Occlusion);
        }
        for k in 0..n_targets {
            for &method in &methods {
                let tables = test
                    .iter()
                    .map(|&i| match method {
                        Method::Gradient => attribution::gradient_attr(model, &ds.series[i], k),
                        Method::Occlusion => attribution::occlusion_attr(model, &ds.series[i], k),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<_> = tables.iter().collect();
                let aggregates: &[(&str, bool)] = match method {
                    Method::Gradient => &[("absolute", true)],
                    Method::Occlusion => &[("signed", false), ("absolute", true)],
                };
                for &(aggregate, absolute) in aggregates {
                    let (linked_after, unlinked_after) =
                        change_point_means(ds, &test, &tables, &linked_features[k], k, absolute);
                    rankings.push(RankingRecord {
                        method,
                        aggregate: aggregate.into(),
                        target: k,
                        ranking: attribution::global_ranking(&refs, absolute)?,
                        linked_after_change: linked_after,
                        unlinked_after_change: unlinked_after,
                    });
                }
            }
        }
        let summary = AttributionSummary {
            n_series: test.len(),
            top_k: cfg.attribution.top_k,
            linked_features,
            rankings,
        };
        for r in &summary.rankings {
            attribution::write_ranking_csv(
                &dir.join(format!("ranking_{}_{}_y{}.csv", r.method.name(), r.aggregate, r.target)),
                &r.ranking,
                &ds.config.feature_kinds,
            )?;
        }
        io::write_json(&dir.join("summary.json"), &summary)
    }
}

/// Mean score of linked and unlinked features over timesteps at or after the
/// governing change point, for series where target `k`'s concept is present.
fn change_point_means(
    ds: &Dataset,
    idx: &[usize],
    tables: &[attribution::AttributionTable],
    linked: &[usize],
    k: usize,
    absolute: bool,
) -> (Option<f64>, Option<f64>) {
    if ds.config.scenario != Scenario::Independent {
        return (None, None);
    }
    let mut acc = [(0.0, 0usize); 2];
    for (&i, tab) in idx.iter().zip(tables) {
        let s = &ds.series[i];
        if !s.delta[k] {
            continue;
        }
        for t in s.t_start[k]..s.length {
            for d in 0..tab.n_features {
                let v = tab.score(t, d);
                let v = if absolute { v.abs() } else { v };
                let slot = usize::from(!linked.contains(&d));
                acc[slot].0 += v;
                acc[slot].1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(acc[0]), mean(acc[1]))
}

pub(super) fn write_trajectories(dir: &std::path::Path, summary: &ScoresSummary) -> Result<()> {
    for (kind, file) in [(ScoreKind::Tca, "tca_trajectories.csv"), (ScoreKind::Cs, "cs_trajectories.csv")] {
        let cohorts: Vec<(String, &Trajectory)> = summary
            .trajectories
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| (c.label(), &c.trajectory))
            .collect();
        scores::write_trajectories_csv(&dir.join(file), &cohorts)?;
    }
    Ok(())
}
