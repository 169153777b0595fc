//! Classification metrics and resampling.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

/// Maximum redraws of a bootstrap resample lacking a class.
pub const MAX_RESAMPLE_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl MetricReport {
    /// All three metrics; `threshold` applies to balanced accuracy only.
    pub fn compute(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Self> {
        check_lengths(scores, labels)?;
        Ok(Self {
            balanced_accuracy: balanced_accuracy(scores, labels, threshold)?,
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            n_pos: labels.iter().filter(|&&l| l).count(),
            n_neg: labels.iter().filter(|&&l| !l).count(),
        })
    }

    /// Metric means across reports; class counts are pooled.
    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            balanced_accuracy: reports.iter().map(|r| r.balanced_accuracy).sum::<f64>() / n,
            auroc: reports.iter().map(|r| r.auroc).sum::<f64>() / n,
            auprc: reports.iter().map(|r| r.auprc).sum::<f64>() / n,
            n_pos: reports.iter().map(|r| r.n_pos).sum(),
            n_neg: reports.iter().map(|r| r.n_neg).sum(),
        })
    }
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    Ok(())
}

/// Area under the ROC curve in its Mann-Whitney form, ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auroc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += midrank * pos_in_tie as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives of the precision at each
/// positive's rank, ranking by descending score with ties kept in input order.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Invalid("auprc needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps input order among ties
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// Mean of sensitivity and specificity, predicting positive when `score >= threshold`.
pub fn balanced_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        if l {
            pos += 1;
            tp += usize::from(pred);
        } else {
            neg += 1;
            tn += usize::from(!pred);
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass("balanced accuracy"));
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Plain accuracy with the same `score >= threshold` rule.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    if labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let right = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(right as f64 / labels.len() as f64)
}

/// Add-one smoothed upper-tail permutation p-value.
pub fn permutation_pvalue(observed: f64, nulls: &[f64]) -> f64 {
    let exceed = nulls.iter().filter(|&&v| v >= observed).count();
    (1 + exceed) as f64 / (1 + nulls.len()) as f64
}

/// One bootstrap draw over resampling units (series or samples).
#[derive(Clone, Debug, PartialEq)]
pub struct Resample {
    /// How many times each unit was drawn.
    pub counts: Vec<usize>,
    /// Units never drawn, in increasing order.
    pub out_of_bag: Vec<usize>,
}

impl Resample {
    pub fn drawn(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(u, &c)| (u, c))
    }
}

/// Draw a resample whose in-bag and out-of-bag parts both contain each class.
pub fn draw_resample(unit_labels: &[bool], stratified: bool, rng: &mut crate::rng::Rng) -> Result<Resample> {
    let pos: Vec<usize> = (0..unit_labels.len()).filter(|&u| unit_labels[u]).collect();
    let neg: Vec<usize> = (0..unit_labels.len()).filter(|&u| !unit_labels[u]).collect();
    let min_per_class = if stratified { 2 } else { 1 };
    if pos.len() < min_per_class || neg.len() < min_per_class {
        return Err(Error::SingleClass("bootstrap resampling"));
    }
    for _ in 0..MAX_RESAMPLE_RETRIES {
        let mut counts = vec![0usize; unit_labels.len()];
        if stratified {
            for group in [&pos, &neg] {
                for _ in 0..group.len() {
                    counts[group[rng.random_range(0..group.len())]] += 1;
                }
            }
        } else {
            for _ in 0..unit_labels.len() {
                counts[rng.random_range(0..unit_labels.len())] += 1;
            }
        }
        let out_of_bag: Vec<usize> = (0..counts.len()).filter(|&u| counts[u] == 0).collect();
        let in_bag_classes = |class: bool| (0..counts.len()).any(|u| counts[u] > 0 && unit_labels[u] == class);
        let oob_classes = |class: bool| out_of_bag.iter().any(|&u| unit_labels[u] == class);
        let valid = in_bag_classes(true) && in_bag_classes(false) && oob_classes(true) && oob_classes(false);
        if valid {
            return Ok(Resample { counts, out_of_bag });
        }
    }
    Err(Error::ResampleRetries(MAX_RESAMPLE_RETRIES))
}

/// Run `k` bootstrap rounds; round `i` draws from stream `boot/{i}` of `seeds`
/// and `fit_and_score` fits in-bag and scores out-of-bag.
pub fn bootstrap_eval<F>(
    unit_labels: &[bool],
    k: usize,
    stratified: bool,
    seeds: &SeedTree,
    mut fit_and_score: F,
) -> Result<Vec<MetricReport>>
where
    F: FnMut(usize, &Resample, &mut crate::rng::Rng) -> Result<MetricReport>,
{
    (0..k)
        .map(|i| {
            let mut rng = seeds.stream(&format!("boot/{i}"));
            let resample = draw_resample(unit_labels, stratified, &mut rng)?;
            fit_and_score(i, &resample, &mut rng)
        })
        .collect()
}

/// Shuffle unit labels; used to build permutation nulls.
pub fn permute_labels(labels: &[bool], rng: &mut crate::rng::Rng) -> Vec<bool> {
    let mut out = labels.to_vec();
    out.shuffle(rng);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Mean of the per-bootstrap out-of-bag reports.
    pub observed: MetricReport,
    pub bootstrap: Vec<MetricReport>,
    pub null_samples: Vec<MetricReport>,
    pub p_balanced_acc: f64,
    pub p_auroc: f64,
    pub alpha: f64,
    pub significant: bool,
}

impl SignificanceResult {
    pub fn from_reports(bootstrap: Vec<MetricReport>, null_samples: Vec<MetricReport>, alpha: f64) -> Result<Self> {
        let observed = MetricReport::mean(&bootstrap)
            .ok_or_else(|| Error::Invalid("no bootstrap reports".into()))?;
        if null_samples.is_empty() {
            return Err(Error::Invalid("no null samples".into()));
        }
        let null_acc: Vec<f64> = null_samples.iter().map(|r| r.balanced_accuracy).collect();
        let null_auc: Vec<f64> = null_samples.iter().map(|r| r.auroc).collect();
        let p_balanced_acc = permutation_pvalue(observed.balanced_accuracy, &null_acc);
        let p_auroc = permutation_pvalue(observed.auroc, &null_auc);
        Ok(Self {
            observed,
            bootstrap,
            null_samples,
            p_balanced_acc,
            p_auroc,
            alpha,
            significant: p_balanced_acc < alpha && p_auroc < alpha,
        })
    }

    /// Verdict after Bonferroni correction over `comparisons` tests.
    pub fn significant_bonferroni(&self, comparisons: usize) -> bool {
        let a = self.alpha / comparisons.max(1) as f64;
        self.p_balanced_acc < a && self.p_auroc < a
    }

    /// Standard deviation of the bootstrap balanced accuracy and AUROC.
    pub fn bootstrap_std(&self) -> (f64, f64) {
        let acc: Vec<f64> = self.bootstrap.iter().map(|r| r.balanced_accuracy).collect();
        let auc: Vec<f64> = self.bootstrap.iter().map(|r| r.auroc).collect();
        (mean_std(&acc).1, mean_std(&auc).1)
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` for an empty slice.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Linear-interpolated quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn auroc_examples() {
        // pairwise count: (0.35 vs 0.1) ok, (0.35 vs 0.4) wrong, 0.8 beats both -> 3/4
        let a = auroc(&[0.1, 0.4, 0.35, 0.8], &labels(&[0, 0, 1, 1])).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &labels(&[0, 0, 1, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &labels(&[0, 1, 0, 1])).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &labels(&[1, 1])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.2, 0.1], &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.8, 0.7], &labels(&[0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auprc(&[0.3, 0.1, 0.7], &labels(&[1, 1, 1])).unwrap(), 1.0);
        assert!(auprc(&[0.3, 0.1], &labels(&[0, 0])).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        let y = labels(&[1, 1, 0, 0]);
        assert_eq!(balanced_accuracy(&[0.9, 0.8, 0.1, 0.2], &y, 0.5).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0.7; 4], &y, 0.5).unwrap(), 0.5);
        // sensitivity 1, specificity 0.5
        assert_eq!(balanced_accuracy(&[0.9, 0.8, 0.6, 0.2], &y, 0.5).unwrap(), 0.75);
        // tie goes to the positive class
        assert_eq!(accuracy(&[0.5], &[true], 0.5).unwrap(), 1.0);
        assert!(balanced_accuracy(&[0.1], &[true], 0.5).is_err());
    }

    #[test]
    fn pvalue_examples() {
        let nulls: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        assert!((permutation_pvalue(2.0, &nulls) - 1.0 / 1001.0).abs() < 1e-15);
        let p = permutation_pvalue(0.5, &nulls);
        assert!((p - 0.5).abs() < 0.01, "{p}");
        assert!(permutation_pvalue(10.0, &[0.0]) > 0.0);
    }

    #[test]
    fn perfect_fitter_single_round() {
        let unit_labels = labels(&[1, 1, 1, 0, 0, 0]);
        let seeds = SeedTree::new(3);
        let reports = bootstrap_eval(&unit_labels, 1, true, &seeds, |_, rs, _| {
            let scores: Vec<f64> = rs
                .out_of_bag
                .iter()
                .map(|&u| if unit_labels[u] { 1.0 } else { 0.0 })
                .collect();
            let y: Vec<bool> = rs.out_of_bag.iter().map(|&u| unit_labels[u]).collect();
            MetricReport::compute(&scores, &y, 0.5)
        })
        .unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].balanced_accuracy, 1.0);
        assert_eq!(reports[0].auroc, 1.0);
        assert_eq!(reports[0].auprc, 1.0);
    }

    #[test]
    fn stratified_resamples_keep_both_classes() {
        let unit_labels = labels(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let mut rng = SeedTree::new(11).stream("t");
        for _ in 0..200 {
            let r = draw_resample(&unit_labels, true, &mut rng).unwrap();
            let drawn_pos: usize = r.drawn().filter(|(u, _)| unit_labels[*u]).map(|(_, c)| c).sum();
            let drawn_neg: usize = r.drawn().filter(|(u, _)| !unit_labels[*u]).map(|(_, c)| c).sum();
            assert_eq!(drawn_pos, 4);
            assert_eq!(drawn_neg, 6);
            assert!(r.out_of_bag.iter().any(|&u| unit_labels[u]));
            assert!(r.out_of_bag.iter().any(|&u| !unit_labels[u]));
        }
    }

    #[test]
    fn resampling_gives_up_when_out_of_bag_cannot_hold_both_classes() {
        // two positives in a stratified draw of two: out-of-bag lacks positives 50% of the time,
        // but one positive alone can never be out-of-bag and in-bag at once
        let r = draw_resample(&labels(&[1, 0, 0]), false, &mut SeedTree::new(1).stream("x"));
        assert!(matches!(r, Err(Error::ResampleRetries(_))));
    }

    #[test]
    fn quantile_and_mean_std() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert!((quantile(&v, 0.25) - 2.0).abs() < 1e-12);
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!((m, s), (3.0, 1.0));
    }
}
