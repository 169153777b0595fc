mod common;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use tcav_core::cav::{self, FitOptions, SampleSet, SignificanceOptions, Strategy};
use tcav_core::rng::SeedTree;

/// `units` series with `rows` samples each; class means differ by `gap`
/// along the first axis.
fn blobs(seed: u64, units: usize, rows: usize, dim: usize, gap: f64) -> SampleSet {
    let mut r = common::rng(seed, "blobs");
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut set = SampleSet {
        dim,
        x: Vec::new(),
        labels: Vec::new(),
        unit: Vec::new(),
        unit_labels: Vec::new(),
    };
    for u in 0..units {
        let label = u % 2 == 0;
        set.unit_labels.push(label);
        for _ in 0..rows {
            for j in 0..dim {
                let shift = if j == 0 && label { gap } else { 0.0 };
                set.x.push(noise.sample(&mut r) + shift);
            }
            set.labels.push(label);
            set.unit.push(u);
        }
    }
    set
}

fn quick_significance() -> SignificanceOptions {
    SignificanceOptions {
        bootstraps: 20,
        permutations_per_bootstrap: 2,
        ..SignificanceOptions::default()
    }
}

#[test]
fn separable_concept_gives_unit_direction_and_significance() {
    let set = blobs(1, 40, 5, 6, 4.0);
    let opts = FitOptions::default();
    let c = cav::fit_cav(&set, "C", 0, Strategy::FullWindow, &opts).unwrap();
    let norm: f64 = c.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    assert!(c.direction[0] > 0.9, "{:?}", c.direction);
    let sig = cav::assess_significance(&set, &quick_significance(), &opts, &SeedTree::new(3)).unwrap();
    assert!(sig.observed.balanced_accuracy > 0.95);
    assert!(sig.significant);
}

#[test]
fn decisions_ignore_positive_rescaling() {
    let set = blobs(2, 20, 3, 4, 1.0);
    let c = cav::fit_cav(&set, "C", 0, Strategy::EndPoint, &FitOptions::default()).unwrap();
    let mut scaled = c.model.clone();
    scaled.weights.iter_mut().for_each(|w| *w *= 7.0);
    scaled.bias *= 7.0;
    for i in 0..set.len() {
        let row = set.row(i);
        assert_eq!(c.model.decision(row) >= 0.0, scaled.decision(row) >= 0.0);
    }
}

#[test]
fn permuted_labels_sit_in_the_chance_band() {
    let mut total = 0.0;
    for rep in 0..20 {
        let mut set = blobs(100 + rep, 30, 4, 5, 3.0);
        let mut r = common::rng(rep, "permute");
        let mut perm = set.unit_labels.clone();
        perm.shuffle(&mut r);
        set.unit_labels = perm;
        set.labels = set.unit.iter().map(|&u| set.unit_labels[u]).collect();
        let sig = SignificanceOptions {
            bootstraps: 20,
            permutations_per_bootstrap: 1,
            ..SignificanceOptions::default()
        };
        let res = cav::assess_significance(&set, &sig, &FitOptions::default(), &SeedTree::new(rep)).unwrap();
        total += res.observed.balanced_accuracy;
    }
    let mean = total / 20.0;
    assert!((0.4..=0.6).contains(&mean), "mean balanced accuracy {mean}");
}

#[test]
fn fits_and_significance_are_deterministic() {
    let set = blobs(4, 20, 3, 4, 1.5);
    let opts = FitOptions::default();
    let a = cav::fit_cav(&set, "C", 1, Strategy::Difference, &opts).unwrap();
    let b = cav::fit_cav(&set, "C", 1, Strategy::Difference, &opts).unwrap();
    assert_eq!(a, b);
    let seeds = SeedTree::new(8);
    let sa = cav::assess_significance(&set, &quick_significance(), &opts, &seeds).unwrap();
    let sb = cav::assess_significance(&set, &quick_significance(), &opts, &seeds).unwrap();
    assert_eq!(sa, sb);
    let na = cav::permuted_directions(&set, 5, &opts, &seeds).unwrap();
    assert_eq!(na, cav::permuted_directions(&set, 5, &opts, &seeds).unwrap());
}

#[test]
fn cavs_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let set = blobs(5, 10, 3, 3, 2.0);
    let opts = FitOptions::default();
    let mut r = common::rng(5, "layers");
    let cavs: Vec<_> = Strategy::ALL
        .iter()
        .map(|&s| {
            let mut c = cav::fit_cav(&set, "C", r.random_range(0..3), s, &opts).unwrap();
            c.significance = Some(cav::assess_significance(&set, &quick_significance(), &opts, &SeedTree::new(1)).unwrap());
            c
        })
        .collect();
    cav::save_cavs(dir.path(), "C", &cavs).unwrap();
    assert_eq!(cav::load_cavs(dir.path()).unwrap(), cavs);
}
