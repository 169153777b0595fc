mod common;

use rand::Rng as _;
use tcav_core::cav::{Cav, LogisticModel, Strategy};
use tcav_core::rnn::{train, LstmParams, ModelSpec, OutputKind, TrainConfig, TrainedModel};
use tcav_core::scores::{self, TcaMode};
use tcav_core::stats::MetricReport;
use tcav_core::synthgen::LabeledSeries;

fn cav_along(direction: Vec<f64>, layer: usize) -> Cav {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    Cav {
        concept: "X".into(),
        layer,
        strategy: Strategy::FullWindow,
        direction: direction.iter().map(|v| v / norm).collect(),
        model: LogisticModel {
            weights: direction,
            bias: 0.0,
            iterations: 0,
            grad_norm: 0.0,
        },
        fit_report: MetricReport {
            balanced_accuracy: 1.0,
            auroc: 1.0,
            auprc: 1.0,
            n_pos: 1,
            n_neg: 1,
        },
        significance: None,
        generalization: None,
    }
}

fn random_model(seed: u64, path: &str) -> (TrainedModel, LabeledSeries, tcav_core::rng::Rng) {
    let mut r = common::rng(seed, path);
    let spec = common::random_spec(&mut r);
    let model = TrainedModel::from_params(common::random_params(spec, &mut r));
    let s = common::random_series(spec, 10, &mut r);
    (model, s, r)
}

#[test]
fn perturbing_the_future_leaves_the_past_unchanged() {
    for seed in 0..50 {
        let (model, s, mut r) = random_model(seed, "causality");
        let t = r.random_range(0..s.length);
        let mut s2 = s.clone();
        for v in &mut s2.x[t * s.n_features..] {
            *v += r.random_range(-3.0..3.0);
        }
        let (a, b) = (model.predict(&s).unwrap(), model.predict(&s2).unwrap());
        let k = model.spec().n_targets;
        assert_eq!(a[..t * k], b[..t * k], "seed {seed}");
    }
}

#[test]
fn zero_weights_give_half_probability_and_degenerate_tca() {
    let spec = ModelSpec {
        n_layers: 2,
        hidden_size: 3,
        input_size: 2,
        n_targets: 2,
    };
    let model = TrainedModel::from_params(LstmParams::zeros(spec));
    let mut r = common::rng(0, "zero");
    let s = common::random_series(spec, 8, &mut r);
    assert!(model.predict(&s).unwrap().iter().all(|&p| p == 0.5));
    let trace = model.activations(&s).unwrap();
    let t = scores::tca(&trace, &cav_along(vec![1.0, 0.5, -1.0], 1), TcaMode::Difference(2), 0).unwrap();
    for (v, d) in t.values.iter().zip(&t.degenerate).skip(2) {
        assert_eq!(*v, Some(0.0));
        assert!(d);
    }
    let cs = scores::cs(&model, &s, &cav_along(vec![1.0, 0.0, 0.0], 1), 0, OutputKind::Probability, 0).unwrap();
    assert!(cs.values.iter().all(|v| *v == Some(0.0)));
}

#[test]
fn top_layer_cs_matches_closed_form() {
    for seed in 0..50 {
        let (model, s, mut r) = random_model(seed, "cs-closed");
        let spec = model.spec();
        let top = spec.n_layers - 1;
        let v: Vec<f64> = (0..spec.hidden_size).map(|_| r.random_range(-1.0..1.0)).collect();
        let cav = cav_along(v, top);
        let k = r.random_range(0..spec.n_targets);
        let run = model.run(&s).unwrap();
        let cs = scores::cs(&model, &s, &cav, k, OutputKind::Probability, 0).unwrap();
        for t in 0..s.length {
            let z = run.logit(t, k);
            let sig = 1.0 / (1.0 + (-z).exp());
            let wv: f64 = (0..spec.hidden_size)
                .map(|j| model.params.head_w[j * spec.n_targets + k] * cav.direction[j])
                .sum();
            let expected = sig * (1.0 - sig) * wv;
            let got = cs.values[t].unwrap();
            assert!((got - expected).abs() < 1e-10, "seed {seed} t {t}: {got} vs {expected}");
        }
    }
}

#[test]
fn cs_sign_agrees_with_a_nudge_along_the_cav() {
    let eps = 1e-4;
    for seed in 0..30 {
        let (model, s, mut r) = random_model(seed, "cs-sign");
        let spec = model.spec();
        let layer = r.random_range(0..spec.n_layers);
        let v: Vec<f64> = (0..spec.hidden_size).map(|_| r.random_range(-1.0..1.0)).collect();
        let cav = cav_along(v, layer);
        let k = r.random_range(0..spec.n_targets);
        let run = model.run(&s).unwrap();
        let cs = scores::cs(&model, &s, &cav, k, OutputKind::Probability, 0).unwrap();
        for t in 0..s.length {
            let a = run.hidden(t, layer);
            let nudged: Vec<f64> = a.iter().zip(&cav.direction).map(|(x, d)| x + eps * d).collect();
            let base = model.output_with_activation(&s, layer, t, a, k, OutputKind::Probability).unwrap();
            let moved = model.output_with_activation(&s, layer, t, &nudged, k, OutputKind::Probability).unwrap();
            let c = cs.values[t].unwrap();
            if c.abs() > 1e-8 {
                assert_eq!(c > 0.0, moved > base, "seed {seed} t {t}: cs {c}, change {}", moved - base);
            }
        }
    }
}

#[test]
fn tca_is_bounded_scale_invariant_and_odd() {
    for seed in 0..20 {
        let (model, s, mut r) = random_model(seed, "tca");
        let spec = model.spec();
        let trace = model.activations(&s).unwrap();
        let layer = r.random_range(0..spec.n_layers);
        let v: Vec<f64> = (0..spec.hidden_size).map(|_| r.random_range(-1.0..1.0)).collect();
        for mode in [TcaMode::Instant, TcaMode::Difference(3)] {
            let base = scores::tca_values(&trace, layer, &v, mode).unwrap().0;
            let scaled: Vec<f64> = v.iter().map(|x| 3.5 * x).collect();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let a = scores::tca_values(&trace, layer, &scaled, mode).unwrap().0;
            let b = scores::tca_values(&trace, layer, &neg, mode).unwrap().0;
            for t in 0..s.length {
                if let Some(x) = base[t] {
                    assert!(x.abs() <= 1.0);
                    assert!((a[t].unwrap() - x).abs() < 1e-12);
                    assert!((b[t].unwrap() + x).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let spec = ModelSpec {
        n_layers: 2,
        hidden_size: 4,
        input_size: 3,
        n_targets: 2,
    };
    let mut r = common::rng(5, "train-data");
    let data: Vec<LabeledSeries> = (0..12).map(|_| common::random_series(spec, 7, &mut r)).collect();
    let refs: Vec<&LabeledSeries> = data.iter().collect();
    let config = TrainConfig {
        steps: 20,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(spec, &refs, &config).unwrap();
    let b = train(spec, &refs, &config).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}
