#![allow(dead_code)]

use rand::Rng as _;
use tcav_core::cohort;
use tcav_core::numerics::{central_difference, grad_check, Tensor};
use tcav_core::rng::{Rng, SeedTree};
use tcav_core::rnn::{LstmParams, ModelSpec, OutputKind, StepGraph, StepInput, TrainedModel, UnrolledLoss};
use tcav_core::stats;
use tcav_core::synthgen::LabeledSeries;

pub const FD_EPS: f64 = 1e-5;

pub fn rng(seed: u64, path: &str) -> Rng {
    SeedTree::new(seed).stream(path)
}

pub fn random_spec(r: &mut Rng) -> ModelSpec {
    ModelSpec {
        n_layers: r.random_range(1..=3),
        hidden_size: r.random_range(2..=5),
        input_size: r.random_range(1..=4),
        n_targets: r.random_range(1..=2),
    }
}

/// Initialised parameters stretched by a random factor so gates leave the
/// linear regime.
pub fn random_params(spec: ModelSpec, r: &mut Rng) -> LstmParams<f64> {
    let mut p = LstmParams::init(spec, r);
    let scale = r.random_range(0.5..2.5);
    for l in &mut p.layers {
        l.w.iter_mut().for_each(|w| *w *= scale);
        l.b.iter_mut().for_each(|b| *b *= scale);
    }
    p.head_w.iter_mut().for_each(|w| *w *= scale);
    p
}

pub fn random_series(spec: ModelSpec, length: usize, r: &mut Rng) -> LabeledSeries {
    let d = spec.input_size;
    let k = spec.n_targets;
    LabeledSeries {
        length,
        n_features: d,
        n_targets: k,
        x: (0..length * d).map(|_| r.random_range(-1.5..1.5)).collect(),
        y: (0..length * k).map(|_| r.random_range(0..2u8)).collect(),
        delta: vec![false; k],
        t_start: vec![0; k],
        lambda: vec![vec![false; d]; k],
    }
}

fn random_vec(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// One LSTM step (all layers) with random previous states: gradient of each
/// output with respect to the input features.
pub fn lstm_cell_error(seed: u64) -> f64 {
    let mut r = rng(seed, "lstm-cell");
    let spec = random_spec(&mut r);
    let params = random_params(spec, &mut r);
    let rows = r.random_range(1..=3);
    let kind = if r.random_bool(0.5) { OutputKind::Probability } else { OutputKind::Logit };
    let mut g = StepGraph::new(&params, rows, StepInput::Features, kind).unwrap();
    for l in g.state_layers() {
        let h = random_vec(rows * spec.hidden_size, &mut r);
        let c = random_vec(rows * spec.hidden_size, &mut r);
        g.set_state(l, &h, &c).unwrap();
    }
    let x = Tensor::new(vec![rows, spec.input_size], random_vec(rows * spec.input_size, &mut r)).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..spec.n_targets {
        let err = grad_check(
            |p| {
                g.set_input(p.data())?;
                let (out, grad) = g.gradient(k)?;
                let value: f64 = out.chunks_exact(spec.n_targets).map(|row| row[k]).sum();
                Ok((value, Tensor::new(p.shape().to_vec(), grad)?))
            },
            &x,
            FD_EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Full unrolled mean cross-entropy: gradient with respect to every
/// parameter tensor.
pub fn unrolled_loss_error(seed: u64) -> f64 {
    let mut r = rng(seed, "unrolled");
    let spec = ModelSpec {
        n_layers: r.random_range(1..=3),
        hidden_size: r.random_range(2..=4),
        input_size: r.random_range(1..=3),
        n_targets: r.random_range(1..=2),
    };
    let batch = r.random_range(1..=3);
    let length = r.random_range(2..=6);
    let params = random_params(spec, &mut r);
    let series: Vec<LabeledSeries> = (0..batch).map(|_| random_series(spec, length, &mut r)).collect();
    let refs: Vec<&LabeledSeries> = series.iter().collect();
    let mut u = UnrolledLoss::<f64>::new(spec, batch, length).unwrap();
    u.set_params(&params).unwrap();
    u.set_batch(&refs).unwrap();
    let tensors = params.named_tensors();
    let mut worst: f64 = 0.0;
    for (i, (_, t)) in tensors.iter().enumerate() {
        let err = grad_check(
            |p| {
                u.set_param(i, p.data())?;
                let loss = u.loss_and_grad()?;
                Ok((loss, Tensor::new(p.shape().to_vec(), u.param_grad(i).to_vec())?))
            },
            t,
            FD_EPS,
        )
        .unwrap();
        u.set_param(i, t.data()).unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Gradient of an output with respect to one layer's activation, checked
/// against the direct (graph-free) forward with that activation replaced.
pub fn grad_activation_error(seed: u64) -> f64 {
    let mut r = rng(seed, "grad-activation");
    let spec = random_spec(&mut r);
    let model = TrainedModel::from_params(random_params(spec, &mut r));
    let length = r.random_range(1..=6);
    let s = random_series(spec, length, &mut r);
    let layer = r.random_range(0..spec.n_layers);
    let t = r.random_range(0..length);
    let k = r.random_range(0..spec.n_targets);
    let kind = if r.random_bool(0.5) { OutputKind::Probability } else { OutputKind::Logit };
    let run = model.run(&s).unwrap();
    let a = Tensor::vector(run.hidden(t, layer).to_vec());
    grad_check(
        |p| {
            let v = model.output_with_activation(&s, layer, t, p.data(), k, kind)?;
            let g = model.grad_output_wrt_activation_at(&s, layer, &[t], k, kind)?;
            // gradient at the unperturbed activation; grad_check reads it only at `a`
            Ok((v, Tensor::vector(g)))
        },
        &a,
        FD_EPS,
    )
    .unwrap()
}

/// Instantaneous input gradient at `t`, checked against full re-runs of the
/// network with `x_t` perturbed.
pub fn grad_input_error(seed: u64) -> f64 {
    let mut r = rng(seed, "grad-input");
    let spec = random_spec(&mut r);
    let model = TrainedModel::from_params(random_params(spec, &mut r));
    let length = r.random_range(1..=6);
    let s = random_series(spec, length, &mut r);
    let t = r.random_range(0..length);
    let k = r.random_range(0..spec.n_targets);
    let analytic = model.grad_output_wrt_inputs(&s, t, k).unwrap();
    let x = Tensor::vector(s.x_at(t).to_vec());
    let numeric = central_difference(
        |p| {
            let mut s2 = s.clone();
            let d = spec.input_size;
            s2.x[t * d..(t + 1) * d].copy_from_slice(p.data());
            Ok(model.predict(&s2)?[t * spec.n_targets + k])
        },
        &x,
        FD_EPS,
    )
    .unwrap();
    analytic
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision with ties ranked in input order.
pub fn brute_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let rank = |i: usize| {
        (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
            .collect::<Vec<_>>()
    };
    let mut total = 0.0;
    let mut n_pos = 0;
    for i in 0..scores.len() {
        if labels[i] {
            let above = rank(i);
            let hits = above.iter().filter(|&&j| labels[j]).count();
            total += hits as f64 / above.len() as f64;
            n_pos += 1;
        }
    }
    total / n_pos as f64
}

/// Largest deviation between the library metrics and the brute-force
/// oracles on one random instance (scores drawn on a coarse grid to force
/// ties).
pub fn metric_oracle_error(seed: u64) -> f64 {
    let mut r = rng(seed, "metrics");
    let n = r.random_range(2..=50);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let grid = r.random_range(2..=20) as f64;
    let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0.0..1.0) * grid).floor() / grid).collect();
    let a = (stats::auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs();
    let b = (stats::auprc(&scores, &labels).unwrap() - brute_auprc(&scores, &labels)).abs();
    a.max(b)
}

/// Cheapest injective assignment by enumerating every one.
pub fn brute_assignment(cost: &[f64], n: usize, p: usize) -> f64 {
    fn go(row: usize, n: usize, p: usize, cost: &[f64], used: &mut [bool], acc: f64, best: &mut f64) {
        if row == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..p {
            if !used[c] {
                used[c] = true;
                go(row + 1, n, p, cost, used, acc + cost[row * p + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, p, cost, &mut vec![false; p], 0.0, &mut best);
    best
}

/// `(library cost - exhaustive optimum, assignment is injective and its cost
/// is consistent)`.
pub fn hungarian_oracle(seed: u64) -> (f64, bool) {
    let mut r = rng(seed, "hungarian");
    let n = r.random_range(1..=7);
    let p = r.random_range(n..=7);
    let cost: Vec<f64> = (0..n * p).map(|_| r.random_range(0.0..10.0)).collect();
    let a = cohort::hungarian(&cost, n, p).unwrap();
    let mut cols: Vec<usize> = a.pairs.iter().map(|&(_, c)| c).collect();
    cols.sort_unstable();
    cols.dedup();
    let recomputed: f64 = a.pairs.iter().map(|&(i, j)| cost[i * p + j]).sum();
    let consistent = a.pairs.len() == n && cols.len() == n && (recomputed - a.total_cost).abs() < 1e-9;
    (a.total_cost - brute_assignment(&cost, n, p), consistent)
}

/// Occlusion by re-running the whole network on a copy of the series with
/// one cell zeroed.
pub fn naive_occlusion(model: &TrainedModel, s: &LabeledSeries, k: usize) -> Vec<f64> {
    let base = model.predict(s).unwrap();
    let kk = model.spec().n_targets;
    let mut out = Vec::with_capacity(s.length * s.n_features);
    for t in 0..s.length {
        for i in 0..s.n_features {
            let mut s2 = s.clone();
            s2.x[t * s.n_features + i] = 0.0;
            let p = model.predict(&s2).unwrap();
            out.push(base[t * kk + k] - p[t * kk + k]);
        }
    }
    out
}
