//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use beamlora::optim::Moments;
use beamlora::{
    AdamConfig, AdamState, AdapterModel, Factor, Layer, LoraAdapter, LossKind, ParamId, RunConfig,
    Tape, Targets, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PLANTED: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/planted.toml"));

pub fn planted_config() -> RunConfig {
    RunConfig::from_toml_str(PLANTED).expect("planted config parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Adapter with every tensor (base, B, A, logits) drawn at random.
pub fn random_adapter(d: usize, k: usize, r: usize, scored: bool, rng: &mut ChaCha8Rng) -> LoraAdapter<f64> {
    let scale = rng.random_range(0.5..2.0);
    LoraAdapter::from_parts(
        uniform(&[d, k], rng),
        uniform(&[d, r], rng),
        uniform(&[r, k], rng),
        uniform(&[r], rng).scale(2.0),
        scale,
        scored,
        0,
    )
    .unwrap()
}

/// Optimizer holding random moments (`v ≥ 0`) for every factor of adapter 0.
pub fn random_optimizer(ad: &LoraAdapter<f64>, rng: &mut ChaCha8Rng) -> AdamState<f64> {
    let mut opt = AdamState::new(AdamConfig::default());
    for f in Factor::ALL {
        let shape = ad.factor(f).shape().to_vec();
        let id = ParamId::new(0, f);
        opt.register(id, &shape);
        opt.set_moments(
            id,
            Moments {
                m: uniform(&shape, rng),
                v: positive(&shape, rng),
            },
        )
        .unwrap();
    }
    opt
}

/// `W0·x + scale·Σᵢ sᵢ·bᵢ·(aᵢ·x)` with explicit loops over plain slices.
pub fn rank_sum_forward(ad: &LoraAdapter<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (d, k, r, n) = (ad.out_dim(), ad.in_dim(), ad.rank(), x.cols());
    let w0 = ad.base().data();
    let b = ad.factor(Factor::B).data();
    let a = ad.factor(Factor::A).data();
    let s: Vec<f64> = if ad.is_scored() {
        let l = ad.factor(Factor::Logits).data();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    } else {
        vec![1.0; r]
    };
    let xd = x.data();
    let mut out = vec![0.0; d * n];
    for col in 0..n {
        for row in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                acc += w0[row * k + j] * xd[j * n + col];
            }
            for i in 0..r {
                let mut ax = 0.0;
                for j in 0..k {
                    ax += a[i * k + j] * xd[j * n + col];
                }
                acc += ad.scale() * s[i] * b[row * r + i] * ax;
            }
            out[row * n + col] = acc;
        }
    }
    out
}

/// Brute-force operable count: sort, accumulate, find the first prefix
/// reaching `p`, clamp.
pub fn operable_count_oracle(s: &[f64], p: f64) -> usize {
    if p >= 1.0 {
        return 0;
    }
    let r = s.len();
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut i_star = r;
    for (i, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= p - 1e-12 {
            i_star = i + 1;
            break;
        }
    }
    (r - i_star).min(r / 2)
}

/// Random probability vector of length `r`.
pub fn probability_vector(r: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..r).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// Two disjoint random index sets of size `k` out of `0..r`.
pub fn disjoint_sets(r: usize, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..r).collect();
    idx.shuffle(rng);
    (idx[..k].to_vec(), idx[k..2 * k].to_vec())
}

/// Random chain of frozen and adapted layers with matching dimensions,
/// plus a random input batch and targets for its loss.
pub struct GradCase {
    pub model: AdapterModel<f64>,
    pub x: Tensor<f64>,
    pub targets: Targets<f64>,
    pub train_scores: bool,
}

pub fn random_grad_case(rng: &mut ChaCha8Rng) -> GradCase {
    let n_layers = rng.random_range(1..=3);
    let mut dims: Vec<usize> = (0..=n_layers).map(|_| rng.random_range(2..=6)).collect();
    if n_layers == 1 {
        dims[1] = rng.random_range(2..=6);
    }
    let adapted_at = rng.random_range(0..n_layers);
    let layers: Vec<Layer<f64>> = (0..n_layers)
        .map(|i| {
            let (k, d) = (dims[i], dims[i + 1]);
            if i == adapted_at || rng.random_bool(0.5) {
                let r = rng.random_range(1..=d.min(k));
                let scored = rng.random_bool(0.75);
                Layer::Adapted(random_adapter(d, k, r, scored, rng))
            } else {
                Layer::Frozen(uniform(&[d, k], rng))
            }
        })
        .collect();
    let loss = if rng.random_bool(0.5) {
        LossKind::SquaredError
    } else {
        LossKind::CrossEntropy
    };
    let model = AdapterModel::new(layers, loss).unwrap();
    let batch = rng.random_range(1..=4);
    let x = uniform(&[dims[0], batch], rng);
    let out = dims[n_layers];
    let targets = match loss {
        LossKind::SquaredError => Targets::Regression(uniform(&[out, batch], rng)),
        LossKind::CrossEntropy => Targets::Classes((0..batch).map(|_| rng.random_range(0..out)).collect()),
    };
    GradCase {
        model,
        x,
        targets,
        train_scores: rng.random_bool(0.8),
    }
}

/// Largest relative error between tape gradients and central differences
/// of the value-path loss, over every trainable entry of the model.
pub fn max_gradient_error(case: &GradCase, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let vars = case
        .model
        .loss_on(&mut tape, &case.x, &case.targets, case.train_scores)
        .unwrap();
    let grads = tape.backward(vars.loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, av) in vars.adapters.iter().enumerate() {
        let mut entries = vec![(Factor::B, av.b), (Factor::A, av.a)];
        if let Some(l) = av.logits {
            entries.push((Factor::Logits, l));
        }
        for (factor, var) in entries {
            let analytic = grads.get(var).expect("trainable leaf has a gradient");
            for j in 0..analytic.len() {
                let loss_at = |delta: f64| {
                    let mut m = case.model.clone();
                    m.adapter_mut(i).unwrap().factor_mut(factor).data_mut()[j] += delta;
                    m.evaluate(&case.x, &case.targets).unwrap()
                };
                let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
                let g = analytic.data()[j];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
