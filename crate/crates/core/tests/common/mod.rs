//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use biolip::network::{backward, forward, Batch, Mode, ModelParams};
use biolip::training::{weighted_bce_grad, weighted_bce_logits};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_batch(rows: usize, len: usize, dim: usize, seed: u64) -> (Batch, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let batch = Batch {
        len: rows,
        window_len: len,
        input_dim: dim,
        temporal: gen(rows * len * dim),
        stats: gen(rows * dim),
        region: gen(rows * 8),
    };
    let labels = (0..rows).map(|i| (i % 2) as f64).collect();
    (batch, labels)
}

/// Train-mode loss with a fixed dropout stream.
pub fn loss_at(params: &ModelParams, batch: &Batch, labels: &[f64], dropout_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (logits, _) = forward(batch, params, Mode::Train, &mut rng).unwrap();
    weighted_bce_logits(&logits, labels, 0.8)
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients against central differences at `n_params`
/// randomly sampled trainable scalars. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(params: &ModelParams, batch: &Batch, labels: &[f64], n_params: usize, step: f64, floor: f64, seed: u64) -> GradCheck {
    let dropout_seed = seed ^ 0xd0;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (logits, cache) = forward(batch, params, Mode::Train, &mut rng).unwrap();
    let grads = backward(&cache, params, &weighted_bce_grad(&logits, labels, 0.8)).unwrap();

    let mut slots = Vec::new();
    params.for_each(|name, kind, t| {
        if kind.is_trainable() {
            for i in 0..t.len() {
                slots.push((name.to_string(), i));
            }
        }
    });
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for _ in 0..n_params {
        let (name, idx) = slots[pick.random_range(0..slots.len())].clone();
        let mut analytic = 0.0;
        grads.for_each(|n, _, t| {
            if n == name {
                analytic = t.data[idx];
            }
        });
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.for_each_mut(|n, _, t| {
                if n == name {
                    t.data[idx] += delta;
                }
            });
            loss_at(&p, batch, labels, dropout_seed)
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = format!("{name}[{idx}] analytic {analytic:e} numeric {numeric:e}");
        }
        out.checked += 1;
    }
    out
}
