//! Independent oracles shared by integration tests.
#![allow(dead_code)]

use mtrecipe::lora::{LoraAdapter, LoraConfig, LoraTarget};
use mtrecipe::model::{loss_and_grad, Batch, ModelConfig, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// 2 layers, d_model = 16.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 23,
        max_seq_len: 10,
        dropout: 0.0,
        init_seed: 5,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, vocab: usize) -> Batch {
    let seqs: Vec<(Vec<u32>, Vec<bool>)> = [9usize, 6, 8]
        .iter()
        .map(|&n| {
            let toks = (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let mask = (0..n).map(|i| i > 1 || rng.gen_bool(0.5)).collect();
            (toks, mask)
        })
        .collect();
    let refs: Vec<(&[u32], &[bool])> = seqs.iter().map(|(t, m)| (t.as_slice(), m.as_slice())).collect();
    Batch::from_sequences(&refs, 0)
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Max relative error between analytic and central-difference gradients over
/// `coords` random coordinates of the full parameter set.
pub fn fd_full(seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamSet::<f64>::init(&gradcheck_config()).unwrap();
    let batch = random_batch(&mut rng, params.config.vocab_size);
    let (_, grads) = loss_and_grad(&params, None, &batch, true).unwrap();
    let grads = grads.base.unwrap();
    let g_tensors = grads.tensors();
    let sizes: Vec<usize> = g_tensors.iter().map(|(_, t)| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < coords {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let analytic = g_tensors[ti].1.data[flat];
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.tensors_mut()[ti].1.data[flat] += delta;
            loss_and_grad(&p, None, &batch, false).unwrap().0
        };
        let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
        checked += 1;
    }
    worst
}

/// Same check over LoRA `A` and `B` entries (with `B` moved off zero so both
/// factors carry gradient).
pub fn fd_lora(seed: u64, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamSet::<f64>::init(&gradcheck_config()).unwrap();
    let cfg = LoraConfig {
        rank: 3,
        alpha: 6.0,
        targets: LoraTarget::ALL.into_iter().collect(),
        init_seed: seed,
        ..Default::default()
    };
    let mut adapter = LoraAdapter::new(&params, &cfg).unwrap();
    for (_, t) in adapter.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let batch = random_batch(&mut rng, params.config.vocab_size);
    let (_, grads) = loss_and_grad(&params, Some(&adapter), &batch, false).unwrap();
    assert!(grads.base.is_none());
    let grads = grads.adapter.unwrap();
    let g_tensors = grads.tensors();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let ti = rng.gen_range(0..g_tensors.len());
        let j = rng.gen_range(0..g_tensors[ti].1.data.len());
        let analytic = g_tensors[ti].1.data[j];
        let eval = |delta: f64| {
            let mut a = adapter.clone();
            a.tensors_mut()[ti].1.data[j] += delta;
            loss_and_grad(&params, Some(&a), &batch, false).unwrap().0
        };
        let numeric = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}
