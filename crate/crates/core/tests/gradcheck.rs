mod support;

use mtrecipe::lora::{attach, grad_adapter, LoraConfig};
use mtrecipe::model::{loss_and_grad, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn full_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let err = support::fd_full(seed, 20);
        assert!(err <= 1e-4, "seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn lora_gradients_match_finite_differences() {
    for seed in [3, 4] {
        let err = support::fd_lora(seed, 20);
        assert!(err <= 1e-4, "seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn doubling_alpha_doubles_b_gradient_at_init() {
    let params = ParamSet::<f64>::init(&support::gradcheck_config()).unwrap();
    let batch = support::random_batch(&mut ChaCha8Rng::seed_from_u64(8), 23);
    let one = LoraConfig::default();
    let two = LoraConfig {
        alpha: one.alpha * 2.0,
        ..one.clone()
    };
    let (_, g1) = grad_adapter(&attach(params.clone(), &one).unwrap(), &batch).unwrap();
    let (_, g2) = grad_adapter(&attach(params, &two).unwrap(), &batch).unwrap();
    for ((n, a), (_, b)) in g1.tensors().iter().zip(g2.tensors()) {
        if n.ends_with("lora_b") {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{n}");
            }
        } else {
            // A's gradient flows through B = 0.
            assert!(a.data.iter().all(|&x| x == 0.0), "{n}");
        }
    }
}

#[test]
fn frozen_base_has_no_gradient() {
    let params = ParamSet::<f64>::init(&support::gradcheck_config()).unwrap();
    let batch = support::random_batch(&mut ChaCha8Rng::seed_from_u64(9), 23);
    let adapted = attach(params.clone(), &LoraConfig::default()).unwrap();
    let (_, g) = loss_and_grad(&adapted.base, Some(&adapted.adapter), &batch, false).unwrap();
    assert!(g.base.is_none());
    assert!(g.adapter.is_some());
}
