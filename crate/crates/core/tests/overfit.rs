use mtrecipe::lora::{LoraConfig, LoraTarget};
use mtrecipe::model::{generate, GenerateOptions, ModelConfig, ParamSet};
use mtrecipe::train::{Trainer, TrainerConfig, TrainSequence};

const SEP: u32 = 1;
const END: u32 = 2;

/// `a b SEP` → `b a END` for every pair of the symbols 3..9, loss on the answer only.
fn swap_data() -> Vec<TrainSequence> {
    let mut out = Vec::new();
    for a in 3..9u32 {
        for b in 3..9u32 {
            if a != b {
                out.push(TrainSequence {
                    tokens: vec![a, b, SEP, b, a, END],
                    loss_mask: vec![false, false, false, true, true, true],
                    prompt_len: 3,
                });
            }
        }
    }
    out
}

fn model() -> ParamSet<f32> {
    ParamSet::init(&ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 10,
        max_seq_len: 8,
        dropout: 0.0,
        init_seed: 3,
    })
    .unwrap()
}

fn solved(params: &ParamSet<f32>, data: &[TrainSequence]) -> usize {
    data.iter()
        .filter(|s| {
            let out = generate(params, &s.tokens[..3], &GenerateOptions::greedy(3, vec![END])).unwrap();
            out == s.tokens
        })
        .count()
}

fn train(lora: Option<&LoraConfig>, epochs: usize) -> ParamSet<f32> {
    let cfg = TrainerConfig {
        epochs,
        batch_size: 6,
        lr: 1e-2,
        weight_decay: 0.0,
        ..TrainerConfig::default()
    };
    let mut t = Trainer::new(model(), lora, cfg).unwrap();
    t.run(&swap_data(), 0, None, |_, _| {}).unwrap();
    t.finish()
}

#[test]
fn full_training_memorizes_swaps() {
    let data = swap_data();
    assert!(solved(&model(), &data) < data.len() / 2);
    let p = train(None, 60);
    assert_eq!(solved(&p, &data), data.len());
}

#[test]
fn lora_training_memorizes_swaps() {
    let data = swap_data();
    let lora = LoraConfig {
        rank: 8,
        alpha: 16.0,
        targets: LoraTarget::ALL.into_iter().collect(),
        modules_to_save: ["tok_emb".to_string(), "head".to_string()].into(),
        ..Default::default()
    };
    let p = train(Some(&lora), 80);
    assert_eq!(solved(&p, &data), data.len());
}
