//! Mini-batch training loop shared by every stage: length-bucketed batching,
//! AdamW with warmup + cosine decay, full or adapter-only updates, and
//! checkpoint/resume.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{merge, AdaptedModel, LoraAdapter, LoraConfig};
use crate::model::{loss_and_grad, AdamW, AdamWConfig, Batch, Checkpoint, Matrix, ParamSet};

/// One training example. `loss_mask[i]` marks tokens that count as
/// prediction targets; the first `prompt_len` tokens must never be marked.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub prompt_len: usize,
}

impl TrainSequence {
    /// Plain causal LM example: every token after the first is a target.
    pub fn causal(tokens: Vec<u32>) -> Self {
        let loss_mask = vec![true; tokens.len()];
        TrainSequence {
            tokens,
            loss_mask,
            prompt_len: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Full,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of `lr` after cosine decay.
    pub min_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 1,
            batch_size: 16,
            lr: AdamWConfig::default().lr,
            warmup_frac: 0.05,
            min_lr_frac: 0.1,
            grad_clip: 0.0,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            problems.push(format!("warmup_frac must be in [0, 1), got {}", self.warmup_frac));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            problems.push(format!("min_lr_frac must be in [0, 1], got {}", self.min_lr_frac));
        }
        if self.grad_clip < 0.0 {
            problems.push("grad_clip must be non-negative".to_string());
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be non-negative".to_string());
        }
        problems
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64).ceil() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

/// Batch plan for one epoch: indices are shuffled with a seed derived from
/// `(seed, epoch)`, bucketed by length, cut into batches, and the batch
/// order shuffled again.
pub fn plan_epoch(lengths: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

pub fn make_batch(data: &[TrainSequence], idx: &[usize], pad: u32) -> Batch {
    let seqs: Vec<(&[u32], &[bool])> = idx
        .iter()
        .map(|&i| (data[i].tokens.as_slice(), data[i].loss_mask.as_slice()))
        .collect();
    Batch::from_sequences(&seqs, pad)
}

fn check_prompt_unmasked(data: &[TrainSequence], idx: &[usize]) -> Result<()> {
    for &i in idx {
        let s = &data[i];
        if s.loss_mask[..s.prompt_len.min(s.loss_mask.len())].iter().any(|&m| m) {
            return Err(Error::InvalidArgument(format!(
                "training example {i} has loss mask over its prompt"
            )));
        }
    }
    Ok(())
}

/// Where the trainer is inside its schedule; together with the config this
/// fixes the next batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: usize,
    pub loss_curve: Vec<(usize, f32)>,
}

pub struct Trainer {
    pub params: ParamSet<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
    pub optimizer: AdamW,
    pub config: TrainerConfig,
    pub state: TrainState,
}

impl Trainer {
    /// Full-parameter training when `lora` is `None`, otherwise a fresh
    /// adapter is attached and only it (plus any `modules_to_save`) is
    /// updated.
    pub fn new(params: ParamSet<f32>, lora: Option<&LoraConfig>, config: TrainerConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems.join("; ")));
        }
        let adapter = lora.map(|c| LoraAdapter::new(&params, c)).transpose()?;
        Ok(Trainer {
            params,
            adapter,
            optimizer: AdamW::new(config.adamw()),
            config,
            state: TrainState::default(),
        })
    }

    pub fn mode(&self) -> UpdateMode {
        if self.adapter.is_some() {
            UpdateMode::Lora
        } else {
            UpdateMode::Full
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps_per_epoch(n) * self.config.epochs
    }

    pub fn is_done(&self, n: usize) -> bool {
        self.state.step >= self.total_steps(n)
    }

    /// Loss of the batch the next `step` call would train on, without
    /// updating anything.
    pub fn peek_next_loss(&self, data: &[TrainSequence], pad: u32) -> Result<Option<f32>> {
        if data.is_empty() || self.is_done(data.len()) {
            return Ok(None);
        }
        let batch = self.next_batch(data, pad);
        let (loss, _) = loss_and_grad(&self.params, self.adapter.as_ref(), &batch, false)?;
        Ok(Some(loss))
    }

    fn lengths(data: &[TrainSequence]) -> Vec<usize> {
        data.iter().map(|s| s.tokens.len()).collect()
    }

    fn next_idx(&self, data: &[TrainSequence]) -> Vec<usize> {
        let plan = plan_epoch(&Self::lengths(data), self.config.batch_size, self.config.seed, self.state.epoch);
        plan[self.state.batch_in_epoch].clone()
    }

    fn next_batch(&self, data: &[TrainSequence], pad: u32) -> Batch {
        make_batch(data, &self.next_idx(data), pad)
    }

    /// Trains on the next scheduled batch and returns its loss.
    pub fn step(&mut self, data: &[TrainSequence], pad: u32) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training sequences".into()));
        }
        let n = data.len();
        let idx = self.next_idx(data);
        if self.state.step == 0 {
            check_prompt_unmasked(data, &idx)?;
        }
        let batch = make_batch(data, &idx, pad);
        let lr = self.config.lr_at(self.state.step, self.total_steps(n));
        let loss = self.train_batch(&batch, lr)?;
        self.state.loss_curve.push((self.state.step, loss));
        self.state.step += 1;
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch >= self.steps_per_epoch(n) {
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
        }
        Ok(loss)
    }

    fn train_batch(&mut self, batch: &Batch, lr: f64) -> Result<f32> {
        let saved = self
            .adapter
            .as_ref()
            .map(|a| a.config.modules_to_save.clone())
            .unwrap_or_default();
        let base_grads = self.adapter.is_none() || !saved.is_empty();
        let (loss, grads) = loss_and_grad(&self.params, self.adapter.as_ref(), batch, base_grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient("loss".into()));
        }
        match (&mut self.adapter, grads.adapter, grads.base) {
            (Some(adapter), Some(mut ga), gb) => {
                let mut gb = gb;
                let mut gs: Vec<&mut Matrix<f32>> = ga.tensors_mut().into_iter().map(|(_, t)| t).collect();
                if let Some(gb) = gb.as_mut() {
                    gs.extend(gb.tensors_mut().into_iter().filter(|(n, _)| saved.contains(n)).map(|(_, t)| t));
                }
                clip(gs, self.config.grad_clip);
                let mut gs: Vec<&Matrix<f32>> = ga.tensors().into_iter().map(|(_, t)| t).collect();
                let mut ps = adapter.tensors_mut();
                if let Some(gb) = gb.as_ref() {
                    gs.extend(gb.tensors().into_iter().filter(|(n, _)| saved.contains(n)).map(|(_, t)| t));
                    ps.extend(self.params.tensors_mut().into_iter().filter(|(n, _)| saved.contains(n)));
                }
                self.optimizer.step(ps, gs, lr)?;
            }
            (None, _, Some(mut g)) => {
                clip(g.tensors_mut().into_iter().map(|(_, t)| t).collect(), self.config.grad_clip);
                let gs: Vec<&Matrix<f32>> = g.tensors().into_iter().map(|(_, t)| t).collect();
                self.optimizer.step(self.params.tensors_mut(), gs, lr)?;
            }
            _ => unreachable!("gradients requested for the trained parameters"),
        }
        Ok(loss)
    }

    /// Runs until the schedule is exhausted or `max_steps` more steps have
    /// been taken. `on_step` sees `(step, loss)` after every update.
    pub fn run(
        &mut self,
        data: &[TrainSequence],
        pad: u32,
        max_steps: Option<usize>,
        mut on_step: impl FnMut(usize, f32),
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training sequences".into()));
        }
        let mut taken = 0;
        while !self.is_done(data.len()) && max_steps.map_or(true, |m| taken < m) {
            let step = self.state.step;
            let loss = self.step(data, pad)?;
            on_step(step, loss);
            taken += 1;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            params: self.params.clone(),
            adapter: self.adapter.clone(),
            optimizer: Some(self.optimizer.clone()),
            trainer: Some(serde_json::json!({
                "config": self.config,
                "state": self.state,
            })),
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let trainer = ckpt
            .trainer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state".into()))?;
        let config: TrainerConfig = serde_json::from_value(trainer["config"].clone())?;
        let state: TrainState = serde_json::from_value(trainer["state"].clone())?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        Ok(Trainer {
            params: ckpt.params,
            adapter: ckpt.adapter,
            optimizer,
            config,
            state,
        })
    }

    /// Final weights, with any adapter merged in.
    pub fn finish(self) -> ParamSet<f32> {
        match self.adapter {
            Some(adapter) => merge(&AdaptedModel {
                base: self.params,
                adapter,
            }),
            None => self.params,
        }
    }
}

fn clip(grads: Vec<&mut Matrix<f32>>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            g.scale(s);
        }
    }
}

/// Mean per-token negative log-likelihood over masked targets.
pub fn mean_nll(
    params: &ParamSet<f32>,
    data: &[TrainSequence],
    batch_size: usize,
    pad: u32,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no training sequences".into()));
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = make_batch(data, chunk, pad);
        let n = batch.masked_count();
        if n == 0 {
            continue;
        }
        let (loss, _) = loss_and_grad(params, None, &batch, false)?;
        total += f64::from(loss) * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_data() -> Vec<TrainSequence> {
        (0..20u32)
            .map(|i| {
                let len = 4 + (i as usize % 5);
                TrainSequence::causal((0..len as u32).map(|j| (i + j) % 11 + 1).collect())
            })
            .collect()
    }

    fn tiny() -> ParamSet<f32> {
        let mut c = ModelConfig::tiny(12, 16);
        c.d_model = 16;
        c.n_heads = 2;
        c.d_ff = 32;
        ParamSet::init(&c).unwrap()
    }

    #[test]
    fn plan_covers_every_index_once() {
        let lengths: Vec<usize> = (0..37).map(|i| i % 7).collect();
        let plan = plan_epoch(&lengths, 5, 3, 0);
        let mut all: Vec<usize> = plan.concat();
        all.sort();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert_eq!(plan, plan_epoch(&lengths, 5, 3, 0));
        assert_ne!(plan, plan_epoch(&lengths, 5, 3, 1));
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainerConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            min_lr_frac: 0.1,
            ..TrainerConfig::default()
        };
        assert!((c.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(100, 100) - 0.1).abs() < 1e-12);
        assert!(c.lr_at(50, 100) < c.lr_at(20, 100));
    }

    #[test]
    fn full_training_reduces_loss() {
        let data = toy_data();
        let cfg = TrainerConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            ..TrainerConfig::default()
        };
        let mut t = Trainer::new(tiny(), None, cfg).unwrap();
        let before = mean_nll(&t.params, &data, 8, 0).unwrap();
        t.run(&data, 0, None, |_, _| {}).unwrap();
        assert_eq!(t.state.step, 150);
        let after = mean_nll(&t.params, &data, 8, 0).unwrap();
        assert!(after < before * 0.7, "{before} -> {after}");
    }

    #[test]
    fn lora_training_keeps_base_frozen() {
        let data = toy_data();
        let base = tiny();
        let cfg = TrainerConfig {
            epochs: 2,
            batch_size: 4,
            lr: 1e-2,
            ..TrainerConfig::default()
        };
        let mut t = Trainer::new(base.clone(), Some(&LoraConfig::default()), cfg).unwrap();
        t.run(&data, 0, None, |_, _| {}).unwrap();
        assert_eq!(t.params, base);
        assert_ne!(t.finish(), base);
    }

    #[test]
    fn masked_prompt_rejected_on_first_step() {
        let mut data = toy_data();
        for s in &mut data {
            s.prompt_len = 2;
        }
        let mut t = Trainer::new(tiny(), None, TrainerConfig::default()).unwrap();
        assert!(matches!(t.step(&data, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn resume_reproduces_next_loss() {
        let data = toy_data();
        let cfg = TrainerConfig {
            epochs: 3,
            batch_size: 3,
            lr: 5e-3,
            ..TrainerConfig::default()
        };
        let mut a = Trainer::new(tiny(), Some(&LoraConfig::default()), cfg).unwrap();
        a.run(&data, 0, Some(9), |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        a.checkpoint().unwrap().save(&path).unwrap();
        let mut b = Trainer::resume(Checkpoint::load(&path).unwrap()).unwrap();
        let la = a.step(&data, 0).unwrap();
        let lb = b.step(&data, 0).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = TrainerConfig {
            batch_size: 0,
            lr: -1.0,
            ..TrainerConfig::default()
        };
        let err = Trainer::new(tiny(), None, cfg).err().unwrap().to_string();
        assert!(err.contains("batch_size") && err.contains("lr"), "{err}");
    }
}
