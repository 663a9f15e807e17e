use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_incremental, KvCache};
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    Sample { seed: u64, temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampling: Sampling,
    /// Generation ends after emitting any of these ids.
    pub stop_tokens: Vec<u32>,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize, stop_tokens: Vec<u32>) -> Self {
        GenerateOptions {
            max_new,
            sampling: Sampling::Greedy,
            stop_tokens,
        }
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Extends `prompt` by up to `max_new` tokens. The returned sequence starts
/// with the prompt and includes the stop token if one was produced.
pub fn generate(params: &ParamSet<f32>, prompt: &[u32], opts: &GenerateOptions) -> Result<Vec<u32>> {
    let max = params.config.max_seq_len;
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("generation needs a non-empty prompt".into()));
    }
    if prompt.len() + opts.max_new > max {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + opts.max_new,
            max,
        });
    }
    let mut out = prompt.to_vec();
    if opts.max_new == 0 {
        return Ok(out);
    }
    let mut rng = match opts.sampling {
        Sampling::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Greedy => None,
    };
    let mut cache = KvCache::new(params);
    let mut logits = forward_incremental(params, &mut cache, prompt)?;
    for _ in 0..opts.max_new {
        let last = logits.row(logits.rows - 1);
        let next = match (opts.sampling, rng.as_mut()) {
            (Sampling::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                let t = temperature as f32;
                let max = last.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let w: Vec<f32> = last.iter().map(|&v| ((v - max) / t).exp()).collect();
                WeightedIndex::new(&w)
                    .map_err(|e| Error::InvalidArgument(format!("sampling weights: {e}")))?
                    .sample(rng) as u32
            }
            _ => argmax(last),
        };
        out.push(next);
        if opts.stop_tokens.contains(&next) || out.len() == prompt.len() + opts.max_new {
            break;
        }
        logits = forward_incremental(params, &mut cache, &[next])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> ParamSet<f32> {
        ParamSet::init(&ModelConfig::tiny(300, 24)).unwrap()
    }

    #[test]
    fn max_new_zero_returns_prompt() {
        let p = params();
        let out = generate(&p, &[1, 2, 3], &GenerateOptions::greedy(0, vec![])).unwrap();
        assert_eq!(out, vec![1, 2, 3]);
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = params();
        let o = GenerateOptions::greedy(10, vec![]);
        let a = generate(&p, &[5, 6], &o).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, generate(&p, &[5, 6], &o).unwrap());
    }

    #[test]
    fn sampling_is_seeded() {
        let p = params();
        let o = GenerateOptions {
            max_new: 8,
            sampling: Sampling::Sample {
                seed: 11,
                temperature: 1.0,
            },
            stop_tokens: vec![],
        };
        assert_eq!(generate(&p, &[5], &o).unwrap(), generate(&p, &[5], &o).unwrap());
    }

    #[test]
    fn stops_on_stop_token() {
        let p = params();
        let free = generate(&p, &[5, 6], &GenerateOptions::greedy(6, vec![])).unwrap();
        let stop = free[3];
        let out = generate(&p, &[5, 6], &GenerateOptions::greedy(6, vec![stop])).unwrap();
        assert_eq!(*out.last().unwrap(), stop);
        assert!(out.len() <= 4);
    }

    #[test]
    fn prompt_too_long() {
        let p = params();
        assert!(matches!(
            generate(&p, &[1; 20], &GenerateOptions::greedy(5, vec![])),
            Err(Error::SequenceTooLong { .. })
        ));
    }
}
