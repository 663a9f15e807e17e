//! Few-shot prompts in interlinear form and translation extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::interlinear::format_block;

#[derive(Debug, Clone, PartialEq)]
pub struct NShotPrompt {
    pub exemplars: Vec<SentencePair>,
    pub query: String,
    pub rendered: String,
}

/// `n` interlinear blocks, then the query's source line and the open target
/// label `"<Target>: "`.
pub fn build_nshot_prompt(exemplars: &[SentencePair], query: &SentencePair, n: usize) -> Result<NShotPrompt> {
    if exemplars.len() < n {
        return Err(Error::Prompt(format!(
            "{n}-shot prompt needs {n} exemplars, got {}",
            exemplars.len()
        )));
    }
    let used = &exemplars[..n];
    if let Some(bad) = used.iter().find(|e| e.direction() != query.direction()) {
        return Err(Error::Prompt(format!(
            "exemplar {} is {}, query is {}",
            bad.id(),
            bad.direction(),
            query.direction()
        )));
    }
    let mut rendered: String = used.iter().map(|e| format_block(e) + "\n").collect();
    rendered.push_str(&format!(
        "{}: {}\n{}: ",
        query.source_lang().display_name(),
        query.source_text(),
        query.target_lang().display_name()
    ));
    if !query.target_text().is_empty() && rendered.contains(query.target_text()) {
        return Err(Error::Prompt(format!("prompt for {} leaks its reference", query.id())));
    }
    Ok(NShotPrompt {
        exemplars: used.to_vec(),
        query: query.source_text().to_string(),
        rendered,
    })
}

/// Seeded draw of `n` exemplars from `pool` in the query's direction,
/// skipping any whose text would reveal the query's reference.
pub fn select_exemplars(
    pool: &[SentencePair],
    query: &SentencePair,
    n: usize,
    seed: u64,
) -> Result<Vec<SentencePair>> {
    let mut candidates: Vec<&SentencePair> = pool
        .iter()
        .filter(|p| p.direction() == query.direction())
        .filter(|p| {
            !p.source_text().contains(query.target_text())
                && !p.target_text().contains(query.target_text())
                && p.source_text() != query.source_text()
        })
        .collect();
    if candidates.len() < n {
        return Err(Error::Prompt(format!(
            "only {} usable {} exemplars for a {n}-shot prompt",
            candidates.len(),
            query.direction()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.partial_shuffle(&mut rng, n);
    Ok(candidates[..n].iter().map(|p| (*p).clone()).collect())
}

/// Text after the prompt's cue, up to the first newline; trimmed. A single
/// trailing space on the cue may come from either the prompt or the model.
pub fn extract_translation(generated: &str, prompt: &str) -> Result<String> {
    let cue = prompt.strip_suffix(' ').unwrap_or(prompt);
    let tail = generated
        .strip_prefix(cue)
        .ok_or_else(|| Error::Prompt("generation does not start with the prompt".into()))?;
    let line = tail.split('\n').next().unwrap_or("");
    Ok(line.trim().to_string())
}
