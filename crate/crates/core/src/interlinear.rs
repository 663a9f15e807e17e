//! Interlinear documents: each source line is immediately followed by its
//! translation, and blocks are separated by one blank line.
//!
//! ```text
//! German: Hallo.
//! English: Hello.
//!
//! Chinese: 你好。
//! English: Hello.
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::lang::{Direction, LangCode};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterlinearBlock {
    pub source_label: String,
    pub source_text: String,
    pub target_label: String,
    pub target_text: String,
}

impl InterlinearBlock {
    pub fn from_pair(pair: &SentencePair) -> Self {
        InterlinearBlock {
            source_label: pair.source_lang().display_name().to_string(),
            source_text: pair.source_text().to_string(),
            target_label: pair.target_lang().display_name().to_string(),
            target_text: pair.target_text().to_string(),
        }
    }

    pub fn render(&self) -> String {
        format!(
            "{}: {}\n{}: {}\n",
            self.source_label, self.source_text, self.target_label, self.target_text
        )
    }

    /// Parses the two-line form produced by [`render`](Self::render); the
    /// trailing newline is optional.
    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let mut lines = body.split('\n');
        let (Some(first), Some(second), None) = (lines.next(), lines.next(), lines.next()) else {
            return Err(Error::InvalidArgument(format!(
                "interlinear block must have exactly two lines: {text:?}"
            )));
        };
        let (source_label, source_text) = split_line(first)?;
        let (target_label, target_text) = split_line(second)?;
        Ok(InterlinearBlock {
            source_label,
            source_text,
            target_label,
            target_text,
        })
    }

    pub fn direction(&self) -> Result<Direction> {
        let lang = |label: &str| {
            LangCode::from_display_name(label)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown language label `{label}`")))
        };
        Direction::new(lang(&self.source_label)?, lang(&self.target_label)?)
    }
}

fn split_line(line: &str) -> Result<(String, String)> {
    line.split_once(": ")
        .map(|(l, t)| (l.to_string(), t.to_string()))
        .ok_or_else(|| Error::InvalidArgument(format!("line lacks a `Label: ` prefix: {line:?}")))
}

/// Renders one pair as an interlinear block.
pub fn format_block(pair: &SentencePair) -> String {
    InterlinearBlock::from_pair(pair).render()
}

/// A packed pre-training document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub blocks: Vec<InterlinearBlock>,
    pub rendered_text: String,
    pub token_count: usize,
}

impl Document {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Splits a rendered document back into its blocks.
pub fn parse_document(text: &str) -> Result<Vec<InterlinearBlock>> {
    text.split("\n\n").map(InterlinearBlock::parse).collect()
}

/// Every pair followed by its reverse, so both directions get trained.
pub fn materialize_both_directions(pairs: &[SentencePair]) -> Vec<SentencePair> {
    pairs.iter().flat_map(|p| [p.clone(), p.reversed()]).collect()
}

#[derive(Debug, Clone, Default)]
pub struct PackReport {
    pub documents: Vec<Document>,
    /// Ids of pairs whose single block already exceeds the budget.
    pub dropped: Vec<String>,
}

/// Shuffles `pairs` under `seed` and packs them greedily into documents of at
/// most `max_tokens` tokens.
pub fn pack_documents(
    pairs: &[SentencePair],
    max_tokens: usize,
    vocab: &Vocab,
    seed: u64,
) -> PackReport {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sep_tokens = vocab.encode("\n").len();

    let mut report = PackReport::default();
    let mut blocks: Vec<InterlinearBlock> = Vec::new();
    let mut text = String::new();
    let mut count = 0usize;

    let finish = |blocks: &mut Vec<InterlinearBlock>, text: &mut String, report: &mut PackReport| {
        if blocks.is_empty() {
            return;
        }
        let rendered = std::mem::take(text);
        report.documents.push(Document {
            token_count: vocab.encode(&rendered).len(),
            blocks: std::mem::take(blocks),
            rendered_text: rendered,
        });
    };

    for i in order {
        let block = InterlinearBlock::from_pair(&pairs[i]);
        let rendered = block.render();
        let n = vocab.encode(&rendered).len();
        if n > max_tokens {
            report.dropped.push(pairs[i].id().to_string());
            continue;
        }
        if !blocks.is_empty() && count + sep_tokens + n > max_tokens {
            finish(&mut blocks, &mut text, &mut report);
        }
        if blocks.is_empty() {
            count = n;
        } else {
            text.push('\n');
            count += sep_tokens + n;
        }
        text.push_str(&rendered);
        blocks.push(block);
    }
    finish(&mut blocks, &mut text, &mut report);
    report
}

#[derive(Serialize, Deserialize)]
struct DocumentRow {
    text: String,
    token_count: usize,
    block_count: usize,
}

/// The exact bytes [`serialize`] writes.
pub fn to_jsonl(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        let row = DocumentRow {
            text: d.rendered_text.clone(),
            token_count: d.token_count,
            block_count: d.blocks.len(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn serialize(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(docs)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Loads a document file, re-parsing blocks and re-checking token counts
/// against `vocab`.
pub fn load_documents(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut docs = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let row: DocumentRow =
            serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        let blocks = parse_document(&row.text).map_err(|e| parse_err(i + 1, e.to_string()))?;
        if blocks.len() != row.block_count {
            return Err(parse_err(
                i + 1,
                format!("block_count {} but text has {}", row.block_count, blocks.len()),
            ));
        }
        let actual = vocab.encode(&row.text).len();
        if actual != row.token_count {
            return Err(parse_err(
                i + 1,
                format!("token_count {} but text encodes to {actual}", row.token_count),
            ));
        }
        docs.push(Document {
            blocks,
            rendered_text: row.text,
            token_count: row.token_count,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn de_en(id: &str, s: &str, t: &str) -> SentencePair {
        SentencePair::new(id, LangCode::De, LangCode::En, s, t).unwrap()
    }

    #[test]
    fn block_grammar() {
        assert_eq!(format_block(&de_en("a", "Hallo.", "Hello.")), "German: Hallo.\nEnglish: Hello.\n");
        let zh = SentencePair::new("b", LangCode::Zh, LangCode::En, "你好。", "Hello.").unwrap();
        assert_eq!(format_block(&zh), "Chinese: 你好。\nEnglish: Hello.\n");
    }

    #[test]
    fn block_parse_roundtrip() {
        let p = de_en("a", "Zeit: 12:30", "Time: 12:30");
        let b = InterlinearBlock::parse(&format_block(&p)).unwrap();
        assert_eq!(b, InterlinearBlock::from_pair(&p));
        assert_eq!(b.direction().unwrap(), p.direction());
        assert!(InterlinearBlock::parse("German: only one line\n").is_err());
    }

    #[test]
    fn one_pair_one_document() {
        let vocab = Vocab::train(&["German: Hallo.\nEnglish: Hello.\n"], 300).unwrap();
        let rep = pack_documents(&[de_en("a", "Hallo.", "Hello.")], 100, &vocab, 1);
        assert_eq!(rep.documents.len(), 1);
        assert_eq!(rep.documents[0].block_count(), 1);
        assert!(rep.dropped.is_empty());
    }

    #[test]
    fn greedy_boundary_splits() {
        // Byte-level vocab: every byte is one token.
        let vocab = Vocab::train::<&str>(&[], 300).unwrap();
        let filler = |c: char| c.to_string().repeat(60 - "German: \nEnglish: \n".len() - 1);
        let a = de_en("a", &filler('x'), "y");
        let b = de_en("b", &filler('z'), "w");
        assert_eq!(vocab.encode(&format_block(&a)).len(), 60);
        let rep = pack_documents(&[a, b], 100, &vocab, 3);
        assert_eq!(rep.documents.len(), 2);
        assert!(rep.documents.iter().all(|d| d.token_count == 60));
    }

    #[test]
    fn oversized_blocks_dropped() {
        let vocab = Vocab::train::<&str>(&[], 300).unwrap();
        let rep = pack_documents(&[de_en("big", &"x".repeat(200), "y")], 50, &vocab, 0);
        assert!(rep.documents.is_empty());
        assert_eq!(rep.dropped, ["big"]);
    }

    #[test]
    fn both_directions() {
        let pairs = materialize_both_directions(&[de_en("a", "Hallo.", "Hello.")]);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].direction().key(), "en-de");
        assert_eq!(pairs[1].source_text(), "Hello.");
    }

    #[test]
    fn empty_doc_list_serializes_to_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        serialize(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        let vocab = Vocab::train::<&str>(&[], 300).unwrap();
        assert!(load_documents(&path, &vocab).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_bad_token_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"text\":\"German: a\\nEnglish: b\\n\",\"token_count\":1,\"block_count\":1}\n",
        )
        .unwrap();
        let vocab = Vocab::train::<&str>(&[], 300).unwrap();
        let err = load_documents(&path, &vocab).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_documents(&path, &vocab), Err(Error::Parse { line: 1, .. })));
    }
}
