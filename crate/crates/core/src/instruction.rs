//! Instruction-tuning records with source-language-consistent prompts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::lang::{Direction, LangCode};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionMode {
    /// The instruction is written in the source language.
    SourceConsistent,
    /// One English instruction pattern for every direction.
    EnglishFixed,
}

impl fmt::Display for InstructionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InstructionMode::SourceConsistent => "source_consistent",
            InstructionMode::EnglishFixed => "english_fixed",
        })
    }
}

impl FromStr for InstructionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_consistent" | "source-consistent" => Ok(InstructionMode::SourceConsistent),
            "english_fixed" | "english-fixed" => Ok(InstructionMode::EnglishFixed),
            other => Err(Error::InvalidArgument(format!(
                "unknown instruction mode `{other}` (expected source_consistent or english_fixed)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub direction: Direction,
    pub mode: InstructionMode,
    pub text: String,
}

pub const ENGLISH_FIXED_PATTERN: &str = "Translate this sentence from {src} to {tgt}:";
pub const ENGLISH_FIXED_LITERAL: &str =
    "Translate this sentence from the source language to the target language:";

/// Instruction strings per direction and mode. Loadable from JSON; entries in
/// a file override the built-in ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateTable {
    /// `src-tgt` → instruction in the source language.
    pub source_consistent: BTreeMap<String, String>,
    /// English pattern with `{src}` and `{tgt}` placeholders.
    pub english_fixed_pattern: String,
    /// Use the direction-agnostic English sentence instead of the pattern.
    #[serde(default)]
    pub fixed_literal: bool,
}

impl Default for TemplateTable {
    fn default() -> Self {
        let entries = [
            ("zh-en", "把这句话从中文翻译成英文："),
            ("de-en", "Übersetzen Sie die folgenden Sätze vom Deutschen ins Englische:"),
            ("en-zh", "Translate this sentence from English to Chinese:"),
            ("en-de", "Translate the following sentences from English to German:"),
            ("zh-de", "把这句话从中文翻译成德文："),
            ("de-zh", "Übersetzen Sie die folgenden Sätze vom Deutschen ins Chinesische:"),
        ];
        TemplateTable {
            source_consistent: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            english_fixed_pattern: ENGLISH_FIXED_PATTERN.to_string(),
            fixed_literal: false,
        }
    }
}

#[derive(Deserialize)]
struct TemplateOverrides {
    #[serde(default)]
    source_consistent: BTreeMap<String, String>,
    english_fixed_pattern: Option<String>,
    fixed_literal: Option<bool>,
}

impl TemplateTable {
    /// Built-in table with the entries of `json` layered on top.
    pub fn from_json(json: &str) -> Result<Self> {
        let o: TemplateOverrides = serde_json::from_str(json)?;
        let mut t = TemplateTable::default();
        for (k, v) in o.source_consistent {
            let d: Direction = k.parse()?;
            t.source_consistent.insert(d.key(), v);
        }
        if let Some(p) = o.english_fixed_pattern {
            t.english_fixed_pattern = p;
        }
        if let Some(l) = o.fixed_literal {
            t.fixed_literal = l;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn with_entry(mut self, direction: Direction, text: impl Into<String>) -> Self {
        self.source_consistent.insert(direction.key(), text.into());
        self
    }

    pub fn supported_languages(&self) -> BTreeSet<LangCode> {
        self.source_consistent
            .keys()
            .filter_map(|k| k.parse::<Direction>().ok())
            .flat_map(|d| [d.src, d.tgt])
            .collect()
    }

    fn unsupported(&self, code: LangCode) -> Error {
        let supported: Vec<&str> = self.supported_languages().iter().map(|l| l.code()).collect();
        Error::UnsupportedLanguage {
            code: code.code().to_string(),
            supported: supported.join(", "),
        }
    }

    pub fn get(&self, direction: Direction, mode: InstructionMode) -> Result<InstructionTemplate> {
        let supported = self.supported_languages();
        for l in [direction.src, direction.tgt] {
            if !supported.contains(&l) {
                return Err(self.unsupported(l));
            }
        }
        let text = match mode {
            InstructionMode::SourceConsistent => self
                .source_consistent
                .get(&direction.key())
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("no instruction for direction {direction}"))
                })?,
            InstructionMode::EnglishFixed if self.fixed_literal => ENGLISH_FIXED_LITERAL.to_string(),
            InstructionMode::EnglishFixed => self
                .english_fixed_pattern
                .replace("{src}", direction.src.display_name())
                .replace("{tgt}", direction.tgt.display_name()),
        };
        Ok(InstructionTemplate {
            direction,
            mode,
            text,
        })
    }
}

/// Canonical instruction for `direction` under `mode`.
pub fn template_for(direction: Direction, mode: InstructionMode) -> Result<InstructionTemplate> {
    TemplateTable::default().get(direction, mode)
}

/// One instruction-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub src: LangCode,
    pub tgt: LangCode,
}

impl SftRecord {
    pub fn direction(&self) -> Direction {
        Direction {
            src: self.src,
            tgt: self.tgt,
        }
    }

    /// Everything the model sees before the response.
    pub fn prompt(&self) -> String {
        render_prompt(&self.instruction, &self.input)
    }
}

pub fn render_prompt(instruction: &str, input: &str) -> String {
    format!("{instruction}\n{input}\n")
}

pub fn build_sft_dataset(pairs: &[SentencePair], mode: InstructionMode) -> Result<Vec<SftRecord>> {
    build_sft_dataset_with(pairs, mode, &TemplateTable::default())
}

pub fn build_sft_dataset_with(
    pairs: &[SentencePair],
    mode: InstructionMode,
    table: &TemplateTable,
) -> Result<Vec<SftRecord>> {
    let mut cache: BTreeMap<Direction, String> = BTreeMap::new();
    pairs
        .iter()
        .map(|p| {
            let d = p.direction();
            let instruction = match cache.get(&d) {
                Some(t) => t.clone(),
                None => {
                    let t = table.get(d, mode)?.text;
                    cache.insert(d, t.clone());
                    t
                }
            };
            Ok(SftRecord {
                instruction,
                input: p.source_text().to_string(),
                output: p.target_text().to_string(),
                src: d.src,
                tgt: d.tgt,
            })
        })
        .collect()
}

/// Token ids of one training example plus its response-only loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// BOS plus prompt tokens; every position below this is unmasked.
    pub prompt_len: usize,
}

/// `BOS, prompt, response, EOS` with the mask set over response and EOS.
pub fn render_training_text(
    record: &SftRecord,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<RenderedExample> {
    let prompt = vocab.encode(&record.prompt());
    let response = vocab.encode(&record.output);
    let prompt_len = 1 + prompt.len();
    let total = prompt_len + response.len() + 1;
    if total > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(total);
    tokens.push(vocab.bos());
    tokens.extend(prompt);
    tokens.extend(response);
    tokens.push(vocab.eos());
    let loss_mask = (0..total).map(|i| i >= prompt_len).collect();
    Ok(RenderedExample {
        tokens,
        loss_mask,
        prompt_len,
    })
}

/// The exact bytes [`write_sft_jsonl`] writes.
pub fn sft_to_jsonl(records: &[SftRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_sft_jsonl(path: impl AsRef<Path>, records: &[SftRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, sft_to_jsonl(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_sft_jsonl(path: impl AsRef<Path>) -> Result<Vec<SftRecord>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(s: &str) -> Direction {
        s.parse().unwrap()
    }

    #[test]
    fn canonical_source_consistent_strings() {
        let sc = InstructionMode::SourceConsistent;
        assert_eq!(
            template_for(dir("de-en"), sc).unwrap().text,
            "Übersetzen Sie die folgenden Sätze vom Deutschen ins Englische:"
        );
        assert_eq!(template_for(dir("zh-en"), sc).unwrap().text, "把这句话从中文翻译成英文：");
        assert_eq!(
            template_for(dir("en-zh"), sc).unwrap().text,
            "Translate this sentence from English to Chinese:"
        );
        assert_eq!(
            template_for(dir("en-de"), sc).unwrap().text,
            "Translate the following sentences from English to German:"
        );
    }

    #[test]
    fn english_fixed_names_true_languages() {
        let t = template_for(dir("de-en"), InstructionMode::EnglishFixed).unwrap();
        assert_eq!(t.text, "Translate this sentence from German to English:");
        let literal = TemplateTable {
            fixed_literal: true,
            ..Default::default()
        };
        assert_eq!(
            literal.get(dir("zh-en"), InstructionMode::EnglishFixed).unwrap().text,
            ENGLISH_FIXED_LITERAL
        );
    }

    #[test]
    fn total_over_supported_directions() {
        let langs = [LangCode::En, LangCode::De, LangCode::Zh];
        for s in langs {
            for t in langs {
                if s == t {
                    continue;
                }
                for m in [InstructionMode::SourceConsistent, InstructionMode::EnglishFixed] {
                    template_for(Direction::new(s, t).unwrap(), m).unwrap();
                }
            }
        }
    }

    #[test]
    fn source_consistent_language_matches_source() {
        let has_cjk = |s: &str| s.chars().any(|c| ('\u{4e00}'..='\u{9fff}').contains(&c));
        for (k, text) in &TemplateTable::default().source_consistent {
            let d: Direction = k.parse().unwrap();
            match d.src {
                LangCode::Zh => assert!(has_cjk(text), "{k}"),
                LangCode::De => assert!(text.starts_with("Übersetzen"), "{k}"),
                LangCode::En => assert!(text.starts_with("Translate"), "{k}"),
                LangCode::Xx => unreachable!(),
            }
        }
    }

    #[test]
    fn unsupported_language_error() {
        let err = template_for(dir("xx-en"), InstructionMode::SourceConsistent)
            .unwrap_err()
            .to_string();
        assert!(err.contains("`xx`") && err.contains("en, de, zh"), "{err}");
    }

    #[test]
    fn overrides_from_json() {
        let t = TemplateTable::from_json(r#"{"source_consistent": {"xx-en": "zup zup:"}}"#).unwrap();
        assert_eq!(
            t.get(dir("xx-en"), InstructionMode::SourceConsistent).unwrap().text,
            "zup zup:"
        );
        assert_eq!(
            t.get(dir("en-xx"), InstructionMode::EnglishFixed).unwrap().text,
            "Translate this sentence from English to Cipher:"
        );
        assert!(t.get(dir("en-xx"), InstructionMode::SourceConsistent).is_err());
    }

    #[test]
    fn dataset_one_record_per_pair() {
        assert!(build_sft_dataset(&[], InstructionMode::SourceConsistent).unwrap().is_empty());
        let pairs: Vec<_> = (0..5)
            .map(|i| {
                SentencePair::new(format!("{i}"), LangCode::De, LangCode::En, "Hallo.", "Hello.")
                    .unwrap()
            })
            .collect();
        let recs = build_sft_dataset(&pairs, InstructionMode::EnglishFixed).unwrap();
        assert_eq!(recs.len(), 5);
        let expect = template_for(dir("de-en"), InstructionMode::EnglishFixed).unwrap().text;
        assert!(recs.iter().all(|r| r.instruction == expect));
    }

    #[test]
    fn render_mask_covers_response() {
        let vocab = Vocab::train(&["Hello world\nHallo Welt\n"], 300).unwrap();
        let rec = SftRecord {
            instruction: "Translate:".into(),
            input: "Hallo Welt".into(),
            output: "Hello world".into(),
            src: LangCode::De,
            tgt: LangCode::En,
        };
        let r = render_training_text(&rec, &vocab, 512).unwrap();
        let out_len = vocab.encode("Hello world").len();
        assert_eq!(r.loss_mask.len(), r.tokens.len());
        assert_eq!(r.loss_mask.iter().filter(|&&m| m).count(), out_len + 1);
        assert!(r.loss_mask[..r.prompt_len].iter().all(|&m| !m));
        let resp: Vec<u32> = r
            .tokens
            .iter()
            .zip(&r.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(vocab.decode(&resp).unwrap(), "Hello world");
        assert_eq!(*resp.last().unwrap(), vocab.eos());
        assert!(matches!(
            render_training_text(&rec, &vocab, 5),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn jsonl_field_names() {
        let rec = SftRecord {
            instruction: "i".into(),
            input: "a".into(),
            output: "b".into(),
            src: LangCode::Zh,
            tgt: LangCode::En,
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"instruction":"i","input":"a","output":"b","src":"zh","tgt":"en"}"#
        );
    }
}
