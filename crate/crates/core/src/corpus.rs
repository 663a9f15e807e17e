//! Parallel corpus ingestion, hygiene, sampling, and statistics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::lang::{Direction, LangCode};
use crate::text::tokenize_for_bleu;
use crate::tokenizer::Vocab;

/// One aligned sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    id: String,
    source_lang: LangCode,
    target_lang: LangCode,
    source_text: String,
    target_text: String,
}

impl SentencePair {
    pub fn new(
        id: impl Into<String>,
        source_lang: LangCode,
        target_lang: LangCode,
        source_text: impl Into<String>,
        target_text: impl Into<String>,
    ) -> Result<Self> {
        let source_text = source_text.into();
        let target_text = target_text.into();
        if source_lang == target_lang {
            return Err(Error::InvalidPair(format!(
                "source and target language are both {source_lang}"
            )));
        }
        for (side, t) in [("source", &source_text), ("target", &target_text)] {
            if t.trim().is_empty() {
                return Err(Error::InvalidPair(format!("{side} text is empty")));
            }
            if t.contains(['\n', '\r']) {
                return Err(Error::InvalidPair(format!("{side} text contains a newline")));
            }
        }
        Ok(SentencePair {
            id: id.into(),
            source_lang,
            target_lang,
            source_text,
            target_text,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source_lang(&self) -> LangCode {
        self.source_lang
    }

    pub fn target_lang(&self) -> LangCode {
        self.target_lang
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn target_text(&self) -> &str {
        &self.target_text
    }

    pub fn direction(&self) -> Direction {
        Direction {
            src: self.source_lang,
            tgt: self.target_lang,
        }
    }

    /// The same pair read in the opposite direction. The id gains a `~rev` suffix.
    pub fn reversed(&self) -> SentencePair {
        SentencePair {
            id: format!("{}~rev", self.id),
            source_lang: self.target_lang,
            target_lang: self.source_lang,
            source_text: self.target_text.clone(),
            target_text: self.source_text.clone(),
        }
    }

    fn dedup_key(&self) -> (String, String) {
        (
            self.source_text.trim().nfc().collect(),
            self.target_text.trim().nfc().collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Tsv,
    Jsonl,
}

impl std::str::FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(InputFormat::Tsv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format `{other}` (expected tsv or jsonl)"
            ))),
        }
    }
}

/// A row that could not be turned into a [`SentencePair`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub pairs: Vec<SentencePair>,
    pub rejects: Vec<Reject>,
}

#[derive(Deserialize)]
struct JsonlRow {
    src: String,
    tgt: String,
}

/// Reads a TSV or JSONL parallel file. Malformed rows go to the rejects list.
pub fn ingest(
    path: impl AsRef<Path>,
    format: InputFormat,
    src: LangCode,
    tgt: LangCode,
) -> Result<IngestReport> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut report = IngestReport::default();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        let parsed: std::result::Result<(String, String), String> = match format {
            InputFormat::Tsv => {
                let mut cols = line.split('\t');
                match (cols.next(), cols.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err("expected at least 2 tab-separated columns".to_string()),
                }
            }
            InputFormat::Jsonl => serde_json::from_str::<JsonlRow>(line)
                .map(|r| (r.src, r.tgt))
                .map_err(|e| format!("bad json row: {e}")),
        };
        let pair = parsed.and_then(|(s, t)| {
            SentencePair::new(format!("{file}:{line_no}"), src, tgt, s, t).map_err(|e| e.to_string())
        });
        match pair {
            Ok(p) => report.pairs.push(p),
            Err(reason) => report.rejects.push(Reject {
                file: file.clone(),
                line: line_no,
                reason,
            }),
        }
    }
    Ok(report)
}

pub fn write_rejects(path: impl AsRef<Path>, rejects: &[Reject]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in rejects {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes pairs as `source\ttarget\n` rows.
pub fn write_tsv(path: impl AsRef<Path>, pairs: &[SentencePair]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in pairs {
        writeln!(w, "{}\t{}", p.source_text, p.target_text).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Anything that can count tokens in a sentence.
pub trait TokenCounter {
    fn count_tokens(&self, text: &str, lang: LangCode) -> usize;
}

/// Counts BLEU-style word tokens. Usable before a BPE vocab exists.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCounter;

impl TokenCounter for WordCounter {
    fn count_tokens(&self, text: &str, lang: LangCode) -> usize {
        tokenize_for_bleu(text, lang).len()
    }
}

impl TokenCounter for Vocab {
    fn count_tokens(&self, text: &str, _lang: LangCode) -> usize {
        self.encode(text).len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    pub max_len_ratio: f64,
    pub max_tokens_per_side: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        CleanConfig {
            max_len_ratio: 9.0,
            max_tokens_per_side: 256,
        }
    }
}

/// Drops empty, duplicate, overlong and badly length-mismatched pairs.
/// Survivors keep their input order.
pub fn clean(
    pairs: &[SentencePair],
    config: &CleanConfig,
    counter: &dyn TokenCounter,
) -> Result<Vec<SentencePair>> {
    if !(config.max_len_ratio > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "max_len_ratio must be > 1, got {}",
            config.max_len_ratio
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.source_text.trim().is_empty() || p.target_text.trim().is_empty() {
            continue;
        }
        let a = counter.count_tokens(&p.source_text, p.source_lang);
        let b = counter.count_tokens(&p.target_text, p.target_lang);
        if a == 0 || b == 0 || a > config.max_tokens_per_side || b > config.max_tokens_per_side {
            continue;
        }
        if a.max(b) as f64 / a.min(b) as f64 > config.max_len_ratio {
            continue;
        }
        if !seen.insert(p.dedup_key()) {
            continue;
        }
        out.push(p.clone());
    }
    Ok(out)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Uniform sample of `k` pairs without replacement, returned in input order.
pub fn sample_seeded(pairs: &[SentencePair], k: usize, seed: u64) -> Result<Vec<SentencePair>> {
    if k > pairs.len() {
        return Err(Error::SampleTooLarge {
            k,
            available: pairs.len(),
        });
    }
    let mut chosen = shuffled_indices(pairs.len(), seed);
    chosen.truncate(k);
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| pairs[i].clone()).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

/// Seeded train/dev/test partition. Each part keeps input order.
pub fn split(
    pairs: &[SentencePair],
    dev_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Split> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(dev_fraction) || !ok(test_fraction) || dev_fraction + test_fraction >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be >= 0 with sum < 1, got dev={dev_fraction} test={test_fraction}"
        )));
    }
    let n = pairs.len();
    let n_dev = (n as f64 * dev_fraction).floor() as usize;
    let n_test = (n as f64 * test_fraction).floor() as usize;
    let order = shuffled_indices(n, seed);
    let mut dev_idx = order[..n_dev].to_vec();
    let mut test_idx = order[n_dev..n_dev + n_test].to_vec();
    let mut train_idx = order[n_dev + n_test..].to_vec();
    let pick = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: pick(&mut train_idx),
        dev: pick(&mut dev_idx),
        test: pick(&mut test_idx),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pair_count: usize,
    pub token_count: usize,
    pub per_direction_counts: BTreeMap<String, usize>,
}

/// Pair and token counts under `vocab`.
pub fn stats(pairs: &[SentencePair], vocab: &Vocab) -> CorpusStats {
    let mut s = CorpusStats::default();
    for p in pairs {
        s.pair_count += 1;
        s.token_count += vocab.encode(&p.source_text).len() + vocab.encode(&p.target_text).len();
        *s.per_direction_counts.entry(p.direction().key()).or_default() += 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: usize, s: &str, t: &str) -> SentencePair {
        SentencePair::new(format!("p{id}"), LangCode::De, LangCode::En, s, t).unwrap()
    }

    fn fixture(n: usize) -> Vec<SentencePair> {
        (0..n).map(|i| pair(i, &format!("Satz {i}"), &format!("sentence {i}"))).collect()
    }

    #[test]
    fn tsv_ingest_and_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "Hallo.\tHello.\nonly one column\n\tempty source\n").unwrap();
        let rep = ingest(&path, InputFormat::Tsv, LangCode::De, LangCode::En).unwrap();
        assert_eq!(rep.pairs.len(), 1);
        assert_eq!(rep.pairs[0].source_text(), "Hallo.");
        assert_eq!(rep.pairs[0].target_text(), "Hello.");
        assert_eq!(rep.pairs[0].id(), "c.tsv:1");
        assert_eq!(rep.rejects.len(), 2);
        assert_eq!(rep.rejects[0].line, 2);
        assert_eq!(rep.rejects[1].line, 3);
    }

    #[test]
    fn jsonl_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"src\":\"你好。\",\"tgt\":\"Hello.\"}\n{\"src\":1}\n").unwrap();
        let rep = ingest(&path, InputFormat::Jsonl, LangCode::Zh, LangCode::En).unwrap();
        assert_eq!(rep.pairs.len(), 1);
        assert_eq!(rep.pairs[0].source_text(), "你好。");
        assert_eq!(rep.rejects.len(), 1);
    }

    #[test]
    fn ingest_missing_file_is_fatal() {
        assert!(matches!(
            ingest("/nonexistent/x.tsv", InputFormat::Tsv, LangCode::De, LangCode::En),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_report_is_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let r = Reject {
            file: "a.tsv".into(),
            line: 3,
            reason: "bad".into(),
        };
        write_rejects(&path, &[r]).unwrap();
        assert_eq!(
            fs::read_to_string(&path).unwrap(),
            "{\"file\":\"a.tsv\",\"line\":3,\"reason\":\"bad\"}\n"
        );
    }

    #[test]
    fn clean_dedups_and_filters_ratio() {
        let long = vec!["w"; 20].join(" ");
        let input = vec![
            pair(0, "a b", "c d"),
            pair(1, "a b", "c d"),
            pair(2, " a b", "c d "),
            pair(3, "x", &long),
            pair(4, "e f", "g h"),
        ];
        let out = clean(&input, &CleanConfig::default(), &WordCounter).unwrap();
        let ids: Vec<_> = out.iter().map(|p| p.id()).collect();
        assert_eq!(ids, ["p0", "p4"]);
    }

    #[test]
    fn clean_nfc_dedup() {
        // precomposed vs combining diaeresis
        let input = vec![pair(0, "Grüße", "greetings"), pair(1, "Gru\u{308}ße", "greetings")];
        assert_eq!(clean(&input, &CleanConfig::default(), &WordCounter).unwrap().len(), 1);
    }

    #[test]
    fn clean_token_cap() {
        let cfg = CleanConfig {
            max_len_ratio: 9.0,
            max_tokens_per_side: 3,
        };
        let input = vec![pair(0, "a b c d", "a b c d"), pair(1, "a b", "a b")];
        assert_eq!(clean(&input, &cfg, &WordCounter).unwrap().len(), 1);
    }

    #[test]
    fn clean_identity_and_bad_ratio() {
        let input = fixture(10);
        assert_eq!(clean(&input, &CleanConfig::default(), &WordCounter).unwrap(), input);
        let bad = CleanConfig {
            max_len_ratio: 1.0,
            ..Default::default()
        };
        assert!(clean(&input, &bad, &WordCounter).is_err());
    }

    #[test]
    fn sample_edges() {
        let pairs = fixture(10);
        assert_eq!(sample_seeded(&pairs, 10, 99).unwrap(), pairs);
        assert!(sample_seeded(&pairs, 0, 1).unwrap().is_empty());
        let err = sample_seeded(&pairs, 11, 1).unwrap_err().to_string();
        assert!(err.contains("11") && err.contains("10"), "{err}");
    }

    #[test]
    fn sample_deterministic_and_every_element_reachable() {
        let pairs = fixture(10);
        let a = sample_seeded(&pairs, 3, 7).unwrap();
        let b = sample_seeded(&pairs, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let mut hit = HashSet::new();
        for seed in 0..200 {
            for p in sample_seeded(&pairs, 3, seed).unwrap() {
                hit.insert(p.id().to_string());
            }
        }
        assert_eq!(hit.len(), 10);
    }

    #[test]
    fn split_sizes() {
        let pairs = fixture(100);
        let s = split(&pairs, 0.1, 0.1, 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
        assert_eq!(split(&pairs, 0.1, 0.1, 3).unwrap(), s);
        let all = split(&pairs, 0.0, 0.0, 3).unwrap();
        assert_eq!(all.train, pairs);
        assert!(all.dev.is_empty() && all.test.is_empty());
        assert!(split(&pairs, 0.6, 0.4, 3).is_err());
        assert!(split(&pairs, -0.1, 0.4, 3).is_err());
    }

    #[test]
    fn stats_counts() {
        let vocab = Vocab::train(&["ab cd"], 300).unwrap();
        assert_eq!(stats(&[], &vocab), CorpusStats::default());
        let pairs = vec![
            pair(0, "ab", "cd"),
            SentencePair::new("x", LangCode::En, LangCode::De, "ab", "cd ab").unwrap(),
        ];
        let s = stats(&pairs, &vocab);
        let expect: usize = ["ab", "cd", "ab", "cd ab"].iter().map(|t| vocab.encode(t).len()).sum();
        assert_eq!(s.token_count, expect);
        assert_eq!(s.per_direction_counts["de-en"], 1);
        assert_eq!(s.per_direction_counts["en-de"], 1);
    }
}
