//! A small invented language ("Cipher", code `xx`) paired with a toy
//! English grammar. Cipher replaces every English word with a seeded
//! pseudo-word and puts adjectives after their noun.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentencePair;
use crate::error::{Error, Result};
use crate::instruction::{TemplateTable, ENGLISH_FIXED_PATTERN};
use crate::lang::{Direction, LangCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pos {
    Det,
    Noun,
    Adj,
    Verb,
    Adv,
    Prep,
    Meta,
}

const DETS: &[&str] = &["the", "a", "this", "every"];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "fish", "horse", "child", "woman", "man", "teacher", "farmer", "king", "queen",
    "river", "tree", "house", "garden", "city", "road", "boat", "book", "letter", "song", "apple", "bread",
    "stone", "window", "door", "mountain", "forest", "friend",
];
const ADJS: &[&str] = &[
    "big", "small", "old", "young", "red", "green", "blue", "happy", "sad", "quiet", "loud", "bright",
    "dark", "cold", "warm", "tall", "short", "brave", "clever", "gentle",
];
const VERBS: &[&str] = &[
    "saw", "found", "liked", "carried", "painted", "followed", "heard", "watched", "helped", "visited",
    "opened", "closed", "built", "kept", "wanted", "needed", "bought", "sold", "loved", "lost",
];
const ADVS: &[&str] = &["today", "yesterday", "slowly", "quickly", "often", "again", "soon", "twice"];
const PREPS: &[&str] = &["near", "behind", "under", "with", "from", "into"];
/// Words that only appear in instructions.
const META: &[&str] = &["translate", "sentence", "to", "english", "cipher"];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "k", "m"];

/// Bidirectional English ↔ Cipher word table.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    to_cipher: BTreeMap<&'static str, String>,
    pos: BTreeMap<&'static str, Pos>,
}

impl Lexicon {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut used = HashSet::new();
        let mut to_cipher = BTreeMap::new();
        let mut pos = BTreeMap::new();
        let groups: [(Pos, &[&'static str]); 7] = [
            (Pos::Det, DETS),
            (Pos::Noun, NOUNS),
            (Pos::Adj, ADJS),
            (Pos::Verb, VERBS),
            (Pos::Adv, ADVS),
            (Pos::Prep, PREPS),
            (Pos::Meta, META),
        ];
        for (p, words) in groups {
            let syllables = if matches!(p, Pos::Det | Pos::Prep) { 1 } else { 2 };
            for &w in words {
                let cipher = loop {
                    let mut s = String::new();
                    for _ in 0..syllables + rng.gen_range(0..2) {
                        s.push_str(ONSETS.choose(&mut rng).expect("non-empty"));
                        s.push_str(VOWELS.choose(&mut rng).expect("non-empty"));
                    }
                    s.push_str(CODAS.choose(&mut rng).expect("non-empty"));
                    if used.insert(s.clone()) {
                        break s;
                    }
                };
                to_cipher.insert(w, cipher);
                pos.insert(w, p);
            }
        }
        Lexicon { to_cipher, pos }
    }

    /// Number of distinct words, instruction-only words included.
    pub fn len(&self) -> usize {
        self.to_cipher.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_cipher.is_empty()
    }

    pub fn cipher(&self, english: &str) -> Option<&str> {
        self.to_cipher.get(english).map(String::as_str)
    }

    /// Word-by-word Cipher rendering of lowercase English words, with
    /// adjectives moved behind the noun they precede.
    pub fn encode_words(&self, words: &[&str]) -> Result<String> {
        let mut out: Vec<&str> = Vec::with_capacity(words.len());
        let mut pending_adj: Vec<&str> = Vec::new();
        for &w in words {
            let c = self
                .cipher(w)
                .ok_or_else(|| Error::InvalidArgument(format!("`{w}` is not in the cipher lexicon")))?;
            match self.pos[w] {
                Pos::Adj => pending_adj.push(c),
                Pos::Noun => {
                    out.push(c);
                    out.append(&mut pending_adj);
                }
                _ => {
                    out.append(&mut pending_adj);
                    out.push(c);
                }
            }
        }
        out.append(&mut pending_adj);
        Ok(out.join(" "))
    }
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(DETS.choose(rng).expect("non-empty"));
    if rng.gen_bool(0.5) {
        out.push(ADJS.choose(rng).expect("non-empty"));
    }
    out.push(NOUNS.choose(rng).expect("non-empty"));
}

/// One random sentence as lowercase English words, without punctuation.
fn sentence_words(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let mut w = Vec::with_capacity(12);
    noun_phrase(rng, &mut w);
    w.push(VERBS.choose(rng).expect("non-empty"));
    noun_phrase(rng, &mut w);
    if rng.gen_bool(0.4) {
        w.push(PREPS.choose(rng).expect("non-empty"));
        noun_phrase(rng, &mut w);
    }
    if rng.gen_bool(0.3) {
        w.push(ADVS.choose(rng).expect("non-empty"));
    }
    w
}

fn english_text(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_uppercase();
        s.replace_range(..1, &upper);
    }
    s.push('.');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub english_mono: usize,
    pub cipher_mono: usize,
    /// Sentences per monolingual text.
    pub sentences_per_text: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub sft_pairs: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            english_mono: 2000,
            cipher_mono: 500,
            sentences_per_text: 12,
            train_pairs: 5000,
            dev_pairs: 200,
            test_pairs: 500,
            sft_pairs: 150,
        }
    }
}

/// Generated data for one experiment. Pair sets are disjoint by sentence;
/// every pair is oriented English → Cipher. Monolingual texts are lines of
/// the form `"<Language>: <sentence>\n"`, one language per text.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub english_mono: Vec<String>,
    pub cipher_mono: Vec<String>,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    pub sft: Vec<SentencePair>,
}

pub struct CipherLanguage {
    pub lexicon: Lexicon,
}

impl CipherLanguage {
    pub fn new(seed: u64) -> Self {
        CipherLanguage {
            lexicon: Lexicon::new(seed),
        }
    }

    pub fn translate_words(&self, words: &[&str]) -> Result<String> {
        Ok(self.lexicon.encode_words(words)? + " .")
    }

    fn pair(&self, id: String, words: &[&str]) -> Result<SentencePair> {
        SentencePair::new(id, LangCode::En, LangCode::Xx, english_text(words), self.translate_words(words)?)
    }

    pub fn generate(&self, cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let needed = cfg.train_pairs + cfg.dev_pairs + cfg.test_pairs + cfg.sft_pairs;
        let mut seen = BTreeSet::new();
        let mut parallel = Vec::with_capacity(needed);
        let mut attempts = 0usize;
        while parallel.len() < needed {
            attempts += 1;
            if attempts > needed * 50 {
                return Err(Error::InvalidArgument(format!(
                    "could not draw {needed} distinct sentences"
                )));
            }
            let w = sentence_words(&mut rng);
            if seen.insert(w.clone()) {
                parallel.push(w);
            }
        }
        let mut take = |n: usize, prefix: &str| -> Result<Vec<SentencePair>> {
            parallel
                .drain(..n)
                .enumerate()
                .map(|(i, w)| self.pair(format!("{prefix}-{i}"), &w))
                .collect()
        };
        let test = take(cfg.test_pairs, "test")?;
        let dev = take(cfg.dev_pairs, "dev")?;
        let sft = take(cfg.sft_pairs, "sft")?;
        let train = take(cfg.train_pairs, "train")?;
        let k = cfg.sentences_per_text.max(1);
        let en_label = LangCode::En.display_name();
        let xx_label = LangCode::Xx.display_name();
        let english_mono = (0..cfg.english_mono)
            .map(|_| {
                (0..k)
                    .map(|_| format!("{en_label}: {}\n", english_text(&sentence_words(&mut rng))))
                    .collect::<String>()
            })
            .collect();
        let cipher_mono = (0..cfg.cipher_mono)
            .map(|_| {
                (0..k)
                    .map(|_| Ok(format!("{xx_label}: {}\n", self.translate_words(&sentence_words(&mut rng))?)))
                    .collect::<Result<String>>()
            })
            .collect::<Result<_>>()?;
        Ok(SyntheticCorpus {
            english_mono,
            cipher_mono,
            train,
            dev,
            test,
            sft,
        })
    }

    /// Default templates plus both Cipher directions: English-sourced
    /// instructions stay English, Cipher-sourced ones are written in Cipher.
    pub fn templates(&self) -> Result<TemplateTable> {
        let en_xx = Direction::new(LangCode::En, LangCode::Xx)?;
        let xx_en = en_xx.reversed();
        let en = ENGLISH_FIXED_PATTERN
            .replace("{src}", LangCode::En.display_name())
            .replace("{tgt}", LangCode::Xx.display_name());
        let xx = self
            .lexicon
            .encode_words(&["translate", "this", "sentence", "from", "cipher", "to", "english"])?
            + " :";
        Ok(TemplateTable::default().with_entry(en_xx, en).with_entry(xx_en, xx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            english_mono: 20,
            cipher_mono: 10,
            train_pairs: 300,
            dev_pairs: 20,
            test_pairs: 50,
            sft_pairs: 30,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn lexicon_is_about_one_hundred_words_and_injective() {
        let lex = Lexicon::new(1);
        assert!((90..=110).contains(&lex.len()), "{}", lex.len());
        let distinct: BTreeSet<&String> = lex.to_cipher.values().collect();
        assert_eq!(distinct.len(), lex.len());
    }

    #[test]
    fn adjectives_follow_nouns() {
        let lex = Lexicon::new(1);
        let got = lex.encode_words(&["the", "big", "dog"]).unwrap();
        let want = format!("{} {} {}", lex.cipher("the").unwrap(), lex.cipher("dog").unwrap(), lex.cipher("big").unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn generation_is_seeded_and_disjoint() {
        let lang = CipherLanguage::new(3);
        let a = lang.generate(&small()).unwrap();
        assert_eq!(a, lang.generate(&small()).unwrap());
        assert_eq!((a.train.len(), a.dev.len(), a.test.len(), a.sft.len()), (300, 20, 50, 30));
        let test: HashSet<&str> = a.test.iter().map(|p| p.source_text()).collect();
        for p in a.train.iter().chain(&a.dev).chain(&a.sft) {
            assert!(!test.contains(p.source_text()));
        }
        assert!(a.train[0].source_text().ends_with('.'));
        assert!(a.train[0].target_text().ends_with(" ."));
    }

    #[test]
    fn cipher_templates_cover_both_directions() {
        let lang = CipherLanguage::new(3);
        let t = lang.templates().unwrap();
        let sc = crate::instruction::InstructionMode::SourceConsistent;
        let en_xx = t.get("en-xx".parse().unwrap(), sc).unwrap().text;
        assert_eq!(en_xx, "Translate this sentence from English to Cipher:");
        let xx_en = t.get("xx-en".parse().unwrap(), sc).unwrap().text;
        assert!(xx_en.starts_with(lang.lexicon.cipher("translate").unwrap()));
    }
}
