//! Byte-level BPE.
//!
//! Ids 0..=255 are raw bytes, followed by BOS, EOS and PAD, followed by one id
//! per learned merge. Text is pre-split into chunks (newline, an optional
//! leading space plus a word, or a single symbol) and merges never cross a
//! chunk boundary, so token counts add up across lines.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const N_BYTES: u32 = 256;
const N_SPECIALS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    id_to_bytes: Vec<String>,
    merges: Vec<(u32, u32)>,
    specials: Specials,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_bytes: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    specials: Specials,
    ranks: HashMap<(u32, u32), u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_bytes == other.id_to_bytes
            && self.merges == other.merges
            && self.specials == other.specials
    }
}

/// Splits text into merge-isolated chunks.
pub(crate) fn pre_split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |c| c.0);
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let c = chars[i].1;
        if c == '\n' {
            i += 1;
        } else if c.is_whitespace() {
            let space_before_word =
                |j: usize| chars[j].1 == ' ' && chars.get(j + 1).is_some_and(|n| !n.1.is_whitespace());
            if space_before_word(i) {
                i = word_end(&chars, i + 1);
            } else {
                i += 1;
                while i < chars.len()
                    && chars[i].1.is_whitespace()
                    && chars[i].1 != '\n'
                    && !space_before_word(i)
                {
                    i += 1;
                }
            }
        } else {
            i = word_end(&chars, i);
        }
        out.push(&text[start..end_of(i)]);
    }
    out
}

// Consumes one alphanumeric run, or a single other symbol, starting at `i`.
fn word_end(chars: &[(usize, char)], mut i: usize) -> usize {
    if chars[i].1.is_alphanumeric() {
        while i < chars.len() && chars[i].1.is_alphanumeric() {
            i += 1;
        }
        i
    } else {
        i + 1
    }
}

impl Vocab {
    /// Minimum vocab size: all bytes plus the specials.
    pub const MIN_SIZE: usize = N_BYTES as usize + N_SPECIALS;

    fn base() -> Vocab {
        let mut id_to_bytes: Vec<Vec<u8>> = (0..N_BYTES).map(|b| vec![b as u8]).collect();
        id_to_bytes.extend(std::iter::repeat_n(Vec::new(), N_SPECIALS));
        Vocab {
            id_to_bytes,
            merges: Vec::new(),
            specials: Specials {
                bos: N_BYTES,
                eos: N_BYTES + 1,
                pad: N_BYTES + 2,
            },
            ranks: HashMap::new(),
        }
    }

    /// Learns merges greedily by pair frequency. Ties go to the merged token
    /// that sorts first bytewise, then to the lower id pair.
    pub fn train<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Vocab> {
        if vocab_size < Self::MIN_SIZE {
            return Err(Error::VocabTooSmall {
                requested: vocab_size,
                minimum: Self::MIN_SIZE,
            });
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for chunk in pre_split(t.as_ref()) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(u32::from).collect(), c))
            .collect();
        words.sort();

        let mut vocab = Vocab::base();
        while vocab.id_to_bytes.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .map(|(p, c)| (c, vocab.merged_bytes(p), p))
                .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let Some((_, bytes, pair)) = best else { break };
            let new_id = vocab.id_to_bytes.len() as u32;
            vocab.id_to_bytes.push(bytes);
            vocab.ranks.insert(pair, vocab.merges.len() as u32);
            vocab.merges.push(pair);
            for (w, _) in &mut words {
                merge_in_place(w, pair, new_id);
            }
        }
        Ok(vocab)
    }

    fn merged_bytes(&self, (a, b): (u32, u32)) -> Vec<u8> {
        let mut v = self.id_to_bytes[a as usize].clone();
        v.extend_from_slice(&self.id_to_bytes[b as usize]);
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_bytes.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn bos(&self) -> u32 {
        self.specials.bos
    }

    pub fn eos(&self) -> u32 {
        self.specials.eos
    }

    pub fn pad(&self) -> u32 {
        self.specials.pad
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.id_to_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Ids whose byte string contains `byte`.
    pub fn ids_containing_byte(&self, byte: u8) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&i| self.id_to_bytes[i as usize].contains(&byte))
            .collect()
    }

    /// A copy keeping only the first `n` merges.
    pub fn truncated(&self, n: usize) -> Vocab {
        let n = n.min(self.merges.len());
        let mut v = Vocab::base();
        for &pair in &self.merges[..n] {
            v.ranks.insert(pair, v.merges.len() as u32);
            v.merges.push(pair);
            let bytes = v.merged_bytes(pair);
            v.id_to_bytes.push(bytes);
        }
        v
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for chunk in pre_split(text) {
            let mut ids: Vec<u32> = chunk.bytes().map(u32::from).collect();
            while ids.len() > 1 {
                let best = ids
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                merge_in_place(&mut ids, pair, N_BYTES + N_SPECIALS as u32 + rank);
            }
            out.extend(ids);
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.id_to_bytes.get(id as usize).ok_or(Error::UnknownToken(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decodes to text. Specials contribute no bytes; invalid UTF-8 from
    /// arbitrary id sequences is replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            id_to_bytes: self.id_to_bytes.iter().map(hex::encode).collect(),
            merges: self.merges.clone(),
            specials: self.specials,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Vocab> {
        let file: VocabFile = serde_json::from_str(s)?;
        let mut v = Vocab::base();
        if file.specials != v.specials {
            return Err(Error::InvalidArgument("vocab file has unexpected special ids".into()));
        }
        for (i, &pair) in file.merges.iter().enumerate() {
            let id = v.id_to_bytes.len();
            if pair.0 as usize >= id || pair.1 as usize >= id {
                return Err(Error::InvalidArgument(format!(
                    "merge {i} references an undefined id"
                )));
            }
            v.ranks.insert(pair, i as u32);
            v.merges.push(pair);
            let bytes = v.merged_bytes(pair);
            v.id_to_bytes.push(bytes);
        }
        let stored: Vec<Vec<u8>> = file
            .id_to_bytes
            .iter()
            .map(hex::decode)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad hex in vocab: {e}")))?;
        if stored != v.id_to_bytes {
            return Err(Error::InvalidArgument(
                "vocab id_to_bytes disagrees with its merges".into(),
            ));
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        Vocab::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn merge_in_place(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && ids[r] == pair.0 && ids[r + 1] == pair.1 {
            ids[w] = new_id;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_split_chunks() {
        assert_eq!(
            pre_split("German: Hallo.\nEnglish: Hi  there"),
            ["German", ":", " Hallo", ".", "\n", "English", ":", " Hi", " ", " there"]
        );
        assert_eq!(pre_split(""), Vec::<&str>::new());
        assert_eq!(pre_split("a\n\nb"), ["a", "\n", "\n", "b"]);
        assert_eq!(pre_split("  x"), [" ", " x"]);
        assert_eq!(pre_split("x \t"), ["x", " \t"]);
    }

    #[test]
    fn pre_split_covers_input() {
        for s in ["a  b   c", " \t x\n y ", "你好 世界。", "   ", "a\u{3000}b"] {
            assert_eq!(pre_split(s).concat(), s);
        }
    }

    #[test]
    fn first_merge_is_only_repeated_pair() {
        let v = Vocab::train(&["aaaa"], 260).unwrap();
        assert_eq!(v.merges()[0], (b'a' as u32, b'a' as u32));
    }

    #[test]
    fn empty_corpus_has_bytes_and_specials() {
        let v = Vocab::train::<&str>(&[], 1000).unwrap();
        assert_eq!(v.len(), Vocab::MIN_SIZE);
        assert_ne!(v.bos(), v.eos());
        assert!(v.bos() >= 256 && v.eos() >= 256 && v.pad() >= 256);
    }

    #[test]
    fn vocab_too_small() {
        assert!(matches!(
            Vocab::train(&["x"], 258),
            Err(Error::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // "ab" and "cd" both occur twice; "ab" sorts first.
        let v = Vocab::train(&["cd ab", "ab cd"], 260).unwrap();
        assert_eq!(v.token_bytes(259).unwrap(), b"ab");
    }

    #[test]
    fn roundtrip_and_shrink() {
        let v = Vocab::train(&["the cat sat on the mat", "der Hund", "你好世界"], 400).unwrap();
        for s in ["", "the cat", "Hund 🐕 你好", "new words\n\nhere"] {
            let ids = v.encode(s);
            assert!(ids.len() <= s.len());
            assert_eq!(v.decode(&ids).unwrap(), s);
        }
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn decode_unknown_id() {
        let v = Vocab::train(&["abc"], 300).unwrap();
        assert!(matches!(v.decode(&[9999]), Err(Error::UnknownToken(9999))));
        assert_eq!(v.decode(&[v.bos(), b'a' as u32, v.eos()]).unwrap(), "a");
    }

    #[test]
    fn json_roundtrip() {
        let v = Vocab::train(&["hello hello world"], 300).unwrap();
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.encode("hello world"), v.encode("hello world"));
    }
}
