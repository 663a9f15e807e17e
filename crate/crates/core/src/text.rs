//! Word-level tokenization shared by BLEU scoring and corpus hygiene.

use crate::lang::LangCode;

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x3000..=0x303F
        | 0xFF00..=0xFFEF
        | 0x20000..=0x2A6DF)
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '„' | '–' | '—' | '…' | '¿' | '¡' | '·'
        )
}

/// Splits `text` into BLEU tokens.
///
/// Punctuation characters always stand alone and whitespace separates the
/// remaining spans. For Chinese every CJK character is its own token.
pub fn tokenize_for_bleu(text: &str, lang: LangCode) -> Vec<String> {
    let per_char_cjk = lang == LangCode::Zh;
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) || (per_char_cjk && is_cjk(c)) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
