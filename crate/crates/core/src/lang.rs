//! Language codes and translation directions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A supported language. `Xx` is the synthetic cipher language used by the
/// built-in demo task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LangCode {
    En,
    De,
    Zh,
    Xx,
}

impl LangCode {
    pub const ALL: [LangCode; 4] = [LangCode::En, LangCode::De, LangCode::Zh, LangCode::Xx];

    pub fn code(self) -> &'static str {
        match self {
            LangCode::En => "en",
            LangCode::De => "de",
            LangCode::Zh => "zh",
            LangCode::Xx => "xx",
        }
    }

    /// English name, used as the line label in interlinear documents.
    pub fn display_name(self) -> &'static str {
        match self {
            LangCode::En => "English",
            LangCode::De => "German",
            LangCode::Zh => "Chinese",
            LangCode::Xx => "Cipher",
        }
    }

    /// The language's name for itself.
    pub fn native_name(self) -> &'static str {
        match self {
            LangCode::En => "English",
            LangCode::De => "Deutsch",
            LangCode::Zh => "中文",
            LangCode::Xx => "Cipher",
        }
    }

    pub fn from_display_name(name: &str) -> Option<LangCode> {
        Self::ALL.into_iter().find(|l| l.display_name() == name)
    }

    fn supported_list() -> String {
        Self::ALL.map(|l| l.code()).join(", ")
    }
}

impl FromStr for LangCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| Error::UnsupportedLanguage {
                code: s.to_string(),
                supported: Self::supported_list(),
            })
    }
}

impl TryFrom<String> for LangCode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LangCode> for String {
    fn from(l: LangCode) -> String {
        l.code().to_string()
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// An ordered (source, target) language pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub src: LangCode,
    pub tgt: LangCode,
}

impl Direction {
    pub fn new(src: LangCode, tgt: LangCode) -> Result<Self> {
        if src == tgt {
            return Err(Error::InvalidArgument(format!(
                "direction needs two distinct languages, got {src}-{src}"
            )));
        }
        Ok(Direction { src, tgt })
    }

    pub fn reversed(self) -> Direction {
        Direction {
            src: self.tgt,
            tgt: self.src,
        }
    }

    /// `en-de` style key used in config tables and reports.
    pub fn key(self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(['-', '>'])
            .ok_or_else(|| Error::InvalidArgument(format!("direction `{s}` is not `src-tgt`")))?;
        Direction::new(a.parse()?, b.trim_start_matches('>').parse()?)
    }
}
