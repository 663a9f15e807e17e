//! Training recipe for translation-capable small causal language models:
//! interlinear bilingual continual pre-training, source-language-consistent
//! instruction tuning with low-rank adapters, and BLEU evaluation.

pub mod corpus;
pub mod demo;
pub mod error;
pub mod eval;
pub mod instruction;
pub mod interlinear;
pub mod lang;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod text;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use lang::{Direction, LangCode};
