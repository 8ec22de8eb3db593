//! Zero-shot prompt classification with prompt-aware retrieval of
//! continual-pretraining data and entailment-filtered verbalizer
//! augmentation.
//!
//! The flow for one pattern is: fill the prompt for every unlabeled input,
//! turn the top predicted fillers into search queries, retrieve sentences
//! from a general corpus, continue training the masked LM on the deduplicated
//! hits, optionally grow the verbalizer with candidates the entailment model
//! accepts, then classify.

pub mod augment;
pub mod config;
pub mod error;
pub mod eval;
pub mod index;
pub mod lm;
pub mod nli;
pub mod pipeline;
pub mod prompt;
pub mod query;
pub mod text;
pub mod wire;

pub use error::{Error, Result};
pub use index::{build_index, CorpusIndex, Hit, ScoringMode, SentenceDoc};
pub use lm::{CountMlm, FillerPrediction, MaskedLm, TrainConfig};
pub use nli::{entails, Entailment, EntailmentProbs, LexicalEntailment, Lexicon};
pub use prompt::{predict_label, score_label, LabelScore, PromptTemplate, Verbalizer};
pub use text::tokenize;
