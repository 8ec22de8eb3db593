//! Masked language model contract.
//!
//! A backend predicts single-token fillers for one mask position and can be
//! continually trained on plain sentences. Training never mutates the
//! receiver; it returns a new state with its own checkpoint id.

mod count;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use count::{CountMlm, DEFAULT_ALPHA, DEFAULT_RADIUS};

pub const DEFAULT_MASK_TOKEN: &str = "<mask>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillerPrediction {
    pub token: String,
    pub prob: f64,
}

/// Probability the backend assigns to a requested word. `known` is false
/// when the word is outside the backend vocabulary (or beyond what an
/// external backend returned) and the value is a smoothed/fallback estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WordProbability {
    pub prob: f64,
    pub known: bool,
}

/// Hyperparameters forwarded to neural backends. The count backend ignores
/// them: it makes exactly one counting pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(serialize_with = "crate::wire::decimal::serialize")]
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub eval_checkpoint_step: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 96,
            epochs: 3,
            eval_checkpoint_step: 500,
        }
    }
}

pub trait MaskedLm: Send + Sync {
    fn mask_token(&self) -> &str;

    /// Identifier of the model state these predictions come from.
    fn checkpoint(&self) -> String;

    /// The `top_n` most probable fillers, sorted by probability descending
    /// and then token ascending.
    fn predict_fillers(&self, masked_text: &str, top_n: usize) -> Result<Vec<FillerPrediction>>;

    /// Probability of each of `words` at the mask position.
    fn word_probabilities(&self, masked_text: &str, words: &[String]) -> Result<Vec<WordProbability>>;

    /// Continues training on `sentences` and returns the adapted state.
    /// An empty set returns an unchanged copy.
    fn continual_train(&self, sentences: &[String], config: &TrainConfig) -> Result<Box<dyn MaskedLm>>;
}

/// Splits a masked text around its single mask marker.
pub fn split_masked<'a>(masked_text: &'a str, marker: &str) -> Result<(&'a str, &'a str)> {
    if marker.is_empty() {
        return Err(Error::Config("mask marker must not be empty".into()));
    }
    let found = masked_text.matches(marker).count();
    if found != 1 {
        return Err(Error::MalformedPrompt {
            marker: marker.to_string(),
            found,
        });
    }
    let pos = masked_text.find(marker).expect("counted above");
    Ok((&masked_text[..pos], &masked_text[pos + marker.len()..]))
}

/// Ordering used for every prediction list: probability descending, then
/// token ascending.
pub fn prediction_order(a: &FillerPrediction, b: &FillerPrediction) -> Ordering {
    b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token))
}
