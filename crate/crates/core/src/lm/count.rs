//! Window co-occurrence model with additive smoothing.
//!
//! For a candidate `w` and context tokens `c` (up to `radius` tokens on each
//! side of the mask):
//!
//! ```text
//! score(w) = ln((U(w)+α) / (T+α·V)) + Σ_c ln((C(w,c)+α) / (U(w)+α·V))
//! ```
//!
//! where `U` are unigram counts, `T` the token total, `V` the vocabulary
//! size and `C(w,c)` the number of times `c` appeared within `radius` of
//! `w`. Probabilities are `exp(score)` normalized over the vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    prediction_order, split_masked, FillerPrediction, MaskedLm, TrainConfig, WordProbability, DEFAULT_MASK_TOKEN,
};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub const DEFAULT_RADIUS: usize = 5;
pub const DEFAULT_ALPHA: f64 = 0.1;

const STATE_FORMAT: &str = "adaprompt-count-mlm";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CountState {
    format: String,
    version: u32,
    alpha: f64,
    radius: usize,
    mask_token: String,
    vocab: BTreeSet<String>,
    total_tokens: u64,
    unigram: BTreeMap<String, u64>,
    /// `cooccur[w][c]`: occurrences of `c` within the window around `w`.
    cooccur: BTreeMap<String, BTreeMap<String, u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountMlm {
    state: CountState,
    checkpoint: String,
}

impl Default for CountMlm {
    fn default() -> Self {
        CountMlm::new(DEFAULT_ALPHA, DEFAULT_RADIUS)
    }
}

impl CountMlm {
    pub fn new(alpha: f64, radius: usize) -> CountMlm {
        assert!(alpha.is_finite() && alpha > 0.0, "alpha must be positive");
        let mut m = CountMlm {
            state: CountState {
                format: STATE_FORMAT.into(),
                version: STATE_VERSION,
                alpha,
                radius,
                mask_token: DEFAULT_MASK_TOKEN.into(),
                vocab: BTreeSet::new(),
                total_tokens: 0,
                unigram: BTreeMap::new(),
                cooccur: BTreeMap::new(),
            },
            checkpoint: String::new(),
        };
        m.refresh_checkpoint();
        m
    }

    pub fn with_mask_token(mut self, marker: impl Into<String>) -> Self {
        self.state.mask_token = marker.into();
        self.refresh_checkpoint();
        self
    }

    /// Declares vocabulary entries without counting them. A model with a
    /// vocabulary and no counts predicts the uniform distribution.
    pub fn with_vocabulary<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for w in words {
            self.state.vocab.extend(tokenize(w.as_ref()));
        }
        self.refresh_checkpoint();
        self
    }

    /// Builds a model by counting `sentences` once.
    pub fn trained<I, S>(alpha: f64, radius: usize, sentences: I) -> CountMlm
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut m = CountMlm::new(alpha, radius);
        m.count(sentences);
        m
    }

    pub fn alpha(&self) -> f64 {
        self.state.alpha
    }

    pub fn radius(&self) -> usize {
        self.state.radius
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.state.vocab
    }

    pub fn total_tokens(&self) -> u64 {
        self.state.total_tokens
    }

    pub fn unigram(&self, w: &str) -> u64 {
        self.state.unigram.get(w).copied().unwrap_or(0)
    }

    pub fn cooccur(&self, w: &str, c: &str) -> u64 {
        self.state.cooccur.get(w).and_then(|m| m.get(c)).copied().unwrap_or(0)
    }

    /// Adds the counts of `sentences` in place.
    pub fn count<I, S>(&mut self, sentences: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let r = self.state.radius;
        for sentence in sentences {
            let toks = tokenize(sentence.as_ref());
            for (i, w) in toks.iter().enumerate() {
                self.state.vocab.insert(w.clone());
                *self.state.unigram.entry(w.clone()).or_insert(0) += 1;
                self.state.total_tokens += 1;
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(toks.len() - 1);
                let row = self.state.cooccur.entry(w.clone()).or_default();
                for (j, c) in toks.iter().enumerate().take(hi + 1).skip(lo) {
                    if j != i {
                        *row.entry(c.clone()).or_insert(0) += 1;
                    }
                }
            }
        }
        self.refresh_checkpoint();
    }

    /// Log score of `candidate` given `context` tokens (unnormalized).
    pub fn score(&self, context: &[String], candidate: &str) -> f64 {
        let alpha = self.state.alpha;
        let v = self.state.vocab.len() as f64;
        let t = self.state.total_tokens as f64;
        let u = self.unigram(candidate) as f64;
        let row = self.state.cooccur.get(candidate);
        let mut s = ((u + alpha) / (t + alpha * v)).ln();
        let denom = u + alpha * v;
        for c in context {
            let co = row.and_then(|m| m.get(c)).copied().unwrap_or(0) as f64;
            s += ((co + alpha) / denom).ln();
        }
        s
    }

    /// Context window around the single mask in `masked_text`.
    pub fn context(&self, masked_text: &str) -> Result<Vec<String>> {
        self.context_for(masked_text, &self.state.mask_token)
    }

    /// Like [`context`](Self::context) with an explicit mask marker.
    pub fn context_for(&self, masked_text: &str, marker: &str) -> Result<Vec<String>> {
        let (left, right) = split_masked(masked_text, marker)?;
        let r = self.state.radius;
        let left = tokenize(left);
        let mut ctx: Vec<String> = left[left.len().saturating_sub(r)..].to_vec();
        ctx.extend(tokenize(right).into_iter().take(r));
        Ok(ctx)
    }

    /// Log-sum-exp of the scores over the whole vocabulary.
    fn log_normalizer(&self, context: &[String]) -> Result<(Vec<(String, f64)>, f64)> {
        if self.state.vocab.is_empty() {
            return Err(Error::EmptyModel);
        }
        let scores: Vec<(String, f64)> = self
            .state
            .vocab
            .iter()
            .map(|w| (w.clone(), self.score(context, w)))
            .collect();
        let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|(_, s)| (s - max).exp()).sum();
        Ok((scores, max + sum.ln()))
    }

    /// Full mask distribution, sorted like [`predict_fillers`](MaskedLm::predict_fillers).
    pub fn distribution(&self, context: &[String]) -> Result<Vec<FillerPrediction>> {
        let (scores, lse) = self.log_normalizer(context)?;
        let mut dist: Vec<FillerPrediction> = scores
            .into_iter()
            .map(|(token, s)| FillerPrediction {
                token,
                prob: (s - lse).exp(),
            })
            .collect();
        dist.sort_by(prediction_order);
        Ok(dist)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.state).expect("count state serialization is infallible")
    }

    /// Parses a serialized state, rejecting anything inconsistent.
    pub fn from_json(text: &str) -> Result<CountMlm> {
        let state: CountState = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        let bad = |m: &str| Err(Error::ModelFormat(m.to_string()));
        if state.format != STATE_FORMAT || state.version != STATE_VERSION {
            return bad("unsupported format or version");
        }
        if !(state.alpha.is_finite() && state.alpha > 0.0) {
            return bad("alpha must be positive and finite");
        }
        if state.mask_token.is_empty() {
            return bad("mask token is empty");
        }
        let mut total = 0u64;
        for (w, &n) in &state.unigram {
            if n == 0 || !state.vocab.contains(w) {
                return bad("unigram entry outside vocabulary or zero");
            }
            total = total
                .checked_add(n)
                .ok_or_else(|| Error::ModelFormat("unigram counts overflow".into()))?;
        }
        if total != state.total_tokens {
            return bad("total_tokens does not match unigram counts");
        }
        for (w, row) in &state.cooccur {
            if !state.vocab.contains(w) || row.iter().any(|(c, &n)| n == 0 || !state.vocab.contains(c)) {
                return bad("co-occurrence entry outside vocabulary or zero");
            }
        }
        let mut m = CountMlm {
            state,
            checkpoint: String::new(),
        };
        m.refresh_checkpoint();
        Ok(m)
    }

    fn refresh_checkpoint(&mut self) {
        let digest = Sha256::digest(self.to_json().as_bytes());
        self.checkpoint = format!("count-{}", hex::encode(&digest[..8]));
    }
}

impl MaskedLm for CountMlm {
    fn mask_token(&self) -> &str {
        &self.state.mask_token
    }

    fn checkpoint(&self) -> String {
        self.checkpoint.clone()
    }

    fn predict_fillers(&self, masked_text: &str, top_n: usize) -> Result<Vec<FillerPrediction>> {
        let ctx = self.context(masked_text)?;
        if top_n == 0 {
            return Ok(Vec::new());
        }
        let mut dist = self.distribution(&ctx)?;
        dist.truncate(top_n);
        Ok(dist)
    }

    fn word_probabilities(&self, masked_text: &str, words: &[String]) -> Result<Vec<WordProbability>> {
        let ctx = self.context(masked_text)?;
        let (_, lse) = self.log_normalizer(&ctx)?;
        Ok(words
            .iter()
            .map(|w| {
                let w = w.to_lowercase();
                WordProbability {
                    prob: (self.score(&ctx, &w) - lse).exp(),
                    known: self.state.vocab.contains(&w),
                }
            })
            .collect())
    }

    fn continual_train(&self, sentences: &[String], _config: &TrainConfig) -> Result<Box<dyn MaskedLm>> {
        if sentences.is_empty() {
            log::warn!("continual training requested on an empty set; state unchanged");
        }
        let mut next = self.clone();
        next.count(sentences);
        Ok(Box::new(next))
    }
}
