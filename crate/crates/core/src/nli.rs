//! Entailment backends.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntailmentProbs {
    pub entail: f64,
    pub neutral: f64,
    pub contradict: f64,
}

impl EntailmentProbs {
    /// Each component in [0,1] and the three summing to 1 ± 1e-6.
    pub fn is_valid(&self) -> bool {
        let parts = [self.entail, self.neutral, self.contradict];
        parts.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p))
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-6
    }
}

pub trait Entailment: Send + Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentProbs>;
}

/// True iff the backend's entailment probability is at least `threshold`.
pub fn entails(nli: &dyn Entailment, premise: &str, hypothesis: &str, threshold: f64) -> Result<bool> {
    if premise.trim().is_empty() || hypothesis.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(nli.judge(premise, hypothesis)?.entail >= threshold)
}

/// Symmetric word relation loaded from a text file.
///
/// One entry per line: `word = other, other, ...`. Blank lines and lines
/// starting with `#` are ignored. Every word must be a single token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    related: BTreeMap<String, BTreeSet<String>>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Lexicon> {
        let mut lex = Lexicon::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line.split_once('=').ok_or_else(|| Error::Lexicon {
                line: line_no,
                message: "expected `word = related, ...`".into(),
            })?;
            let head = single_token(head, line_no)?;
            let mut any = false;
            for other in rest.split(',') {
                if other.trim().is_empty() {
                    continue;
                }
                let other = single_token(other, line_no)?;
                lex.insert(&head, &other);
                any = true;
            }
            if !any {
                return Err(Error::Lexicon {
                    line: line_no,
                    message: format!("`{head}` has no related words"),
                });
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        Lexicon::parse(&std::fs::read_to_string(path)?)
    }

    pub fn insert(&mut self, a: &str, b: &str) {
        if a == b {
            return;
        }
        self.related.entry(a.to_string()).or_default().insert(b.to_string());
        self.related.entry(b.to_string()).or_default().insert(a.to_string());
    }

    pub fn related(&self, a: &str, b: &str) -> bool {
        self.related.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn len(&self) -> usize {
        self.related.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.related.is_empty()
    }
}

fn single_token(word: &str, line: usize) -> Result<String> {
    let toks = tokenize(word);
    match toks.as_slice() {
        [t] => Ok(t.clone()),
        _ => Err(Error::Lexicon {
            line,
            message: format!("`{}` is not a single token", word.trim()),
        }),
    }
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "is", "are", "was", "were", "be", "been", "am", "it", "its",
    "s", "of", "in", "on", "at", "to", "for", "with", "by", "from", "and", "or", "but", "as", "so", "very", "me",
    "you", "can", "i", "we", "they", "he", "she",
];

/// Token-coverage entailment heuristic for offline runs.
///
/// `entail` is the fraction of hypothesis content tokens that appear in the
/// premise or are synonyms of a premise token. `contradict` is the fraction
/// of the remaining hypothesis tokens with an antonym in the premise. The
/// rest is `neutral`. Content tokens exclude a small function-word list and
/// any frame tokens configured with [`with_frame_tokens`](Self::with_frame_tokens).
#[derive(Clone, Debug, Default)]
pub struct LexicalEntailment {
    synonyms: Lexicon,
    antonyms: Lexicon,
    ignored: BTreeSet<String>,
}

impl LexicalEntailment {
    pub fn new(synonyms: Lexicon, antonyms: Lexicon) -> Self {
        LexicalEntailment {
            synonyms,
            antonyms,
            ignored: STOP_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Tokens to treat as non-content, e.g. the literal words of a template
    /// shared by every probe sentence.
    pub fn with_frame_tokens<I: IntoIterator<Item = String>>(mut self, tokens: I) -> Self {
        self.ignored.extend(tokens);
        self
    }

    fn content(&self, sentence: &str) -> BTreeSet<String> {
        tokenize(sentence)
            .into_iter()
            .filter(|t| !self.ignored.contains(t))
            .collect()
    }
}

impl Entailment for LexicalEntailment {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentProbs> {
        let p = self.content(premise);
        let h = self.content(hypothesis);
        if h.is_empty() {
            return Ok(EntailmentProbs {
                entail: 1.0,
                neutral: 0.0,
                contradict: 0.0,
            });
        }
        let mut covered = 0usize;
        let mut contradicted = 0usize;
        for tok in &h {
            if p.contains(tok) || p.iter().any(|q| self.synonyms.related(q, tok)) {
                covered += 1;
            } else if p.iter().any(|q| self.antonyms.related(q, tok)) {
                contradicted += 1;
            }
        }
        let n = h.len() as f64;
        Ok(EntailmentProbs {
            entail: covered as f64 / n,
            neutral: (h.len() - covered - contradicted) as f64 / n,
            contradict: contradicted as f64 / n,
        })
    }
}
