#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use adaprompt::eval::LabeledExample;
use adaprompt::lm::{FillerPrediction, WordProbability};
use adaprompt::{EntailmentProbs, Lexicon, MaskedLm, Result, TrainConfig};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lowercased runs of alphanumerics, written out by hand.
pub fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Bm25,
    TfIdf,
}

/// Exhaustive scorer: every document against every query term, no index.
pub struct Oracle {
    toks: Vec<Vec<String>>,
}

impl Oracle {
    pub fn new(docs: &[String]) -> Oracle {
        Oracle {
            toks: docs.iter().map(|d| oracle_tokens(d)).collect(),
        }
    }

    /// `(doc_id, score)` for documents sharing a term with the query, best
    /// first, ties by doc id.
    pub fn rank(&self, query: &str, mode: OracleMode) -> Vec<(u32, f64)> {
        let n = self.toks.len() as f64;
        let avgdl = self.toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let mut qtf: BTreeMap<String, f64> = BTreeMap::new();
        for t in oracle_tokens(query) {
            *qtf.entry(t).or_default() += 1.0;
        }
        let df: BTreeMap<&String, f64> = qtf
            .keys()
            .map(|t| (t, self.toks.iter().filter(|ts| ts.contains(t)).count() as f64))
            .collect();
        let (k1, b) = (1.2, 0.75);
        let mut out = Vec::new();
        for (d, dt) in self.toks.iter().enumerate() {
            let mut score = 0.0;
            let mut matched = false;
            for (term, q) in &qtf {
                let tf = dt.iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                matched = true;
                let df = df[term];
                let w = match mode {
                    OracleMode::Bm25 => {
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dt.len() as f64 / avgdl))
                    }
                    OracleMode::TfIdf => tf * (1.0 + n / df).ln(),
                };
                score += q * w;
            }
            if matched {
                out.push((d as u32, score));
            }
        }
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    }
}

/// Masked LM whose word probabilities ignore the context.
#[derive(Clone)]
pub struct TableLm {
    pub probs: HashMap<String, f64>,
}

impl MaskedLm for TableLm {
    fn mask_token(&self) -> &str {
        "<mask>"
    }

    fn checkpoint(&self) -> String {
        "table".into()
    }

    fn predict_fillers(&self, _masked: &str, top_n: usize) -> Result<Vec<FillerPrediction>> {
        let mut v: Vec<FillerPrediction> = self
            .probs
            .iter()
            .map(|(t, p)| FillerPrediction {
                token: t.clone(),
                prob: *p,
            })
            .collect();
        v.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.token.cmp(&b.token)));
        v.truncate(top_n);
        Ok(v)
    }

    fn word_probabilities(&self, _masked: &str, words: &[String]) -> Result<Vec<WordProbability>> {
        Ok(words
            .iter()
            .map(|w| WordProbability {
                prob: self.probs.get(w).copied().unwrap_or(0.0),
                known: self.probs.contains_key(w),
            })
            .collect())
    }

    fn continual_train(&self, _s: &[String], _c: &TrainConfig) -> Result<Box<dyn MaskedLm>> {
        Ok(Box::new(self.clone()))
    }
}

/// Entailment from a table keyed on `(premise, hypothesis)`.
pub struct TableNli(pub HashMap<(String, String), f64>);

impl adaprompt::Entailment for TableNli {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<EntailmentProbs> {
        let p = self
            .0
            .get(&(premise.to_string(), hypothesis.to_string()))
            .copied()
            .unwrap_or(0.0);
        Ok(EntailmentProbs {
            entail: p,
            neutral: 1.0 - p,
            contradict: 0.0,
        })
    }
}

pub const TOY_TEMPLATE: &str = "{input} overall it was {mask} .";

const POS: &[&str] = &[
    "wonderful",
    "charming",
    "delightful",
    "brilliant",
    "moving",
    "superb",
    "witty",
    "lovely",
    "gripping",
    "tender",
];
const NEG: &[&str] = &[
    "dull", "tedious", "clumsy", "boring", "bland", "messy", "lifeless", "tiresome", "shallow", "sloppy",
];
const NOUNS: &[&str] = &[
    "film", "story", "plot", "cast", "script", "ending", "acting", "score", "pacing", "dialogue",
];
const FILLER: &[&str] = &[
    "the weather report arrived late on tuesday",
    "trains to the coast leave every hour",
    "the committee met to discuss the budget",
    "a new bridge opened across the river",
    "prices for grain rose during the spring",
    "the museum extended its opening hours",
];

pub struct ToyTask {
    /// General text the base model is counted on.
    pub base_sentences: Vec<String>,
    /// Retrieval corpus.
    pub corpus: Vec<String>,
    pub eval: Vec<LabeledExample>,
    pub synonyms: Lexicon,
}

/// Two-label sentiment task. The corpus ties sentiment words to
/// good/great (positive) and bad/awful (negative); the base model only
/// knows the label words in neutral contexts.
pub fn toy_task(seed: u64, n_eval: usize, n_corpus: usize) -> ToyTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];

    let base_sentences = [
        "overall it was good .",
        "overall it was bad .",
        "it was great .",
        "it was awful .",
        "the day was fine .",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let mut corpus = Vec::with_capacity(n_corpus);
    for i in 0..n_corpus {
        let s = match i % 5 {
            0 | 1 => {
                let end = if rng.random_bool(0.7) { "good" } else { "great" };
                format!(
                    "the {} was {} and {} , it was {} .",
                    pick(&mut rng, NOUNS),
                    pick(&mut rng, POS),
                    pick(&mut rng, POS),
                    end
                )
            }
            2 | 3 => {
                let end = if rng.random_bool(0.7) { "bad" } else { "awful" };
                format!(
                    "the {} was {} and {} , it was {} .",
                    pick(&mut rng, NOUNS),
                    pick(&mut rng, NEG),
                    pick(&mut rng, NEG),
                    end
                )
            }
            _ => format!("{} ({i}) .", pick(&mut rng, FILLER)),
        };
        corpus.push(s);
    }

    let mut eval = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let (words, label) = if i % 2 == 0 {
            (POS, "positive")
        } else {
            (NEG, "negative")
        };
        eval.push(LabeledExample {
            example_id: format!("ex{i}"),
            text: format!(
                "a {} {} with {} moments",
                pick(&mut rng, words),
                pick(&mut rng, NOUNS),
                pick(&mut rng, words)
            ),
            label: label.into(),
        });
    }
    eval.shuffle(&mut rng);

    let synonyms = Lexicon::parse("good = great\nbad = awful\n").expect("static lexicon");
    ToyTask {
        base_sentences,
        corpus,
        eval,
        synonyms,
    }
}
