//! Verbalizer augmentation.
//!
//! Candidates are the most frequent fillers the model predicts over the
//! unlabeled inputs. A candidate `c` joins label `l` when, for some seed `y`
//! of `l`, the probe `fill(P, y)` entails `fill(P, c)` or the reverse, with
//! entailment probability at least the threshold.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::MaskedLm;
use crate::nli::Entailment;
use crate::prompt::{PromptTemplate, Provenance, Verbalizer};
use crate::query::InputText;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Minimum entailment probability, applied to each direction separately.
    pub threshold: f64,
    /// Maximum words per label, seeds included.
    pub per_label_cap: usize,
    /// Fillers collected per input when extracting candidates.
    pub per_sample_top_n: usize,
    /// Candidate cap is `candidate_factor × |labels|`.
    #[serde(default = "default_candidate_factor")]
    pub candidate_factor: usize,
}

fn default_candidate_factor() -> usize {
    20
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            threshold: 0.4,
            per_label_cap: 5,
            per_sample_top_n: 20,
            candidate_factor: default_candidate_factor(),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if self.per_label_cap == 0 {
            return Err(Error::Config("per_label_cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// `(token, frequency)`, frequency descending then token ascending.
    pub words: Vec<(String, usize)>,
    pub cap: usize,
}

impl CandidateSet {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(|(w, _)| w.as_str())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn is_candidate_token(tok: &str) -> bool {
    tok.chars().count() >= 2 && tok.chars().all(char::is_alphabetic)
}

/// Counts how many inputs predict each filler in their top
/// `per_sample_top_n`, drops verbalizer words, non-alphabetic and
/// one-character tokens, and keeps the `candidate_factor × |L|` most frequent.
pub fn extract_candidates(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    inputs: &[InputText],
    config: &AugmentationConfig,
) -> Result<CandidateSet> {
    if inputs.is_empty() {
        return Err(Error::Config("no inputs to extract candidates from".into()));
    }
    let cap = config.candidate_factor * verbalizer.labels.len();
    let marker = backend.mask_token();
    let per_input: Vec<Vec<String>> = inputs
        .par_iter()
        .map(|input| {
            let preds = template
                .apply(&input.text, marker)
                .and_then(|masked| backend.predict_fillers(&masked, config.per_sample_top_n));
            match preds {
                Ok(preds) => {
                    let mut toks: Vec<String> = preds.into_iter().map(|p| p.token.trim().to_lowercase()).collect();
                    toks.sort();
                    toks.dedup();
                    toks
                }
                Err(e) => {
                    log::warn!("no candidates from input {}: {e}", input.id);
                    Vec::new()
                }
            }
        })
        .collect();

    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for tok in per_input.into_iter().flatten() {
        if is_candidate_token(&tok) && !verbalizer.is_word(&tok) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(String, usize)> = freq.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words.truncate(cap);
    Ok(CandidateSet { words, cap })
}

/// Entailment probabilities for one (seed, candidate) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairJudgment {
    /// `fill(P, seed)` entails `fill(P, candidate)`.
    pub seed_to_candidate: f64,
    /// `fill(P, candidate)` entails `fill(P, seed)`.
    pub candidate_to_seed: f64,
}

/// Threshold-independent judgments for every (label, seed, candidate).
/// `None` marks a pair whose backend call failed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JudgmentTable {
    pub candidates: Vec<String>,
    /// `pairs[label][seed][candidate]`.
    pub pairs: Vec<Vec<Vec<Option<PairJudgment>>>>,
}

pub fn judge_candidates(
    nli: &dyn Entailment,
    template: &PromptTemplate,
    seed: &Verbalizer,
    candidates: &CandidateSet,
) -> JudgmentTable {
    let cands: Vec<String> = candidates
        .tokens()
        .filter(|c| !seed.is_word(c))
        .map(str::to_string)
        .collect();
    let cand_probes: Vec<String> = cands.iter().map(|c| template.fill(c)).collect();
    let pairs = seed
        .labels
        .iter()
        .map(|lw| {
            lw.seeds
                .iter()
                .map(|y| {
                    let seed_probe = template.fill(y);
                    cand_probes
                        .par_iter()
                        .zip(&cands)
                        .map(|(cand_probe, c)| {
                            let fwd = nli.judge(&seed_probe, cand_probe);
                            let bwd = nli.judge(cand_probe, &seed_probe);
                            match (fwd, bwd) {
                                (Ok(f), Ok(b)) => Some(PairJudgment {
                                    seed_to_candidate: f.entail,
                                    candidate_to_seed: b.entail,
                                }),
                                (Err(e), _) | (_, Err(e)) => {
                                    log::warn!("entailment failed for `{y}` / `{c}`; candidate skipped: {e}");
                                    None
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    JudgmentTable {
        candidates: cands,
        pairs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Kept,
    Rejected,
    /// Another label accepted it with a higher entailment probability.
    LostConflict,
    /// Several labels tied for the highest probability; dropped everywhere.
    TiedConflict,
    /// Over the per-label cap.
    Trimmed,
    /// A backend call failed for this label.
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDecision {
    pub label: String,
    pub candidate: String,
    /// Raw accept decision before conflict resolution and trimming.
    pub accepted: bool,
    /// Highest entailment probability over seeds and directions.
    pub strength: f64,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    pub verbalizer: Verbalizer,
    pub decisions: Vec<CandidateDecision>,
}

impl AugmentationReport {
    pub fn accepted(&self, label: &str) -> Vec<&str> {
        self.decisions
            .iter()
            .filter(|d| d.accepted && d.label == label)
            .map(|d| d.candidate.as_str())
            .collect()
    }
}

/// Applies the threshold, cross-label assignment and per-label cap to a
/// judgment table.
pub fn decide(table: &JudgmentTable, seed: &Verbalizer, config: &AugmentationConfig) -> Result<AugmentationReport> {
    config.validate()?;
    let t = config.threshold;
    let mut decisions = Vec::new();
    // candidate -> (label index, strength) of accepting labels
    let mut accepted_by: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();

    for (li, lw) in seed.labels.iter().enumerate() {
        for (ci, cand) in table.candidates.iter().enumerate() {
            let mut failed = false;
            let mut accepted = false;
            let mut strength = 0.0f64;
            for si in 0..lw.seeds.len() {
                match table.pairs[li][si][ci] {
                    Some(j) => {
                        accepted |= j.seed_to_candidate >= t || j.candidate_to_seed >= t;
                        strength = strength.max(j.seed_to_candidate).max(j.candidate_to_seed);
                    }
                    None => failed = true,
                }
            }
            let accepted = accepted && !failed;
            if accepted {
                accepted_by.entry(ci).or_default().push((li, strength));
            }
            decisions.push(CandidateDecision {
                label: lw.label.clone(),
                candidate: cand.clone(),
                accepted,
                strength,
                outcome: if failed {
                    Outcome::Skipped
                } else if accepted {
                    Outcome::Kept
                } else {
                    Outcome::Rejected
                },
            });
        }
    }

    let n_cands = table.candidates.len();
    let decision_at = |li: usize, ci: usize| li * n_cands + ci;

    // cross-label conflicts
    let mut winners: Vec<Vec<(usize, f64)>> = vec![Vec::new(); seed.labels.len()];
    for (ci, labels) in &accepted_by {
        let best = labels.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let top: Vec<usize> = labels.iter().filter(|(_, s)| *s == best).map(|(l, _)| *l).collect();
        for (li, _) in labels {
            let d = &mut decisions[decision_at(*li, *ci)];
            if top.len() > 1 {
                d.outcome = Outcome::TiedConflict;
            } else if *li != top[0] {
                d.outcome = Outcome::LostConflict;
            }
        }
        if top.len() == 1 {
            winners[top[0]].push((*ci, best));
        }
    }

    let mut verbalizer = seed.clone();
    verbalizer.provenance = Provenance::Augmented;
    for (li, mut won) in winners.into_iter().enumerate() {
        won.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| table.candidates[a.0].cmp(&table.candidates[b.0]))
        });
        let room = config.per_label_cap.saturating_sub(seed.labels[li].seeds.len());
        for (rank, (ci, _)) in won.into_iter().enumerate() {
            if rank < room {
                verbalizer.labels[li].augmented.push(table.candidates[ci].clone());
            } else {
                decisions[decision_at(li, ci)].outcome = Outcome::Trimmed;
            }
        }
    }
    verbalizer.validate()?;
    Ok(AugmentationReport { verbalizer, decisions })
}

/// Judges every (label, seed, candidate) pair and builds the augmented
/// verbalizer.
pub fn augment_verbalizer(
    nli: &dyn Entailment,
    template: &PromptTemplate,
    seed: &Verbalizer,
    candidates: &CandidateSet,
    config: &AugmentationConfig,
) -> Result<AugmentationReport> {
    config.validate()?;
    seed.validate()?;
    let table = judge_candidates(nli, template, seed, candidates);
    decide(&table, seed, config)
}
