//! End-to-end flow for one pattern: build queries, retrieve, train, repeat,
//! optionally augment the verbalizer, then classify.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment_verbalizer, extract_candidates, AugmentationConfig, CandidateDecision, CandidateSet};
use crate::error::{Error, Result};
use crate::eval::{accuracy, LabeledExample, PredictionRecord};
use crate::index::CorpusIndex;
use crate::lm::{MaskedLm, TrainConfig};
use crate::nli::Entailment;
use crate::prompt::{predict_label, PromptTemplate, Verbalizer};
use crate::query::{build_retrieval_set, InputText, QueryMode, RetrievalPlan, RetrievedSet};
use crate::text::dedup_key;

/// Which model state iteration `i` trains from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainFrom {
    /// The state produced by iteration `i - 1`.
    #[default]
    Previous,
    /// The base model, every time.
    Base,
}

/// Which sentences iteration `i` trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainData {
    /// Only the set retrieved in iteration `i`.
    #[default]
    Fresh,
    /// Everything retrieved so far, deduplicated, first-seen order.
    Accumulate,
}

/// Ablation switches in one place.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No training, no augmentation.
    #[serde(rename = "-cp-va", alias = "baseline")]
    Baseline,
    /// Augmentation only.
    #[serde(rename = "-cp")]
    NoTraining,
    /// Retrieval and training only.
    #[serde(rename = "-va")]
    NoAugmentation,
    /// Raw inputs as queries.
    #[serde(rename = "-pr")]
    RawRetrieval,
    #[serde(rename = "full")]
    Full,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|_| {
            Error::Config(format!(
                "unknown variant `{s}` (expected -cp-va, -cp, -va, -pr or full)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// 0 is the plain zero-shot baseline.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "yes")]
    pub enable_cp: bool,
    #[serde(default = "yes")]
    pub enable_va: bool,
    #[serde(default = "default_plan")]
    pub plan: RetrievalPlan,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub train_from: TrainFrom,
    #[serde(default)]
    pub train_data: TrainData,
    /// Evaluate after every iteration with the seed verbalizer.
    #[serde(default)]
    pub evaluate_each_iteration: bool,
    /// Recorded in the manifest. The built-in backends are deterministic.
    #[serde(default)]
    pub seed: u64,
}

fn default_iterations() -> usize {
    1
}

fn default_max_iterations() -> usize {
    2
}

fn yes() -> bool {
    true
}

fn default_plan() -> RetrievalPlan {
    RetrievalPlan {
        top_o: 20,
        k: 100,
        mode: QueryMode::PromptAware,
        query_source: String::new(),
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iterations: default_iterations(),
            max_iterations: default_max_iterations(),
            enable_cp: true,
            enable_va: true,
            plan: default_plan(),
            augmentation: AugmentationConfig::default(),
            training: TrainConfig::default(),
            train_from: TrainFrom::default(),
            train_data: TrainData::default(),
            evaluate_each_iteration: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations > self.max_iterations {
            return Err(Error::Config(format!(
                "iterations = {} exceeds max_iterations = {}",
                self.iterations, self.max_iterations
            )));
        }
        if !self.enable_cp && self.iterations > 1 {
            return Err(Error::Config("enable_cp = false allows at most one iteration".into()));
        }
        if self.trains() {
            self.plan.validate()?;
        }
        if self.enable_va {
            self.augmentation.validate()?;
        }
        Ok(())
    }

    /// Number of retrieve-and-train rounds that actually run.
    pub fn rounds(&self) -> usize {
        if self.enable_cp {
            self.iterations
        } else {
            0
        }
    }

    pub fn trains(&self) -> bool {
        self.rounds() > 0
    }

    /// Copy of this config with the switches of `variant` applied.
    pub fn with_variant(&self, variant: Variant) -> PipelineConfig {
        let mut c = self.clone();
        match variant {
            Variant::Baseline => {
                c.enable_cp = false;
                c.enable_va = false;
                c.iterations = 0;
            }
            Variant::NoTraining => {
                c.enable_cp = false;
                c.enable_va = true;
                c.iterations = 0;
            }
            Variant::NoAugmentation => {
                c.enable_cp = true;
                c.enable_va = false;
                c.iterations = c.iterations.max(1);
            }
            Variant::RawRetrieval => {
                c.enable_cp = true;
                c.iterations = c.iterations.max(1);
                c.plan.mode = QueryMode::RawInput;
            }
            Variant::Full => {
                c.enable_cp = true;
                c.enable_va = true;
                c.iterations = c.iterations.max(1);
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutput {
    pub predictions: Vec<PredictionRecord>,
    pub accuracy: f64,
    pub failures: usize,
}

/// Classifies every example. An input that fails to score is logged, gets
/// no prediction and counts as incorrect.
pub fn run_zero_shot(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    eval_set: &[LabeledExample],
) -> Result<ZeroShotOutput> {
    verbalizer.validate()?;
    if eval_set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let predictions: Vec<PredictionRecord> = eval_set
        .par_iter()
        .map(|ex| match predict_label(backend, template, verbalizer, &ex.text) {
            Ok(p) => PredictionRecord {
                input_id: ex.example_id.clone(),
                gold: ex.label.clone(),
                predicted: Some(p.label),
                scores: p.scores,
            },
            Err(e) => {
                log::warn!("cannot classify {}: {e}", ex.example_id);
                PredictionRecord {
                    input_id: ex.example_id.clone(),
                    gold: ex.label.clone(),
                    predicted: None,
                    scores: Vec::new(),
                }
            }
        })
        .collect();
    let failures = predictions.iter().filter(|p| p.predicted.is_none()).count();
    let accuracy = accuracy(&predictions, eval_set)?;
    Ok(ZeroShotOutput {
        predictions,
        accuracy,
        failures,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Model state the queries were built with.
    pub query_checkpoint: String,
    /// sha256 over all queries, one per line, inputs in order.
    pub query_digest: String,
    pub queries_issued: usize,
    pub size_raw: usize,
    pub size_deduped: usize,
    pub failures: usize,
    /// Sentences passed to training.
    pub train_size: usize,
    pub train_from: String,
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub template_id: String,
    pub template: String,
    pub config: PipelineConfig,
    pub seed: u64,
    pub base_checkpoint: String,
    pub iterations: Vec<IterationRecord>,
    pub final_checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSet>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augmentation: Vec<CandidateDecision>,
    pub verbalizer: Verbalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_failures: Option<usize>,
    #[serde(default)]
    pub timing: Vec<StageTiming>,
}

impl RunManifest {
    fn new(template: &PromptTemplate, config: &PipelineConfig, base: &dyn MaskedLm, seed: &Verbalizer) -> Self {
        RunManifest {
            template_id: template.template_id.clone(),
            template: template.source().to_string(),
            config: config.clone(),
            seed: config.seed,
            base_checkpoint: base.checkpoint(),
            iterations: Vec::new(),
            final_checkpoint: base.checkpoint(),
            candidates: None,
            augmentation: Vec::new(),
            verbalizer: seed.clone(),
            accuracy: None,
            eval_failures: None,
            timing: Vec::new(),
        }
    }

    /// The same manifest with timings cleared, for replay comparison.
    pub fn without_timing(&self) -> RunManifest {
        RunManifest {
            timing: Vec::new(),
            ..self.clone()
        }
    }
}

/// A stage failure with everything recorded up to that point.
#[derive(Debug)]
pub struct PipelineFailure {
    pub stage: &'static str,
    pub error: Error,
    pub manifest: Box<RunManifest>,
}

impl fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pipeline stage `{}` failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for PipelineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<PipelineFailure> for Error {
    fn from(f: PipelineFailure) -> Error {
        Error::Stage {
            stage: f.stage,
            source: Box::new(f.error),
        }
    }
}

/// Backends and the index shared by every pattern of a run.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub base: &'a dyn MaskedLm,
    pub index: Option<&'a CorpusIndex>,
    pub nli: Option<&'a dyn Entailment>,
}

pub struct AdaptOutcome {
    pub manifest: RunManifest,
    /// One per iteration, in order.
    pub retrieved: Vec<RetrievedSet>,
    pub predictions: Vec<PredictionRecord>,
    pub model: Option<Box<dyn MaskedLm>>,
}

impl AdaptOutcome {
    pub fn accuracy(&self) -> f64 {
        self.manifest.accuracy.unwrap_or(0.0)
    }
}

pub fn query_digest(queries: &[Vec<String>]) -> String {
    let mut h = Sha256::new();
    for q in queries.iter().flatten() {
        h.update(q.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

struct Runner {
    manifest: RunManifest,
}

impl Runner {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T, PipelineFailure> {
        let start = Instant::now();
        let out = f();
        self.manifest.timing.push(StageTiming {
            stage: name.to_string(),
            millis: start.elapsed().as_millis(),
        });
        out.map_err(|error| PipelineFailure {
            stage: name,
            error,
            manifest: Box::new(self.manifest.clone()),
        })
    }
}

/// Runs the configured rounds of retrieval and training on `query_set`,
/// optionally augments the verbalizer with the final model, and evaluates
/// on `eval_set`. The base backend is never modified.
pub fn run_adaprompt(
    res: Resources<'_>,
    template: &PromptTemplate,
    seed: &Verbalizer,
    config: &PipelineConfig,
    query_set: &[InputText],
    eval_set: &[LabeledExample],
) -> Result<AdaptOutcome, PipelineFailure> {
    let mut run = Runner {
        manifest: RunManifest::new(template, config, res.base, seed),
    };
    run.stage("config", || {
        config.validate()?;
        seed.validate()?;
        if config.trains() && res.index.is_none() {
            return Err(Error::Config("retrieval needs a corpus index".into()));
        }
        if config.enable_va && res.nli.is_none() {
            return Err(Error::Config(
                "verbalizer augmentation needs an entailment backend".into(),
            ));
        }
        if (config.trains() || config.enable_va) && query_set.is_empty() {
            return Err(Error::Config("query set is empty".into()));
        }
        Ok(())
    })?;

    let mut current: Option<Box<dyn MaskedLm>> = None;
    let mut retrieved: Vec<RetrievedSet> = Vec::new();
    let mut pool: Vec<String> = Vec::new();
    let mut pool_keys = std::collections::HashSet::new();

    for i in 1..=config.rounds() {
        let query_model: &dyn MaskedLm = current.as_deref().unwrap_or(res.base);
        let query_checkpoint = query_model.checkpoint();
        let index = res.index.expect("checked above");
        let set = run.stage("retrieve", || {
            build_retrieval_set(index, query_model, template, query_set, &config.plan)
        })?;
        if set.size_deduped() == 0 {
            log::warn!("iteration {i}: retrieval returned nothing");
        }
        log::info!(
            "iteration {i}: {} queries, {} hits, {} unique",
            set.queries_issued,
            set.size_raw,
            set.size_deduped()
        );

        let train_set: Vec<String> = match config.train_data {
            TrainData::Fresh => set.sentences.clone(),
            TrainData::Accumulate => {
                for s in &set.sentences {
                    if pool_keys.insert(dedup_key(s)) {
                        pool.push(s.clone());
                    }
                }
                pool.clone()
            }
        };
        let from: &dyn MaskedLm = match config.train_from {
            TrainFrom::Previous => query_model,
            TrainFrom::Base => res.base,
        };
        let train_from = from.checkpoint();
        let next = run.stage("train", || from.continual_train(&train_set, &config.training))?;

        let mut record = IterationRecord {
            iteration: i,
            query_checkpoint,
            query_digest: query_digest(&set.queries),
            queries_issued: set.queries_issued,
            size_raw: set.size_raw,
            size_deduped: set.size_deduped(),
            failures: set.failures,
            train_size: train_set.len(),
            train_from,
            checkpoint: next.checkpoint(),
            accuracy: None,
        };
        if config.evaluate_each_iteration {
            let out = run.stage("evaluate", || run_zero_shot(next.as_ref(), template, seed, eval_set))?;
            record.accuracy = Some(out.accuracy);
        }
        run.manifest.final_checkpoint = next.checkpoint();
        run.manifest.iterations.push(record);
        retrieved.push(set);
        current = Some(next);
    }

    let model: &dyn MaskedLm = current.as_deref().unwrap_or(res.base);
    let mut verbalizer = seed.clone();
    if config.enable_va {
        let nli = res.nli.expect("checked above");
        let candidates = run.stage("candidates", || {
            extract_candidates(model, template, seed, query_set, &config.augmentation)
        })?;
        run.manifest.candidates = Some(candidates.clone());
        let report = run.stage("augment", || {
            augment_verbalizer(nli, template, seed, &candidates, &config.augmentation)
        })?;
        verbalizer = report.verbalizer;
        run.manifest.augmentation = report.decisions;
        run.manifest.verbalizer = verbalizer.clone();
    }

    let out = run.stage("evaluate", || run_zero_shot(model, template, &verbalizer, eval_set))?;
    run.manifest.accuracy = Some(out.accuracy);
    run.manifest.eval_failures = Some(out.failures);
    Ok(AdaptOutcome {
        manifest: run.manifest,
        retrieved,
        predictions: out.predictions,
        model: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::ScoringMode;
    use crate::lm::CountMlm;
    use crate::nli::{LexicalEntailment, Lexicon};

    fn template() -> PromptTemplate {
        PromptTemplate::parse("t", "{input} overall it was {mask} .").unwrap()
    }

    fn verbalizer() -> Verbalizer {
        Verbalizer::new([("pos", vec!["good"]), ("neg", vec!["bad"])]).unwrap()
    }

    fn eval_set() -> Vec<LabeledExample> {
        [("0", "sunny happy day", "pos"), ("1", "rainy sad day", "neg")]
            .iter()
            .map(|(id, t, l)| LabeledExample {
                example_id: id.to_string(),
                text: t.to_string(),
                label: l.to_string(),
            })
            .collect()
    }

    fn corpus() -> CorpusIndex {
        CorpusIndex::from_sentences(
            [
                ("sunny happy day it was good", "c"),
                ("happy times were good", "c"),
                ("rainy sad day it was bad", "c"),
                ("sad news was bad", "c"),
            ],
            ScoringMode::Bm25,
        )
        .unwrap()
    }

    fn inputs() -> Vec<InputText> {
        eval_set().iter().map(LabeledExample::input).collect()
    }

    #[test]
    fn uniform_backend_scores_half_on_balanced_set() {
        let m = CountMlm::default().with_vocabulary(["good", "bad"]);
        let out = run_zero_shot(&m, &template(), &verbalizer(), &eval_set()).unwrap();
        assert_eq!(out.accuracy, 0.5);
        assert!(out.predictions.iter().all(|p| p.predicted.as_deref() == Some("pos")));
    }

    #[test]
    fn failed_inputs_count_as_wrong() {
        let m = CountMlm::default();
        let out = run_zero_shot(&m, &template(), &verbalizer(), &eval_set()).unwrap();
        assert_eq!(out.failures, 2);
        assert_eq!(out.accuracy, 0.0);
    }

    #[test]
    fn baseline_variant_equals_zero_shot() {
        let base = CountMlm::default().with_vocabulary(["good", "bad", "day"]);
        let cfg = PipelineConfig::default().with_variant(Variant::Baseline);
        let res = Resources {
            base: &base,
            index: None,
            nli: None,
        };
        let out = run_adaprompt(res, &template(), &verbalizer(), &cfg, &[], &eval_set()).unwrap();
        let zs = run_zero_shot(&base, &template(), &verbalizer(), &eval_set()).unwrap();
        assert_eq!(out.predictions, zs.predictions);
        assert!(out.manifest.iterations.is_empty());
    }

    #[test]
    fn adaptation_trains_and_leaves_base_untouched() {
        let base = CountMlm::trained(0.1, 5, ["it was good", "it was bad"]);
        let before = base.clone();
        let idx = corpus();
        let nli = LexicalEntailment::new(Lexicon::default(), Lexicon::default());
        let mut cfg = PipelineConfig::default();
        cfg.plan.top_o = 2;
        cfg.plan.k = 2;
        cfg.iterations = 2;
        let res = Resources {
            base: &base,
            index: Some(&idx),
            nli: Some(&nli),
        };
        let out = run_adaprompt(res, &template(), &verbalizer(), &cfg, &inputs(), &eval_set()).unwrap();
        assert_eq!(base, before);
        assert_eq!(out.manifest.iterations.len(), 2);
        assert_eq!(out.retrieved.len(), 2);
        assert_eq!(
            out.manifest.iterations[1].query_checkpoint,
            out.manifest.iterations[0].checkpoint
        );
        assert_ne!(out.manifest.final_checkpoint, base.checkpoint());
        assert_eq!(out.accuracy(), 1.0);
    }

    #[test]
    fn missing_index_fails_at_config_stage() {
        let base = CountMlm::default().with_vocabulary(["good", "bad"]);
        let cfg = PipelineConfig {
            enable_va: false,
            ..PipelineConfig::default()
        };
        let res = Resources {
            base: &base,
            index: None,
            nli: None,
        };
        let err = run_adaprompt(res, &template(), &verbalizer(), &cfg, &inputs(), &eval_set())
            .err()
            .unwrap();
        assert_eq!(err.stage, "config");
        assert_eq!(err.manifest.base_checkpoint, base.checkpoint());
    }

    #[test]
    fn unpredictable_inputs_are_skipped_in_retrieval() {
        // the empty base model cannot predict, so every input fails to
        // produce queries
        let base = CountMlm::default();
        let idx = corpus();
        let cfg = PipelineConfig {
            enable_va: false,
            ..PipelineConfig::default()
        };
        let res = Resources {
            base: &base,
            index: Some(&idx),
            nli: None,
        };
        let out = run_adaprompt(res, &template(), &verbalizer(), &cfg, &inputs(), &eval_set()).unwrap();
        assert_eq!(out.manifest.iterations[0].failures, 2);
        assert_eq!(out.manifest.iterations[0].train_size, 0);
    }

    #[test]
    fn config_rules() {
        let mut c = PipelineConfig {
            iterations: 3,
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
        c.iterations = 2;
        c.enable_cp = false;
        assert!(c.validate().is_err());
        c.iterations = 1;
        assert!(c.validate().is_ok());
        assert_eq!(c.rounds(), 0);
        assert_eq!("-CP-va".parse::<Variant>().unwrap(), Variant::Baseline);
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::Full);
        assert!("x".parse::<Variant>().is_err());
    }
}
