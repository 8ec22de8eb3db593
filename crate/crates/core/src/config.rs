//! Run configuration files and the multi-pattern driver behind
//! `adaprompt run`.
//!
//! ```toml
//! output_dir = "out"
//! variant = "full"
//!
//! [task]
//! preset = "sst2"
//!
//! [data]
//! eval = "sst2/test.jsonl"
//!
//! [corpus]
//! paths = ["corpus/"]
//!
//! [backend]
//! kind = "count"
//! pretrain = ["corpus/"]
//!
//! [nli]
//! kind = "lexical"
//! synonyms = "synonyms.txt"
//!
//! [pipeline]
//! iterations = 1
//! plan = { top_o = 20, k = 100 }
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    aggregate_patterns, load_dataset, load_inputs, write_predictions, DatasetSchema, LabeledExample, PatternReport,
    StdKind,
};
use crate::index::{build_index, expand_corpus_paths, CorpusIndex, ScoringMode};
use crate::lm::{CountMlm, MaskedLm, DEFAULT_ALPHA, DEFAULT_MASK_TOKEN, DEFAULT_RADIUS};
use crate::nli::{Entailment, LexicalEntailment, Lexicon};
use crate::pipeline::{run_adaprompt, PipelineConfig, Resources, RunManifest, Variant};
use crate::prompt::{presets, PromptTemplate, Verbalizer};
use crate::query::InputText;
use crate::wire::{ExternalMlm, ExternalNli, WireClient};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateSpec {
    /// Built-in template id.
    Id(String),
    Custom {
        id: String,
        source: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Supplies templates and labels that are not given explicitly.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub templates: Vec<TemplateSpec>,
    #[serde(default)]
    pub labels: Vec<LabelSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub eval: PathBuf,
    /// Unlabeled inputs for query building and candidate extraction.
    /// Defaults to the evaluation inputs.
    #[serde(default)]
    pub query: Option<PathBuf>,
    #[serde(default)]
    pub schema: DatasetSchema,
    #[serde(default)]
    pub query_schema: Option<DatasetSchema>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Saved index; takes precedence over `paths`.
    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub scoring: Option<ScoringMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Count {
        /// State written by `adaprompt pretrain`.
        #[serde(default)]
        model: Option<PathBuf>,
        /// Corpus files to count when no `model` is given.
        #[serde(default)]
        pretrain: Vec<PathBuf>,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_radius")]
        radius: usize,
    },
    External {
        endpoint: String,
        #[serde(default = "default_mask")]
        mask_token: String,
        #[serde(default)]
        scoring_depth: Option<usize>,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_radius() -> usize {
    DEFAULT_RADIUS
}

fn default_mask() -> String {
    DEFAULT_MASK_TOKEN.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NliConfig {
    Lexical {
        #[serde(default)]
        synonyms: Option<PathBuf>,
        #[serde(default)]
        antonyms: Option<PathBuf>,
    },
    External {
        endpoint: String,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default)]
    pub std: StdKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default)]
    pub task: TaskConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub corpus: Option<CorpusConfig>,
    pub backend: BackendConfig,
    #[serde(default)]
    pub nli: Option<NliConfig>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = RunConfig::from_toml_str(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = self.output_dir.as_mut() {
            rebase(base, p);
        }
        rebase(base, &mut self.data.eval);
        if let Some(p) = self.data.query.as_mut() {
            rebase(base, p);
        }
        if let Some(c) = self.corpus.as_mut() {
            if let Some(p) = c.index.as_mut() {
                rebase(base, p);
            }
            c.paths.iter_mut().for_each(|p| rebase(base, p));
        }
        if let BackendConfig::Count { model, pretrain, .. } = &mut self.backend {
            if let Some(p) = model.as_mut() {
                rebase(base, p);
            }
            pretrain.iter_mut().for_each(|p| rebase(base, p));
        }
        if let Some(NliConfig::Lexical { synonyms, antonyms }) = &mut self.nli {
            for p in [synonyms, antonyms].into_iter().flatten() {
                rebase(base, p);
            }
        }
    }

    /// Pipeline settings with the variant switch applied.
    pub fn effective_pipeline(&self) -> PipelineConfig {
        match self.variant {
            Some(v) => self.pipeline.with_variant(v),
            None => self.pipeline.clone(),
        }
    }
}

/// Templates and seed verbalizer of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub templates: Vec<PromptTemplate>,
    pub verbalizer: Verbalizer,
}

impl TaskConfig {
    pub fn resolve(&self) -> Result<Task> {
        let preset = match &self.preset {
            Some(name) => {
                Some(presets::task(name).ok_or_else(|| Error::Config(format!("unknown task preset `{name}`")))?)
            }
            None => None,
        };
        let mut templates = Vec::new();
        for spec in &self.templates {
            templates.push(match spec {
                TemplateSpec::Id(id) => {
                    presets::template(id).ok_or_else(|| Error::Config(format!("unknown template id `{id}`")))?
                }
                TemplateSpec::Custom { id, source } => PromptTemplate::parse(id.clone(), source)?,
            });
        }
        if templates.is_empty() {
            let p = preset.ok_or_else(|| Error::Config("task has no templates".into()))?;
            templates = p
                .templates
                .iter()
                .map(|(id, src)| PromptTemplate::parse(*id, src))
                .collect::<Result<_>>()?;
        }
        let verbalizer = if self.labels.is_empty() {
            preset
                .ok_or_else(|| Error::Config("task has no labels".into()))?
                .verbalizer()
        } else {
            Verbalizer::new(self.labels.iter().map(|l| (l.name.clone(), l.words.clone())))?
        };
        Ok(Task { templates, verbalizer })
    }
}

pub fn load_count_model(path: &Path) -> Result<CountMlm> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    CountMlm::from_json(&text)
}

/// Counts every sentence of the corpus files into a fresh model.
pub fn pretrain_count_model<P: AsRef<Path>>(paths: &[P], alpha: f64, radius: usize) -> Result<CountMlm> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha {alpha} must be positive")));
    }
    let index = build_index(&expand_corpus_paths(paths)?, ScoringMode::Bm25)?;
    Ok(CountMlm::trained(
        alpha,
        radius,
        index.docs().iter().map(|d| d.text.as_str()),
    ))
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn MaskedLm>> {
        match self {
            BackendConfig::Count {
                model,
                pretrain,
                alpha,
                radius,
            } => {
                if let Some(path) = model {
                    return Ok(Box::new(load_count_model(path)?));
                }
                if pretrain.is_empty() {
                    return Err(Error::Config("count backend needs `model` or `pretrain`".into()));
                }
                Ok(Box::new(pretrain_count_model(pretrain, *alpha, *radius)?))
            }
            BackendConfig::External {
                endpoint,
                mask_token,
                scoring_depth,
            } => {
                let mut m = ExternalMlm::new(WireClient::connect(endpoint)?).with_mask_token(mask_token.clone());
                if let Some(d) = scoring_depth {
                    m = m.with_scoring_depth(*d);
                }
                Ok(Box::new(m))
            }
        }
    }
}

impl NliConfig {
    /// Entailment backend for one template. The lexical model ignores the
    /// template's own words when measuring coverage.
    pub fn build(&self, template: &PromptTemplate) -> Result<Box<dyn Entailment>> {
        match self {
            NliConfig::Lexical { synonyms, antonyms } => {
                let load = |p: &Option<PathBuf>| match p {
                    Some(p) => Lexicon::load(p),
                    None => Ok(Lexicon::default()),
                };
                Ok(Box::new(
                    LexicalEntailment::new(load(synonyms)?, load(antonyms)?)
                        .with_frame_tokens(template.literal_tokens()),
                ))
            }
            NliConfig::External { endpoint } => Ok(Box::new(ExternalNli::new(WireClient::connect(endpoint)?))),
        }
    }
}

impl CorpusConfig {
    pub fn build(&self) -> Result<CorpusIndex> {
        let mut index = match &self.index {
            Some(p) => CorpusIndex::load(p)?,
            None if !self.paths.is_empty() => {
                build_index(&expand_corpus_paths(&self.paths)?, self.scoring.unwrap_or_default())?
            }
            None => return Err(Error::Config("corpus needs `index` or `paths`".into())),
        };
        if let Some(mode) = self.scoring {
            index.set_scoring_mode(mode);
        }
        Ok(index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub report: PatternReport,
    pub patterns: Vec<RunManifest>,
}

#[derive(Serialize)]
struct Metrics<'a> {
    #[serde(flatten)]
    report: &'a PatternReport,
    templates: Vec<&'a str>,
}

/// Everything a run reads before the first pattern starts.
pub struct Prepared {
    pub task: Task,
    pub eval_set: Vec<LabeledExample>,
    pub query_set: Vec<InputText>,
    pub index: Option<CorpusIndex>,
    pub base: Box<dyn MaskedLm>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let pipeline = cfg.effective_pipeline();
    pipeline.validate()?;
    let task = cfg.task.resolve()?;
    let labels = task.verbalizer.label_names();
    let eval_set = load_dataset(&cfg.data.eval, &cfg.data.schema, &labels)?;
    let query_set = match &cfg.data.query {
        Some(p) => load_inputs(p, cfg.data.query_schema.as_ref().unwrap_or(&cfg.data.schema))?,
        None => eval_set.iter().map(LabeledExample::input).collect(),
    };
    let index = match (&cfg.corpus, pipeline.trains()) {
        (Some(c), true) => Some(c.build()?),
        (None, true) => {
            return Err(Error::Config(
                "retrieval is enabled but no [corpus] is configured".into(),
            ))
        }
        (_, false) => None,
    };
    if pipeline.enable_va && cfg.nli.is_none() {
        return Err(Error::Config(
            "verbalizer augmentation is enabled but no [nli] is configured".into(),
        ));
    }
    let base = cfg.backend.build()?;
    Ok(Prepared {
        task,
        eval_set,
        query_set,
        index,
        base,
    })
}

/// Runs every template of the task and writes outputs under `output_dir`
/// when one is configured:
///
/// - `manifest.json`, `metrics.json`
/// - `<template_id>/manifest.json`, `<template_id>/predictions.jsonl`
/// - `<template_id>/retrieved-<i>.txt` and `retrieved-<i>.provenance.jsonl`
pub fn execute(cfg: &RunConfig) -> Result<RunSummary> {
    let prepared = prepare(cfg)?;
    let mut pipeline = cfg.effective_pipeline();
    if pipeline.plan.query_source.is_empty() {
        let src = cfg.data.query.as_ref().unwrap_or(&cfg.data.eval);
        pipeline.plan.query_source = src
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut manifests = Vec::new();
    let mut accuracies = Vec::new();
    for template in &prepared.task.templates {
        log::info!("pattern {}", template.template_id);
        let nli = match (&cfg.nli, pipeline.enable_va) {
            (Some(n), true) => Some(n.build(template)?),
            _ => None,
        };
        let res = Resources {
            base: prepared.base.as_ref(),
            index: prepared.index.as_ref(),
            nli: nli.as_deref(),
        };
        let outcome = match run_adaprompt(
            res,
            template,
            &prepared.task.verbalizer,
            &pipeline,
            &prepared.query_set,
            &prepared.eval_set,
        ) {
            Ok(o) => o,
            Err(failure) => {
                if let Some(dir) = &cfg.output_dir {
                    let pdir = dir.join(&template.template_id);
                    std::fs::create_dir_all(&pdir)?;
                    std::fs::write(
                        pdir.join("manifest.json"),
                        serde_json::to_vec_pretty(&failure.manifest)?,
                    )?;
                }
                return Err(failure.into());
            }
        };
        if let Some(dir) = &cfg.output_dir {
            let pdir = dir.join(&template.template_id);
            std::fs::create_dir_all(&pdir)?;
            std::fs::write(
                pdir.join("manifest.json"),
                serde_json::to_vec_pretty(&outcome.manifest)?,
            )?;
            write_predictions(&pdir.join("predictions.jsonl"), &outcome.predictions)?;
            for (i, set) in outcome.retrieved.iter().enumerate() {
                set.save(
                    &pdir.join(format!("retrieved-{}.txt", i + 1)),
                    &pdir.join(format!("retrieved-{}.provenance.jsonl", i + 1)),
                )?;
            }
        }
        accuracies.push(outcome.accuracy());
        manifests.push(outcome.manifest);
    }

    let report = aggregate_patterns(&accuracies, prepared.eval_set.len(), cfg.report.std)?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifests)?)?;
        let metrics = Metrics {
            report: &report,
            templates: prepared.task.templates.iter().map(|t| t.template_id.as_str()).collect(),
        };
        std::fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
    }
    Ok(RunSummary {
        report,
        patterns: manifests,
    })
}
