//! Prompt-aware query construction and assembly of the deduplicated
//! continual-pretraining set.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::CorpusIndex;
use crate::lm::MaskedLm;
use crate::prompt::PromptTemplate;
use crate::text::dedup_key;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Queries are the filled prompt with each of the top predicted fillers.
    #[default]
    #[serde(alias = "prompt")]
    PromptAware,
    /// The raw input is the only query (no prediction call).
    #[serde(alias = "raw")]
    RawInput,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" | "prompt_aware" => Ok(QueryMode::PromptAware),
            "raw" | "raw_input" => Ok(QueryMode::RawInput),
            other => Err(Error::Config(format!("unknown query mode `{other}`"))),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::PromptAware => "prompt",
            QueryMode::RawInput => "raw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    /// Predicted fillers per input.
    pub top_o: usize,
    /// Hits requested per query.
    pub k: usize,
    #[serde(default)]
    pub mode: QueryMode,
    /// Name of the dataset the queries are built from.
    #[serde(default)]
    pub query_source: String,
}

impl RetrievalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.mode == QueryMode::PromptAware && self.top_o == 0 {
            return Err(Error::Config(
                "top_o must be at least 1 for prompt-aware retrieval".into(),
            ));
        }
        Ok(())
    }

    /// Largest number of hits one input can contribute.
    pub fn per_input_bound(&self) -> usize {
        match self.mode {
            QueryMode::PromptAware => self.top_o * self.k,
            QueryMode::RawInput => self.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputText {
    pub id: String,
    pub text: String,
}

impl InputText {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        InputText {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Queries for one input: `Prompt(x)` with the mask replaced by each of the
/// `top_o` predicted fillers, in prediction order.
pub fn build_queries(backend: &dyn MaskedLm, template: &PromptTemplate, x: &str, top_o: usize) -> Result<Vec<String>> {
    let marker = backend.mask_token();
    let masked = template.apply(x, marker)?;
    let preds = backend.predict_fillers(&masked, top_o)?;
    if preds.is_empty() {
        log::warn!("no filler predictions for {x:?}; no queries built");
    }
    Ok(preds
        .into_iter()
        .map(|p| masked.replacen(marker, &p.token, 1))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitProvenance {
    pub input_id: String,
    pub query_index: usize,
    pub rank: usize,
}

/// Deduplicated retrieval result. `provenance[i]` lists every hit that
/// produced `sentences[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub sentences: Vec<String>,
    pub provenance: Vec<Vec<HitProvenance>>,
    pub size_raw: usize,
    pub queries_issued: usize,
    pub failures: usize,
    /// Queries per input, aligned with the inputs.
    pub queries: Vec<Vec<String>>,
}

impl RetrievedSet {
    pub fn size_deduped(&self) -> usize {
        self.sentences.len()
    }

    /// Writes sentences one per line, and the provenance sidecar as one JSON
    /// object per retained sentence.
    pub fn save(&self, sentences_path: &Path, provenance_path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(sentences_path)?);
        for s in &self.sentences {
            writeln!(out, "{s}")?;
        }
        out.flush()?;
        let mut side = BufWriter::new(std::fs::File::create(provenance_path)?);
        for (i, prov) in self.provenance.iter().enumerate() {
            let line = serde_json::to_string(&ProvenanceLine {
                sentence: i,
                hits: prov.clone(),
            })?;
            writeln!(side, "{line}")?;
        }
        side.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceLine {
    pub sentence: usize,
    pub hits: Vec<HitProvenance>,
}

/// Parses one line of a provenance sidecar.
pub fn parse_provenance_line(line: &str) -> Result<ProvenanceLine> {
    let p: ProvenanceLine = serde_json::from_str(line)?;
    if p.hits.is_empty() {
        return Err(Error::Protocol(format!("sentence {} has no provenance", p.sentence)));
    }
    if p.hits.iter().any(|h| h.rank == 0) {
        return Err(Error::Protocol("ranks are 1-based".into()));
    }
    Ok(p)
}

/// Reads a newline-delimited sentence file, skipping blank lines.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

struct InputHits {
    queries: Vec<String>,
    /// `(query_index, rank, doc_id)` in query then rank order.
    hits: Vec<(usize, usize, u32)>,
}

fn queries_for(
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    input: &InputText,
    plan: &RetrievalPlan,
) -> Result<Vec<String>> {
    match plan.mode {
        QueryMode::PromptAware => build_queries(backend, template, &input.text, plan.top_o),
        QueryMode::RawInput => {
            if input.text.trim().is_empty() {
                return Err(Error::EmptyInput);
            }
            Ok(vec![input.text.clone()])
        }
    }
}

/// Runs every query of every input against `index` and merges the hits into
/// one deduplicated set ordered by first occurrence (input, query, rank).
pub fn build_retrieval_set(
    index: &CorpusIndex,
    backend: &dyn MaskedLm,
    template: &PromptTemplate,
    inputs: &[InputText],
    plan: &RetrievalPlan,
) -> Result<RetrievedSet> {
    plan.validate()?;
    if inputs.is_empty() {
        return Err(Error::Config("no inputs to build queries from".into()));
    }

    let per_input: Vec<Result<InputHits>> = inputs
        .par_iter()
        .map(|input| {
            let queries = queries_for(backend, template, input, plan)?;
            let mut hits = Vec::new();
            for (qi, q) in queries.iter().enumerate() {
                for h in index.retrieve(q, plan.k) {
                    hits.push((qi, h.rank, h.doc_id));
                }
            }
            Ok(InputHits { queries, hits })
        })
        .collect();

    let mut set = RetrievedSet::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (input, result) in inputs.iter().zip(per_input) {
        let found = match result {
            Ok(found) => found,
            Err(e) => {
                log::warn!("skipping input {}: {e}", input.id);
                set.failures += 1;
                set.queries.push(Vec::new());
                continue;
            }
        };
        set.queries_issued += found.queries.len();
        set.size_raw += found.hits.len();
        for (query_index, rank, doc_id) in found.hits {
            let text = &index.doc(doc_id).expect("hit points at an indexed doc").text;
            let slot = *seen.entry(dedup_key(text)).or_insert_with(|| {
                set.sentences.push(text.clone());
                set.provenance.push(Vec::new());
                set.sentences.len() - 1
            });
            set.provenance[slot].push(HitProvenance {
                input_id: input.id.clone(),
                query_index,
                rank,
            });
        }
        set.queries.push(found.queries);
    }
    Ok(set)
}
