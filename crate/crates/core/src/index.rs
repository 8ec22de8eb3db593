//! Sentence-level inverted index with BM25 / classic TF-IDF ranking.
//!
//! Every corpus line becomes one [`SentenceDoc`]. Documents are numbered in
//! ingestion order and never deduplicated here; duplicate removal happens on
//! the retrieved set.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_sentence, tokenize};

pub type DocId = u32;

const FORMAT_HEADER: &str = "adaprompt-index";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceDoc {
    pub doc_id: DocId,
    pub text: String,
    pub source_tag: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoringMode {
    #[default]
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "tfidf", alias = "classic-tfidf")]
    ClassicTfIdf,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoringMode::Bm25 => f.write_str("bm25"),
            ScoringMode::ClassicTfIdf => f.write_str("tfidf"),
        }
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(ScoringMode::Bm25),
            "tfidf" | "classic-tfidf" => Ok(ScoringMode::ClassicTfIdf),
            other => Err(Error::Config(format!("unknown scoring mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: DocId,
    pub tf: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: DocId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<Hit>,
    /// Set when the query had no tokens at all.
    pub empty_query: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusIndex {
    scoring: ScoringMode,
    params: Bm25Params,
    docs: Vec<SentenceDoc>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    total_tokens: u64,
}

/// Reads newline-delimited sentence files and indexes them in the given order.
pub fn build_index<P: AsRef<Path>>(corpus_paths: &[P], scoring: ScoringMode) -> Result<CorpusIndex> {
    let mut sentences = Vec::new();
    for path in corpus_paths {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
            path: path.to_path_buf(),
            source,
        })?;
        let tag = path.display().to_string();
        sentences.extend(
            raw.split(['\n', '\r'])
                .map(normalize_sentence)
                .filter(|s| !s.is_empty())
                .map(|s| (s, tag.clone())),
        );
    }
    CorpusIndex::from_sentences(sentences, scoring)
}

/// Expands directories into their (sorted) regular files; plain files pass through.
pub fn expand_corpus_paths<P: AsRef<Path>>(inputs: &[P]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        let input = input.as_ref();
        if input.is_dir() {
            let mut files = Vec::new();
            let entries = std::fs::read_dir(input).map_err(|source| Error::Ingestion {
                path: input.to_path_buf(),
                source,
            })?;
            for entry in entries {
                let entry = entry?;
                if entry.file_type()?.is_file() {
                    files.push(entry.path());
                }
            }
            files.sort();
            out.extend(files);
        } else {
            out.push(input.to_path_buf());
        }
    }
    Ok(out)
}

impl CorpusIndex {
    /// Indexes `(text, source_tag)` pairs. Texts are normalized; lines that
    /// are empty after normalization are skipped.
    pub fn from_sentences<I, S, T>(sentences: I, scoring: ScoringMode) -> Result<CorpusIndex>
    where
        I: IntoIterator<Item = (S, T)>,
        S: AsRef<str>,
        T: Into<String>,
    {
        let docs: Vec<SentenceDoc> = sentences
            .into_iter()
            .flat_map(|(text, tag)| {
                let tag: String = tag.into();
                text.as_ref()
                    .split(['\n', '\r'])
                    .map(normalize_sentence)
                    .filter(|s| !s.is_empty())
                    .map(|s| (s, tag.clone()))
                    .collect::<Vec<_>>()
            })
            .enumerate()
            .map(|(i, (text, source_tag))| SentenceDoc {
                doc_id: i as DocId,
                text,
                source_tag,
            })
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if docs.len() > DocId::MAX as usize {
            return Err(Error::Config("corpus exceeds 2^32 sentences".into()));
        }

        let per_doc: Vec<BTreeMap<String, u32>> = docs
            .par_iter()
            .map(|doc| {
                let mut counts = BTreeMap::new();
                for tok in tokenize(&doc.text) {
                    *counts.entry(tok).or_insert(0u32) += 1;
                }
                counts
            })
            .collect();

        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut total_tokens = 0u64;
        for (doc_id, counts) in per_doc.into_iter().enumerate() {
            let len: u32 = counts.values().sum();
            doc_lengths.push(len);
            total_tokens += u64::from(len);
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    doc_id: doc_id as DocId,
                    tf,
                });
            }
        }

        Ok(CorpusIndex {
            scoring,
            params: Bm25Params::default(),
            docs,
            doc_lengths,
            postings,
            total_tokens,
        })
    }

    pub fn with_bm25_params(mut self, params: Bm25Params) -> Self {
        self.params = params;
        self
    }

    pub fn scoring_mode(&self) -> ScoringMode {
        self.scoring
    }

    pub fn set_scoring_mode(&mut self, scoring: ScoringMode) {
        self.scoring = scoring;
    }

    pub fn bm25_params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.total_tokens as f64 / self.docs.len() as f64
    }

    pub fn doc(&self, doc_id: DocId) -> Option<&SentenceDoc> {
        self.docs.get(doc_id as usize)
    }

    pub fn docs(&self) -> &[SentenceDoc] {
        &self.docs
    }

    pub fn doc_length(&self, doc_id: DocId) -> Option<u32> {
        self.doc_lengths.get(doc_id as usize).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    /// Weight of one query-term occurrence for a document.
    ///
    /// bm25: `idf * tf*(k1+1) / (tf + k1*(1 - b + b*dl/avgdl))` with
    /// `idf = ln(1 + (N - df + 0.5)/(df + 0.5))`.
    /// tfidf: `tf * ln(1 + N/df)`.
    fn term_weight(&self, tf: u32, df: usize, doc_len: u32) -> f64 {
        let n = self.docs.len() as f64;
        let df = df as f64;
        let tf = f64::from(tf);
        match self.scoring {
            ScoringMode::Bm25 => {
                let Bm25Params { k1, b } = self.params;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                let avgdl = self.avg_doc_len();
                let norm = if avgdl > 0.0 { f64::from(doc_len) / avgdl } else { 0.0 };
                idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
            }
            ScoringMode::ClassicTfIdf => tf * (1.0 + n / df).ln(),
        }
    }

    /// Top-`k` documents sharing at least one token with `query`, ordered by
    /// score descending then doc id ascending.
    pub fn search(&self, query: &str, k: usize) -> SearchResult {
        let mut query_terms: BTreeMap<String, u32> = BTreeMap::new();
        for tok in tokenize(query) {
            *query_terms.entry(tok).or_insert(0) += 1;
        }
        if query_terms.is_empty() {
            log::warn!("query {query:?} has no tokens; returning no hits");
            return SearchResult {
                hits: Vec::new(),
                empty_query: true,
            };
        }
        if k == 0 {
            return SearchResult::default();
        }

        let mut scores: HashMap<DocId, f64> = HashMap::new();
        for (term, qtf) in &query_terms {
            let list = self.postings(term);
            let df = list.len();
            for p in list {
                let w = self.term_weight(p.tf, df, self.doc_lengths[p.doc_id as usize]);
                *scores.entry(p.doc_id).or_insert(0.0) += f64::from(*qtf) * w;
            }
        }

        let mut ranked: Vec<(DocId, f64)> = scores.into_iter().collect();
        let order = |a: &(DocId, f64), b: &(DocId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_unstable_by(order);

        SearchResult {
            hits: ranked
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| Hit {
                    doc_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
            empty_query: false,
        }
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Vec<Hit> {
        self.search(query, k).hits
    }

    /// Serializes to the versioned on-disk form. Identical indexes encode to
    /// identical bytes.
    pub fn encode(&self) -> Vec<u8> {
        let file = IndexFileRef {
            format: FORMAT_HEADER,
            version: FORMAT_VERSION,
            scoring: self.scoring,
            bm25: self.params,
            docs: &self.docs,
            doc_lengths: &self.doc_lengths,
            postings: self
                .postings
                .iter()
                .map(|(t, ps)| (t.as_str(), ps.iter().map(|p| [p.doc_id, p.tf]).collect()))
                .collect(),
        };
        let mut out = format!("{FORMAT_HEADER} v{FORMAT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_vec(&file).expect("index serialization is infallible"));
        out.push(b'\n');
        out
    }

    /// Parses and validates an encoded index. Rejects anything that would
    /// violate the index invariants.
    pub fn decode(bytes: &[u8]) -> Result<CorpusIndex> {
        let bad = |m: String| Error::IndexFormat(m);
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
        let expected = format!("{FORMAT_HEADER} v{FORMAT_VERSION}");
        if header != expected {
            return Err(bad(format!("unsupported header `{header}`, expected `{expected}`")));
        }
        let file: IndexFile = serde_json::from_slice(&bytes[nl + 1..]).map_err(|e| bad(format!("body: {e}")))?;
        if file.format != FORMAT_HEADER || file.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", file.format, file.version)));
        }
        let Bm25Params { k1, b } = file.bm25;
        if !(k1.is_finite() && k1 >= 0.0 && b.is_finite() && (0.0..=1.0).contains(&b)) {
            return Err(bad(format!("invalid bm25 parameters k1={k1} b={b}")));
        }
        let n = file.docs.len();
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        if file.doc_lengths.len() != n {
            return Err(bad("doc_lengths does not match document count".into()));
        }
        for (i, doc) in file.docs.iter().enumerate() {
            if doc.doc_id as usize != i {
                return Err(bad(format!("doc id {} at position {i}", doc.doc_id)));
            }
            if doc.text.is_empty() || doc.text.contains(['\n', '\r']) {
                return Err(bad(format!("doc {i} text is empty or spans lines")));
            }
        }

        let mut sums = vec![0u64; n];
        let mut postings = BTreeMap::new();
        for (term, list) in file.postings {
            if term.is_empty() || list.is_empty() {
                return Err(bad(format!("empty term or posting list for `{term}`")));
            }
            let mut prev: Option<u32> = None;
            let mut out = Vec::with_capacity(list.len());
            for [doc_id, tf] in list {
                if doc_id as usize >= n || tf == 0 || prev.is_some_and(|p| p >= doc_id) {
                    return Err(bad(format!("bad posting ({doc_id}, {tf}) for `{term}`")));
                }
                prev = Some(doc_id);
                sums[doc_id as usize] += u64::from(tf);
                out.push(Posting { doc_id, tf });
            }
            postings.insert(term, out);
        }
        for (i, (&sum, &len)) in sums.iter().zip(&file.doc_lengths).enumerate() {
            if sum != u64::from(len) {
                return Err(bad(format!("doc {i}: term frequencies sum to {sum}, length is {len}")));
            }
        }
        let total_tokens = file.doc_lengths.iter().map(|&l| u64::from(l)).sum();

        Ok(CorpusIndex {
            scoring: file.scoring,
            params: file.bm25,
            docs: file.docs,
            doc_lengths: file.doc_lengths,
            postings,
            total_tokens,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusIndex> {
        let bytes = std::fs::read(path).map_err(|source| Error::Ingestion {
            path: path.to_path_buf(),
            source,
        })?;
        CorpusIndex::decode(&bytes)
    }
}

#[derive(Serialize)]
struct IndexFileRef<'a> {
    format: &'a str,
    version: u32,
    scoring: ScoringMode,
    bm25: Bm25Params,
    docs: &'a [SentenceDoc],
    doc_lengths: &'a [u32],
    postings: BTreeMap<&'a str, Vec<[u32; 2]>>,
}

#[derive(Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    scoring: ScoringMode,
    bm25: Bm25Params,
    docs: Vec<SentenceDoc>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<[u32; 2]>>,
}
