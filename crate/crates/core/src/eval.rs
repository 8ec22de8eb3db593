//! Dataset loading, accuracy and multi-pattern aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::prompt::LabelScore;
use crate::query::InputText;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: String,
    pub text: String,
    pub label: String,
}

impl LabeledExample {
    pub fn input(&self) -> InputText {
        InputText::new(self.example_id.clone(), self.text.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    /// One JSON object per line.
    #[default]
    Jsonl,
    /// Comma-separated with a header row.
    Csv,
    /// Tab-separated with a header row.
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    #[serde(default)]
    pub format: DatasetFormat,
    /// Fields joined with a single space to form the input text.
    #[serde(default = "default_text_fields")]
    pub text_fields: Vec<String>,
    #[serde(default = "default_label_field")]
    pub label_field: Option<String>,
    /// Row position (0-based) is used when absent.
    #[serde(default)]
    pub id_field: Option<String>,
    /// Dataset label value -> task label. Empty means identity.
    #[serde(default)]
    pub label_map: BTreeMap<String, String>,
}

fn default_text_fields() -> Vec<String> {
    vec!["text".into()]
}

fn default_label_field() -> Option<String> {
    Some("label".into())
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            format: DatasetFormat::Jsonl,
            text_fields: default_text_fields(),
            label_field: default_label_field(),
            id_field: None,
            label_map: BTreeMap::new(),
        }
    }
}

type Row = (usize, HashMap<String, String>);

fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn read_rows(content: &str, path: &Path, format: DatasetFormat) -> Result<Vec<Row>> {
    let parse_err = |line: usize, message: String| Error::DatasetParse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match format {
        DatasetFormat::Jsonl => {
            let mut rows = Vec::new();
            for (i, line) in content.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let obj: serde_json::Map<String, Value> =
                    serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
                let fields = obj
                    .iter()
                    .filter_map(|(k, v)| value_to_string(v).map(|s| (k.clone(), s)))
                    .collect();
                rows.push((i + 1, fields));
            }
            Ok(rows)
        }
        DatasetFormat::Csv | DatasetFormat::Tsv => {
            let delim = if format == DatasetFormat::Csv { b',' } else { b'\t' };
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delim)
                .has_headers(true)
                .from_reader(content.as_bytes());
            let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
            let mut rows = Vec::new();
            for rec in reader.records() {
                let rec = rec.map_err(|e| {
                    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                    parse_err(line, e.to_string())
                })?;
                let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
                let fields = headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect();
                rows.push((line, fields));
            }
            Ok(rows)
        }
    }
}

fn row_text(row: &Row, schema: &DatasetSchema, path: &Path) -> Result<String> {
    let mut parts = Vec::with_capacity(schema.text_fields.len());
    for f in &schema.text_fields {
        let v = row.1.get(f).ok_or_else(|| Error::DatasetParse {
            path: path.to_path_buf(),
            line: row.0,
            message: format!("missing text field `{f}`"),
        })?;
        if !v.trim().is_empty() {
            parts.push(v.trim());
        }
    }
    if parts.is_empty() {
        return Err(Error::DatasetParse {
            path: path.to_path_buf(),
            line: row.0,
            message: "empty text".into(),
        });
    }
    Ok(parts.join(" "))
}

fn row_id(row: &Row, position: usize, schema: &DatasetSchema, path: &Path) -> Result<String> {
    match &schema.id_field {
        None => Ok(position.to_string()),
        Some(f) => row.1.get(f).cloned().ok_or_else(|| Error::DatasetParse {
            path: path.to_path_buf(),
            line: row.0,
            message: format!("missing id field `{f}`"),
        }),
    }
}

fn check_unique_ids<'a>(ids: impl Iterator<Item = (usize, &'a str)>, path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err(Error::DatasetParse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate id `{id}`"),
            });
        }
    }
    Ok(())
}

/// Parses labeled examples from an in-memory file body. `path` is used for
/// error messages only.
pub fn parse_dataset(
    content: &str,
    path: &Path,
    schema: &DatasetSchema,
    labels: &[String],
) -> Result<Vec<LabeledExample>> {
    let label_field = schema
        .label_field
        .as_ref()
        .ok_or_else(|| Error::Config("dataset schema has no label field".into()))?;
    let rows = read_rows(content, path, schema.format)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut lines = Vec::with_capacity(rows.len());
    for (pos, row) in rows.iter().enumerate() {
        let raw = row.1.get(label_field).ok_or_else(|| Error::DatasetParse {
            path: path.to_path_buf(),
            line: row.0,
            message: format!("missing label field `{label_field}`"),
        })?;
        let label = if schema.label_map.is_empty() {
            Some(raw.clone())
        } else {
            schema.label_map.get(raw).cloned()
        };
        let label = match label {
            Some(l) if labels.contains(&l) => l,
            _ => {
                return Err(Error::UnknownLabel {
                    path: path.to_path_buf(),
                    line: row.0,
                    value: raw.clone(),
                })
            }
        };
        out.push(LabeledExample {
            example_id: row_id(row, pos, schema, path)?,
            text: row_text(row, schema, path)?,
            label,
        });
        lines.push(row.0);
    }
    check_unique_ids(lines.into_iter().zip(out.iter().map(|e| e.example_id.as_str())), path)?;
    Ok(out)
}

/// Parses unlabeled inputs; the label field, if any, is ignored.
pub fn parse_inputs(content: &str, path: &Path, schema: &DatasetSchema) -> Result<Vec<InputText>> {
    let rows = read_rows(content, path, schema.format)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let inputs: Vec<InputText> = rows
        .iter()
        .enumerate()
        .map(|(pos, row)| {
            Ok(InputText::new(
                row_id(row, pos, schema, path)?,
                row_text(row, schema, path)?,
            ))
        })
        .collect::<Result<_>>()?;
    check_unique_ids(rows.iter().map(|r| r.0).zip(inputs.iter().map(|i| i.id.as_str())), path)?;
    Ok(inputs)
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: &Path, schema: &DatasetSchema, labels: &[String]) -> Result<Vec<LabeledExample>> {
    parse_dataset(&read_file(path)?, path, schema, labels)
}

pub fn load_inputs(path: &Path, schema: &DatasetSchema) -> Result<Vec<InputText>> {
    parse_inputs(&read_file(path)?, path, schema)
}

/// One row of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub input_id: String,
    pub gold: String,
    /// `None` when the input could not be scored; it counts as wrong.
    pub predicted: Option<String>,
    pub scores: Vec<LabelScore>,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&encode_predictions(records)?)?;
    out.flush()?;
    Ok(())
}

pub fn encode_predictions(records: &[PredictionRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|source| Error::Ingestion {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::DatasetParse {
            path: PathBuf::from(path),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Fraction of predictions matching the gold label with the same id.
pub fn accuracy(predictions: &[PredictionRecord], gold: &[LabeledExample]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Alignment("nothing to score".into()));
    }
    let gold_by_id: HashMap<&str, &str> = gold.iter().map(|g| (g.example_id.as_str(), g.label.as_str())).collect();
    if gold_by_id.len() != gold.len() {
        return Err(Error::Alignment("duplicate gold ids".into()));
    }
    let mut seen = HashSet::new();
    let mut correct = 0usize;
    for p in predictions {
        let g = gold_by_id
            .get(p.input_id.as_str())
            .ok_or_else(|| Error::Alignment(format!("prediction for unknown id `{}`", p.input_id)))?;
        if !seen.insert(p.input_id.as_str()) {
            return Err(Error::Alignment(format!("duplicate prediction for `{}`", p.input_id)));
        }
        if p.predicted.as_deref() == Some(*g) {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by n.
    #[default]
    Population,
    /// Divide by n - 1 (0 for a single pattern).
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternReport {
    pub per_pattern: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub best: f64,
    /// Examples each pattern was scored on.
    pub n: usize,
}

impl fmt::Display for PatternReport {
    /// `mean/std(best)` in percent, e.g. `64.56/16.77(88.99)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2}/{:.2}({:.2})",
            self.mean * 100.0,
            self.std * 100.0,
            self.best * 100.0
        )
    }
}

pub fn aggregate_patterns(accuracies: &[f64], n_examples: usize, kind: StdKind) -> Result<PatternReport> {
    if accuracies.is_empty() {
        return Err(Error::NoPatterns);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ss: f64 = accuracies.iter().map(|a| (a - mean).powi(2)).sum();
    let std = match kind {
        StdKind::Population => (ss / n).sqrt(),
        StdKind::Sample if accuracies.len() > 1 => (ss / (n - 1.0)).sqrt(),
        StdKind::Sample => 0.0,
    };
    let best = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PatternReport {
        per_pattern: accuracies.to_vec(),
        mean,
        std,
        best,
        n: n_examples,
    })
}
