//! Model output: the provider interface, its file and HTTP implementations,
//! and conversion of token probabilities into draft annotations.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bio::decode_runs;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::{AnnotationSet, Author, Document, LabelScheme, Span, TokenSpan};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Per-token tag distribution for one document. Field layout follows the
/// predictions file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbabilities {
    pub doc_id: String,
    pub scheme_version: u32,
    pub label_order: Vec<String>,
    pub tokens: Vec<TokenSpan>,
    pub probs: Vec<Vec<f64>>,
}

impl TokenProbabilities {
    /// Checks shape, row sums, token ordering and that `label_order` is
    /// exactly the BIO tag set of `scheme`.
    pub fn validate(&self, scheme: &LabelScheme, text_len: Option<usize>) -> Result<()> {
        let violation = |reason: String| Error::SchemaViolation {
            doc_id: self.doc_id.clone(),
            reason,
        };
        if self.scheme_version != scheme.version() {
            return Err(violation(format!(
                "scheme version {} but project is at {}",
                self.scheme_version,
                scheme.version()
            )));
        }
        let expected: HashSet<String> = scheme.bio_tags().into_iter().collect();
        let mut seen = HashSet::new();
        for tag in &self.label_order {
            if !expected.contains(tag) {
                return Err(violation(format!("unknown tag {tag:?} in label_order")));
            }
            if !seen.insert(tag.as_str()) {
                return Err(violation(format!("duplicate tag {tag:?} in label_order")));
            }
        }
        if seen.len() != expected.len() {
            let mut missing: Vec<_> = expected.iter().filter(|t| !seen.contains(t.as_str())).cloned().collect();
            missing.sort();
            return Err(violation(format!("label_order lacks {}", missing.join(", "))));
        }
        if self.probs.len() != self.tokens.len() {
            return Err(violation(format!(
                "{} probability rows for {} tokens",
                self.probs.len(),
                self.tokens.len()
            )));
        }
        let mut prev_end = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start >= t.end || t.start < prev_end {
                return Err(violation(format!("token {i} ({}, {}) empty or out of order", t.start, t.end)));
            }
            prev_end = t.end;
        }
        if let (Some(len), Some(last)) = (text_len, self.tokens.last()) {
            if last.end > len {
                return Err(violation(format!("token ends at {} beyond text length {len}", last.end)));
            }
        }
        for (i, row) in self.probs.iter().enumerate() {
            if row.len() != self.label_order.len() {
                return Err(violation(format!("row {i} has {} entries", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(violation(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(violation(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Index of the most probable tag per token; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    File,
    Remote,
}

/// Source of model predictions. Implementations must be deterministic for a
/// fixed model state and tolerate concurrent calls.
pub trait PredictionProvider: Send + Sync {
    fn identity(&self) -> &str;
    fn kind(&self) -> ProviderKind;
    /// Raw, unvalidated predictions; may return more or fewer docs than asked.
    fn predict(&self, docs: &[Document]) -> Result<Vec<TokenProbabilities>>;
}

/// Reads a predictions JSON Lines file produced offline.
#[derive(Debug, Clone)]
pub struct FileProvider {
    name: String,
    path: PathBuf,
}

impl FileProvider {
    pub fn new(name: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            path: path.into(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl PredictionProvider for FileProvider {
    fn identity(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::File
    }

    fn predict(&self, docs: &[Document]) -> Result<Vec<TokenProbabilities>> {
        let wanted: HashSet<&str> = docs.iter().map(Document::id).collect();
        let all: Vec<TokenProbabilities> = jsonl::read(&self.path).map_err(|e| match e {
            Error::Io { .. } => Error::ProviderUnavailable(e.to_string()),
            other => other,
        })?;
        Ok(all.into_iter().filter(|p| wanted.contains(p.doc_id.as_str())).collect())
    }
}

/// Model service reached over HTTP: `POST {base}/predict`.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    name: String,
    base_url: String,
    timeout: Duration,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    documents: Vec<PredictDocument<'a>>,
}

#[derive(Serialize)]
struct PredictDocument<'a> {
    id: &'a str,
    text: &'a str,
}

impl RemoteProvider {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(300),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl PredictionProvider for RemoteProvider {
    fn identity(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }

    fn predict(&self, docs: &[Document]) -> Result<Vec<TokenProbabilities>> {
        let unavailable = |e: reqwest::Error| Error::ProviderUnavailable(format!("{}: {e}", self.base_url));
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(unavailable)?;
        let body = PredictRequest {
            documents: docs.iter().map(|d| PredictDocument { id: d.id(), text: d.text() }).collect(),
        };
        let response = client
            .post(format!("{}/predict", self.base_url))
            .json(&body)
            .send()
            .map_err(unavailable)?;
        if !response.status().is_success() {
            return Err(Error::ProviderUnavailable(format!(
                "{} answered {}",
                self.base_url,
                response.status()
            )));
        }
        let text = response.text().map_err(unavailable)?;
        serde_json::from_str(&text).map_err(|e| Error::SchemaViolation {
            doc_id: "*".into(),
            reason: format!("malformed response: {e}"),
        })
    }
}

/// Fetch and validate one prediction per requested document, in request order.
pub fn fetch_predictions(
    provider: &dyn PredictionProvider,
    docs: &[Document],
    scheme: &LabelScheme,
) -> Result<Vec<TokenProbabilities>> {
    if docs.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let mut by_id: HashMap<String, TokenProbabilities> = HashMap::new();
    for p in provider.predict(docs)? {
        by_id.insert(p.doc_id.clone(), p);
    }
    docs.iter()
        .map(|d| {
            let p = by_id.remove(d.id()).ok_or_else(|| Error::MissingDoc(d.id().to_string()))?;
            p.validate(scheme, Some(d.char_len()))?;
            Ok(p)
        })
        .collect()
}

/// Draft annotation from the argmax tag sequence. Each span's confidence is
/// the mean argmax probability of its tokens; spans below the threshold are dropped.
pub fn predictions_to_draft(
    p: &TokenProbabilities,
    min_entity_confidence: f64,
    author: &str,
) -> Result<AnnotationSet> {
    if !(0.0..=1.0).contains(&min_entity_confidence) {
        return Err(Error::InvalidConfig(format!(
            "min_entity_confidence {min_entity_confidence} outside [0, 1]"
        )));
    }
    let best = p.argmax();
    let tags: Vec<&str> = best.iter().map(|&i| p.label_order[i].as_str()).collect();
    let mut spans = Vec::new();
    for (first, last, label) in decode_runs(&tags)? {
        let n = (last - first + 1) as f64;
        let mean = (first..=last).map(|t| p.probs[t][best[t]]).sum::<f64>() / n;
        let confidence = mean.clamp(0.0, 1.0);
        if confidence < min_entity_confidence {
            continue;
        }
        spans.push(Span::new(p.tokens[first].start, p.tokens[last].end, label)?.with_confidence(confidence)?);
    }
    AnnotationSet::new(p.doc_id.clone(), Author::annotator(author)?, p.scheme_version, spans)
}
