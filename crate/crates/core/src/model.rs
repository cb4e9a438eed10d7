//! Domain types shared by every stage of the annotation workflow.
//!
//! All offsets are counted in Unicode scalar values (`char`s), never bytes.
//! Values are validated when constructed or deserialized, so code that holds
//! a [`Span`], [`AnnotationSet`] or [`LabelScheme`] can rely on its invariants.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Sentinel label carried by spans the two annotators disagree on.
pub const CONFLICT_LABEL: &str = "???";
/// The implicit outside label. Never stored on a span.
pub const OUTSIDE_LABEL: &str = "O";

/// Number of `char`s in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring of `text` between two char offsets. Offsets past the end are clamped.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let from = indices.by_ref().nth(start).unwrap_or(text.len());
    let to = if end > start {
        indices.nth(end - start - 1).unwrap_or(text.len())
    } else {
        from
    };
    &text[from..to]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "DocumentRecord")]
pub struct Document {
    id: String,
    text: String,
    meta: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct DocumentRecord {
    id: String,
    text: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl TryFrom<DocumentRecord> for Document {
    type Error = Error;

    fn try_from(r: DocumentRecord) -> Result<Self> {
        Document::with_meta(r.id, r.text, r.meta)
    }
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        Self::with_meta(id, text, BTreeMap::new())
    }

    pub fn with_meta(
        id: impl Into<String>,
        text: impl Into<String>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if id.is_empty() {
            return Err(Error::InvalidDocument("empty id".into()));
        }
        if text.is_empty() {
            return Err(Error::InvalidDocument(format!("document {id} has empty text")));
        }
        Ok(Self { id, text, meta })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn char_len(&self) -> usize {
        char_len(&self.text)
    }
}

/// A labeled, half-open `[start, end)` character interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpanRecord")]
pub struct Span {
    start: usize,
    end: usize,
    label: String,
    candidate_label: Option<String>,
    origin: Option<String>,
    confidence: Option<f64>,
}

#[derive(Deserialize)]
struct SpanRecord {
    start: usize,
    end: usize,
    label: String,
    #[serde(default)]
    candidate_label: Option<String>,
    #[serde(default)]
    origin: Option<String>,
    #[serde(default)]
    confidence: Option<f64>,
}

impl TryFrom<SpanRecord> for Span {
    type Error = Error;

    fn try_from(r: SpanRecord) -> Result<Self> {
        let span = Span {
            start: r.start,
            end: r.end,
            label: r.label,
            candidate_label: r.candidate_label,
            origin: r.origin,
            confidence: r.confidence,
        };
        span.check()?;
        Ok(span)
    }
}

impl Span {
    /// An ordinary entity span.
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Result<Self> {
        let span = Span {
            start,
            end,
            label: label.into(),
            candidate_label: None,
            origin: None,
            confidence: None,
        };
        span.check()?;
        Ok(span)
    }

    /// A `???` variant remembering the label `origin` originally assigned.
    pub fn conflict(
        start: usize,
        end: usize,
        candidate_label: impl Into<String>,
        origin: impl Into<String>,
    ) -> Result<Self> {
        let span = Span {
            start,
            end,
            label: CONFLICT_LABEL.to_string(),
            candidate_label: Some(candidate_label.into()),
            origin: Some(origin.into()),
            confidence: None,
        };
        span.check()?;
        Ok(span)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSpan {
            start: self.start,
            end: self.end,
            label: self.label.clone(),
            reason: reason.into(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.start >= self.end {
            return Err(self.invalid("start must be < end"));
        }
        if self.label.is_empty() {
            return Err(self.invalid("empty label"));
        }
        if self.label == OUTSIDE_LABEL {
            return Err(self.invalid("the outside label is implicit"));
        }
        if self.is_conflict() {
            match &self.candidate_label {
                None => return Err(self.invalid("conflict span without candidate label")),
                Some(c) if c == CONFLICT_LABEL || c == OUTSIDE_LABEL || c.is_empty() => {
                    return Err(self.invalid(format!("bad candidate label {c:?}")))
                }
                _ => {}
            }
            if self.origin.is_none() {
                return Err(self.invalid("conflict span without origin"));
            }
        } else if self.candidate_label.is_some() {
            return Err(self.invalid("candidate label on a non-conflict span"));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(self.invalid(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = Some(origin.into());
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self> {
        self.confidence = Some(confidence);
        self.check()?;
        Ok(self)
    }

    /// Turn this span into a `???` variant attributed to `origin`.
    pub fn into_conflict_variant(self, origin: &str) -> Span {
        debug_assert!(!self.is_conflict());
        Span {
            candidate_label: Some(self.label),
            label: CONFLICT_LABEL.to_string(),
            origin: Some(origin.to_string()),
            ..self
        }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn candidate_label(&self) -> Option<&str> {
        self.candidate_label.as_deref()
    }

    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    pub fn confidence(&self) -> Option<f64> {
        self.confidence
    }

    pub fn is_conflict(&self) -> bool {
        self.label == CONFLICT_LABEL
    }

    /// `(start, end, label)`, the identity used for exact matching.
    pub fn key(&self) -> (usize, usize, &str) {
        (self.start, self.end, &self.label)
    }

    /// True when the spans share at least one character.
    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn check_bounds(&self, text_len: usize) -> Result<()> {
        if self.end > text_len {
            return Err(Error::SpanOutOfBounds {
                start: self.start,
                end: self.end,
                len: text_len,
            });
        }
        Ok(())
    }

    /// Total order used for storage: `(start, end, label, candidate, origin)`.
    pub fn storage_cmp(&self, other: &Span) -> Ordering {
        (
            self.start,
            self.end,
            &self.label,
            &self.candidate_label,
            &self.origin,
        )
            .cmp(&(
                other.start,
                other.end,
                &other.label,
                &other.candidate_label,
                &other.origin,
            ))
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.candidate_label, &self.origin) {
            (Some(c), Some(o)) => write!(f, "({}, {}, {}/{} by {})", self.start, self.end, self.label, c, o),
            _ => write!(f, "({}, {}, {})", self.start, self.end, self.label),
        }
    }
}

/// Who produced an annotation set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Author {
    Annotator(String),
    Merged,
    Gold,
}

impl Author {
    pub fn as_str(&self) -> &str {
        match self {
            Author::Annotator(id) => id,
            Author::Merged => "MERGED",
            Author::Gold => "GOLD",
        }
    }

    pub fn annotator(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        validate_annotator_id(&id)?;
        Ok(Author::Annotator(id))
    }
}

impl fmt::Display for Author {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Author {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Author {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "MERGED" => Author::Merged,
            "GOLD" => Author::Gold,
            _ => Author::annotator(s).map_err(serde::de::Error::custom)?,
        })
    }
}

/// Annotator ids double as file names, so they are restricted to a safe alphabet.
pub fn validate_annotator_id(id: &str) -> Result<()> {
    let reserved = ["MERGED", "GOLD", "merged", "gold", "draft"];
    let ok = !id.is_empty()
        && !reserved.contains(&id)
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidAnnotator(id.to_string()))
    }
}

/// One author's spans over one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationSetRecord")]
pub struct AnnotationSet {
    doc_id: String,
    author: Author,
    scheme_version: u32,
    spans: Vec<Span>,
}

#[derive(Deserialize)]
struct AnnotationSetRecord {
    doc_id: String,
    author: Author,
    scheme_version: u32,
    #[serde(default)]
    spans: Vec<Span>,
}

impl TryFrom<AnnotationSetRecord> for AnnotationSet {
    type Error = Error;

    fn try_from(r: AnnotationSetRecord) -> Result<Self> {
        AnnotationSet::new(r.doc_id, r.author, r.scheme_version, r.spans)
    }
}

impl AnnotationSet {
    /// Sorts `spans` and checks the structural rules for `author`.
    pub fn new(
        doc_id: impl Into<String>,
        author: Author,
        scheme_version: u32,
        mut spans: Vec<Span>,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        spans.sort_by(Span::storage_cmp);
        let invalid = |reason: String| Error::InvalidAnnotationSet {
            doc_id: doc_id.clone(),
            reason,
        };
        for pair in spans.windows(2) {
            if pair[0].storage_cmp(&pair[1]) == Ordering::Equal {
                return Err(invalid(format!("duplicate span {}", pair[0])));
            }
        }
        match author {
            Author::Merged => check_non_overlapping(spans.iter().filter(|s| !s.is_conflict()))?,
            Author::Annotator(_) | Author::Gold => {
                if let Some(s) = spans.iter().find(|s| s.is_conflict()) {
                    return Err(invalid(format!("{author} set contains conflict span {s}")));
                }
                check_non_overlapping(spans.iter())?;
            }
        }
        Ok(Self {
            doc_id,
            author,
            scheme_version,
            spans,
        })
    }

    pub fn empty(doc_id: impl Into<String>, author: Author, scheme_version: u32) -> Self {
        Self {
            doc_id: doc_id.into(),
            author,
            scheme_version,
            spans: Vec::new(),
        }
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn author(&self) -> &Author {
        &self.author
    }

    pub fn scheme_version(&self) -> u32 {
        self.scheme_version
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn into_spans(self) -> Vec<Span> {
        self.spans
    }

    pub fn has_conflicts(&self) -> bool {
        self.spans.iter().any(Span::is_conflict)
    }

    /// Same spans under a different author.
    pub fn with_author(self, author: Author) -> Result<Self> {
        AnnotationSet::new(self.doc_id, author, self.scheme_version, self.spans)
    }

    /// Checks that every span fits the document and every label belongs to `scheme`.
    pub fn check_against(&self, text_len: usize, scheme: &LabelScheme) -> Result<()> {
        if self.scheme_version != scheme.version() {
            return Err(Error::VersionSkew {
                expected: scheme.version(),
                found: self.scheme_version,
            });
        }
        for span in &self.spans {
            span.check_bounds(text_len)?;
            let label = span.candidate_label().unwrap_or(span.label());
            if !scheme.contains(label) {
                return Err(Error::UnknownLabel {
                    label: label.to_string(),
                    version: scheme.version(),
                });
            }
        }
        Ok(())
    }
}

/// Fails with [`Error::OverlappingSpans`] on the first overlapping pair.
/// Input must be sorted by start.
pub(crate) fn check_non_overlapping<'a>(spans: impl Iterator<Item = &'a Span>) -> Result<()> {
    let mut prev: Option<&Span> = None;
    for span in spans {
        if let Some(p) = prev {
            if p.overlaps(span) {
                return Err(Error::OverlappingSpans {
                    first: Box::new(p.clone()),
                    second: Box::new(span.clone()),
                });
            }
            if span.end() <= p.end() {
                continue;
            }
        }
        prev = Some(span);
    }
    Ok(())
}

/// A versioned, ordered set of entity classes. `O` and `???` are implicit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSchemeRecord")]
pub struct LabelScheme {
    version: u32,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct LabelSchemeRecord {
    version: u32,
    labels: Vec<String>,
}

impl TryFrom<LabelSchemeRecord> for LabelScheme {
    type Error = Error;

    fn try_from(r: LabelSchemeRecord) -> Result<Self> {
        LabelScheme::new(r.version, r.labels)
    }
}

impl LabelScheme {
    pub fn new<S: Into<String>>(version: u32, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if version == 0 {
            return Err(Error::InvalidScheme("version must be >= 1".into()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidScheme("no labels".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if l.is_empty() || l == OUTSIDE_LABEL || l == CONFLICT_LABEL {
                return Err(Error::InvalidScheme(format!("reserved or empty label {l:?}")));
            }
            if l.chars().any(char::is_whitespace) {
                return Err(Error::InvalidScheme(format!("label {l:?} contains whitespace")));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidScheme(format!("duplicate label {l}")));
            }
        }
        Ok(Self { version, labels })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// `O` followed by `B-x`, `I-x` for every label, in scheme order.
    pub fn bio_tags(&self) -> Vec<String> {
        std::iter::once(OUTSIDE_LABEL.to_string())
            .chain(
                self.labels
                    .iter()
                    .flat_map(|l| [format!("B-{l}"), format!("I-{l}")]),
            )
            .collect()
    }
}

/// A token's character extent. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn overlaps(&self, span: &Span) -> bool {
        self.start < span.end() && span.start() < self.end
    }
}

impl From<(usize, usize)> for TokenSpan {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

impl From<TokenSpan> for (usize, usize) {
    fn from(t: TokenSpan) -> Self {
        (t.start, t.end)
    }
}
