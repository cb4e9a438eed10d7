use thiserror::Error;

use crate::model::Span;
use crate::workflow::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad class of a failure. The CLI maps these onto its exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    State,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    // --- domain type validation ---
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error("invalid span ({start}, {end}, {label}): {reason}")]
    InvalidSpan {
        start: usize,
        end: usize,
        label: String,
        reason: String,
    },
    #[error("span ({start}, {end}) exceeds document length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("invalid annotation set for doc {doc_id}: {reason}")]
    InvalidAnnotationSet { doc_id: String, reason: String },
    #[error("invalid label scheme: {0}")]
    InvalidScheme(String),
    #[error("label {label:?} is not in scheme version {version}")]
    UnknownLabel { label: String, version: u32 },

    // --- BIO codec ---
    #[error("overlapping spans: {first} and {second}")]
    OverlappingSpans { first: Box<Span>, second: Box<Span> },
    #[error("length mismatch: {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("malformed BIO tag {0:?}")]
    InvalidTag(String),

    // --- merge / resolution ---
    #[error("cannot merge annotations of different documents ({0} vs {1})")]
    DocMismatch(String, String),
    #[error("scheme version mismatch: {0} vs {1}")]
    SchemeMismatch(u32, u32),
    #[error("unresolved conflicts: {}", .0.join(", "))]
    UnresolvedConflict(Vec<String>),
    #[error("resolution produces overlapping gold spans: {first} and {second}")]
    OverlapAfterResolution { first: Box<Span>, second: Box<Span> },
    #[error("unknown conflict {0}")]
    UnknownConflict(String),
    #[error("invalid resolution for {conflict_id}: {reason}")]
    InvalidResolution { conflict_id: String, reason: String },
    #[error("duplicate resolution for conflict {0}")]
    DuplicateResolution(String),

    // --- agreement / evaluation ---
    #[error("document sets differ: {0}")]
    DocSetMismatch(String),

    // --- predictions ---
    #[error("prediction provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider returned no predictions for doc {0}")]
    MissingDoc(String),
    #[error("prediction schema violation for doc {doc_id}: {reason}")]
    SchemaViolation { doc_id: String, reason: String },
    #[error("no documents requested")]
    EmptyRequest,

    // --- sampling ---
    #[error("document {0} has no tokens")]
    EmptyDocument(String),
    #[error("batch size {requested} exceeds pool size {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("invalid sampling config: {0}")]
    InvalidConfig(String),
    #[error("duplicate document id {0}")]
    DuplicateDoc(String),

    // --- taxonomy ---
    #[error("mapping leaves labels unmapped: {}", .0.join(", "))]
    PartialMapping(Vec<String>),
    #[error("version skew: expected {expected}, found {found}")]
    VersionSkew { expected: u32, found: u32 },
    #[error("invalid class adjustment: {0}")]
    InvalidAdjustment(String),
    #[error("data for doc {0} still carries unresolved conflict spans")]
    UnresolvedConflictsPresent(String),

    // --- workflow ---
    #[error("at least 2 annotators are required, got {0}")]
    TooFewAnnotators(usize),
    #[error("invalid corpus: {0}")]
    EmptyCorpus(String),
    #[error("invalid annotator id {0:?}")]
    InvalidAnnotator(String),
    #[error("unlabeled pool exhausted: {available} docs left, {requested} requested")]
    PoolExhausted { requested: usize, available: usize },
    #[error("iteration {index} is still in flight (stage {stage})")]
    IterationInFlight { index: usize, stage: Stage },
    #[error("iteration {index} is in stage {actual}, expected {expected}")]
    WrongStage {
        index: usize,
        actual: Stage,
        expected: String,
    },
    #[error("no iteration with index {0}")]
    UnknownIteration(usize),
    #[error("annotator {author} is not assigned to doc {doc_id}")]
    WrongAnnotator { author: String, doc_id: String },
    #[error("doc {0} is not part of this iteration")]
    UnknownDoc(String),
    #[error("split counts {train}+{val}+{test} do not match {available} finalized docs")]
    CountMismatch {
        train: usize,
        val: usize,
        test: usize,
        available: usize,
    },
    #[error("dataset split already exists; pass force to overwrite")]
    AlreadySplit,
    #[error("{0}")]
    MissingProvider(String),

    // --- I/O ---
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("project load failed: {0}")]
    ProjectLoad(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::IterationInFlight { .. }
            | Error::WrongStage { .. }
            | Error::UnknownIteration(_)
            | Error::AlreadySplit
            | Error::PoolExhausted { .. }
            | Error::UnresolvedConflict(_)
            | Error::UnresolvedConflictsPresent(_) => ErrorKind::State,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::ProjectLoad(_)
            | Error::ProviderUnavailable(_) => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    /// Stable snake_case code used in structured error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDocument(_) => "invalid_document",
            Error::InvalidSpan { .. } => "invalid_span",
            Error::SpanOutOfBounds { .. } => "span_out_of_bounds",
            Error::InvalidAnnotationSet { .. } => "invalid_annotation_set",
            Error::InvalidScheme(_) => "invalid_scheme",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::OverlappingSpans { .. } => "overlapping_spans",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::InvalidTag(_) => "invalid_tag",
            Error::DocMismatch(..) => "doc_mismatch",
            Error::SchemeMismatch(..) => "scheme_mismatch",
            Error::UnresolvedConflict(_) => "unresolved_conflict",
            Error::OverlapAfterResolution { .. } => "overlap_after_resolution",
            Error::UnknownConflict(_) => "unknown_conflict",
            Error::InvalidResolution { .. } => "invalid_resolution",
            Error::DuplicateResolution(_) => "duplicate_resolution",
            Error::DocSetMismatch(_) => "doc_set_mismatch",
            Error::ProviderUnavailable(_) => "provider_unavailable",
            Error::MissingDoc(_) => "missing_doc",
            Error::SchemaViolation { .. } => "schema_violation",
            Error::EmptyRequest => "empty_request",
            Error::EmptyDocument(_) => "empty_document",
            Error::BatchTooLarge { .. } => "batch_too_large",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DuplicateDoc(_) => "duplicate_doc",
            Error::PartialMapping(_) => "partial_mapping",
            Error::VersionSkew { .. } => "version_skew",
            Error::InvalidAdjustment(_) => "invalid_adjustment",
            Error::UnresolvedConflictsPresent(_) => "unresolved_conflicts_present",
            Error::TooFewAnnotators(_) => "too_few_annotators",
            Error::EmptyCorpus(_) => "empty_corpus",
            Error::InvalidAnnotator(_) => "invalid_annotator",
            Error::PoolExhausted { .. } => "pool_exhausted",
            Error::IterationInFlight { .. } => "iteration_in_flight",
            Error::WrongStage { .. } => "wrong_stage",
            Error::UnknownIteration(_) => "unknown_iteration",
            Error::WrongAnnotator { .. } => "wrong_annotator",
            Error::UnknownDoc(_) => "unknown_doc",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::AlreadySplit => "already_split",
            Error::MissingProvider(_) => "missing_provider",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::ProjectLoad(_) => "project_load",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
