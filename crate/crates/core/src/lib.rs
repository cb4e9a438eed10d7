//! Iterative, cross-checked NER annotation.
//!
//! Batches of documents are sampled (randomly or by model uncertainty),
//! optionally pre-annotated from model predictions, annotated twice by
//! different annotators, merged automatically into agreed spans plus `???`
//! conflicts, resolved in a collective session and finalized as gold data.
//!
//! Offsets everywhere are Unicode scalar offsets into the document text.

pub mod agreement;
pub mod bio;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod merge;
pub mod model;
pub mod par;
pub mod predictions;
pub mod sampling;
pub mod synth;
pub mod taxonomy;
pub mod tokenize;
pub mod workflow;

pub use error::{Error, ErrorKind, Result};
pub use model::{AnnotationSet, Author, Document, LabelScheme, Span, TokenSpan, CONFLICT_LABEL, OUTSIDE_LABEL};
pub use par::Execution;
pub use workflow::{Project, ProjectStore, Stage};
