//! Entity- and token-level precision, recall and F1 with micro averages and
//! a token confusion matrix.
//!
//! Entities match only on exact `(start, end, label)`. Tokens are compared on
//! their class with the BIO prefix stripped; tokens that are `O` on both sides
//! do not enter any score, but are counted in the confusion matrix.

use std::fmt::Write as _;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::agreement::pair_up;
use crate::bio::token_owners;
use crate::error::{Error, Result};
use crate::model::{AnnotationSet, LabelScheme, Span, OUTSIDE_LABEL};
use crate::par::Execution;
use crate::tokenize::Tokenization;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f1)`, each 0 when its denominator is 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub entity_p: f64,
    pub entity_r: f64,
    pub entity_f1: f64,
    pub token_p: f64,
    pub token_r: f64,
    pub token_f1: f64,
    /// Number of gold entities of this class.
    pub support: usize,
    pub entity_counts: Counts,
    pub token_counts: Counts,
}

impl ClassScores {
    fn from_counts(entity: Counts, token: Counts) -> Self {
        let (entity_p, entity_r, entity_f1) = entity.scores();
        let (token_p, token_r, token_f1) = token.scores();
        Self {
            entity_p,
            entity_r,
            entity_f1,
            token_p,
            token_r,
            token_f1,
            support: entity.tp + entity.fn_,
            entity_counts: entity,
            token_counts: token,
        }
    }
}

/// Token counts, rows = gold class, columns = predicted class. `O` is last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In scheme order.
    pub per_class: IndexMap<String, ClassScores>,
    pub micro_entity_p: f64,
    pub micro_entity_r: f64,
    pub micro_entity_f1: f64,
    pub micro_token_p: f64,
    pub micro_token_r: f64,
    pub micro_token_f1: f64,
    pub confusion: Confusion,
    pub doc_count: usize,
}

impl EvalReport {
    pub fn micro_support(&self) -> usize {
        self.per_class.values().map(|c| c.support).sum()
    }
}

struct DocCounts {
    entity: Vec<Counts>,
    token: Vec<Counts>,
    confusion: Vec<Vec<usize>>,
}

fn check_set(set: &AnnotationSet, scheme: &LabelScheme) -> Result<()> {
    if set.scheme_version() != scheme.version() {
        return Err(Error::SchemeMismatch(set.scheme_version(), scheme.version()));
    }
    if set.has_conflicts() {
        return Err(Error::InvalidAnnotationSet {
            doc_id: set.doc_id().into(),
            reason: "cannot evaluate data with unresolved conflicts".into(),
        });
    }
    if let Some(s) = set.spans().iter().find(|s| !scheme.contains(s.label())) {
        return Err(Error::UnknownLabel {
            label: s.label().into(),
            version: scheme.version(),
        });
    }
    Ok(())
}

fn count_doc(
    gold: &AnnotationSet,
    pred: &AnnotationSet,
    scheme: &LabelScheme,
    tokens: &Tokenization,
) -> Result<DocCounts> {
    check_set(gold, scheme)?;
    check_set(pred, scheme)?;
    let n = scheme.labels().len();
    let index = |s: &Span| scheme.position(s.label()).expect("labels checked");

    let mut entity = vec![Counts::default(); n];
    for g in gold.spans() {
        let c = &mut entity[index(g)];
        if pred.spans().iter().any(|p| p.key() == g.key()) {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    for p in pred.spans() {
        if !gold.spans().iter().any(|g| g.key() == p.key()) {
            entity[index(p)].fp += 1;
        }
    }

    let toks = tokens
        .get(gold.doc_id())
        .ok_or_else(|| Error::DocSetMismatch(format!("no tokenization for doc {}", gold.doc_id())))?;
    let classes = |set: &AnnotationSet| -> Vec<usize> {
        token_owners(toks, set.spans())
            .into_iter()
            .map(|o| o.map_or(n, |i| index(&set.spans()[i])))
            .collect()
    };
    let (gc, pc) = (classes(gold), classes(pred));
    let mut token = vec![Counts::default(); n];
    let mut confusion = vec![vec![0; n + 1]; n + 1];
    for (&g, &p) in gc.iter().zip(&pc) {
        confusion[g][p] += 1;
        if g == p {
            if g < n {
                token[g].tp += 1;
            }
        } else {
            if p < n {
                token[p].fp += 1;
            }
            if g < n {
                token[g].fn_ += 1;
            }
        }
    }
    Ok(DocCounts {
        entity,
        token,
        confusion,
    })
}

pub fn evaluate(
    gold: &[AnnotationSet],
    pred: &[AnnotationSet],
    scheme: &LabelScheme,
    tokens: &Tokenization,
) -> Result<EvalReport> {
    evaluate_with(gold, pred, scheme, tokens, Execution::default())
}

/// [`evaluate`] with an explicit execution mode; per-document counting runs
/// in parallel and is reduced in document order.
pub fn evaluate_with(
    gold: &[AnnotationSet],
    pred: &[AnnotationSet],
    scheme: &LabelScheme,
    tokens: &Tokenization,
    exec: Execution,
) -> Result<EvalReport> {
    let pairs = pair_up(gold, pred)?;
    let per_doc = exec.try_map(&pairs, |(g, p)| count_doc(g, p, scheme, tokens))?;

    let n = scheme.labels().len();
    let mut entity = vec![Counts::default(); n];
    let mut token = vec![Counts::default(); n];
    let mut confusion = vec![vec![0; n + 1]; n + 1];
    for doc in per_doc {
        for i in 0..n {
            entity[i].add(doc.entity[i]);
            token[i].add(doc.token[i]);
        }
        for (row, doc_row) in confusion.iter_mut().zip(&doc.confusion) {
            for (c, d) in row.iter_mut().zip(doc_row) {
                *c += d;
            }
        }
    }

    let mut micro_entity = Counts::default();
    let mut micro_token = Counts::default();
    for i in 0..n {
        micro_entity.add(entity[i]);
        micro_token.add(token[i]);
    }
    let per_class = scheme
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), ClassScores::from_counts(entity[i], token[i])))
        .collect();
    let (micro_entity_p, micro_entity_r, micro_entity_f1) = micro_entity.scores();
    let (micro_token_p, micro_token_r, micro_token_f1) = micro_token.scores();
    let mut labels = scheme.labels().to_vec();
    labels.push(OUTSIDE_LABEL.to_string());
    Ok(EvalReport {
        per_class,
        micro_entity_p,
        micro_entity_r,
        micro_entity_f1,
        micro_token_p,
        micro_token_r,
        micro_token_f1,
        confusion: Confusion {
            labels,
            counts: confusion,
        },
        doc_count: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidConfig(format!("unknown format {other:?}"))),
        }
    }
}

const FOOTER: &str = "micro-average";

pub fn render_report(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serializes") + "\n",
        ReportFormat::Table => render_table(r),
        ReportFormat::Markdown => render_markdown(r),
    }
}

fn render_table(r: &EvalReport) -> String {
    let width = r
        .per_class
        .keys()
        .map(|l| l.chars().count())
        .chain([FOOTER.len(), "Class".len()])
        .max()
        .unwrap_or(0);
    let rule = "-".repeat(width + 25);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>7}", "Class", "entity", "token", "support");
    let _ = writeln!(out, "{rule}");
    for (label, c) in &r.per_class {
        let _ = writeln!(
            out,
            "{label:<width$}  {:>6.2}  {:>6.2}  {:>7}",
            c.entity_f1, c.token_f1, c.support
        );
    }
    let _ = writeln!(out, "{rule}");
    let _ = writeln!(
        out,
        "{FOOTER:<width$}  {:>6.2}  {:>6.2}  {:>7}",
        r.micro_entity_f1,
        r.micro_token_f1,
        r.micro_support()
    );
    out
}

fn render_markdown(r: &EvalReport) -> String {
    let mut out = String::from("| Class | entity | token | support |\n|---|---:|---:|---:|\n");
    for (label, c) in &r.per_class {
        let _ = writeln!(
            out,
            "| `{label}` | {:.2} | {:.2} | {} |",
            c.entity_f1, c.token_f1, c.support
        );
    }
    let _ = writeln!(
        out,
        "| **{FOOTER}** | **{:.2}** | **{:.2}** | **{}** |",
        r.micro_entity_f1,
        r.micro_token_f1,
        r.micro_support()
    );
    out
}
