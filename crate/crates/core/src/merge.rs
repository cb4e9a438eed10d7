//! Automatic merge of two independent annotations and application of the
//! collective session's resolution decisions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_non_overlapping, AnnotationSet, Author, LabelScheme, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictStatus {
    Open,
    Resolved,
}

/// A connected region of disagreement: every variant carries the `???` label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub conflict_id: String,
    pub doc_id: String,
    pub variants: Vec<Span>,
    pub status: ConflictStatus,
}

impl Conflict {
    /// Smallest interval covering all variants.
    pub fn extent(&self) -> (usize, usize) {
        let start = self.variants.iter().map(Span::start).min().unwrap_or(0);
        let end = self.variants.iter().map(Span::end).max().unwrap_or(0);
        (start, end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionAction {
    AcceptVariant,
    Relabel,
    Reshape,
    Drop,
}

impl fmt::Display for ResolutionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResolutionAction::AcceptVariant => "accept_variant",
            ResolutionAction::Relabel => "relabel",
            ResolutionAction::Reshape => "reshape",
            ResolutionAction::Drop => "drop",
        };
        f.write_str(s)
    }
}

/// One decision of the collective session. Field layout follows the
/// resolutions file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub conflict_id: String,
    pub action: ResolutionAction,
    #[serde(default)]
    pub variant_index: Option<usize>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub start: Option<usize>,
    #[serde(default)]
    pub end: Option<usize>,
    pub resolver: String,
}

impl Resolution {
    fn blank(conflict_id: &str, action: ResolutionAction, resolver: &str) -> Self {
        Self {
            conflict_id: conflict_id.to_string(),
            action,
            variant_index: None,
            label: None,
            start: None,
            end: None,
            resolver: resolver.to_string(),
        }
    }

    pub fn accept(conflict_id: &str, variant_index: usize, resolver: &str) -> Self {
        Self {
            variant_index: Some(variant_index),
            ..Self::blank(conflict_id, ResolutionAction::AcceptVariant, resolver)
        }
    }

    pub fn relabel(conflict_id: &str, variant_index: Option<usize>, label: &str, resolver: &str) -> Self {
        Self {
            variant_index,
            label: Some(label.to_string()),
            ..Self::blank(conflict_id, ResolutionAction::Relabel, resolver)
        }
    }

    pub fn reshape(conflict_id: &str, start: usize, end: usize, label: &str, resolver: &str) -> Self {
        Self {
            start: Some(start),
            end: Some(end),
            label: Some(label.to_string()),
            ..Self::blank(conflict_id, ResolutionAction::Reshape, resolver)
        }
    }

    pub fn drop(conflict_id: &str, resolver: &str) -> Self {
        Self::blank(conflict_id, ResolutionAction::Drop, resolver)
    }
}

/// Merge two individual annotations of the same document.
///
/// Spans equal in `(start, end, label)` are kept as agreed. Every other span
/// becomes a `???` variant; variants are grouped into conflicts by the
/// transitive closure of character overlap.
pub fn merge_pair(a: &AnnotationSet, b: &AnnotationSet) -> Result<(AnnotationSet, Vec<Conflict>)> {
    if a.doc_id() != b.doc_id() {
        return Err(Error::DocMismatch(a.doc_id().into(), b.doc_id().into()));
    }
    if a.scheme_version() != b.scheme_version() {
        return Err(Error::SchemeMismatch(a.scheme_version(), b.scheme_version()));
    }
    for set in [a, b] {
        if *set.author() == Author::Merged {
            return Err(Error::InvalidAnnotationSet {
                doc_id: set.doc_id().into(),
                reason: "merge inputs must be individual or gold annotations".into(),
            });
        }
    }

    let b_keys: HashMap<_, _> = b.spans().iter().map(|s| (s.key(), s)).collect();
    let a_keys: HashMap<_, _> = a.spans().iter().map(|s| (s.key(), s)).collect();

    let mut agreed = Vec::new();
    let mut variants = Vec::new();
    for span in a.spans() {
        if b_keys.contains_key(&span.key()) {
            agreed.push(span.clone());
        } else {
            variants.push(span.clone().into_conflict_variant(a.author().as_str()));
        }
    }
    for span in b.spans() {
        if !a_keys.contains_key(&span.key()) {
            variants.push(span.clone().into_conflict_variant(b.author().as_str()));
        }
    }
    variants.sort_by(Span::storage_cmp);

    let conflicts = group_variants(a.doc_id(), &variants);
    let mut spans = agreed;
    spans.extend(variants);
    let merged = AnnotationSet::new(a.doc_id(), Author::Merged, a.scheme_version(), spans)?;
    Ok((merged, conflicts))
}

/// Connected components of the overlap graph over start-sorted variants.
fn group_variants(doc_id: &str, variants: &[Span]) -> Vec<Conflict> {
    let mut groups: Vec<Vec<Span>> = Vec::new();
    let mut reach = 0;
    for v in variants {
        match groups.last_mut() {
            Some(group) if v.start() < reach => {
                group.push(v.clone());
                reach = reach.max(v.end());
            }
            _ => {
                groups.push(vec![v.clone()]);
                reach = v.end();
            }
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, variants)| Conflict {
            conflict_id: format!("{doc_id}#{i}"),
            doc_id: doc_id.to_string(),
            variants,
            status: ConflictStatus::Open,
        })
        .collect()
}

/// The gold span a single resolution produces, or `None` for a drop.
pub fn resolve_one(
    conflict: &Conflict,
    resolution: &Resolution,
    scheme: &LabelScheme,
    text_len: usize,
) -> Result<Option<Span>> {
    let invalid = |reason: &str| Error::InvalidResolution {
        conflict_id: conflict.conflict_id.clone(),
        reason: reason.to_string(),
    };
    if resolution.conflict_id != conflict.conflict_id {
        return Err(Error::UnknownConflict(resolution.conflict_id.clone()));
    }
    let check_label = |label: &str| {
        if scheme.contains(label) {
            Ok(())
        } else {
            Err(Error::UnknownLabel {
                label: label.to_string(),
                version: scheme.version(),
            })
        }
    };
    let variant = |index: Option<usize>| -> Result<&Span> {
        let index = match index {
            Some(i) => i,
            None if conflict.variants.len() == 1 => 0,
            None => return Err(invalid("variant_index required for a multi-variant conflict")),
        };
        conflict
            .variants
            .get(index)
            .ok_or_else(|| invalid(&format!("variant_index {index} out of range")))
    };
    let r = resolution;
    let span = match r.action {
        ResolutionAction::AcceptVariant => {
            if r.variant_index.is_none() {
                return Err(invalid("accept_variant requires variant_index"));
            }
            if r.label.is_some() || r.start.is_some() || r.end.is_some() {
                return Err(invalid("accept_variant takes only variant_index"));
            }
            let v = variant(r.variant_index)?;
            let label = v.candidate_label().expect("variants carry a candidate label");
            check_label(label)?;
            Some(Span::new(v.start(), v.end(), label)?)
        }
        ResolutionAction::Relabel => {
            if r.start.is_some() || r.end.is_some() {
                return Err(invalid("relabel keeps variant boundaries; use reshape"));
            }
            let label = r.label.as_deref().ok_or_else(|| invalid("relabel requires label"))?;
            check_label(label)?;
            let v = variant(r.variant_index)?;
            Some(Span::new(v.start(), v.end(), label)?)
        }
        ResolutionAction::Reshape => {
            if r.variant_index.is_some() {
                return Err(invalid("reshape takes start, end and label only"));
            }
            let (Some(start), Some(end), Some(label)) = (r.start, r.end, r.label.as_deref()) else {
                return Err(invalid("reshape requires start, end and label"));
            };
            check_label(label)?;
            let span = Span::new(start, end, label)?;
            span.check_bounds(text_len)?;
            Some(span)
        }
        ResolutionAction::Drop => {
            if r.variant_index.is_some() || r.label.is_some() || r.start.is_some() || r.end.is_some() {
                return Err(invalid("drop takes no other fields"));
            }
            None
        }
    };
    Ok(span)
}

/// Fails if `candidate` overlaps any of `existing`.
pub fn check_placement<'a>(existing: impl IntoIterator<Item = &'a Span>, candidate: &Span) -> Result<()> {
    match existing.into_iter().find(|s| s.overlaps(candidate)) {
        Some(hit) => Err(Error::OverlapAfterResolution {
            first: Box::new(hit.clone()),
            second: Box::new(candidate.clone()),
        }),
        None => Ok(()),
    }
}

/// Turn a merged set plus one resolution per conflict into ground truth.
pub fn apply_resolutions(
    merged: &AnnotationSet,
    conflicts: &[Conflict],
    resolutions: &[Resolution],
    scheme: &LabelScheme,
    text_len: usize,
) -> Result<AnnotationSet> {
    if let Some(c) = conflicts.iter().find(|c| c.doc_id != merged.doc_id()) {
        return Err(Error::DocMismatch(merged.doc_id().into(), c.doc_id.clone()));
    }
    let by_id: HashMap<&str, &Conflict> = conflicts.iter().map(|c| (c.conflict_id.as_str(), c)).collect();
    let mut chosen: BTreeMap<&str, &Resolution> = BTreeMap::new();
    for r in resolutions {
        if !by_id.contains_key(r.conflict_id.as_str()) {
            return Err(Error::UnknownConflict(r.conflict_id.clone()));
        }
        if chosen.insert(&r.conflict_id, r).is_some() {
            return Err(Error::DuplicateResolution(r.conflict_id.clone()));
        }
    }
    let missing: Vec<String> = conflicts
        .iter()
        .filter(|c| !chosen.contains_key(c.conflict_id.as_str()))
        .map(|c| c.conflict_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnresolvedConflict(missing));
    }

    let mut gold: Vec<Span> = merged.spans().iter().filter(|s| !s.is_conflict()).cloned().collect();
    for conflict in conflicts {
        if let Some(span) = resolve_one(conflict, chosen[conflict.conflict_id.as_str()], scheme, text_len)? {
            check_placement(&gold, &span)?;
            gold.push(span);
        }
    }
    gold.sort_by(Span::storage_cmp);
    check_non_overlapping(gold.iter())?;
    AnnotationSet::new(merged.doc_id(), Author::Gold, merged.scheme_version(), gold)
}
