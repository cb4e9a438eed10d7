//! Class-system adjustments: total, many-to-fewer relabelings of the scheme.
//!
//! There is deliberately no inverse: once data has been remapped and new
//! batches are annotated under the new scheme, the old scheme cannot be
//! recovered.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, Author, LabelScheme, Span, CONFLICT_LABEL, OUTSIDE_LABEL};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAdjustment {
    pub from_version: u32,
    pub to_version: u32,
    /// Old label to new label, or to `"O"` to drop the class.
    pub mapping: BTreeMap<String, String>,
    pub rationale: String,
    /// RFC 3339.
    pub timestamp: String,
}

impl ClassAdjustment {
    pub fn new(
        from_version: u32,
        mapping: impl IntoIterator<Item = (String, String)>,
        rationale: impl Into<String>,
    ) -> Self {
        Self {
            from_version,
            to_version: from_version + 1,
            mapping: mapping.into_iter().collect(),
            rationale: rationale.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }

    /// Where `label` goes, `None` meaning it is dropped to `O`.
    pub fn image(&self, label: &str) -> Option<&str> {
        match self.mapping.get(label).map(String::as_str) {
            Some(OUTSIDE_LABEL) | None => None,
            Some(l) => Some(l),
        }
    }

    /// A single adjustment equivalent to applying `self` then `next`.
    pub fn compose(&self, next: &ClassAdjustment) -> Result<ClassAdjustment> {
        if next.from_version != self.to_version {
            return Err(Error::VersionSkew {
                expected: self.to_version,
                found: next.from_version,
            });
        }
        let mut mapping = BTreeMap::new();
        for old in self.mapping.keys() {
            let target = match self.image(old) {
                None => OUTSIDE_LABEL.to_string(),
                Some(mid) => next
                    .mapping
                    .get(mid)
                    .cloned()
                    .ok_or_else(|| Error::PartialMapping(vec![mid.to_string()]))?,
            };
            mapping.insert(old.clone(), target);
        }
        Ok(ClassAdjustment {
            from_version: self.from_version,
            to_version: self.from_version + 1,
            mapping,
            rationale: format!("{}; {}", self.rationale, next.rationale),
            timestamp: next.timestamp.clone(),
        })
    }
}

/// Check `adj` against the scheme it claims to start from and derive the new scheme.
pub fn validate_adjustment(old: &LabelScheme, adj: &ClassAdjustment) -> Result<LabelScheme> {
    if adj.from_version != old.version() {
        return Err(Error::VersionSkew {
            expected: old.version(),
            found: adj.from_version,
        });
    }
    if adj.to_version != adj.from_version + 1 {
        return Err(Error::VersionSkew {
            expected: adj.from_version + 1,
            found: adj.to_version,
        });
    }
    chrono::DateTime::parse_from_rfc3339(&adj.timestamp)
        .map_err(|e| Error::InvalidAdjustment(format!("timestamp {:?}: {e}", adj.timestamp)))?;
    let unmapped: Vec<String> = old
        .labels()
        .iter()
        .filter(|l| !adj.mapping.contains_key(*l))
        .cloned()
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::PartialMapping(unmapped));
    }
    for (from, to) in &adj.mapping {
        if !old.contains(from) {
            return Err(Error::InvalidAdjustment(format!("{from:?} is not a label of version {}", old.version())));
        }
        if to == CONFLICT_LABEL || to.is_empty() {
            return Err(Error::InvalidAdjustment(format!("{from} cannot map to {to:?}")));
        }
    }
    let mut labels: Vec<&str> = Vec::new();
    for l in old.labels() {
        if let Some(target) = adj.image(l) {
            if !labels.contains(&target) {
                labels.push(target);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidAdjustment("adjustment would drop every class".into()));
    }
    LabelScheme::new(adj.to_version, labels)
}

/// Relabel finalized or individual data. Spans mapped to `O` are removed;
/// neighbouring spans that end up with the same label stay separate.
pub fn apply_adjustment(data: &[AnnotationSet], adj: &ClassAdjustment) -> Result<Vec<AnnotationSet>> {
    data.iter()
        .map(|set| {
            if set.scheme_version() != adj.from_version {
                return Err(Error::VersionSkew {
                    expected: adj.from_version,
                    found: set.scheme_version(),
                });
            }
            if *set.author() == Author::Merged || set.has_conflicts() {
                return Err(Error::UnresolvedConflictsPresent(set.doc_id().to_string()));
            }
            let mut spans = Vec::with_capacity(set.spans().len());
            for s in set.spans() {
                if !adj.mapping.contains_key(s.label()) {
                    return Err(Error::PartialMapping(vec![s.label().to_string()]));
                }
                if let Some(target) = adj.image(s.label()) {
                    let mut mapped = Span::new(s.start(), s.end(), target)?;
                    if let Some(o) = s.origin() {
                        mapped = mapped.with_origin(o);
                    }
                    if let Some(c) = s.confidence() {
                        mapped = mapped.with_confidence(c)?;
                    }
                    spans.push(mapped);
                }
            }
            AnnotationSet::new(set.doc_id(), set.author().clone(), adj.to_version, spans)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn gold(spans: &[(usize, usize, &str)]) -> AnnotationSet {
        AnnotationSet::new(
            "d",
            Author::Gold,
            1,
            spans.iter().map(|&(s, e, l)| Span::new(s, e, l).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn identity_bumps_version_only() {
        let old = LabelScheme::new(1, ["A", "B"]).unwrap();
        let adj = ClassAdjustment::new(1, map(&[("A", "A"), ("B", "B")]), "noop");
        let new = validate_adjustment(&old, &adj).unwrap();
        assert_eq!(new.labels(), old.labels());
        assert_eq!(new.version(), 2);
        let data = [gold(&[(0, 3, "A"), (4, 6, "B")])];
        let out = apply_adjustment(&data, &adj).unwrap();
        assert_eq!(out[0].spans(), data[0].spans());
        assert_eq!(out[0].scheme_version(), 2);
    }

    #[test]
    fn sixteen_to_ten() {
        let old_labels: Vec<String> = (0..16).map(|i| format!("C{i:02}")).collect();
        let old = LabelScheme::new(1, old_labels.clone()).unwrap();
        // C10..C12 fold into C00..C02, C13..C15 drop.
        let mapping = old_labels.iter().enumerate().map(|(i, l)| {
            let to = match i {
                0..=9 => l.clone(),
                10..=12 => format!("C{:02}", i - 10),
                _ => "O".to_string(),
            };
            (l.clone(), to)
        });
        let adj = ClassAdjustment::new(1, mapping, "too hard");
        let new = validate_adjustment(&old, &adj).unwrap();
        assert_eq!(new.labels().len(), 10);
        assert_eq!(new.labels()[0], "C00");
    }

    #[test]
    fn errors() {
        let old = LabelScheme::new(1, ["A", "B"]).unwrap();
        let partial = ClassAdjustment::new(1, map(&[("A", "A")]), "");
        assert!(matches!(validate_adjustment(&old, &partial), Err(Error::PartialMapping(l)) if l == ["B"]));
        let skew = ClassAdjustment::new(2, map(&[("A", "A"), ("B", "B")]), "");
        assert!(matches!(validate_adjustment(&old, &skew), Err(Error::VersionSkew { .. })));
        let conflict = ClassAdjustment::new(1, map(&[("A", "???"), ("B", "B")]), "");
        assert!(validate_adjustment(&old, &conflict).is_err());
        let extra = ClassAdjustment::new(1, map(&[("A", "A"), ("B", "B"), ("Z", "A")]), "");
        assert!(validate_adjustment(&old, &extra).is_err());
        let mut bad_time = ClassAdjustment::new(1, map(&[("A", "A"), ("B", "B")]), "");
        bad_time.timestamp = "yesterday".into();
        assert!(validate_adjustment(&old, &bad_time).is_err());

        let adj = ClassAdjustment::new(1, map(&[("A", "A"), ("B", "B")]), "");
        let merged = AnnotationSet::new("d", Author::Merged, 1, vec![Span::conflict(0, 2, "A", "x").unwrap()]).unwrap();
        assert!(matches!(apply_adjustment(&[merged], &adj), Err(Error::UnresolvedConflictsPresent(_))));
        let v2 = AnnotationSet::new("d", Author::Gold, 2, vec![]).unwrap();
        assert!(matches!(apply_adjustment(&[v2], &adj), Err(Error::VersionSkew { .. })));
    }

    #[test]
    fn drop_class() {
        let adj = ClassAdjustment::new(1, map(&[("A", "O"), ("B", "B")]), "drop A");
        let out = apply_adjustment(&[gold(&[(0, 3, "A"), (4, 6, "B")])], &adj).unwrap();
        assert_eq!(out[0].spans(), [Span::new(4, 6, "B").unwrap()]);
    }

    #[test]
    fn merge_into_new_class_keeps_boundaries() {
        let adj = ClassAdjustment::new(1, map(&[("A", "C"), ("B", "C")]), "merge");
        let out = apply_adjustment(&[gold(&[(0, 4, "A"), (5, 9, "B")])], &adj).unwrap();
        assert_eq!(out[0].spans(), [Span::new(0, 4, "C").unwrap(), Span::new(5, 9, "C").unwrap()]);
    }

    fn random_mapping(labels: &[String], picks: &[usize], pool: &[&str]) -> Vec<(String, String)> {
        labels
            .iter()
            .zip(picks)
            .map(|(l, &p)| (l.clone(), pool[p % pool.len()].to_string()))
            .collect()
    }

    proptest! {
        #[test]
        fn composition_equals_sequential_application(
            picks1 in proptest::collection::vec(0usize..6, 5),
            picks2 in proptest::collection::vec(0usize..5, 6),
            raw in proptest::collection::vec((0usize..5, 1usize..4), 0..8),
        ) {
            let old = LabelScheme::new(1, ["A", "B", "C", "D", "E"]).unwrap();
            let adj1 = ClassAdjustment::new(1, random_mapping(old.labels(), &picks1, &["P", "Q", "R", "A", "O", "B"]), "one");
            let Ok(mid) = validate_adjustment(&old, &adj1) else { return Ok(()); };
            let adj2 = ClassAdjustment::new(2, random_mapping(mid.labels(), &picks2, &["X", "Y", "O", "P", "Z"]), "two");
            if validate_adjustment(&mid, &adj2).is_err() { return Ok(()); }

            let mut spans = Vec::new();
            let mut pos = 0;
            for (label, width) in raw {
                spans.push(Span::new(pos, pos + width, old.labels()[label].clone()).unwrap());
                pos += width + 1;
            }
            let data = vec![AnnotationSet::new("d", Author::Gold, 1, spans.clone()).unwrap()];
            let stepwise = apply_adjustment(&apply_adjustment(&data, &adj1).unwrap(), &adj2).unwrap();
            let composed = adj1.compose(&adj2).unwrap();
            let direct = apply_adjustment(&data, &composed).unwrap();
            prop_assert_eq!(stepwise[0].spans(), direct[0].spans());
            prop_assert!(direct[0].spans().len() <= spans.len());
        }
    }
}
