//! Inter-annotator agreement between two sides' independent annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::bio::token_classes;
use crate::error::{Error, Result};
use crate::model::{AnnotationSet, LabelScheme};
use crate::par::Execution;
use crate::tokenize::Tokenization;

/// Cohen's kappa, or `Undefined` when both observed and chance agreement are 1.
/// Serialized as a number or `null`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kappa {
    Defined(f64),
    Undefined,
}

impl Kappa {
    pub fn value(self) -> Option<f64> {
        match self {
            Kappa::Defined(k) => Some(k),
            Kappa::Undefined => None,
        }
    }
}

impl Serialize for Kappa {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Kappa {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map_or(Kappa::Undefined, Kappa::Defined))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub doc_count: usize,
    pub pair: (String, String),
    pub entity_f1: f64,
    pub token_kappa: Kappa,
    /// Only classes annotated by at least one side appear here.
    pub per_class_entity_f1: BTreeMap<String, f64>,
}

/// Matches the two sides by doc id.
pub(crate) fn pair_up<'a>(a: &'a [AnnotationSet], b: &'a [AnnotationSet]) -> Result<Vec<(&'a AnnotationSet, &'a AnnotationSet)>> {
    let index = |sets: &'a [AnnotationSet]| -> Result<BTreeMap<&'a str, &'a AnnotationSet>> {
        let mut map = BTreeMap::new();
        for s in sets {
            if map.insert(s.doc_id(), s).is_some() {
                return Err(Error::DocSetMismatch(format!("doc {} appears twice on one side", s.doc_id())));
            }
        }
        Ok(map)
    };
    let ia = index(a)?;
    let mut ib = index(b)?;
    let mut pairs = Vec::with_capacity(ia.len());
    for (id, sa) in ia {
        let sb = ib
            .remove(id)
            .ok_or_else(|| Error::DocSetMismatch(format!("doc {id} missing on second side")))?;
        pairs.push((sa, sb));
    }
    if let Some(id) = ib.keys().next() {
        return Err(Error::DocSetMismatch(format!("doc {id} missing on first side")));
    }
    Ok(pairs)
}

#[derive(Default)]
struct EntityCounts {
    /// label -> (matched, |a|, |b|)
    per_class: BTreeMap<String, (usize, usize, usize)>,
}

impl EntityCounts {
    fn of(a: &AnnotationSet, b: &AnnotationSet) -> Self {
        let mut counts = EntityCounts::default();
        let b_keys: BTreeSet<_> = b.spans().iter().map(|s| s.key()).collect();
        for s in a.spans() {
            let c = counts.per_class.entry(s.label().to_string()).or_default();
            c.1 += 1;
            if b_keys.contains(&s.key()) {
                c.0 += 1;
            }
        }
        for s in b.spans() {
            counts.per_class.entry(s.label().to_string()).or_default().2 += 1;
        }
        counts
    }

    fn absorb(&mut self, other: EntityCounts) {
        for (label, (m, na, nb)) in other.per_class {
            let c = self.per_class.entry(label).or_default();
            c.0 += m;
            c.1 += na;
            c.2 += nb;
        }
    }

    fn totals(&self) -> (usize, usize, usize) {
        self.per_class
            .values()
            .fold((0, 0, 0), |t, c| (t.0 + c.0, t.1 + c.1, t.2 + c.2))
    }
}

/// Symmetric exact-match F1 = 2m / (|a| + |b|); 1.0 when both sides are empty.
fn symmetric_f1(matched: usize, na: usize, nb: usize) -> f64 {
    if na + nb == 0 {
        1.0
    } else {
        2.0 * matched as f64 / (na + nb) as f64
    }
}

fn entity_counts(pairs: &[(&AnnotationSet, &AnnotationSet)], exec: Execution) -> EntityCounts {
    let mut total = EntityCounts::default();
    for c in exec.map(pairs, |(a, b)| EntityCounts::of(a, b)) {
        total.absorb(c);
    }
    total
}

/// Micro-averaged exact-match entity F1 between two sides.
pub fn pairwise_entity_f1(sets_a: &[AnnotationSet], sets_b: &[AnnotationSet]) -> Result<f64> {
    let pairs = pair_up(sets_a, sets_b)?;
    let (m, na, nb) = entity_counts(&pairs, Execution::default()).totals();
    Ok(symmetric_f1(m, na, nb))
}

fn token_table(
    pairs: &[(&AnnotationSet, &AnnotationSet)],
    tokens: &Tokenization,
    exec: Execution,
) -> Result<BTreeMap<(String, String), usize>> {
    let per_doc = exec.try_map(pairs, |(a, b)| {
        let toks = tokens
            .get(a.doc_id())
            .ok_or_else(|| Error::DocSetMismatch(format!("no tokenization for doc {}", a.doc_id())))?;
        let ca = token_classes(toks, a.spans());
        let cb = token_classes(toks, b.spans());
        let mut table: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (x, y) in ca.into_iter().zip(cb) {
            *table.entry((x.to_string(), y.to_string())).or_default() += 1;
        }
        Ok::<_, Error>(table)
    })?;
    let mut total = BTreeMap::new();
    for table in per_doc {
        for (k, n) in table {
            *total.entry(k).or_default() += n;
        }
    }
    Ok(total)
}

fn kappa_from_table(table: &BTreeMap<(String, String), usize>) -> Kappa {
    let n: usize = table.values().sum();
    if n == 0 {
        return Kappa::Undefined;
    }
    let n = n as f64;
    let mut row: BTreeMap<&str, usize> = BTreeMap::new();
    let mut col: BTreeMap<&str, usize> = BTreeMap::new();
    let mut agree = 0;
    for ((x, y), &c) in table {
        *row.entry(x).or_default() += c;
        *col.entry(y).or_default() += c;
        if x == y {
            agree += c;
        }
    }
    let p_o = agree as f64 / n;
    let mut categories: Vec<&str> = row.keys().chain(col.keys()).copied().collect();
    categories.sort_unstable();
    categories.dedup();
    let p_e: f64 = categories
        .iter()
        .map(|k| {
            let r = *row.get(k).unwrap_or(&0) as f64;
            let c = *col.get(k).unwrap_or(&0) as f64;
            (r / n) * (c / n)
        })
        .sum();
    if 1.0 - p_e <= 1e-12 {
        Kappa::Undefined
    } else {
        Kappa::Defined((p_o - p_e) / (1.0 - p_e))
    }
}

/// Cohen's kappa over per-token classes (`O` included), pooled across docs.
pub fn pairwise_token_kappa(
    sets_a: &[AnnotationSet],
    sets_b: &[AnnotationSet],
    tokens: &Tokenization,
) -> Result<Kappa> {
    let pairs = pair_up(sets_a, sets_b)?;
    Ok(kappa_from_table(&token_table(&pairs, tokens, Execution::default())?))
}

fn side_name(sets: &[AnnotationSet]) -> String {
    let mut names: Vec<&str> = sets.iter().map(|s| s.author().as_str()).collect();
    names.sort_unstable();
    names.dedup();
    match names.as_slice() {
        [one] => one.to_string(),
        _ => "*".to_string(),
    }
}

pub fn agreement_report(
    sets_a: &[AnnotationSet],
    sets_b: &[AnnotationSet],
    tokens: &Tokenization,
    exec: Execution,
) -> Result<AgreementReport> {
    let pairs = pair_up(sets_a, sets_b)?;
    if pairs.is_empty() {
        return Err(Error::DocSetMismatch("no documents to compare".into()));
    }
    let counts = entity_counts(&pairs, exec);
    let (m, na, nb) = counts.totals();
    let per_class_entity_f1 = counts
        .per_class
        .iter()
        .map(|(label, &(m, na, nb))| (label.clone(), symmetric_f1(m, na, nb)))
        .collect();
    Ok(AgreementReport {
        doc_count: pairs.len(),
        pair: (side_name(sets_a), side_name(sets_b)),
        entity_f1: symmetric_f1(m, na, nb),
        token_kappa: kappa_from_table(&token_table(&pairs, tokens, exec)?),
        per_class_entity_f1,
    })
}

/// Plain-text table: one row per class (scheme order when given), aggregate footer.
pub fn render_agreement_table(report: &AgreementReport, scheme: Option<&LabelScheme>) -> String {
    let mut rows: Vec<(&str, f64)> = Vec::new();
    if let Some(scheme) = scheme {
        for l in scheme.labels() {
            if let Some(&f) = report.per_class_entity_f1.get(l) {
                rows.push((l, f));
            }
        }
    }
    for (l, &f) in &report.per_class_entity_f1 {
        if !rows.iter().any(|(r, _)| r == l) {
            rows.push((l, f));
        }
    }
    let width = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(["aggregate".len(), "token kappa".len(), "Class".len()])
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "agreement {} vs {} ({} docs)",
        report.pair.0, report.pair.1, report.doc_count
    );
    let _ = writeln!(out, "{:<width$}  {:>9}", "Class", "entity F1");
    for (label, f1) in rows {
        let _ = writeln!(out, "{label:<width$}  {f1:>9.2}");
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 11));
    let _ = writeln!(out, "{:<width$}  {:>9.2}", "aggregate", report.entity_f1);
    let kappa = match report.token_kappa {
        Kappa::Defined(k) => format!("{k:.2}"),
        Kappa::Undefined => "n/a".to_string(),
    };
    let _ = writeln!(out, "{:<width$}  {:>9}", "token kappa", kappa);
    out
}
