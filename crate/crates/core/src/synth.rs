//! Seeded synthetic data: job-ad-like documents with reference spans,
//! annotator disagreements and model-style token probabilities. Used by
//! fixtures, benches and the end-to-end tests.

use std::collections::BTreeMap;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{AnnotationSet, Author, Document, LabelScheme, Span, TokenSpan};
use crate::predictions::TokenProbabilities;
use crate::sampling::{below, SamplingConfig};
use crate::taxonomy::ClassAdjustment;
use crate::tokenize::tokenize;
use crate::workflow::{PlanOptions, Project};

pub const FINAL_LABELS: [&str; 10] = [
    "SKILL_HARD",
    "SKILL_SOFT",
    "JOB_TITLE",
    "JOB_LOCATION",
    "EMPLOYER_TITLE",
    "JOB_TASK",
    "EDUCATION_DEGREE",
    "JOB_TIME",
    "EXPERIENCE_DURATION",
    "EMPLOYER_BENEFIT",
];

/// Extra classes of the initial system and where they end up.
const RETIRED: [(&str, &str); 6] = [
    ("SKILL_LANGUAGE", "SKILL_HARD"),
    ("DRIVING_LICENSE", "SKILL_HARD"),
    ("JOB_SECTOR", "O"),
    ("SALARY", "EMPLOYER_BENEFIT"),
    ("EDUCATION_FIELD", "EDUCATION_DEGREE"),
    ("EXPERIENCE_FIELD", "O"),
];

/// A 16-class job-ad scheme.
pub fn scheme16() -> LabelScheme {
    let labels = FINAL_LABELS.iter().copied().chain(RETIRED.iter().map(|(l, _)| *l));
    LabelScheme::new(1, labels).expect("static scheme is valid")
}

/// Adjustment from [`scheme16`] to ten classes.
pub fn adjustment16to10(rationale: &str) -> ClassAdjustment {
    let mut mapping: BTreeMap<String, String> = FINAL_LABELS.iter().map(|l| (l.to_string(), l.to_string())).collect();
    for (from, to) in RETIRED {
        mapping.insert(from.into(), to.into());
    }
    ClassAdjustment::new(1, mapping, rationale)
}

const FILLER: [&str; 24] = [
    "vi", "söker", "en", "som", "har", "och", "för", "att", "du", "med", "är", "hos", "oss", "kommer", "arbeta",
    "inom", "gärna", "även", "där", "till", "ett", "team", "på", "vår",
];

const ENTITY_WORDS: [&str; 20] = [
    "Python", "Rust", "SQL", "Göteborg", "Malmö", "Stockholm", "körkort", "svenska", "engelska", "ledarskap",
    "projektledare", "civilingenjör", "heltid", "tillsvidare", "friskvårdsbidrag", "Åre", "lagerarbetare", "kundservice",
    "två", "år",
];

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn below(&mut self, n: usize) -> usize {
        below(&mut self.0, n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDoc {
    pub document: Document,
    pub spans: Vec<Span>,
}

/// `n` documents named `ad-0000`, `ad-0001`, ... with one to three
/// sentences each and reference spans over labels of `scheme`.
pub fn corpus(n: usize, scheme: &LabelScheme, seed: u64) -> Vec<SyntheticDoc> {
    let mut rng = Rng::new(seed);
    (0..n).map(|i| document(&format!("ad-{i:04}"), scheme, &mut rng)).collect()
}

fn document(id: &str, scheme: &LabelScheme, rng: &mut Rng) -> SyntheticDoc {
    let mut text = String::new();
    let mut spans = Vec::new();
    let mut pos = 0;
    let push = |text: &mut String, pos: &mut usize, word: &str| {
        if !text.is_empty() {
            text.push(' ');
            *pos += 1;
        }
        let start = *pos;
        text.push_str(word);
        *pos += word.chars().count();
        (start, *pos)
    };
    for _ in 0..1 + rng.below(3) {
        for _ in 0..4 + rng.below(8) {
            if rng.chance(0.25) {
                let label = rng.pick(scheme.labels()).clone();
                let (start, mut end) = push(&mut text, &mut pos, rng.pick(&ENTITY_WORDS));
                for _ in 0..rng.below(3) {
                    end = push(&mut text, &mut pos, rng.pick(&ENTITY_WORDS)).1;
                }
                spans.push(Span::new(start, end, label).expect("generated span is valid"));
            } else {
                push(&mut text, &mut pos, rng.pick(&FILLER));
            }
        }
        text.push('.');
        pos += 1;
    }
    SyntheticDoc {
        document: Document::new(id, text).expect("generated document is valid"),
        spans,
    }
}

/// One annotator's reading of `reference`: each span is independently kept,
/// dropped, relabelled or has its end moved by one token with probability
/// `rate`, and a spurious single-token span may be added.
pub fn annotate(
    doc: &SyntheticDoc,
    author: &str,
    scheme: &LabelScheme,
    rate: f64,
    rng: &mut Rng,
) -> AnnotationSet {
    let tokens = tokenize(doc.document.text());
    let mut out: Vec<Span> = Vec::new();
    for (i, span) in doc.spans.iter().enumerate() {
        let next_start = doc.spans.get(i + 1).map_or(usize::MAX, Span::start);
        let kept = if rng.chance(rate) {
            match rng.below(3) {
                0 => None,
                1 => Some(Span::new(span.start(), span.end(), rng.pick(scheme.labels()).as_str()).expect("valid")),
                _ => {
                    let end = tokens
                        .iter()
                        .find(|t| t.start >= span.end() && t.end <= next_start)
                        .map_or(span.end(), |t| t.end);
                    Some(Span::new(span.start(), end, span.label()).expect("valid"))
                }
            }
        } else {
            Some(span.clone())
        };
        out.extend(kept);
    }
    if rng.chance(rate) {
        let free: Vec<&TokenSpan> = tokens
            .iter()
            .filter(|t| !out.iter().any(|s| t.overlaps(s)))
            .collect();
        if !free.is_empty() {
            let t = rng.pick(&free);
            out.push(Span::new(t.start, t.end, rng.pick(scheme.labels()).as_str()).expect("valid"));
        }
    }
    AnnotationSet::new(
        doc.document.id(),
        Author::annotator(author).expect("caller passes a valid id"),
        scheme.version(),
        out,
    )
    .expect("perturbations keep spans disjoint")
}

/// Token probabilities whose argmax reproduces `spans` with probability
/// mass `peak` on the true tag and the rest spread evenly.
pub fn predictions(doc: &Document, spans: &[Span], scheme: &LabelScheme, peak: f64) -> TokenProbabilities {
    let tokens = tokenize(doc.text());
    let tags = crate::bio::spans_to_bio(&tokens, spans).expect("reference spans encode");
    let label_order = scheme.bio_tags();
    let others = (label_order.len() - 1) as f64;
    let probs = tags
        .iter()
        .map(|tag| {
            let hit = label_order.iter().position(|l| l == tag).expect("tag in scheme");
            (0..label_order.len())
                .map(|j| if j == hit { peak } else { (1.0 - peak) / others })
                .collect()
        })
        .collect();
    TokenProbabilities {
        doc_id: doc.id().to_string(),
        scheme_version: scheme.version(),
        label_order,
        tokens,
        probs,
    }
}

/// A project over `n_docs` synthetic documents with one iteration that has
/// been sampled, annotated by every assigned annotator with disagreement
/// `rate`, and merged.
pub fn merged_project(n_docs: usize, annotators: &[&str], rate: f64, seed: u64) -> Project {
    let scheme = LabelScheme::new(1, ["SKILL", "TITLE", "PLACE"]).expect("static scheme is valid");
    let docs = corpus(n_docs, &scheme, seed);
    let mut project = Project::create(
        "synthetic",
        docs.iter().map(|d| d.document.clone()).collect(),
        scheme.clone(),
        annotators.iter().map(|a| a.to_string()).collect(),
    )
    .expect("synthetic project is valid");
    let it = project
        .plan_iteration(SamplingConfig::random(n_docs, seed), None, PlanOptions::default())
        .expect("fresh project can plan")
        .clone();
    let plan = it.assignments.expect("planned iterations are assigned");
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut sets = Vec::new();
    for doc in &docs {
        for who in plan.annotators_for_doc(doc.document.id()) {
            sets.push(annotate(doc, who, &scheme, rate, &mut rng));
        }
    }
    project
        .ingest_individual_annotations(it.index, sets)
        .expect("synthetic uploads are valid");
    project.merge_iteration(it.index).expect("complete iteration merges");
    project
}
