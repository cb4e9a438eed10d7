//! The iteration state machine and project state.
//!
//! A batch moves strictly forward through
//! `Sampled → [PreAnnotated] → Assigned → Annotated → Merged → Resolved → Finalized`,
//! one batch at a time. Every transition appends one audit event.

mod assignment;
mod audit;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use assignment::{AssignmentPlan, Duty, Part};
pub use audit::{stage_history, AuditEvent};
pub use store::ProjectStore;

use crate::agreement::{agreement_report, AgreementReport};
use crate::error::{Error, Result};
use crate::merge::{apply_resolutions, check_placement, merge_pair, resolve_one, Conflict, ConflictStatus, Resolution};
use crate::model::{validate_annotator_id, AnnotationSet, Author, Document, LabelScheme, Span};
use crate::par::Execution;
use crate::predictions::{fetch_predictions, predictions_to_draft, PredictionProvider};
use crate::sampling::{partial_shuffle, score_pool, select_batch, select_random, SamplingConfig, ScoreRecord};
use crate::taxonomy::{apply_adjustment, validate_adjustment, ClassAdjustment};
use crate::tokenize::Tokenization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sampled,
    PreAnnotated,
    Assigned,
    Annotated,
    Merged,
    Resolved,
    Finalized,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sampled => "sampled",
            Stage::PreAnnotated => "pre_annotated",
            Stage::Assigned => "assigned",
            Stage::Annotated => "annotated",
            Stage::Merged => "merged",
            Stage::Resolved => "resolved",
            Stage::Finalized => "finalized",
        }
    }

    fn can_advance_to(self, next: Stage) -> bool {
        use Stage::*;
        matches!(
            (self, next),
            (Sampled, PreAnnotated)
                | (Sampled, Assigned)
                | (PreAnnotated, Assigned)
                | (Assigned, Annotated)
                | (Annotated, Merged)
                | (Merged, Resolved)
                | (Resolved, Finalized)
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    pub provider: String,
    pub min_entity_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub index: usize,
    pub doc_ids: Vec<String>,
    pub stage: Stage,
    pub sampling: SamplingConfig,
    pub assignments: Option<AssignmentPlan>,
    pub scheme_version: u32,
    pub bootstrap: Option<BootstrapInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSummary {
    pub docs: usize,
    pub agreed_spans: usize,
    pub conflicts: usize,
    pub per_annotator_span_counts: BTreeMap<String, usize>,
}

/// Agreement for one iteration: one report per part plus the pooled figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAgreement {
    pub iteration: usize,
    pub pooled: AgreementReport,
    pub per_part: Vec<AgreementReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub bootstrap: bool,
    pub min_entity_confidence: f64,
    pub skip_bootstrap_on_error: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            bootstrap: true,
            min_entity_confidence: 0.0,
            skip_bootstrap_on_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub index: usize,
    pub scores: Option<Vec<ScoreRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Manifest {
    pub name: String,
    pub annotators: Vec<String>,
    pub schemes: Vec<LabelScheme>,
    pub adjustments: Vec<ClassAdjustment>,
    pub iterations: Vec<Iteration>,
    pub splits: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct IterationData {
    pub drafts: BTreeMap<String, AnnotationSet>,
    /// author -> doc -> set
    pub individual: BTreeMap<String, BTreeMap<String, AnnotationSet>>,
    pub merged: BTreeMap<String, AnnotationSet>,
    pub conflicts: Vec<Conflict>,
    /// Every recorded decision in order; the last one per conflict wins.
    pub resolutions: Vec<Resolution>,
    pub gold: BTreeMap<String, AnnotationSet>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[derive(Debug, Clone)]
pub struct Project {
    pub(crate) manifest: Manifest,
    pub(crate) corpus: Vec<Document>,
    pub(crate) doc_index: HashMap<String, usize>,
    pub(crate) data: BTreeMap<usize, IterationData>,
    pub(crate) audit: Vec<AuditEvent>,
    pub(crate) splits: Option<Splits>,
    clock: fn() -> String,
    exec: Execution,
}

pub(crate) fn index_corpus(corpus: &[Document]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(corpus.len());
    let mut dups = BTreeSet::new();
    for (i, d) in corpus.iter().enumerate() {
        if index.insert(d.id().to_string(), i).is_some() {
            dups.insert(d.id().to_string());
        }
    }
    if !dups.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "duplicate document ids: {}",
            dups.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(index)
}

impl Project {
    pub fn create(
        name: impl Into<String>,
        documents: Vec<Document>,
        scheme: LabelScheme,
        annotators: Vec<String>,
    ) -> Result<Self> {
        let mut annotators = annotators;
        annotators.sort();
        annotators.dedup();
        if annotators.len() < 2 {
            return Err(Error::TooFewAnnotators(annotators.len()));
        }
        for a in &annotators {
            validate_annotator_id(a)?;
        }
        if documents.is_empty() {
            return Err(Error::EmptyCorpus("no documents".into()));
        }
        let doc_index = index_corpus(&documents)?;
        let name = name.into();
        let mut project = Self {
            manifest: Manifest {
                name: name.clone(),
                annotators: annotators.clone(),
                schemes: vec![scheme.clone()],
                adjustments: Vec::new(),
                iterations: Vec::new(),
                splits: None,
            },
            corpus: documents,
            doc_index,
            data: BTreeMap::new(),
            audit: Vec::new(),
            splits: None,
            clock: now,
            exec: Execution::default(),
        };
        project.log(
            "project_created",
            None,
            None,
            json!({
                "name": name,
                "annotators": annotators,
                "documents": project.corpus.len(),
                "scheme_version": scheme.version(),
                "labels": scheme.labels(),
            }),
        );
        Ok(project)
    }

    pub(crate) fn from_parts(
        manifest: Manifest,
        corpus: Vec<Document>,
        data: BTreeMap<usize, IterationData>,
        audit: Vec<AuditEvent>,
        splits: Option<Splits>,
    ) -> Result<Self> {
        let doc_index = index_corpus(&corpus)?;
        Ok(Self {
            manifest,
            corpus,
            doc_index,
            data,
            audit,
            splits,
            clock: now,
            exec: Execution::default(),
        })
    }

    /// Replace the timestamp source (tests pin it for reproducible logs).
    pub fn with_clock(mut self, clock: fn() -> String) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    // ----- accessors -----

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn annotators(&self) -> &[String] {
        &self.manifest.annotators
    }

    pub fn scheme(&self) -> &LabelScheme {
        self.manifest.schemes.last().expect("a project always has a scheme")
    }

    pub fn scheme_history(&self) -> &[LabelScheme] {
        &self.manifest.schemes
    }

    pub fn adjustments(&self) -> &[ClassAdjustment] {
        &self.manifest.adjustments
    }

    pub fn iterations(&self) -> &[Iteration] {
        &self.manifest.iterations
    }

    pub fn iteration(&self, index: usize) -> Result<&Iteration> {
        index
            .checked_sub(1)
            .and_then(|i| self.manifest.iterations.get(i))
            .ok_or(Error::UnknownIteration(index))
    }

    pub fn current_iteration(&self) -> Option<&Iteration> {
        self.manifest.iterations.last()
    }

    pub fn corpus(&self) -> &[Document] {
        &self.corpus
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.doc_index.get(id).map(|&i| &self.corpus[i])
    }

    pub fn audit_log(&self) -> &[AuditEvent] {
        &self.audit
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn tokenization(&self) -> Tokenization {
        Tokenization::from_documents(&self.corpus)
    }

    fn data(&self, index: usize) -> Result<&IterationData> {
        self.data.get(&index).ok_or(Error::UnknownIteration(index))
    }

    pub fn drafts(&self, index: usize) -> Result<Vec<&AnnotationSet>> {
        Ok(self.data(index)?.drafts.values().collect())
    }

    pub fn individual(&self, index: usize, author: &str) -> Result<Vec<&AnnotationSet>> {
        Ok(self
            .data(index)?
            .individual
            .get(author)
            .map(|m| m.values().collect())
            .unwrap_or_default())
    }

    pub fn merged(&self, index: usize) -> Result<Vec<&AnnotationSet>> {
        Ok(self.data(index)?.merged.values().collect())
    }

    pub fn merged_for(&self, doc_id: &str) -> Option<&AnnotationSet> {
        self.data.values().rev().find_map(|d| d.merged.get(doc_id))
    }

    pub fn conflicts(&self, index: usize) -> Result<&[Conflict]> {
        Ok(&self.data(index)?.conflicts)
    }

    pub fn resolution_log(&self, index: usize) -> Result<&[Resolution]> {
        Ok(&self.data(index)?.resolutions)
    }

    /// Last recorded resolution per conflict.
    pub fn effective_resolutions(&self, index: usize) -> Result<BTreeMap<String, Resolution>> {
        Ok(self
            .data(index)?
            .resolutions
            .iter()
            .map(|r| (r.conflict_id.clone(), r.clone()))
            .collect())
    }

    pub fn gold(&self, index: usize) -> Result<Vec<&AnnotationSet>> {
        Ok(self.data(index)?.gold.values().collect())
    }

    /// Gold sets of all finalized iterations, ordered by doc id.
    pub fn gold_sets(&self) -> Vec<&AnnotationSet> {
        let mut all: Vec<&AnnotationSet> = self
            .manifest
            .iterations
            .iter()
            .filter(|it| it.stage == Stage::Finalized)
            .flat_map(|it| self.data[&it.index].gold.values())
            .collect();
        all.sort_by(|a, b| a.doc_id().cmp(b.doc_id()));
        all
    }

    /// Doc ids that have ever been sampled.
    pub fn sampled_ids(&self) -> BTreeSet<&str> {
        self.manifest
            .iterations
            .iter()
            .flat_map(|it| it.doc_ids.iter().map(String::as_str))
            .collect()
    }

    /// Doc ids of finalized (gold) documents.
    pub fn labeled_pool(&self) -> Vec<String> {
        self.gold_sets().into_iter().map(|s| s.doc_id().to_string()).collect()
    }

    /// Never-sampled doc ids, sorted.
    pub fn unlabeled_pool(&self) -> Vec<String> {
        let sampled = self.sampled_ids();
        let mut pool: Vec<String> = self
            .corpus
            .iter()
            .map(|d| d.id())
            .filter(|id| !sampled.contains(id))
            .map(str::to_string)
            .collect();
        pool.sort();
        pool
    }

    // ----- bookkeeping -----

    fn log(&mut self, event: &str, iteration: Option<usize>, stage: Option<Stage>, detail: serde_json::Value) {
        let seq = self.audit.last().map_or(1, |e| e.seq + 1);
        self.audit.push(AuditEvent {
            seq,
            at: (self.clock)(),
            event: event.to_string(),
            iteration,
            stage,
            detail,
        });
    }

    fn iteration_mut(&mut self, index: usize) -> Result<&mut Iteration> {
        index
            .checked_sub(1)
            .and_then(|i| self.manifest.iterations.get_mut(i))
            .ok_or(Error::UnknownIteration(index))
    }

    fn advance(&mut self, index: usize, to: Stage, detail: serde_json::Value) -> Result<()> {
        let it = self.iteration_mut(index)?;
        if !it.stage.can_advance_to(to) {
            return Err(Error::WrongStage {
                index,
                actual: it.stage,
                expected: format!("a stage preceding {to}"),
            });
        }
        it.stage = to;
        self.log(&format!("iteration_{to}"), Some(index), Some(to), detail);
        Ok(())
    }

    fn expect_stage(&self, index: usize, allowed: &[Stage]) -> Result<&Iteration> {
        let it = self.iteration(index)?;
        if allowed.contains(&it.stage) {
            Ok(it)
        } else {
            Err(Error::WrongStage {
                index,
                actual: it.stage,
                expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or "),
            })
        }
    }

    fn ensure_idle(&self) -> Result<()> {
        match self.current_iteration() {
            Some(it) if it.stage != Stage::Finalized => Err(Error::IterationInFlight {
                index: it.index,
                stage: it.stage,
            }),
            _ => Ok(()),
        }
    }

    fn docs(&self, ids: &[String]) -> Vec<Document> {
        ids.iter().filter_map(|id| self.document(id)).cloned().collect()
    }

    // ----- stage operations -----

    /// Draw a new batch from never-sampled documents. Uncertainty strategies
    /// score the whole unlabeled pool with `provider`.
    pub fn sample_iteration(
        &mut self,
        config: SamplingConfig,
        provider: Option<&dyn PredictionProvider>,
    ) -> Result<SampleOutcome> {
        config.validate()?;
        self.ensure_idle()?;
        let pool = self.unlabeled_pool();
        if config.batch_size > pool.len() {
            return Err(Error::PoolExhausted {
                requested: config.batch_size,
                available: pool.len(),
            });
        }
        let (doc_ids, scores) = match config.strategy.method() {
            None => (select_random(&pool, config.batch_size, config.seed)?, None),
            Some(method) => {
                let provider = provider.ok_or_else(|| {
                    Error::MissingProvider(format!("strategy {method} needs a prediction provider"))
                })?;
                let preds = fetch_predictions(provider, &self.docs(&pool), self.scheme())?;
                let scores = score_pool(&preds, method, self.exec)?;
                let picked = select_batch(&scores, config.batch_size)?;
                let records = scores
                    .into_iter()
                    .map(|s| ScoreRecord {
                        doc_id: s.doc_id,
                        value: s.value,
                        method,
                    })
                    .collect();
                (picked, Some(records))
            }
        };
        let index = self.manifest.iterations.len() + 1;
        self.manifest.iterations.push(Iteration {
            index,
            doc_ids: doc_ids.clone(),
            stage: Stage::Sampled,
            sampling: config,
            assignments: None,
            scheme_version: self.scheme().version(),
            bootstrap: None,
        });
        self.data.insert(index, IterationData::default());
        self.log(
            "iteration_sampled",
            Some(index),
            Some(Stage::Sampled),
            json!({ "sampling": config, "doc_ids": doc_ids }),
        );
        Ok(SampleOutcome { index, scores })
    }

    /// Pre-annotate the batch with model drafts. Both annotators of a part
    /// later start from the same draft.
    pub fn bootstrap_iteration(
        &mut self,
        index: usize,
        provider: &dyn PredictionProvider,
        min_entity_confidence: f64,
    ) -> Result<usize> {
        let it = self.expect_stage(index, &[Stage::Sampled])?;
        let docs = self.docs(&it.doc_ids);
        let preds = fetch_predictions(provider, &docs, self.scheme())?;
        let drafts = self
            .exec
            .try_map(&preds, |p| predictions_to_draft(p, min_entity_confidence, provider.identity()))?;
        let count = drafts.len();
        let spans: usize = drafts.iter().map(|d| d.spans().len()).sum();
        let data = self.data.get_mut(&index).expect("iteration data exists");
        data.drafts = drafts.into_iter().map(|d| (d.doc_id().to_string(), d)).collect();
        self.iteration_mut(index)?.bootstrap = Some(BootstrapInfo {
            provider: provider.identity().to_string(),
            min_entity_confidence,
        });
        self.advance(
            index,
            Stage::PreAnnotated,
            json!({ "provider": provider.identity(), "drafts": count, "draft_spans": spans }),
        )?;
        Ok(count)
    }

    /// Build the cyclic two-annotators-per-part plan. The annotator order is
    /// rotated by the iteration index so partners change between batches.
    pub fn assign_iteration(&mut self, index: usize) -> Result<&AssignmentPlan> {
        let it = self.expect_stage(index, &[Stage::Sampled, Stage::PreAnnotated])?;
        let plan = AssignmentPlan::cyclic(&it.doc_ids, &self.manifest.annotators, index - 1);
        let detail = serde_json::to_value(&plan).expect("plan serializes");
        self.iteration_mut(index)?.assignments = Some(plan);
        self.advance(index, Stage::Assigned, detail)?;
        Ok(self.iteration(index)?.assignments.as_ref().expect("just set"))
    }

    /// Sample, optionally bootstrap, and assign in one step.
    pub fn plan_iteration(
        &mut self,
        sampling: SamplingConfig,
        provider: Option<&dyn PredictionProvider>,
        options: PlanOptions,
    ) -> Result<&Iteration> {
        let SampleOutcome { index, .. } = self.sample_iteration(sampling, provider)?;
        if let (Some(p), true) = (provider, options.bootstrap) {
            match self.bootstrap_iteration(index, p, options.min_entity_confidence) {
                Ok(_) => {}
                Err(Error::ProviderUnavailable(reason)) if options.skip_bootstrap_on_error => {
                    self.log("bootstrap_skipped", Some(index), None, json!({ "reason": reason }));
                }
                Err(e) => return Err(e),
            }
        }
        self.assign_iteration(index)?;
        self.iteration(index)
    }

    /// Starting files for an annotator: the draft of each assigned doc, or an
    /// empty set when the batch was not bootstrapped.
    pub fn tasks_for(&self, index: usize, annotator: &str) -> Result<Vec<AnnotationSet>> {
        let it = self.iteration(index)?;
        let plan = it.assignments.as_ref().ok_or_else(|| Error::WrongStage {
            index,
            actual: it.stage,
            expected: "assigned".into(),
        })?;
        let author = Author::annotator(annotator)?;
        let data = self.data(index)?;
        plan.docs_of(annotator)
            .into_iter()
            .map(|doc| match data.drafts.get(doc) {
                Some(d) => d.clone().with_author(author.clone()),
                None => Ok(AnnotationSet::empty(doc, author.clone(), it.scheme_version)),
            })
            .collect()
    }

    /// Store individual annotations. Re-uploading for the same `(doc, author)`
    /// replaces the earlier copy. The batch becomes `Annotated` once every doc
    /// has both of its copies.
    pub fn ingest_individual_annotations(&mut self, index: usize, sets: Vec<AnnotationSet>) -> Result<&Iteration> {
        let it = self.expect_stage(index, &[Stage::Assigned, Stage::Annotated])?;
        let plan = it.assignments.as_ref().expect("assigned iterations have a plan");
        let scheme = self.scheme();
        for set in &sets {
            let doc_id = set.doc_id();
            if !it.doc_ids.iter().any(|d| d == doc_id) {
                return Err(Error::UnknownDoc(doc_id.to_string()));
            }
            let author = match set.author() {
                Author::Annotator(a) => a.as_str(),
                other => {
                    return Err(Error::WrongAnnotator {
                        author: other.to_string(),
                        doc_id: doc_id.to_string(),
                    })
                }
            };
            if !plan.annotators_for_doc(doc_id).contains(&author) {
                return Err(Error::WrongAnnotator {
                    author: author.to_string(),
                    doc_id: doc_id.to_string(),
                });
            }
            let text_len = self.document(doc_id).expect("iteration docs are in the corpus").char_len();
            set.check_against(text_len, scheme)?;
        }
        let count = sets.len();
        let authors: BTreeSet<String> = sets.iter().map(|s| s.author().to_string()).collect();
        let data = self.data.get_mut(&index).expect("iteration data exists");
        for set in sets {
            data.individual
                .entry(set.author().to_string())
                .or_default()
                .insert(set.doc_id().to_string(), set);
        }
        self.log(
            "annotations_ingested",
            Some(index),
            None,
            json!({ "sets": count, "authors": authors }),
        );
        let it = self.iteration(index)?;
        if it.stage == Stage::Assigned && self.missing_copies(index)?.is_empty() {
            let docs = it.doc_ids.len();
            self.advance(index, Stage::Annotated, json!({ "docs": docs }))?;
        }
        self.iteration(index)
    }

    /// `(doc, annotator)` pairs still awaiting an upload.
    pub fn missing_copies(&self, index: usize) -> Result<Vec<(String, String)>> {
        let it = self.iteration(index)?;
        let Some(plan) = it.assignments.as_ref() else {
            return Ok(Vec::new());
        };
        let data = self.data(index)?;
        let mut missing = Vec::new();
        for doc in &it.doc_ids {
            for a in plan.annotators_for_doc(doc) {
                if !data.individual.get(a).is_some_and(|m| m.contains_key(doc)) {
                    missing.push((doc.clone(), a.to_string()));
                }
            }
        }
        Ok(missing)
    }

    pub fn merge_iteration(&mut self, index: usize) -> Result<MergeSummary> {
        let it = self.expect_stage(index, &[Stage::Annotated])?;
        let plan = it.assignments.as_ref().expect("annotated iterations have a plan");
        let data = self.data(index)?;
        let jobs: Vec<(&AnnotationSet, &AnnotationSet)> = it
            .doc_ids
            .iter()
            .map(|doc| {
                let who = plan.annotators_for_doc(doc);
                (&data.individual[who[0]][doc], &data.individual[who[1]][doc])
            })
            .collect();
        let results = self.exec.try_map(&jobs, |(a, b)| merge_pair(a, b))?;

        let mut per_annotator: BTreeMap<String, usize> = BTreeMap::new();
        for (a, b) in &jobs {
            for s in [a, b] {
                *per_annotator.entry(s.author().to_string()).or_default() += s.spans().len();
            }
        }
        let mut merged = BTreeMap::new();
        let mut conflicts = Vec::new();
        let mut agreed = 0;
        for (set, doc_conflicts) in results {
            agreed += set.spans().iter().filter(|s| !s.is_conflict()).count();
            conflicts.extend(doc_conflicts);
            merged.insert(set.doc_id().to_string(), set);
        }
        let summary = MergeSummary {
            docs: merged.len(),
            agreed_spans: agreed,
            conflicts: conflicts.len(),
            per_annotator_span_counts: per_annotator,
        };
        let data = self.data.get_mut(&index).expect("iteration data exists");
        data.merged = merged;
        data.conflicts = conflicts;
        data.resolutions.clear();
        self.advance(
            index,
            Stage::Merged,
            serde_json::to_value(&summary).expect("summary serializes"),
        )?;
        Ok(summary)
    }

    fn conflict_position(&self, index: usize, conflict_id: &str) -> Result<usize> {
        self.data(index)?
            .conflicts
            .iter()
            .position(|c| c.conflict_id == conflict_id)
            .ok_or_else(|| Error::UnknownConflict(conflict_id.to_string()))
    }

    /// Spans a doc's gold set would contain from everything except `skip`.
    fn placed_spans(&self, index: usize, doc_id: &str, skip: &str) -> Result<Vec<Span>> {
        let data = self.data(index)?;
        let mut spans: Vec<Span> = data.merged[doc_id].spans().iter().filter(|s| !s.is_conflict()).cloned().collect();
        let effective = self.effective_resolutions(index)?;
        for c in data.conflicts.iter().filter(|c| c.doc_id == doc_id && c.conflict_id != skip) {
            if let Some(r) = effective.get(&c.conflict_id) {
                let len = self.document(doc_id).map_or(0, Document::char_len);
                if let Ok(Some(span)) = resolve_one(c, r, self.scheme(), len) {
                    spans.push(span);
                }
            }
        }
        Ok(spans)
    }

    /// Validate and buffer one decision of the collective session. A later
    /// decision for the same conflict supersedes the earlier one.
    pub fn record_resolution(&mut self, index: usize, resolution: Resolution) -> Result<&Conflict> {
        self.expect_stage(index, &[Stage::Merged])?;
        let pos = self.conflict_position(index, &resolution.conflict_id)?;
        let conflict = &self.data(index)?.conflicts[pos];
        let doc_id = conflict.doc_id.clone();
        let len = self.document(&doc_id).map_or(0, Document::char_len);
        if let Some(span) = resolve_one(conflict, &resolution, self.scheme(), len)? {
            check_placement(&self.placed_spans(index, &doc_id, &resolution.conflict_id)?, &span)?;
        }
        let detail = serde_json::to_value(&resolution).expect("resolution serializes");
        let data = self.data.get_mut(&index).expect("iteration data exists");
        data.resolutions.push(resolution);
        data.conflicts[pos].status = ConflictStatus::Resolved;
        self.log("resolution_recorded", Some(index), None, detail);
        Ok(&self.data(index)?.conflicts[pos])
    }

    /// Apply all resolutions (buffered ones plus `extra`) and turn the batch
    /// into gold data. Nothing changes unless every document succeeds.
    pub fn finalize_iteration(&mut self, index: usize, extra: Vec<Resolution>) -> Result<&Iteration> {
        self.expect_stage(index, &[Stage::Merged])?;
        let data = self.data(index)?;
        let mut effective = self.effective_resolutions(index)?;
        for r in &extra {
            if !data.conflicts.iter().any(|c| c.conflict_id == r.conflict_id) {
                return Err(Error::UnknownConflict(r.conflict_id.clone()));
            }
            effective.insert(r.conflict_id.clone(), r.clone());
        }
        let unresolved: Vec<String> = data
            .conflicts
            .iter()
            .filter(|c| !effective.contains_key(&c.conflict_id))
            .map(|c| c.conflict_id.clone())
            .collect();
        if !unresolved.is_empty() {
            return Err(Error::UnresolvedConflict(unresolved));
        }

        let mut by_doc: BTreeMap<&str, (Vec<Conflict>, Vec<Resolution>)> = BTreeMap::new();
        for c in &data.conflicts {
            let entry = by_doc.entry(c.doc_id.as_str()).or_default();
            entry.0.push(c.clone());
            entry.1.push(effective[&c.conflict_id].clone());
        }
        let jobs: Vec<_> = data
            .merged
            .values()
            .map(|m| {
                let len = self.document(m.doc_id()).map_or(0, Document::char_len);
                (m, len, by_doc.remove(m.doc_id()).unwrap_or_default())
            })
            .collect();
        let scheme = self.scheme();
        let gold = self
            .exec
            .try_map(&jobs, |(m, len, (cs, rs))| apply_resolutions(m, cs, rs, scheme, *len))?;

        let gold_spans: usize = gold.iter().map(|g| g.spans().len()).sum();
        let conflicts = data.conflicts.len();
        let data = self.data.get_mut(&index).expect("iteration data exists");
        data.resolutions.extend(extra);
        for c in &mut data.conflicts {
            c.status = ConflictStatus::Resolved;
        }
        let docs = gold.len();
        data.gold = gold.into_iter().map(|g| (g.doc_id().to_string(), g)).collect();
        self.advance(index, Stage::Resolved, json!({ "conflicts": conflicts }))?;
        self.advance(index, Stage::Finalized, json!({ "docs": docs, "gold_spans": gold_spans }))?;
        self.iteration(index)
    }

    /// Agreement between the two annotators of each part, and pooled.
    pub fn iteration_agreement(&self, index: usize) -> Result<IterationAgreement> {
        let it = self.iteration(index)?;
        if it.stage < Stage::Annotated {
            return Err(Error::WrongStage {
                index,
                actual: it.stage,
                expected: "annotated or later".into(),
            });
        }
        let plan = it.assignments.as_ref().expect("annotated iterations have a plan");
        let data = self.data(index)?;
        let tokens = self.tokenization();
        let mut side_a = Vec::new();
        let mut side_b = Vec::new();
        let mut per_part = Vec::new();
        for part in plan.parts.iter().filter(|p| !p.doc_ids.is_empty()) {
            let who = plan.annotators_of(part.part_index);
            let pick = |author: &str| -> Vec<AnnotationSet> {
                part.doc_ids.iter().map(|d| data.individual[author][d].clone()).collect()
            };
            let (a, b) = (pick(who[0]), pick(who[1]));
            per_part.push(agreement_report(&a, &b, &tokens, self.exec)?);
            side_a.extend(a);
            side_b.extend(b);
        }
        Ok(IterationAgreement {
            iteration: index,
            pooled: agreement_report(&side_a, &side_b, &tokens, self.exec)?,
            per_part,
        })
    }

    /// Remap all finalized gold data and individual annotations to a new
    /// class system. Only allowed between batches.
    pub fn apply_class_adjustment(&mut self, adj: ClassAdjustment) -> Result<&LabelScheme> {
        self.ensure_idle()?;
        let new_scheme = validate_adjustment(self.scheme(), &adj)?;
        let mut remapped = self.data.clone();
        let mut spans_before = 0;
        let mut spans_after = 0;
        for data in remapped.values_mut() {
            let mut remap = |sets: &mut BTreeMap<String, AnnotationSet>| -> Result<()> {
                let current: Vec<AnnotationSet> = sets
                    .values()
                    .filter(|s| s.scheme_version() == adj.from_version)
                    .cloned()
                    .collect();
                spans_before += current.iter().map(|s| s.spans().len()).sum::<usize>();
                for s in apply_adjustment(&current, &adj)? {
                    spans_after += s.spans().len();
                    sets.insert(s.doc_id().to_string(), s);
                }
                Ok(())
            };
            remap(&mut data.gold)?;
            remap(&mut data.drafts)?;
            for sets in data.individual.values_mut() {
                remap(sets)?;
            }
        }
        self.data = remapped;
        self.manifest.schemes.push(new_scheme);
        self.manifest.adjustments.push(adj.clone());
        self.log(
            "class_adjustment",
            None,
            None,
            json!({
                "from_version": adj.from_version,
                "to_version": adj.to_version,
                "mapping": adj.mapping,
                "rationale": adj.rationale,
                "spans_before": spans_before,
                "spans_after": spans_after,
            }),
        );
        Ok(self.scheme())
    }

    /// Seeded, disjoint and exhaustive train/val/test split of all gold docs.
    /// An existing split is only replaced with `force`.
    pub fn split_dataset(&mut self, train: usize, val: usize, test: usize, seed: u64, force: bool) -> Result<&Splits> {
        if self.splits.is_some() && !force {
            return Err(Error::AlreadySplit);
        }
        let mut ids = self.labeled_pool();
        if train + val + test != ids.len() {
            return Err(Error::CountMismatch {
                train,
                val,
                test,
                available: ids.len(),
            });
        }
        let n = ids.len();
        partial_shuffle(&mut ids, n, seed);
        let mut rest = ids.into_iter();
        let mut take = |k: usize| {
            let mut part: Vec<String> = rest.by_ref().take(k).collect();
            part.sort();
            part
        };
        let splits = Splits {
            seed,
            train: take(train),
            val: take(val),
            test: take(test),
        };
        let replaced = self.splits.is_some();
        self.log(
            "dataset_split",
            None,
            None,
            json!({ "seed": seed, "train": train, "val": val, "test": test, "replaced": replaced }),
        );
        self.manifest.splits = Some("splits.json".to_string());
        Ok(self.splits.insert(splits))
    }
}
