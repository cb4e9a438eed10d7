use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use crossanno::agreement::render_agreement_table;
use crossanno::evaluation::{evaluate, render_report, ReportFormat};
use crossanno::merge::{ConflictStatus, Resolution};
use crossanno::predictions::{FileProvider, PredictionProvider, RemoteProvider};
use crossanno::sampling::{SamplingConfig, Strategy};
use crossanno::taxonomy::ClassAdjustment;
use crossanno::{jsonl, AnnotationSet, Document, Error, ErrorKind, LabelScheme, Project, ProjectStore, Stage};
use crossanno_server::ServeError;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "crossanno", version, about = "Iterative cross-checked NER annotation")]
struct Cli {
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,
    /// Output format: table, json or markdown.
    #[arg(long, global = true, default_value = "table", value_parser = parse_format)]
    format: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Create a project from a corpus.
    Init(InitArgs),
    /// Draw the next batch.
    Sample(SampleArgs),
    /// Pre-annotate the sampled batch from model predictions.
    Bootstrap(BootstrapArgs),
    /// Split the batch into parts and assign two annotators to each.
    Assign(AssignArgs),
    /// Import individual annotation files.
    Import(ImportArgs),
    /// Merge the two annotations of every document.
    Merge(IterationArg),
    /// Serve the review API and UI.
    Serve(ServeArgs),
    /// Apply resolutions and store the batch as gold data.
    Finalize(FinalizeArgs),
    /// Map the project to a simplified class system.
    Remap(RemapArgs),
    /// Inter-annotator agreement of an iteration.
    Agreement(IterationArg),
    /// Score predictions against gold data.
    Evaluate(EvaluateArgs),
    /// Split gold documents into train, validation and test sets.
    Split(SplitArgs),
    /// Show project and iteration state.
    Status,
}

#[derive(Args)]
struct IterationArg {
    /// Iteration index; defaults to the latest.
    #[arg(long)]
    iteration: Option<usize>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    name: String,
    /// Documents as JSON Lines: {"id", "text", "meta"}.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated entity labels.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    /// Comma-separated annotator ids.
    #[arg(long, value_delimiter = ',', required = true)]
    annotators: Vec<String>,
}

#[derive(Args)]
struct ProviderArgs {
    /// Token probabilities as JSON Lines.
    #[arg(long, conflicts_with = "provider_url")]
    predictions: Option<PathBuf>,
    /// Base URL of a prediction service.
    #[arg(long)]
    provider_url: Option<String>,
    /// Name recorded as the author of drafts.
    #[arg(long, default_value = "model")]
    provider_name: String,
    /// Seconds to wait for the prediction service.
    #[arg(long, default_value_t = 300)]
    provider_timeout: u64,
}

impl ProviderArgs {
    fn provider(&self) -> Option<Box<dyn PredictionProvider>> {
        if let Some(path) = &self.predictions {
            Some(Box::new(FileProvider::new(&self.provider_name, path)))
        } else {
            self.provider_url.as_ref().map(|url| {
                Box::new(
                    RemoteProvider::new(&self.provider_name, url).with_timeout(Duration::from_secs(self.provider_timeout)),
                ) as Box<dyn PredictionProvider>
            })
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    /// random, least_confidence, margin or entropy.
    #[arg(long, default_value = "random")]
    strategy: String,
    #[arg(long)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write uncertainty scores of the whole pool here.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    iteration: Option<usize>,
    /// Drop draft entities with lower mean confidence.
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    iteration: Option<usize>,
    /// Write one task file per annotator into this directory.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    iteration: Option<usize>,
    /// Annotation set files (JSON Lines).
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory with built UI assets.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct FinalizeArgs {
    #[arg(long)]
    iteration: Option<usize>,
    /// Extra resolutions (JSON Lines), applied after the recorded ones.
    #[arg(long)]
    resolutions: Option<PathBuf>,
}

#[derive(Args)]
struct RemapArgs {
    /// JSON object mapping every current label to a new label or "O".
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    rationale: String,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted annotation sets (JSON Lines).
    #[arg(long)]
    predictions: PathBuf,
    /// train, val, test or all; defaults to test when a split exists.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    train: usize,
    #[arg(long)]
    val: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace an existing split.
    #[arg(long)]
    force: bool,
}

/// Command result: a JSON value plus its human rendering.
struct Output {
    json: Value,
    text: String,
}

impl Output {
    fn new(json: Value, text: impl Into<String>) -> Self {
        Self { json, text: text.into() }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn resolve_iteration(p: &Project, requested: Option<usize>) -> Result<usize, Error> {
    match requested {
        Some(k) => p.iteration(k).map(|it| it.index),
        None => p
            .current_iteration()
            .map(|it| it.index)
            .ok_or_else(|| config_error("the project has no iterations yet")),
    }
}

fn read_mapping(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let raw = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

struct Session {
    store: ProjectStore,
    project: Project,
}

impl Session {
    fn open(dir: &Path) -> Result<Self, Error> {
        let store = ProjectStore::new(dir);
        let project = store.load()?;
        Ok(Self { store, project })
    }

    fn save(&self) -> Result<(), Error> {
        self.store.save(&self.project)
    }
}

fn init(dir: &Path, a: InitArgs) -> Result<Output, Error> {
    let docs: Vec<Document> = jsonl::read(&a.corpus)?;
    let scheme = LabelScheme::new(1, a.labels)?;
    let project = Project::create(a.name, docs, scheme, a.annotators)?;
    ProjectStore::new(dir).init(&project)?;
    let text = format!(
        "created project {} with {} documents, {} annotators, {} labels in {}",
        project.name(),
        project.corpus().len(),
        project.annotators().len(),
        project.scheme().labels().len(),
        dir.display()
    );
    Ok(Output::new(
        json!({ "name": project.name(), "documents": project.corpus().len(), "annotators": project.annotators() }),
        text,
    ))
}

fn sample(s: &mut Session, a: SampleArgs) -> Result<Output, Error> {
    let strategy: Strategy = a.strategy.parse()?;
    let config = SamplingConfig {
        strategy,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let provider = a.provider.provider();
    let outcome = s.project.sample_iteration(config, provider.as_deref())?;
    s.save()?;
    if let (Some(path), Some(scores)) = (&a.scores, &outcome.scores) {
        jsonl::write(path, scores)?;
    }
    let it = s.project.iteration(outcome.index)?;
    let mut text = format!("iteration {} sampled {} documents ({strategy:?})\n", it.index, it.doc_ids.len());
    for id in &it.doc_ids {
        let _ = writeln!(text, "  {id}");
    }
    Ok(Output::new(
        json!({ "iteration": it.index, "doc_ids": it.doc_ids, "scores": outcome.scores }),
        text,
    ))
}

fn bootstrap(s: &mut Session, a: BootstrapArgs) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let provider = a
        .provider
        .provider()
        .ok_or_else(|| config_error("bootstrap needs --predictions or --provider-url"))?;
    let drafts = s.project.bootstrap_iteration(k, provider.as_ref(), a.min_confidence)?;
    s.save()?;
    let spans: usize = s.project.drafts(k)?.iter().map(|d| d.spans().len()).sum();
    Ok(Output::new(
        json!({ "iteration": k, "drafts": drafts, "draft_spans": spans }),
        format!("iteration {k}: {drafts} drafts with {spans} spans"),
    ))
}

fn assign(s: &mut Session, a: AssignArgs) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let plan = s.project.assign_iteration(k)?.clone();
    s.save()?;
    if let Some(dir) = &a.export {
        for annotator in s.project.annotators() {
            jsonl::write(&dir.join(format!("{annotator}.jsonl")), &s.project.tasks_for(k, annotator)?)?;
        }
    }
    let mut text = format!("iteration {k} assigned\n");
    for part in &plan.parts {
        let who = plan.annotators_of(part.part_index);
        let _ = writeln!(
            text,
            "  part {}: {} docs -> {}",
            part.part_index,
            part.doc_ids.len(),
            who.join(", ")
        );
    }
    Ok(Output::new(serde_json::to_value(&plan).expect("plan serializes"), text))
}

fn import(s: &mut Session, a: ImportArgs) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let mut sets: Vec<AnnotationSet> = Vec::new();
    for f in &a.files {
        sets.extend(jsonl::read::<AnnotationSet>(f)?);
    }
    let count = sets.len();
    let stage = s.project.ingest_individual_annotations(k, sets)?.stage;
    s.save()?;
    let missing = s.project.missing_copies(k)?.len();
    Ok(Output::new(
        json!({ "iteration": k, "imported": count, "stage": stage, "missing": missing }),
        format!("iteration {k}: imported {count} sets, stage {stage}, {missing} uploads missing"),
    ))
}

fn merge(s: &mut Session, a: IterationArg) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let summary = s.project.merge_iteration(k)?;
    s.save()?;
    let mut text = format!(
        "iteration {k} merged: {} docs, {} agreed spans, {} conflicts\n",
        summary.docs, summary.agreed_spans, summary.conflicts
    );
    for (who, n) in &summary.per_annotator_span_counts {
        let _ = writeln!(text, "  {who}: {n} spans");
    }
    Ok(Output::new(serde_json::to_value(&summary).expect("summary serializes"), text))
}

fn finalize(s: &mut Session, a: FinalizeArgs) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let extra: Vec<Resolution> = match &a.resolutions {
        Some(path) => jsonl::read(path)?,
        None => Vec::new(),
    };
    s.project.finalize_iteration(k, extra)?;
    s.save()?;
    let gold = s.project.gold(k)?;
    let spans: usize = gold.iter().map(|g| g.spans().len()).sum();
    Ok(Output::new(
        json!({ "iteration": k, "stage": Stage::Finalized, "gold_docs": gold.len(), "gold_spans": spans }),
        format!("iteration {k} finalized: {} gold documents, {spans} spans", gold.len()),
    ))
}

fn remap(s: &mut Session, a: RemapArgs) -> Result<Output, Error> {
    let mapping = read_mapping(&a.mapping)?;
    let from = s.project.scheme().version();
    let scheme = s.project.apply_class_adjustment(ClassAdjustment::new(from, mapping, a.rationale))?.clone();
    s.save()?;
    Ok(Output::new(
        json!({ "scheme": scheme }),
        format!(
            "scheme v{from} -> v{}: {}",
            scheme.version(),
            scheme.labels().join(", ")
        ),
    ))
}

fn agreement(s: &Session, a: IterationArg, format: ReportFormat) -> Result<Output, Error> {
    let k = resolve_iteration(&s.project, a.iteration)?;
    let report = s.project.iteration_agreement(k)?;
    let scheme = Some(s.project.scheme());
    let mut text = render_agreement_table(&report.pooled, scheme);
    if format != ReportFormat::Json && report.per_part.len() > 1 {
        for part in &report.per_part {
            text.push('\n');
            text.push_str(&render_agreement_table(part, scheme));
        }
    }
    Ok(Output::new(serde_json::to_value(&report).expect("report serializes"), text))
}

fn evaluate_cmd(s: &Session, a: EvaluateArgs, format: ReportFormat) -> Result<Output, Error> {
    let splits = s.project.splits();
    let scope: Option<&[String]> = match (a.split.as_deref(), splits) {
        (Some("all"), _) | (None, None) => None,
        (None, Some(sp)) | (Some("test"), Some(sp)) => Some(&sp.test),
        (Some("train"), Some(sp)) => Some(&sp.train),
        (Some("val"), Some(sp)) => Some(&sp.val),
        (Some("train" | "val" | "test"), None) => return Err(config_error("the project has no split yet")),
        (Some(other), _) => return Err(config_error(format!("unknown split {other:?}"))),
    };
    let gold: Vec<AnnotationSet> = s
        .project
        .gold_sets()
        .into_iter()
        .filter(|g| scope.is_none_or(|ids| ids.iter().any(|id| id == g.doc_id())))
        .cloned()
        .collect();
    if gold.is_empty() {
        return Err(config_error("no gold documents to evaluate against"));
    }
    let pred: Vec<AnnotationSet> = jsonl::read::<AnnotationSet>(&a.predictions)?
        .into_iter()
        .filter(|p| gold.iter().any(|g| g.doc_id() == p.doc_id()))
        .collect();
    let report = evaluate(&gold, &pred, s.project.scheme(), &s.project.tokenization())?;
    let rendered = render_report(&report, format);
    Ok(Output::new(serde_json::to_value(&report).expect("report serializes"), rendered))
}

fn split(s: &mut Session, a: SplitArgs) -> Result<Output, Error> {
    let splits = s.project.split_dataset(a.train, a.val, a.test, a.seed, a.force)?.clone();
    s.save()?;
    Ok(Output::new(
        serde_json::to_value(&splits).expect("splits serialize"),
        format!(
            "split {} train / {} val / {} test (seed {})",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            splits.seed
        ),
    ))
}

fn status(s: &Session) -> Result<Output, Error> {
    let p = &s.project;
    let mut text = format!(
        "project {}: {} documents, {} labeled, {} unlabeled\nannotators: {}\nscheme v{}: {}\n",
        p.name(),
        p.corpus().len(),
        p.labeled_pool().len(),
        p.unlabeled_pool().len(),
        p.annotators().join(", "),
        p.scheme().version(),
        p.scheme().labels().join(", ")
    );
    let mut iterations = Vec::new();
    for it in p.iterations() {
        let conflicts = p.conflicts(it.index)?;
        let open = conflicts.iter().filter(|c| c.status == ConflictStatus::Open).count();
        let _ = writeln!(
            text,
            "iteration {}: {} docs, stage {}, {} conflicts ({} open)",
            it.index,
            it.doc_ids.len(),
            it.stage,
            conflicts.len(),
            open
        );
        iterations.push(json!({
            "index": it.index, "stage": it.stage, "docs": it.doc_ids.len(),
            "conflicts": conflicts.len(), "open_conflicts": open,
        }));
    }
    if let Some(sp) = p.splits() {
        let _ = writeln!(text, "split: {} / {} / {}", sp.train.len(), sp.val.len(), sp.test.len());
    }
    Ok(Output::new(
        json!({
            "name": p.name(),
            "documents": p.corpus().len(),
            "labeled": p.labeled_pool().len(),
            "unlabeled": p.unlabeled_pool().len(),
            "annotators": p.annotators(),
            "scheme": p.scheme(),
            "iterations": iterations,
            "split": p.splits(),
        }),
        text,
    ))
}

enum Failure {
    Core(Error),
    Serve(ServeError),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        let kind = match self {
            Failure::Core(e) => e.kind(),
            Failure::Serve(ServeError::ProjectLoad(e)) => e.kind(),
            Failure::Serve(_) => ErrorKind::Io,
        };
        match kind {
            ErrorKind::Validation => 1,
            ErrorKind::State => 2,
            ErrorKind::Io => 3,
        }
    }

    fn message(&self) -> String {
        let msg = match self {
            Failure::Core(e) => e.to_string(),
            Failure::Serve(ServeError::ProjectLoad(e)) => e.to_string(),
            Failure::Serve(e) => e.to_string(),
        };
        msg.lines().collect::<Vec<_>>().join(" ")
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn run(cli: Cli) -> Result<Option<Output>, Failure> {
    let dir = cli.project.as_path();
    let format = cli.format;
    let out = match cli.command {
        Command::Init(a) => init(dir, a)?,
        Command::Serve(a) => {
            crossanno_server::run(dir, a.bind, a.ui.as_deref(), |addr| {
                println!("listening on http://{addr}");
                let _ = std::io::stdout().flush();
            })
            .map_err(Failure::Serve)?;
            return Ok(None);
        }
        command => {
            let mut s = Session::open(dir)?;
            match command {
                Command::Sample(a) => sample(&mut s, a)?,
                Command::Bootstrap(a) => bootstrap(&mut s, a)?,
                Command::Assign(a) => assign(&mut s, a)?,
                Command::Import(a) => import(&mut s, a)?,
                Command::Merge(a) => merge(&mut s, a)?,
                Command::Finalize(a) => finalize(&mut s, a)?,
                Command::Remap(a) => remap(&mut s, a)?,
                Command::Agreement(a) => agreement(&s, a, format)?,
                Command::Evaluate(a) => evaluate_cmd(&s, a, format)?,
                Command::Split(a) => split(&mut s, a)?,
                Command::Status => status(&s)?,
                Command::Init(_) | Command::Serve(_) => unreachable!("handled above"),
            }
        }
    };
    Ok(Some(out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(1);
        }
    };
    let format = cli.format;
    match run(cli) {
        Ok(Some(out)) => {
            let mut text = match format {
                ReportFormat::Json => serde_json::to_string_pretty(&out.json).expect("value serializes"),
                _ => out.text,
            };
            if !text.ends_with('\n') {
                text.push('\n');
            }
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
