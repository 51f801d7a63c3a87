//! Command-line entry points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::config::{validate_config, RunConfig};
use crate::decimal::UnitDecimal;
use crate::engine::store::{RunStore, ARTICLES_FILE};
use crate::engine::{Engine, RunReport};
use crate::evaluator::{self, Evaluation, EvidenceProvider, Tier};
use crate::evidence::{FixtureFetcher, FixtureReference, FixtureSearch, GatherOptions, HttpFetcher, MediaWikiClient, SearchChain};
use crate::gateway::mock::{GraphWorld, MockBackend, SyntheticWorld};
use crate::gateway::{Backend, Gateway, LiveBackend, LiveSettings, RetryPolicy};
use crate::prompts::TemplateSet;
use crate::simdex;
use crate::types::{Article, FunnelCounts, FunnelStats};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "corpusforge", version, about = "Breadth-first encyclopedia materialization and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a new run.
    Run(RunArgs),
    /// Continue an interrupted run.
    Resume(ResumeArgs),
    /// Print the funnel of a run.
    Stats(StatsArgs),
    /// Judge a sample of a run's articles against reference evidence.
    Evaluate(EvaluateArgs),
    /// Compare two aligned corpora.
    Similarity(SimilarityArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Live,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Link graph for the mock backend, as a JSON object of subject to
    /// linked names. Without it the mock generates a synthetic world.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Directory of prompt templates replacing the built-in set.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub root: Option<String>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub depth_cap: Option<u32>,
    /// scientific_neutral, left_leaning or conservative.
    #[arg(long)]
    pub persona: Option<String>,
    /// baseline or calibrated.
    #[arg(long)]
    pub strategy: Option<String>,
    /// online or batch.
    #[arg(long)]
    pub execution_mode: Option<String>,
    #[arg(long)]
    pub self_grounding: bool,
    #[arg(long)]
    pub confidence_threshold: Option<String>,
    #[arg(long)]
    pub similarity_threshold: Option<String>,
    #[arg(long)]
    pub workers: Option<u32>,
    #[arg(long)]
    pub ner_workers: Option<u32>,
    #[arg(long)]
    pub concurrency_cap: Option<u32>,
    #[arg(long)]
    pub random_seed: Option<u64>,
    /// Stop after this many waves, leaving the run resumable.
    #[arg(long)]
    pub max_waves: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub max_waves: Option<u32>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Print one table per hop as well.
    #[arg(long)]
    pub per_hop: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TierArg {
    Wiki,
    Web,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum)]
    pub tier: TierArg,
    #[arg(long, default_value_t = 1000)]
    pub sample: usize,
    #[arg(long, default_value_t = 42)]
    pub sample_seed: u64,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Reference pages for the mock wiki tier: JSONL of `{"title", "text"}`.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Search results and pages for the mock web tier, as JSON with
    /// `results` (query to list of `{"url", "snippet"}`) and `pages`
    /// (URL to text).
    #[arg(long)]
    pub web_fixture: Option<PathBuf>,
    /// Domains excluded in addition to the blocked list.
    #[arg(long)]
    pub exclude: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    /// Run directory or JSONL of `{"title", "text"}`.
    #[arg(long)]
    pub a: PathBuf,
    /// Run directory or JSONL of `{"title", "text"}`.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Skip embedding-based similarity.
    #[arg(long)]
    pub no_semantic: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Runtime(m)) = &e;
            let _ = writeln!(err, "error: {m}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run(a) => cmd_run(a, out),
        Command::Resume(a) => cmd_resume(a, out),
        Command::Stats(a) => cmd_stats(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Similarity(a) => cmd_similarity(a, out),
    }
}

fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| usage(format!("invalid value {value:?} for --{flag}")))
}

fn parse_decimal(flag: &str, value: &str) -> Result<UnitDecimal, CliError> {
    UnitDecimal::parse(value).map_err(|e| usage(format!("--{flag}: {e}")))
}

/// The config file, if any, with flag overrides applied.
pub fn build_config(a: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match (&a.config, &a.seed) {
        (Some(path), _) => RunConfig::load(path).map_err(usage)?,
        (None, Some(seed)) => match &a.root {
            Some(root) => RunConfig::topic(seed.clone(), root.clone()),
            None => RunConfig::general(seed.clone()),
        },
        (None, None) => return Err(usage("run needs --config or --seed")),
    };
    if let Some(seed) = &a.seed {
        config.seed_subject = seed.clone();
    }
    if a.config.is_some() {
        if let Some(root) = &a.root {
            config.root_subject = Some(root.clone());
            config.mode = crate::config::Mode::TopicFocused;
        }
    }
    if let Some(b) = a.budget {
        config.article_budget = Some(b);
    }
    if let Some(d) = a.depth_cap {
        config.depth_cap = Some(d);
    }
    if let Some(p) = &a.persona {
        config.persona = parse_enum("persona", p)?;
    }
    if let Some(s) = &a.strategy {
        config.strategy = parse_enum("strategy", s)?;
    }
    if let Some(m) = &a.execution_mode {
        config.execution_mode = parse_enum("execution-mode", m)?;
    }
    if a.self_grounding {
        config.self_grounding = true;
    }
    if let Some(t) = &a.confidence_threshold {
        config.confidence_threshold = Some(parse_decimal("confidence-threshold", t)?);
    }
    if let Some(t) = &a.similarity_threshold {
        config.similarity_threshold = Some(parse_decimal("similarity-threshold", t)?);
    }
    if let Some(w) = a.workers {
        config.elicitation_workers = w;
    }
    if let Some(w) = a.ner_workers {
        config.ner_workers = w;
    }
    if let Some(c) = a.concurrency_cap {
        config.global_concurrency_cap = c;
    }
    if let Some(s) = a.random_seed {
        config.random_seed = s;
    }
    validate_config(config).map_err(usage)
}

fn load_graph(path: &Path) -> Result<GraphWorld, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let edges: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(edges.iter().fold(GraphWorld::new(), |w, (from, tos)| tos.iter().fold(w, |w, to| w.edge(from, to))))
}

/// The generation backend named on the command line.
pub fn make_backend(args: &BackendArgs, config: &RunConfig) -> Result<Arc<dyn Backend>, CliError> {
    Ok(match args.backend {
        BackendKind::Mock => match &args.graph {
            Some(path) => Arc::new(MockBackend::new(load_graph(path)?, config.random_seed)),
            None => Arc::new(MockBackend::new(
                SyntheticWorld::new(config.random_seed).with_hubs(2, 8),
                config.random_seed,
            )),
        },
        BackendKind::Live => Arc::new(LiveBackend::new(LiveSettings::from_env().map_err(usage)?)),
    })
}

fn templates(args: &BackendArgs) -> Result<Arc<TemplateSet>, CliError> {
    Ok(Arc::new(match &args.templates {
        Some(dir) => TemplateSet::load_dir(dir).map_err(usage)?,
        None => TemplateSet::builtin(),
    }))
}

fn cmd_run(a: RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let config = build_config(&a)?;
    let backend = make_backend(&a.backend, &config)?;
    let gateway = Arc::new(Gateway::from_config(backend, &config));
    let mut engine = Engine::create(config, gateway, templates(&a.backend)?, &a.out).map_err(runtime)?;
    let report = engine.run_waves(a.max_waves).map_err(runtime)?;
    print_report(&report, out)
}

fn cmd_resume(a: ResumeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = RunStore::open(&a.run_dir).map_err(usage)?;
    let metadata = store.read_metadata().map_err(runtime)?;
    let backend = make_backend(&a.backend, &metadata.config)?;
    let gateway = Arc::new(Gateway::from_config(backend, &metadata.config));
    let mut engine = Engine::resume(&a.run_dir, gateway, templates(&a.backend)?).map_err(runtime)?;
    let report = engine.run_waves(a.max_waves).map_err(runtime)?;
    print_report(&report, out)
}

fn print_report(report: &RunReport, out: &mut dyn Write) -> Result<(), CliError> {
    let status = if report.completed { "completed" } else { "interrupted" };
    writeln!(
        out,
        "run {status} after {} waves: {} articles, {} failed, {} subjects committed, {} still queued",
        report.waves_completed,
        report.generated_articles,
        report.failed_subjects,
        report.committed_subjects,
        report.queued_subjects
    )
    .map_err(runtime)?;
    out.write_all(funnel_table(&report.funnel.totals).as_bytes()).map_err(runtime)
}

/// The funnel as a two-column table.
pub fn funnel_table(c: &FunnelCounts) -> String {
    let rows = [
        ("Generated articles (subjects)", c.generated_articles),
        ("Raw candidate [[wikilinks]]", c.raw_candidates),
        ("After canonical dedup", c.after_canonical),
        ("After NER filtering", c.after_ner),
        ("After similarity filtering", c.after_similarity),
        ("New queued subjects", c.queued_subjects),
    ];
    let mut s = String::new();
    for (label, n) in rows {
        s.push_str(&format!("{label:<32}{n:>12}\n"));
    }
    let survival = if c.raw_candidates == 0 {
        "n/a".to_string()
    } else {
        format!("{:.2}%", 100.0 * c.queued_subjects as f64 / c.raw_candidates as f64)
    };
    s.push_str(&format!("{:<32}{survival:>12}\n", "Raw -> queue survival"));
    s.push_str(&format!("{:<32}{:>12}\n", "(loop-pattern rejections)", c.loop_rejections));
    s.push_str(&format!("{:<32}{:>12}\n", "(below-threshold rejections)", c.below_threshold_rejections));
    s
}

fn cmd_stats(a: StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = RunStore::open(&a.run_dir).map_err(usage)?;
    let funnel: FunnelStats = store.read_funnel().map_err(runtime)?;
    let state = store.read_state().map_err(runtime)?;
    let status = if state.completed { "completed" } else { "in progress" };
    writeln!(out, "{} ({status}, {} waves)", a.run_dir.display(), state.next_wave).map_err(runtime)?;
    out.write_all(funnel_table(&funnel.totals).as_bytes()).map_err(runtime)?;
    if a.per_hop {
        for (hop, counts) in &funnel.per_hop {
            writeln!(out, "\nhop {hop}").map_err(runtime)?;
            out.write_all(funnel_table(counts).as_bytes()).map_err(runtime)?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct WebFixture {
    #[serde(default)]
    results: BTreeMap<String, Vec<crate::evidence::SearchHit>>,
    #[serde(default)]
    pages: BTreeMap<String, String>,
}

fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = RunStore::open(&a.run_dir).map_err(usage)?;
    let metadata = store.read_metadata().map_err(runtime)?;
    let articles: Vec<Article> =
        crate::engine::store::read_jsonl(&a.run_dir.join(ARTICLES_FILE)).map_err(runtime)?;
    let sample = evaluator::sample_articles(&articles, a.sample, a.sample_seed).map_err(runtime)?;

    let config = metadata.config;
    let judge: Arc<dyn Backend> = match a.backend {
        BackendKind::Mock => Arc::new(MockBackend::new(GraphWorld::new(), config.random_seed)),
        BackendKind::Live => Arc::new(LiveBackend::new(LiveSettings::from_env().map_err(usage)?)),
    };
    let gateway = Gateway::from_config(judge, &config);
    let templates = TemplateSet::builtin();

    let wiki_client: Box<dyn crate::evidence::ReferenceClient>;
    let search: SearchChain;
    let fetcher: Box<dyn crate::evidence::PageFetcher>;
    let provider = match (a.tier, a.backend) {
        (TierArg::Wiki, BackendKind::Live) => {
            wiki_client = Box::new(MediaWikiClient::english(RetryPolicy {
                max_retries: config.max_retries,
                base: std::time::Duration::from_millis(config.backoff_base_ms),
                cap: std::time::Duration::from_millis(config.backoff_cap_ms),
                seed: config.random_seed,
            }));
            EvidenceProvider::Wiki(wiki_client.as_ref())
        }
        (TierArg::Wiki, BackendKind::Mock) => {
            let path = a.references.as_ref().ok_or_else(|| usage("mock wiki tier needs --references"))?;
            let docs: Vec<simdex::Document> = crate::engine::store::read_jsonl(path).map_err(usage)?;
            wiki_client = Box::new(docs.iter().fold(FixtureReference::new(), |f, d| f.page(&d.title, &d.text)));
            EvidenceProvider::Wiki(wiki_client.as_ref())
        }
        (TierArg::Web, BackendKind::Live) => {
            search = SearchChain::from_env();
            if search.available().is_empty() {
                return Err(usage("web tier needs SERPER_API_KEY or BRAVE_API_KEY"));
            }
            fetcher = Box::new(HttpFetcher::default());
            EvidenceProvider::Web { search: &search, fetcher: fetcher.as_ref(), options: GatherOptions { exclusions: a.exclude.clone() } }
        }
        (TierArg::Web, BackendKind::Mock) => {
            let path = a.web_fixture.as_ref().ok_or_else(|| usage("web tier has no search backend; pass --web-fixture"))?;
            let fixture: WebFixture = read_json_file(path)?;
            let mut s = FixtureSearch::new("fixture");
            for (query, hits) in &fixture.results {
                for h in hits {
                    s = s.hit(query, &h.url, &h.snippet);
                }
            }
            search = SearchChain::new().with(s);
            fetcher = Box::new(fixture.pages.iter().fold(FixtureFetcher::new(), |f, (u, t)| f.page(u, t)));
            EvidenceProvider::Web { search: &search, fetcher: fetcher.as_ref(), options: GatherOptions { exclusions: a.exclude.clone() } }
        }
    };

    let (verdicts, exclusions) = evaluator::evaluate_articles(&gateway, &templates, &config, &provider, &sample, a.workers);
    let tier = match a.tier {
        TierArg::Wiki => Tier::Wiki,
        TierArg::Web => Tier::Web,
    };
    let evaluation = Evaluation { tier, sample_seed: a.sample_seed, verdicts, exclusions };
    let dir = a.out.unwrap_or(a.run_dir);
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    evaluation.write(&dir).map_err(runtime)?;
    out.write_all(evaluation.report_markdown().as_bytes()).map_err(runtime)
}

fn cmd_similarity(a: SimilarityArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let docs_a = simdex::load_documents(&a.a).map_err(usage)?;
    let docs_b = simdex::load_documents(&a.b).map_err(usage)?;
    let pairs = match simdex::align(&docs_a, &docs_b) {
        Ok(p) => p,
        Err(simdex::SimilarityError::Misaligned { titles_a, titles_b, .. }) => {
            let mut msg = String::from("subjects do not line up");
            for t in &titles_a {
                msg.push_str(&format!("\n  only in {}: {t}", a.a.display()));
            }
            for t in &titles_b {
                msg.push_str(&format!("\n  only in {}: {t}", a.b.display()));
            }
            return Err(runtime(msg));
        }
        Err(e) => return Err(runtime(e)),
    };
    let gateway = if a.no_semantic {
        None
    } else {
        let backend: Arc<dyn Backend> = match a.backend {
            BackendKind::Mock => Arc::new(MockBackend::new(GraphWorld::new(), 0)),
            BackendKind::Live => Arc::new(LiveBackend::new(LiveSettings::from_env().map_err(usage)?)),
        };
        Some(Gateway::new(backend, RetryPolicy::immediate(3), 4))
    };
    let (reports, summary) = simdex::compare(&pairs, gateway.as_ref()).map_err(runtime)?;
    std::fs::create_dir_all(&a.out).map_err(runtime)?;
    simdex::write(&a.out, &reports, &summary).map_err(runtime)?;
    let semantic = summary.mean_semantic_cosine.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    writeln!(out, "pairs                 {}", summary.pairs).map_err(runtime)?;
    writeln!(out, "TF-IDF cosine         {:.3}", summary.mean_tfidf_cosine).map_err(runtime)?;
    writeln!(out, "Bigram overlap        {:.3}", summary.mean_ngram_overlap[&2]).map_err(runtime)?;
    writeln!(out, "Trigram overlap       {:.3}", summary.mean_ngram_overlap[&3]).map_err(runtime)?;
    writeln!(out, "Semantic cosine       {semantic}").map_err(runtime)?;
    writeln!(
        out,
        "Mean / median words   {:.0} / {:.0} vs {:.0} / {:.0}",
        summary.mean_words.0, summary.median_words.0, summary.mean_words.1, summary.median_words.1
    )
    .map_err(runtime)
}
