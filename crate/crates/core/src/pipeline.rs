//! File-level stage runners shared by the CLI and the end-to-end tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentError, DqnAgent, GreedyPolicy, ObservationEncoder, RandomPolicy};
use crate::basemodels::{train_sequential, BaseModelError, ProfileStore, SequentialModel, TrainingLog};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{
    assign_categories, build_user_histories, Catalog, CategoryRecord, CategoryTable, CorpusError, HistoryRecord,
    RawItem, RawReview, UserHistory,
};
use crate::distiller::{client_from_spec, distill_catalog, filter_keywords, DistillConfig, ItemProfile, LlmError};
use crate::embedding::{provider_from_spec, EmbeddingCache, EmbeddingError, EmbeddingProvider, EmbeddingStore};
use crate::harness::{self, EvalReport, HarnessError, World, WorldSpec};
use crate::jsonl::{self, JsonlError};
use crate::simulator::{EnsembleUserSimulator, EnvFactory, EpisodeTrace, RecEnv, SimError};

pub const ITEMS: &str = "items.jsonl";
pub const CATEGORIES: &str = "categories.jsonl";
pub const HISTORIES: &str = "histories.jsonl";
pub const REVIEWS: &str = "reviews.jsonl";
pub const INGEST_SUMMARY: &str = "ingest.json";
pub const RAW_ITEMS: &str = "raw_items.jsonl";
pub const RAW_REVIEWS: &str = "raw_reviews.jsonl";
pub const WORLD_SPEC: &str = "world.json";
pub const WORLD_USERS: &str = "planted_users.jsonl";
pub const WORLD_PROFILES: &str = "planted_profiles.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const BASELINE_JSON: &str = "baseline.json";
pub const REPORT_TXT: &str = "report.txt";
pub const TRACES_JSONL: &str = "traces.jsonl";
pub const TRACES_CSV: &str = "traces.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 config, 3 missing/bad input, 4 backend,
    /// 5 internal invariant or I/O failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingInput(_) | Self::BadInput(_) => 3,
            Self::Backend(_) => 4,
            Self::Invariant(_) | Self::Io { .. } => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingInput(_) => "missing_input",
            Self::BadInput(_) => "bad_input",
            Self::Backend(_) => "backend",
            Self::Invariant(_) => "invariant",
            Self::Io { .. } => "io",
        }
    }
}

impl From<JsonlError> for PipelineError {
    fn from(e: JsonlError) -> Self {
        if e.is_not_found() {
            Self::MissingInput(e.to_string())
        } else {
            Self::BadInput(e.to_string())
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidParameter(m) => Self::Config(m),
            other => Self::BadInput(other.to_string()),
        }
    }
}

impl From<LlmError> for PipelineError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(m) => Self::Config(m),
            other => Self::Backend(other.to_string()),
        }
    }
}

impl From<EmbeddingError> for PipelineError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Config(m) => Self::Config(m),
            EmbeddingError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingInput(e.to_string())
            }
            EmbeddingError::Missing(_) | EmbeddingError::CacheFormat { .. } | EmbeddingError::DimensionMismatch { .. } => {
                Self::BadInput(e.to_string())
            }
            other => Self::Backend(other.to_string()),
        }
    }
}

impl From<BaseModelError> for PipelineError {
    fn from(e: BaseModelError) -> Self {
        match e {
            BaseModelError::InvalidHyper(m) => Self::Config(m),
            BaseModelError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingInput(e.to_string())
            }
            BaseModelError::Checkpoint(_) | BaseModelError::EmptyCorpus => Self::BadInput(e.to_string()),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<SimError> for PipelineError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(m) => Self::Config(m),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<AgentError> for PipelineError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::InvalidConfig(m) => Self::Config(m),
            AgentError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingInput(e.to_string())
            }
            AgentError::Checkpoint(_) => Self::BadInput(e.to_string()),
            AgentError::Env(s) => s.into(),
            other => Self::Invariant(other.to_string()),
        }
    }
}

impl From<HarnessError> for PipelineError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Agent(a) => a.into(),
            HarnessError::Env(s) => s.into(),
            other => Self::Invariant(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput(path.display().to_string()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    write_text(path, &jsonl::to_string(records))
}

fn modified(path: &Path) -> Option<SystemTime> {
    let meta = fs::metadata(path).ok()?;
    if meta.is_dir() {
        // a directory output is as fresh as its oldest file
        fs::read_dir(path)
            .ok()?
            .filter_map(|e| e.ok()?.metadata().ok()?.modified().ok())
            .min()
    } else {
        meta.modified().ok()
    }
}

/// True when every output exists and none is older than any input.
pub fn up_to_date(inputs: &[PathBuf], outputs: &[PathBuf]) -> bool {
    let Some(oldest_out) = outputs.iter().map(|p| modified(p)).collect::<Option<Vec<_>>>().and_then(|v| v.into_iter().min())
    else {
        return false;
    };
    inputs.iter().all(|p| modified(p).is_some_and(|t| t <= oldest_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub items: usize,
    pub users: usize,
    pub interactions: usize,
    pub categories: usize,
    pub rejected_reviews: usize,
    pub duplicates_dropped: usize,
}

/// Clean the raw catalog and reviews into `out_dir`.
pub fn ingest(items: &Path, reviews: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<IngestSummary, PipelineError> {
    require(items)?;
    require(reviews)?;
    let raw_items: Vec<RawItem> = jsonl::read(items)?;
    let raw_reviews: Vec<RawReview> = jsonl::read(reviews)?;
    let table = assign_categories(&raw_items, cfg.ingest.cat_low, cfg.ingest.cat_high)?;
    let catalog = Catalog::new(raw_items)?;
    let built = build_user_histories(&raw_reviews, cfg.ingest.threshold, &catalog)?;
    let kept: Vec<&RawReview> = raw_reviews
        .iter()
        .filter(|r| catalog.contains(&r.item_id) && r.rating.is_finite())
        .collect();
    let history_records: Vec<HistoryRecord> = built
        .histories
        .iter()
        .map(|(u, h)| HistoryRecord {
            user_id: u.clone(),
            interactions: h.entries.clone(),
        })
        .collect();
    let summary = IngestSummary {
        items: catalog.len(),
        users: built.histories.len(),
        interactions: built.histories.values().map(UserHistory::len).sum(),
        categories: table.vocabulary.len(),
        rejected_reviews: built.rejected,
        duplicates_dropped: built.duplicates_dropped,
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_jsonl(&out_dir.join(ITEMS), catalog.items())?;
    write_jsonl(&out_dir.join(CATEGORIES), &table.records())?;
    write_jsonl(&out_dir.join(HISTORIES), &history_records)?;
    write_jsonl(&out_dir.join(REVIEWS), &kept)?;
    write_json(&out_dir.join(INGEST_SUMMARY), &summary)?;
    tracing::info!(?summary, out = %out_dir.display(), "ingest complete");
    Ok(summary)
}

pub fn ingest_outputs(out_dir: &Path) -> Vec<PathBuf> {
    [ITEMS, CATEGORIES, HISTORIES, REVIEWS, INGEST_SUMMARY].iter().map(|f| out_dir.join(f)).collect()
}

/// Generate a planted world into `out_dir` and ingest it in place.
pub fn genworld(spec: &WorldSpec, out_dir: &Path, cfg: &PipelineConfig) -> Result<World, PipelineError> {
    let world = harness::generate_world(spec).map_err(PipelineError::Config)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_jsonl(&out_dir.join(RAW_ITEMS), &world.items)?;
    write_jsonl(&out_dir.join(RAW_REVIEWS), &world.reviews())?;
    write_jsonl(&out_dir.join(WORLD_USERS), &world.users)?;
    write_jsonl(&out_dir.join(WORLD_PROFILES), &world.profiles)?;
    write_json(&out_dir.join(WORLD_SPEC), spec)?;
    ingest(&out_dir.join(RAW_ITEMS), &out_dir.join(RAW_REVIEWS), out_dir, cfg)?;
    Ok(world)
}

pub fn load_categories(path: &Path) -> Result<CategoryTable, PipelineError> {
    Ok(CategoryTable::from_records(jsonl::read::<CategoryRecord>(path)?))
}

pub fn load_histories(path: &Path) -> Result<BTreeMap<String, UserHistory>, PipelineError> {
    let records: Vec<HistoryRecord> = jsonl::read(path)?;
    let mut out = BTreeMap::new();
    for r in records {
        if out.insert(r.user_id.clone(), UserHistory::new(r.interactions)).is_some() {
            return Err(PipelineError::BadInput(format!("{}: duplicate user {}", path.display(), r.user_id)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub items: usize,
    pub prompts: usize,
    pub malformed: usize,
    pub exhausted: usize,
    pub transport_failures: usize,
    pub failed_items: usize,
}

/// Distill every catalog item in an ingest directory into keyword profiles.
pub fn distill(data_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<DistillSummary, PipelineError> {
    for f in [ITEMS, CATEGORIES, REVIEWS] {
        require(&data_dir.join(f))?;
    }
    let items: Vec<RawItem> = jsonl::read(&data_dir.join(ITEMS))?;
    let table = load_categories(&data_dir.join(CATEGORIES))?;
    let reviews: Vec<RawReview> = jsonl::read(&data_dir.join(REVIEWS))?;
    let llm = client_from_spec(&cfg.llm_spec())?;
    let dcfg = DistillConfig {
        domain_noun: cfg.distill.domain_noun.clone(),
        review_cap: cfg.distill.review_cap,
        retries: cfg.distill.retries,
        rating_threshold: cfg.ingest.threshold,
        concurrency: cfg.distill.concurrency,
        backoff: Duration::from_millis(cfg.distill.backoff_ms),
    };
    let (profiles, stats) = distill_catalog(&items, &table.assignments, &reviews, llm.as_ref(), &dcfg);
    let failed_items = profiles.iter().filter(|p| p.distillation_failed).count();
    if !items.is_empty() && failed_items == items.len() {
        return Err(PipelineError::Backend(format!(
            "every item failed distillation ({} transport failures)",
            stats.transport_failures
        )));
    }
    let profiles = filter_keywords(&profiles, cfg.distill.keyword_low, cfg.distill.keyword_high);
    write_jsonl(out, &profiles)?;
    let summary = DistillSummary {
        items: profiles.len(),
        prompts: stats.prompts,
        malformed: stats.malformed,
        exhausted: stats.exhausted,
        transport_failures: stats.transport_failures,
        failed_items,
    };
    tracing::info!(?summary, out = %out.display(), "distill complete");
    Ok(summary)
}

/// Resolves only from the cache; a miss is an error.
struct CacheOnly(usize);

impl EmbeddingProvider for CacheOnly {
    fn dim(&self) -> usize {
        self.0
    }

    fn name(&self) -> String {
        "cache-only".into()
    }

    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Err(EmbeddingError::Missing(keywords.first().cloned().unwrap_or_default()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub profiles: usize,
    pub keywords: usize,
    pub provider: String,
}

/// Embed every profile keyword into the cache file at `cache_path`.
pub fn embed(profiles_path: &Path, cache_path: &Path, cfg: &PipelineConfig) -> Result<EmbedSummary, PipelineError> {
    require(profiles_path)?;
    let profiles: Vec<ItemProfile> = jsonl::read(profiles_path)?;
    let provider = provider_from_spec(&cfg.embed_spec(), cfg.embed.dim)?;
    let cache = EmbeddingCache::open_or_new(cache_path, provider.dim())?;
    EmbeddingStore::build(&profiles, provider.as_ref(), &cache)?;
    if let Some(parent) = cache_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    cache.save(cache_path)?;
    let summary = EmbedSummary {
        profiles: profiles.len(),
        keywords: cache.len(),
        provider: provider.name(),
    };
    tracing::info!(?summary, out = %cache_path.display(), "embed complete");
    Ok(summary)
}

pub fn load_embeddings(profiles: &[ItemProfile], cache_path: &Path) -> Result<EmbeddingStore, PipelineError> {
    require(cache_path)?;
    let cache = EmbeddingCache::load(cache_path)?;
    Ok(EmbeddingStore::build(profiles, &CacheOnly(cache.dim()), &cache)?)
}

/// Train the sequential model on a histories file; the vocabulary is every
/// item seen in the histories.
pub fn train_sta(histories: &Path, out: &Path, cfg: &PipelineConfig) -> Result<TrainingLog, PipelineError> {
    require(histories)?;
    let users = load_histories(histories)?;
    let vocab: Vec<String> = users
        .values()
        .flat_map(|h| h.iter().map(|e| e.item_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let seqs: Vec<UserHistory> = users.into_values().collect();
    let (model, log) = train_sequential(&seqs, &vocab, &cfg.sta)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    model.save(out)?;
    write_json(&training_log_path(out), &log)?;
    tracing::info!(heldout_auc = ?log.heldout_auc, out = %out.display(), "sequential model trained");
    Ok(log)
}

pub fn training_log_path(model: &Path) -> PathBuf {
    let mut name = model.file_name().unwrap_or_default().to_os_string();
    name.push(".log.json");
    model.with_file_name(name)
}

/// Everything the environment needs, loaded from the configured paths.
pub struct Bundle {
    pub catalog_ids: Vec<String>,
    pub categories: CategoryTable,
    pub histories: BTreeMap<String, UserHistory>,
    pub profiles: Vec<ItemProfile>,
    pub embeddings: EmbeddingStore,
    pub model: SequentialModel,
}

impl Bundle {
    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let p = &cfg.paths;
        let data = p.resolve(&p.data);
        for f in [ITEMS, CATEGORIES, HISTORIES] {
            require(&data.join(f))?;
        }
        let profiles_path = p.resolve(&p.profiles);
        let sta_path = p.resolve(&p.sta_model);
        require(&profiles_path)?;
        require(&sta_path)?;
        let items: Vec<RawItem> = jsonl::read(&data.join(ITEMS))?;
        let profiles: Vec<ItemProfile> = jsonl::read(&profiles_path)?;
        Ok(Self {
            catalog_ids: Catalog::new(items)?.ids().map(str::to_string).collect(),
            categories: load_categories(&data.join(CATEGORIES))?,
            histories: load_histories(&data.join(HISTORIES))?,
            embeddings: load_embeddings(&profiles, &p.resolve(&p.embcache))?,
            model: SequentialModel::load(&sta_path)?,
            profiles,
        })
    }

    /// The same chain as the file stages, kept in memory: distill with the
    /// configured backend, filter, embed, train the sequential model.
    pub fn from_world(world: &World, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let table = assign_categories(&world.items, cfg.ingest.cat_low, cfg.ingest.cat_high)?;
        let catalog = Catalog::new(world.items.clone())?;
        let histories = build_user_histories(&world.reviews(), cfg.ingest.threshold, &catalog)?.histories;
        let llm = client_from_spec(&cfg.llm_spec())?;
        let dcfg = DistillConfig {
            domain_noun: cfg.distill.domain_noun.clone(),
            review_cap: cfg.distill.review_cap,
            retries: cfg.distill.retries,
            rating_threshold: cfg.ingest.threshold,
            concurrency: cfg.distill.concurrency,
            backoff: Duration::from_millis(cfg.distill.backoff_ms),
        };
        let (profiles, _) = distill_catalog(catalog.items(), &table.assignments, &world.reviews(), llm.as_ref(), &dcfg);
        let profiles = filter_keywords(&profiles, cfg.distill.keyword_low, cfg.distill.keyword_high);
        let provider = provider_from_spec(&cfg.embed_spec(), cfg.embed.dim)?;
        let embeddings = EmbeddingStore::build(&profiles, provider.as_ref(), &EmbeddingCache::new(provider.dim()))?;
        let vocab: Vec<String> = catalog.ids().map(str::to_string).collect();
        let seqs: Vec<UserHistory> = histories.values().cloned().collect();
        let (model, _) = train_sequential(&seqs, &vocab, &cfg.sta)?;
        Ok(Self {
            catalog_ids: vocab,
            categories: table,
            histories,
            profiles,
            embeddings,
            model,
        })
    }

    pub fn input_paths(cfg: &PipelineConfig) -> Vec<PathBuf> {
        let p = &cfg.paths;
        let data = p.resolve(&p.data);
        let mut v: Vec<PathBuf> = [ITEMS, CATEGORIES, HISTORIES].iter().map(|f| data.join(f)).collect();
        v.extend([p.resolve(&p.profiles), p.resolve(&p.embcache), p.resolve(&p.sta_model)]);
        v
    }

    pub fn simulator(&self, cfg: &PipelineConfig) -> EnsembleUserSimulator {
        EnsembleUserSimulator {
            categories: self.categories.clone(),
            profiles: ProfileStore::new(&self.profiles),
            embeddings: self.embeddings.clone(),
            model: self.model.clone(),
            aggregation: cfg.similarity,
        }
    }

    pub fn factory(&self, cfg: &PipelineConfig) -> Result<EnvFactory, PipelineError> {
        let env = RecEnv::new(
            Arc::new(self.simulator(cfg)),
            self.histories.clone(),
            self.catalog_ids.clone(),
            cfg.env.clone(),
        )?;
        Ok(EnvFactory::new(env)?)
    }

    pub fn encoder(&self, factory: &EnvFactory, cfg: &PipelineConfig) -> ObservationEncoder {
        ObservationEncoder::new(
            cfg.agent.recent_k,
            factory.env.actions(),
            &self.categories,
            cfg.agent.use_embeddings.then_some(&self.embeddings),
        )
    }
}

pub fn train_rl(cfg: &PipelineConfig, episodes: usize, out: &Path, curve_path: &Path) -> Result<Vec<agents::CurvePoint>, PipelineError> {
    let bundle = Bundle::load(cfg)?;
    let factory = bundle.factory(cfg)?;
    let encoder = bundle.encoder(&factory, cfg);
    let (agent, curve) = agents::train_agent(&factory, &encoder, &cfg.agent, episodes, cfg.seed)?;
    for p in [out, curve_path] {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    agent.save(out)?;
    agents::write_curve_csv(curve_path, &curve)?;
    Ok(curve)
}

/// Aligned plain-text table of reports.
pub fn report_table(reports: &[&EvalReport]) -> String {
    let mut out = format!(
        "{:<8} {:>8} {:>7} {:>11} {:>13} {:>9}\n",
        "policy", "episodes", "horizon", "avg_reward", "total_reward", "liking"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<8} {:>8} {:>7} {:>11.4} {:>13} {:>9.4}{}\n",
            r.policy,
            r.episodes,
            r.horizon,
            r.avg_reward,
            r.total_reward,
            r.liking_pct,
            if r.short_horizon { "  (horizon < 10)" } else { "" }
        ));
    }
    out
}

fn checked_report(
    traces: &[EpisodeTrace],
    report: &EvalReport,
    path_hint: &str,
) -> Result<(), PipelineError> {
    let again = EvalReport::from_traces(traces, report.horizon, report.seed, &report.policy, &report.config_digest);
    if &again != report || !traces.iter().all(EpisodeTrace::is_valid) {
        return Err(PipelineError::Invariant(format!("{path_hint}: report not reproducible from traces")));
    }
    Ok(())
}

/// Greedy evaluation of a trained agent (or the random policy when `agent`
/// is None) plus a random baseline on the same episodes.
pub fn evaluate(cfg: &PipelineConfig, agent: Option<&Path>, episodes: usize, out_dir: &Path) -> Result<EvalReport, PipelineError> {
    let bundle = Bundle::load(cfg)?;
    let factory = bundle.factory(cfg)?;
    let digest = cfg.digest();
    let (report, traces) = match agent {
        Some(path) => {
            require(path)?;
            let agent = DqnAgent::load(path)?;
            let encoder = bundle.encoder(&factory, cfg);
            let mut policy = GreedyPolicy {
                agent: &agent,
                encoder: &encoder,
            };
            harness::evaluate(&factory, &bundle.categories, &mut policy, "dqn", episodes, cfg.seed, &digest)?
        }
        None => {
            let mut policy = RandomPolicy::new(cfg.seed);
            harness::evaluate(&factory, &bundle.categories, &mut policy, "random", episodes, cfg.seed, &digest)?
        }
    };
    checked_report(&traces, &report, "eval")?;
    let mut rows = vec![report.clone()];
    if agent.is_some() {
        let mut random = RandomPolicy::new(cfg.seed);
        let (baseline, base_traces) =
            harness::evaluate(&factory, &bundle.categories, &mut random, "random", episodes, cfg.seed, &digest)?;
        checked_report(&base_traces, &baseline, "baseline")?;
        write_json(&out_dir.join(BASELINE_JSON), &baseline)?;
        rows.push(baseline);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    write_text(&out_dir.join(REPORT_TXT), &report_table(&rows.iter().collect::<Vec<_>>()))?;
    write_jsonl(&out_dir.join(TRACES_JSONL), &traces)?;
    let csv_path = out_dir.join(TRACES_CSV);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    harness::write_trace_csv(std::io::BufWriter::new(file), &traces)?;
    tracing::info!(avg_reward = report.avg_reward, liking = report.liking_pct, out = %out_dir.display(), "evaluation complete");
    Ok(report)
}

pub enum TraceFormat {
    Text,
    Csv,
}

/// Render one stored episode from an evaluation directory.
pub fn render_trace(report_dir: &Path, episode: usize, format: TraceFormat) -> Result<String, PipelineError> {
    let path = report_dir.join(TRACES_JSONL);
    require(&path)?;
    let traces: Vec<EpisodeTrace> = jsonl::read(&path)?;
    let trace = traces
        .into_iter()
        .find(|t| t.episode == episode)
        .ok_or_else(|| PipelineError::MissingInput(format!("episode {episode} not in {}", path.display())))?;
    Ok(match format {
        TraceFormat::Text => harness::trace_text(&trace),
        TraceFormat::Csv => {
            let mut buf = Vec::new();
            harness::write_trace_csv(&mut buf, std::slice::from_ref(&trace))?;
            String::from_utf8(buf).expect("csv is utf-8")
        }
    })
}
