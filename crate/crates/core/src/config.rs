//! Pipeline configuration: TOML file, then `SIMREC__*` environment
//! overrides, then command-line flags (applied by the caller).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::DqnConfig;
use crate::basemodels::{SimAggregation, StaHyper};
use crate::corpus::{DEFAULT_CATEGORY_HIGH_CUT, DEFAULT_CATEGORY_LOW_CUT, DEFAULT_RATING_THRESHOLD};
use crate::distiller::{DEFAULT_KEYWORD_HIGH_CUT, DEFAULT_KEYWORD_LOW_CUT};
use crate::seeding::hex_digest;
use crate::simulator::EnvConfig;

/// Prefix of environment overrides: `SIMREC__SEED=3`,
/// `SIMREC__ENV__HORIZON=10`, `SIMREC__DISTILL__LLM=mock:1`.
pub const ENV_PREFIX: &str = "SIMREC__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Input and output locations. Relative paths resolve against `base`
/// (the config file's directory, or the working directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip)]
    pub base: PathBuf,
    /// Ingested data directory: items.jsonl, categories.jsonl, histories.jsonl.
    pub data: PathBuf,
    pub profiles: PathBuf,
    pub embcache: PathBuf,
    pub sta_model: PathBuf,
    pub agent: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            base: PathBuf::new(),
            data: "data".into(),
            profiles: "profiles.jsonl".into(),
            embcache: "embcache".into(),
            sta_model: "model.ckpt".into(),
            agent: "agent.ckpt".into(),
            reports: "report".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSettings {
    pub threshold: f64,
    pub cat_low: usize,
    pub cat_high: f64,
}

impl Default for IngestSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RATING_THRESHOLD,
            cat_low: DEFAULT_CATEGORY_LOW_CUT,
            cat_high: DEFAULT_CATEGORY_HIGH_CUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSettings {
    /// `mock:<seed>`, `mock` (seeded from the global seed) or `http`.
    pub llm: String,
    pub domain_noun: String,
    pub review_cap: usize,
    pub retries: usize,
    pub concurrency: usize,
    pub backoff_ms: u64,
    pub keyword_low: usize,
    pub keyword_high: f64,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            llm: "mock".into(),
            domain_noun: crate::distiller::template::DEFAULT_DOMAIN_NOUN.into(),
            review_cap: 10,
            retries: 2,
            concurrency: 8,
            backoff_ms: 500,
            keyword_low: DEFAULT_KEYWORD_LOW_CUT,
            keyword_high: DEFAULT_KEYWORD_HIGH_CUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSettings {
    /// `hash:<seed>`, `hash` (seeded from the global seed), `file:<path>`
    /// or `remote`.
    pub provider: String,
    pub dim: usize,
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            provider: "hash".into(),
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub train_episodes: usize,
    pub eval_episodes: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            train_episodes: 2000,
            eval_episodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its randomness from it.
    pub seed: u64,
    pub paths: Paths,
    pub ingest: IngestSettings,
    pub distill: DistillSettings,
    pub embed: EmbedSettings,
    pub similarity: SimAggregation,
    pub sta: StaHyper,
    pub env: EnvConfig,
    pub agent: DqnConfig,
    pub run: RunSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            ingest: IngestSettings::default(),
            distill: DistillSettings::default(),
            embed: EmbedSettings::default(),
            similarity: SimAggregation::default(),
            sta: StaHyper::default(),
            env: EnvConfig::default(),
            agent: DqnConfig::default(),
            run: RunSettings::default(),
        }
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    // bare words that are not TOML literals are taken as strings
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
    for (key, value) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        let parts: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
        if parts.iter().any(String::is_empty) {
            return Err(ConfigError::Parse(format!("malformed override variable {key}")));
        }
        let (leaf, sections) = parts.split_last().expect("split yields one part");
        let mut cursor = &mut *table;
        for s in sections {
            let entry = cursor
                .entry(s.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("{key}: `{s}` is not a section")))?;
        }
        cursor.insert(leaf.clone(), parse_env_value(&value));
    }
    Ok(())
}

impl PipelineConfig {
    /// Load from an optional TOML file with environment overrides applied.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| ConfigError::Parse(format!("{}: {}", p.display(), e.message())))?;
                (table, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (toml::Table::new(), PathBuf::new()),
        };
        apply_env(&mut table, vars)?;
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.paths.base = base;
        cfg.sync_seeds();
        Ok(cfg)
    }

    pub fn from_env_and_file(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if !self.ingest.threshold.is_finite() {
            return inv("ingest.threshold must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.ingest.cat_high) {
            return inv("ingest.cat_high must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.distill.keyword_high) {
            return inv("distill.keyword_high must lie in [0, 1]".into());
        }
        if self.distill.concurrency == 0 || self.distill.review_cap == 0 {
            return inv("distill.concurrency and distill.review_cap must be positive".into());
        }
        if self.embed.dim == 0 {
            return inv("embed.dim must be positive".into());
        }
        self.sta.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.agent.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Copy the global seed into the per-stage seed fields.
    pub fn sync_seeds(&mut self) {
        self.sta.seed = self.seed;
        self.env.seed = self.seed;
    }

    /// LLM backend spec with a bare `mock` bound to the global seed.
    pub fn llm_spec(&self) -> String {
        if self.distill.llm == "mock" {
            format!("mock:{}", self.seed)
        } else {
            self.distill.llm.clone()
        }
    }

    /// Embedding provider spec with a bare `hash` bound to the global seed.
    pub fn embed_spec(&self) -> String {
        if self.embed.provider == "hash" {
            format!("hash:{}", self.seed)
        } else {
            self.embed.provider.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, cfg.to_toml()).unwrap();
        let back = PipelineConfig::load(Some(&p), vec![]).unwrap();
        assert_eq!(back.paths.base, dir.path());
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn file_then_env_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[env]\nhorizon = 12\n[distill]\nllm = \"mock:1\"\n").unwrap();
        let cfg = PipelineConfig::load(Some(&p), vec![]).unwrap();
        assert_eq!((cfg.seed, cfg.env.horizon, cfg.distill.llm.as_str()), (3, 12, "mock:1"));
        let cfg = PipelineConfig::load(
            Some(&p),
            vars(&[("SIMREC__ENV__HORIZON", "5"), ("SIMREC__DISTILL__LLM", "mock:9"), ("OTHER", "x")]),
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.env.horizon, cfg.distill.llm.as_str()), (3, 5, "mock:9"));
    }

    #[test]
    fn bare_backends_follow_the_global_seed() {
        let mut cfg = PipelineConfig {
            seed: 42,
            ..PipelineConfig::default()
        };
        assert_eq!((cfg.llm_spec().as_str(), cfg.embed_spec().as_str()), ("mock:42", "hash:42"));
        cfg.distill.llm = "mock:3".into();
        cfg.embed.provider = "file:v.tsv".into();
        assert_eq!((cfg.llm_spec().as_str(), cfg.embed_spec().as_str()), ("mock:3", "file:v.tsv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[env]\nhorizon = 12\nhorizn = 3\n").unwrap();
        assert!(matches!(PipelineConfig::load(Some(&p), vec![]), Err(ConfigError::Parse(_))));
        assert!(PipelineConfig::load(None, vars(&[("SIMREC__BOGUS", "1")])).is_err());
    }

    #[test]
    fn range_checks() {
        let mut cfg = PipelineConfig::default();
        cfg.env.gamma = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.ingest.cat_high = 2.0;
        assert!(cfg.validate().is_err());
    }
}
