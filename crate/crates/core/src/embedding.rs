//! Keyword embeddings, average-pooled profile vectors and cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distiller::ItemProfile;
use crate::seeding::rng_from;

pub const DEFAULT_DIM: usize = 384;
pub const CACHE_FORMAT: &str = "simrec-embcache";
pub const CACHE_VERSION: u32 = 1;

pub const ENV_EMB_URL: &str = "SIMREC_EMB_URL";
pub const ENV_EMB_MODEL: &str = "SIMREC_EMB_MODEL";
pub const ENV_EMB_KEY: &str = "SIMREC_EMB_KEY";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode embedding response: {0}")]
    Decode(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite embedding for {0:?}")]
    NonFinite(String),
    #[error("no vector for keyword {0:?}")]
    Missing(String),
    #[error("embedding configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    CacheFormat { path: String, line: usize, message: String },
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EmbeddingError::Transport(_) => true,
            EmbeddingError::Status { status, .. } => matches!(status, 408 | 429 | 500 | 502 | 503 | 504),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordEmbedding {
    pub keyword: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEmbedding {
    pub item_id: String,
    pub e_pos: Option<Vec<f64>>,
    pub e_neg: Option<Vec<f64>>,
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn name(&self) -> String;
    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Offline provider: character-trigram feature hashing followed by a seeded
/// Gaussian random projection, L2-normalized. Keywords sharing trigrams land
/// close together.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    seed: u64,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { seed, dim }
    }

    fn embed_one(&self, keyword: &str) -> Vec<f64> {
        let padded: Vec<char> = format!("  {keyword} ").chars().collect();
        let mut v = vec![0.0; self.dim];
        for w in padded.windows(3) {
            let gram: String = w.iter().collect();
            let mut rng = rng_from(self.seed, &gram);
            for x in v.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x += g;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> String {
        format!("hash:{}", self.seed)
    }
    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(keywords.iter().map(|k| self.embed_one(k)).collect())
    }
}

/// Precomputed vectors loaded from a cache-format file.
#[derive(Debug, Clone)]
pub struct FileEmbedder {
    path: String,
    vectors: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

impl FileEmbedder {
    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let cache = EmbeddingCache::load(path)?;
        Ok(Self {
            path: path.display().to_string(),
            dim: cache.dim,
            vectors: cache.entries.into_inner().expect("cache lock poisoned"),
        })
    }
}

impl EmbeddingProvider for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> String {
        format!("file:{}", self.path)
    }
    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        keywords
            .iter()
            .map(|k| self.vectors.get(k).cloned().ok_or_else(|| EmbeddingError::Missing(k.clone())))
            .collect()
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
    dim: usize,
    retries: usize,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>, dim: usize) -> Result<Self, EmbeddingError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbeddingError::Config(e.to_string()))?;
        Ok(Self {
            http,
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
            dim,
            retries: 2,
        })
    }

    pub fn from_env(dim: usize) -> Result<Self, EmbeddingError> {
        let url = std::env::var(ENV_EMB_URL).map_err(|_| EmbeddingError::Config(format!("{ENV_EMB_URL} is not set")))?;
        let model = std::env::var(ENV_EMB_MODEL).unwrap_or_else(|_| "bert-base".to_string());
        let key = std::env::var(ENV_EMB_KEY).unwrap_or_default();
        Self::new(url, model, key, dim)
    }

    fn call(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut req = self.http.post(&self.url).json(&EmbeddingRequest {
            model: &self.model,
            input: keywords,
        });
        if !self.api_key.is_empty() {
            req = req.bearer_auth(&self.api_key);
        }
        let response = req.send().map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbeddingError::Status {
                status: status.as_u16(),
                body: response.text().unwrap_or_default(),
            });
        }
        let parsed: EmbeddingResponse = response.json().map_err(|e| EmbeddingError::Decode(e.to_string()))?;
        if parsed.data.len() != keywords.len() {
            return Err(EmbeddingError::Decode(format!(
                "asked for {} vectors, got {}",
                keywords.len(),
                parsed.data.len()
            )));
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> String {
        format!("remote:{}", self.model)
    }
    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut attempt = 0;
        loop {
            match self.call(keywords) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    tracing::warn!(error = %e, "embedding call failed, retrying");
                    std::thread::sleep(Duration::from_millis(500) * 2u32.pow(attempt as u32));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// `hash:<seed>`, `file:<path>` or `remote`.
pub fn provider_from_spec(spec: &str, dim: usize) -> Result<Box<dyn EmbeddingProvider>, EmbeddingError> {
    if let Some(seed) = spec.strip_prefix("hash:") {
        let seed = seed
            .parse()
            .map_err(|_| EmbeddingError::Config(format!("bad hash seed in {spec:?}")))?;
        return Ok(Box::new(HashEmbedder::new(seed, dim)));
    }
    if spec == "hash" {
        return Ok(Box::new(HashEmbedder::new(0, dim)));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        return Ok(Box::new(FileEmbedder::load(Path::new(path))?));
    }
    if spec == "remote" {
        return Ok(Box::new(RemoteEmbedder::from_env(dim)?));
    }
    Err(EmbeddingError::Config(format!(
        "unknown embedding provider {spec:?} (expected hash:<seed>, file:<path> or remote)"
    )))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    dim: usize,
}

/// Keyword → vector cache. Reads are concurrent; inserts take the write lock.
#[derive(Debug)]
pub struct EmbeddingCache {
    dim: usize,
    entries: RwLock<BTreeMap<String, Vec<f64>>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, keyword: &str) -> Option<Vec<f64>> {
        self.entries.read().expect("cache lock poisoned").get(keyword).cloned()
    }

    pub fn insert(&self, keyword: &str, vector: Vec<f64>) -> Result<(), EmbeddingError> {
        check_vector(keyword, &vector, self.dim)?;
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(keyword.to_string(), vector);
        Ok(())
    }

    /// Header line followed by one record per keyword in sorted order.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            dim: self.dim,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
        for (keyword, vector) in self.entries.read().expect("cache lock poisoned").iter() {
            let rec = KeywordEmbedding {
                keyword: keyword.clone(),
                vector: vector.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let name = path.display().to_string();
        let file = File::open(path).map_err(|source| EmbeddingError::Io {
            path: name.clone(),
            source,
        })?;
        let bad = |line: usize, message: String| EmbeddingError::CacheFormat {
            path: name.clone(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let header: CacheHeader = match lines.next() {
            Some((_, Ok(l))) => serde_json::from_str(&l).map_err(|e| bad(1, format!("bad header: {e}")))?,
            Some((_, Err(e))) => return Err(EmbeddingError::Io { path: name, source: e }),
            None => return Err(bad(1, "empty cache file".into())),
        };
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(bad(1, format!("unsupported cache format {} v{}", header.format, header.version)));
        }
        let cache = Self::new(header.dim);
        for (i, line) in lines {
            let line = line.map_err(|source| EmbeddingError::Io {
                path: name.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: KeywordEmbedding = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
            cache.insert(&rec.keyword, rec.vector)?;
        }
        Ok(cache)
    }

    /// Load when the file exists, otherwise start empty.
    pub fn open_or_new(path: &Path, dim: usize) -> Result<Self, EmbeddingError> {
        if path.exists() {
            let cache = Self::load(path)?;
            if cache.dim != dim {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: dim,
                    got: cache.dim,
                });
            }
            Ok(cache)
        } else {
            Ok(Self::new(dim))
        }
    }
}

fn check_vector(keyword: &str, v: &[f64], dim: usize) -> Result<(), EmbeddingError> {
    if v.len() != dim {
        return Err(EmbeddingError::DimensionMismatch {
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(keyword.to_string()));
    }
    Ok(())
}

/// Wraps a provider, counting calls; useful for cache-hit checks and stats.
pub struct CountingProvider<P> {
    pub inner: P,
    calls: AtomicUsize,
}

impl<P> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CountingProvider<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn name(&self) -> String {
        self.inner.name()
    }
    fn embed_batch(&self, keywords: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed_batch(keywords)
    }
}

/// One vector per keyword, from the cache when present, otherwise from the
/// provider (one batched call for all misses) and then cached.
pub fn embed_keywords<'a>(
    keywords: impl IntoIterator<Item = &'a String>,
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
) -> Result<Vec<KeywordEmbedding>, EmbeddingError> {
    if provider.dim() != cache.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: cache.dim(),
            got: provider.dim(),
        });
    }
    let keywords: Vec<&String> = keywords.into_iter().collect();
    let mut seen = BTreeSet::new();
    let misses: Vec<String> = keywords
        .iter()
        .filter(|k| cache.get(k).is_none() && seen.insert(k.as_str()))
        .map(|k| (*k).clone())
        .collect();
    if !misses.is_empty() {
        let vectors = provider.embed_batch(&misses)?;
        if vectors.len() != misses.len() {
            return Err(EmbeddingError::Decode(format!(
                "provider returned {} vectors for {} keywords",
                vectors.len(),
                misses.len()
            )));
        }
        for (k, v) in misses.iter().zip(vectors) {
            cache.insert(k, v)?;
        }
    }
    keywords
        .into_iter()
        .map(|k| {
            let vector = cache.get(k).ok_or_else(|| EmbeddingError::Missing(k.clone()))?;
            Ok(KeywordEmbedding {
                keyword: k.clone(),
                vector,
            })
        })
        .collect()
}

fn mean(vectors: &[KeywordEmbedding], dim: usize) -> Option<Vec<f64>> {
    if vectors.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for e in vectors {
        for (a, x) in acc.iter_mut().zip(&e.vector) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

pub fn pool_profile(
    profile: &ItemProfile,
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
) -> Result<ProfileEmbedding, EmbeddingError> {
    let pos = embed_keywords(&profile.pros, provider, cache)?;
    let neg = embed_keywords(&profile.cons, provider, cache)?;
    Ok(ProfileEmbedding {
        item_id: profile.item_id.clone(),
        e_pos: mean(&pos, cache.dim()),
        e_neg: mean(&neg, cache.dim()),
    })
}

/// Pooled embeddings for every profile, keyed by item id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    pub by_item: BTreeMap<String, ProfileEmbedding>,
}

impl EmbeddingStore {
    pub fn build(
        profiles: &[ItemProfile],
        provider: &dyn EmbeddingProvider,
        cache: &EmbeddingCache,
    ) -> Result<Self, EmbeddingError> {
        // One batched provider call for the whole vocabulary.
        let vocab: BTreeSet<&String> = profiles.iter().flat_map(|p| p.pros.iter().chain(&p.cons)).collect();
        embed_keywords(vocab, provider, cache)?;
        let mut by_item = BTreeMap::new();
        for p in profiles {
            by_item.insert(p.item_id.clone(), pool_profile(p, provider, cache)?);
        }
        Ok(Self { by_item })
    }

    pub fn get(&self, item_id: &str) -> Option<&ProfileEmbedding> {
        self.by_item.get(item_id)
    }

    pub fn records(&self) -> Vec<&ProfileEmbedding> {
        self.by_item.values().collect()
    }

    pub fn from_records(records: Vec<ProfileEmbedding>) -> Self {
        Self {
            by_item: records.into_iter().map(|r| (r.item_id.clone(), r)).collect(),
        }
    }
}

/// u·v / (‖u‖‖v‖), clamped to [−1, 1]; 0 when either norm is 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn kw(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cache_hit_skips_provider() {
        let p = CountingProvider::new(HashEmbedder::new(1, 16));
        let cache = EmbeddingCache::new(16);
        let words = kw(&["loud", "cozy"]);
        embed_keywords(&words, &p, &cache).unwrap();
        assert_eq!(p.calls(), 1);
        let again = embed_keywords(&words[..1], &p, &cache).unwrap();
        assert_eq!(p.calls(), 1);
        assert_eq!(again.len(), 1);
        assert!(embed_keywords(&Vec::<String>::new(), &p, &cache).unwrap().is_empty());
    }

    #[test]
    fn hash_provider_is_deterministic_and_unit_norm() {
        let h = HashEmbedder::new(5, DEFAULT_DIM);
        let a = h.embed_batch(&kw(&["loud"])).unwrap();
        let b = h.embed_batch(&kw(&["loud"])).unwrap();
        assert_eq!(a, b);
        let n: f64 = a[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        let other = HashEmbedder::new(6, DEFAULT_DIM).embed_batch(&kw(&["loud"])).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn hash_provider_puts_shared_trigrams_closer() {
        let h = HashEmbedder::new(0, 256);
        let v = h.embed_batch(&kw(&["child-friendly", "child friendly", "overpriced"])).unwrap();
        assert!(cosine(&v[0], &v[1]).unwrap() > cosine(&v[0], &v[2]).unwrap());
    }

    #[test]
    fn dimension_mismatch_between_provider_and_cache() {
        let cache = EmbeddingCache::new(8);
        let err = embed_keywords(&kw(&["x"]), &HashEmbedder::new(0, 16), &cache).unwrap_err();
        assert!(matches!(err, EmbeddingError::DimensionMismatch { expected: 8, got: 16 }));
        assert!(cache.insert("x", vec![0.0; 3]).is_err());
        assert!(cache.insert("x", vec![f64::NAN; 8]).is_err());
    }

    #[test]
    fn pooling_single_and_antipodal() {
        struct Fixed;
        impl EmbeddingProvider for Fixed {
            fn dim(&self) -> usize {
                2
            }
            fn name(&self) -> String {
                "fixed".into()
            }
            fn embed_batch(&self, ks: &[String]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
                Ok(ks.iter().map(|k| if k == "up" { vec![0.3, -1.7] } else { vec![-0.3, 1.7] }).collect())
            }
        }
        let cache = EmbeddingCache::new(2);
        let single = ItemProfile::with_keywords("a", "C", ["up"], []);
        let e = pool_profile(&single, &Fixed, &cache).unwrap();
        assert_eq!(e.e_pos, Some(vec![0.3, -1.7]));
        assert_eq!(e.e_neg, None);
        let both = ItemProfile::with_keywords("b", "C", ["up", "down"], []);
        assert_eq!(pool_profile(&both, &Fixed, &cache).unwrap().e_pos, Some(vec![0.0, 0.0]));
    }

    #[test]
    fn pooled_vector_matches_componentwise_mean_oracle() {
        let h = HashEmbedder::new(3, 32);
        let cache = EmbeddingCache::new(32);
        let words = ["alpha", "bravo", "charlie", "delta", "echo"];
        let p = ItemProfile::with_keywords("i", "C", words, []);
        let pooled = pool_profile(&p, &h, &cache).unwrap().e_pos.unwrap();
        let vs = h.embed_batch(&kw(&words)).unwrap();
        for d in 0..32 {
            let m = vs.iter().map(|v| v[d]).sum::<f64>() / 5.0;
            assert!((pooled[d] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_persist_reload_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = EmbeddingCache::new(24);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for i in 0..20 {
            let v: Vec<f64> = (0..24).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect();
            cache.insert(&format!("k{i}"), v).unwrap();
        }
        cache.insert("tiny", vec![f64::MIN_POSITIVE; 24]).unwrap();
        cache.save(&path).unwrap();
        let back = EmbeddingCache::load(&path).unwrap();
        assert_eq!(back.dim(), 24);
        for (k, v) in cache.entries.read().unwrap().iter() {
            let w = back.get(k).unwrap();
            assert!(v.iter().zip(&w).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(matches!(
            EmbeddingCache::open_or_new(&path, 8),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
        let file = FileEmbedder::load(&path).unwrap();
        assert_eq!(file.embed_batch(&kw(&["k3"])).unwrap()[0], cache.get("k3").unwrap());
        assert!(matches!(file.embed_batch(&kw(&["nope"])), Err(EmbeddingError::Missing(_))));
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -2.0, 7.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn provider_specs() {
        assert_eq!(provider_from_spec("hash:9", 4).unwrap().name(), "hash:9");
        assert!(provider_from_spec("hash:x", 4).is_err());
        assert!(provider_from_spec("bogus", 4).is_err());
    }

    #[test]
    fn remote_provider_wire_format() {
        use std::io::{Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/embeddings", listener.local_addr().unwrap());
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim_end().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let reply = r#"{"data":[{"embedding":[1.0,0.0]},{"embedding":[0.0,1.0]}]}"#;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        let remote = RemoteEmbedder::new(url, "enc", "", 2).unwrap();
        let out = remote.embed_batch(&kw(&["a", "b"])).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(sent, serde_json::json!({"model": "enc", "input": ["a", "b"]}));
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(u in vec3(), v in vec3(), a in 0.001f64..1000.0) {
            prop_assert_eq!(cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
            let scaled: Vec<f64> = u.iter().map(|x| a * x).collect();
            prop_assert!((cosine(&scaled, &v).unwrap() - cosine(&u, &v).unwrap()).abs() < 1e-9);
            let c = cosine(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn pooling_is_permutation_invariant(words in proptest::collection::vec("[a-z]{1,6}", 1..8), seed in 0u64..1000) {
            let h = HashEmbedder::new(seed, 8);
            let forward = ItemProfile::with_keywords("i", "C", words.iter().map(String::as_str), []);
            let backward = ItemProfile::with_keywords("i", "C", words.iter().rev().map(String::as_str), []);
            let a = pool_profile(&forward, &h, &EmbeddingCache::new(8)).unwrap();
            let b = pool_profile(&backward, &h, &EmbeddingCache::new(8)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
