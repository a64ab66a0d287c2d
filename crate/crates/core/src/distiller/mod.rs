//! LLM keyword distillation: one objective prompt per item plus one
//! subjective prompt per sampled review, merged into pros/cons keyword sets.

pub mod llm;
pub mod parse;
pub mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{binarize_rating, RawItem, RawReview, DEFAULT_RATING_THRESHOLD};

pub use llm::{client_from_spec, HttpChatClient, LlmClient, LlmError, MockLlm, GROUNDED_CON_TAG, GROUNDED_PRO_TAG};
pub use parse::{normalize_keyword, parse_distillation_response, DistilledReason, ParseError};
pub use template::{render_objective_prompt, render_subjective_prompt, PromptTemplate, TemplateError, TemplateKind};

pub const DEFAULT_KEYWORD_LOW_CUT: usize = 2;
pub const DEFAULT_KEYWORD_HIGH_CUT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Pro,
    Con,
}

impl Polarity {
    pub fn block_label(self) -> &'static str {
        match self {
            Polarity::Pro => "Pros",
            Polarity::Con => "Cons",
        }
    }
}

/// How many source blocks contributed a keyword.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTally {
    pub objective: u32,
    pub subjective: u32,
}

impl SourceTally {
    pub fn total(&self) -> u32 {
        self.objective + self.subjective
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub item_id: String,
    #[serde(default)]
    pub name: String,
    pub category: String,
    pub pros: BTreeSet<String>,
    pub cons: BTreeSet<String>,
    #[serde(default)]
    pub pro_sources: BTreeMap<String, SourceTally>,
    #[serde(default)]
    pub con_sources: BTreeMap<String, SourceTally>,
    #[serde(default)]
    pub distillation_failed: bool,
}

impl ItemProfile {
    pub fn empty(item_id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            item_id: item_id.into(),
            name: String::new(),
            category: category.into(),
            pros: BTreeSet::new(),
            cons: BTreeSet::new(),
            pro_sources: BTreeMap::new(),
            con_sources: BTreeMap::new(),
            distillation_failed: false,
        }
    }

    /// Profile with unattributed keyword sets, for fixtures and generated
    /// worlds. Keywords are normalized.
    pub fn with_keywords<'a>(
        item_id: &str,
        category: &str,
        pros: impl IntoIterator<Item = &'a str>,
        cons: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut p = Self::empty(item_id, category);
        p.name = item_id.to_string();
        for k in pros {
            p.add(Polarity::Pro, &normalize_keyword(k), Source::Objective);
        }
        for k in cons {
            p.add(Polarity::Con, &normalize_keyword(k), Source::Objective);
        }
        p
    }

    pub fn keywords(&self, polarity: Polarity) -> &BTreeSet<String> {
        match polarity {
            Polarity::Pro => &self.pros,
            Polarity::Con => &self.cons,
        }
    }

    fn add(&mut self, polarity: Polarity, keyword: &str, source: Source) {
        if keyword.is_empty() {
            return;
        }
        let (set, sources) = match polarity {
            Polarity::Pro => (&mut self.pros, &mut self.pro_sources),
            Polarity::Con => (&mut self.cons, &mut self.con_sources),
        };
        set.insert(keyword.to_string());
        let tally = sources.entry(keyword.to_string()).or_default();
        match source {
            Source::Objective => tally.objective += 1,
            Source::Subjective => tally.subjective += 1,
        }
    }

    fn merge_reasons(&mut self, reasons: &[DistilledReason], source: Source) {
        for r in reasons {
            for k in &r.keywords {
                self.add(r.polarity, k, source);
            }
        }
    }

    fn clear_keywords(&mut self) {
        self.pros.clear();
        self.cons.clear();
        self.pro_sources.clear();
        self.con_sources.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Objective,
    Subjective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub domain_noun: String,
    pub review_cap: usize,
    pub retries: usize,
    pub rating_threshold: f64,
    pub concurrency: usize,
    /// Base delay between transport retries; doubled on each attempt.
    pub backoff: Duration,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            domain_noun: template::DEFAULT_DOMAIN_NOUN.to_string(),
            review_cap: 10,
            retries: 2,
            rating_threshold: DEFAULT_RATING_THRESHOLD,
            concurrency: 8,
            backoff: Duration::from_millis(500),
        }
    }
}

/// Per-item distillation bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistillStats {
    pub prompts: usize,
    pub malformed: usize,
    pub exhausted: usize,
    pub transport_failures: usize,
}

impl DistillStats {
    fn absorb(&mut self, other: &DistillStats) {
        self.prompts += other.prompts;
        self.malformed += other.malformed;
        self.exhausted += other.exhausted;
        self.transport_failures += other.transport_failures;
    }
}

enum Attempt {
    Parsed(Vec<DistilledReason>),
    Exhausted,
}

struct TransportFailure;

fn ask(
    llm: &dyn LlmClient,
    prompt: &str,
    template: &PromptTemplate,
    item_id: &str,
    cfg: &DistillConfig,
    stats: &mut DistillStats,
) -> Result<Attempt, TransportFailure> {
    let mut transport_attempt = 0u32;
    let mut malformed_attempts = 0usize;
    loop {
        stats.prompts += 1;
        match llm.prompt(prompt, item_id) {
            Ok(text) => match parse_distillation_response(&text, template) {
                Ok(reasons) => return Ok(Attempt::Parsed(reasons)),
                Err(ParseError::MalformedResponse) => {
                    stats.malformed += 1;
                    if malformed_attempts >= cfg.retries {
                        stats.exhausted += 1;
                        tracing::warn!(item = item_id, "malformed responses exhausted retry budget");
                        return Ok(Attempt::Exhausted);
                    }
                    malformed_attempts += 1;
                }
            },
            Err(e) if e.is_retryable() && (transport_attempt as usize) < cfg.retries => {
                tracing::warn!(item = item_id, error = %e, "llm call failed, retrying");
                std::thread::sleep(cfg.backoff * 2u32.pow(transport_attempt));
                transport_attempt += 1;
            }
            Err(e) => {
                stats.transport_failures += 1;
                tracing::error!(item = item_id, error = %e, "llm call failed");
                return Err(TransportFailure);
            }
        }
    }
}

/// Reviews used for subjective prompts: most recent first, capped.
pub fn sample_reviews<'a>(reviews: &[&'a RawReview], cap: usize) -> Vec<&'a RawReview> {
    let mut indexed: Vec<(usize, &RawReview)> = reviews.iter().copied().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| b.timestamp.cmp(&a.timestamp).then(ib.cmp(ia)));
    indexed.into_iter().take(cap).map(|(_, r)| r).collect()
}

pub fn distill_item(
    item: &RawItem,
    category: &str,
    reviews: &[&RawReview],
    llm: &dyn LlmClient,
    cfg: &DistillConfig,
) -> (ItemProfile, DistillStats) {
    let mut stats = DistillStats::default();
    let mut profile = ItemProfile::empty(&item.item_id, category);
    profile.name = item.name.clone();

    let objective = PromptTemplate::objective(&cfg.domain_noun);
    let positive = PromptTemplate::subjective(&cfg.domain_noun, Polarity::Pro);
    let negative = PromptTemplate::subjective(&cfg.domain_noun, Polarity::Con);

    let prompt = match render_objective_prompt(&objective, item, category) {
        Ok(p) => p,
        Err(e) => {
            tracing::error!(item = %item.item_id, error = %e, "template error");
            profile.distillation_failed = true;
            return (profile, stats);
        }
    };
    let mut failed = false;
    match ask(llm, &prompt, &objective, &item.item_id, cfg, &mut stats) {
        Ok(Attempt::Parsed(reasons)) => profile.merge_reasons(&reasons, Source::Objective),
        Ok(Attempt::Exhausted) => {}
        Err(TransportFailure) => failed = true,
    }

    if !failed {
        for review in sample_reviews(reviews, cfg.review_cap) {
            let Ok(label) = binarize_rating(review.rating, cfg.rating_threshold) else {
                continue;
            };
            let template = if label.is_like() { &positive } else { &negative };
            let prompt = match render_subjective_prompt(template, item, category, review) {
                Ok(p) => p,
                Err(e) => {
                    tracing::error!(item = %item.item_id, error = %e, "template error");
                    continue;
                }
            };
            match ask(llm, &prompt, template, &item.item_id, cfg, &mut stats) {
                Ok(Attempt::Parsed(reasons)) => profile.merge_reasons(&reasons, Source::Subjective),
                Ok(Attempt::Exhausted) => {}
                Err(TransportFailure) => {
                    failed = true;
                    break;
                }
            }
        }
    }

    if failed {
        profile.clear_keywords();
        profile.distillation_failed = true;
    }
    (profile, stats)
}

/// Distill every item with up to `cfg.concurrency` worker threads. Output
/// order follows `items`.
pub fn distill_catalog(
    items: &[RawItem],
    categories: &BTreeMap<String, String>,
    reviews: &[RawReview],
    llm: &dyn LlmClient,
    cfg: &DistillConfig,
) -> (Vec<ItemProfile>, DistillStats) {
    let mut by_item: BTreeMap<&str, Vec<&RawReview>> = BTreeMap::new();
    for r in reviews {
        by_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    let slots: Mutex<Vec<Option<(ItemProfile, DistillStats)>>> = Mutex::new(vec![None; items.len()]);
    let next = AtomicUsize::new(0);
    let workers = cfg.concurrency.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let item = &items[i];
                let category = categories
                    .get(&item.item_id)
                    .map(String::as_str)
                    .unwrap_or(crate::corpus::UNCATEGORIZED);
                let item_reviews = by_item.get(item.item_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                let result = distill_item(item, category, item_reviews, llm, cfg);
                slots.lock().expect("result slots poisoned")[i] = Some(result);
            });
        }
    });
    let mut total = DistillStats::default();
    let profiles = slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|slot| {
            let (profile, stats) = slot.expect("every item distilled");
            total.absorb(&stats);
            profile
        })
        .collect();
    (profiles, total)
}

/// Drop keywords whose per-polarity document frequency is below `low_cut`
/// or above `high_cut * profiles.len()`.
pub fn filter_keywords(profiles: &[ItemProfile], low_cut: usize, high_cut: f64) -> Vec<ItemProfile> {
    let ceiling = high_cut * profiles.len() as f64;
    let keep = |polarity: Polarity| -> BTreeSet<String> {
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for p in profiles {
            for k in p.keywords(polarity) {
                *df.entry(k.as_str()).or_default() += 1;
            }
        }
        df.into_iter()
            .filter(|&(_, n)| n >= low_cut && (n as f64) <= ceiling)
            .map(|(k, _)| k.to_string())
            .collect()
    };
    let keep_pro = keep(Polarity::Pro);
    let keep_con = keep(Polarity::Con);
    profiles
        .iter()
        .map(|p| {
            let mut q = p.clone();
            q.pros.retain(|k| keep_pro.contains(k));
            q.cons.retain(|k| keep_con.contains(k));
            q.pro_sources.retain(|k, _| keep_pro.contains(k));
            q.con_sources.retain(|k, _| keep_con.contains(k));
            q
        })
        .collect()
}
