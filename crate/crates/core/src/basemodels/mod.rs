//! The three base inferencers: keyword matching, embedding similarity and the
//! sequential statistical scorer. Each maps (user context, candidate) to a
//! binary vote plus an explanation payload.

pub mod sequential;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CategoryTable, HistoryEntry, Label, UserHistory};
use crate::distiller::ItemProfile;
use crate::embedding::{cosine, EmbeddingStore};
use crate::seeding::stable_hash;

pub use sequential::{f_sta, train_sequential, SequentialModel, StaHyper, TrainingLog};

/// A binary verdict: 0 = dislike, 1 = like.
pub type Vote = u8;

#[derive(Debug, Error)]
pub enum BaseModelError {
    #[error("candidate {0:?} is not in the category table")]
    UnknownCandidate(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Seeded fair-coin stream for breaking exact ties. Counts its draws so
/// callers can verify a coin was (or was not) consumed.
#[derive(Debug, Clone)]
pub struct CoinSource {
    rng: ChaCha8Rng,
    drawn: u32,
}

impl CoinSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
        }
    }

    /// Stream for one environment step of one episode.
    pub fn for_step(episode_seed: u64, step: usize) -> Self {
        Self::new(stable_hash(&[b"coin", &episode_seed.to_le_bytes(), &(step as u64).to_le_bytes()]))
    }

    pub fn flip(&mut self) -> Vote {
        self.drawn += 1;
        self.rng.random_bool(0.5) as Vote
    }

    pub fn drawn(&self) -> u32 {
        self.drawn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceContext {
    pub candidate_id: String,
    pub h_c: Vec<HistoryEntry>,
    pub i_pos: BTreeSet<String>,
    pub i_neg: BTreeSet<String>,
    pub fallback_used: bool,
}

/// Slice the history to the candidate's category (whole history when that
/// slice is empty). An item seen more than once keeps only its latest label.
pub fn build_context(
    history: &UserHistory,
    candidate: &str,
    categories: &CategoryTable,
) -> Result<PreferenceContext, BaseModelError> {
    let category = categories
        .category_of(candidate)
        .ok_or_else(|| BaseModelError::UnknownCandidate(candidate.to_string()))?;
    let same: Vec<&HistoryEntry> = history
        .iter()
        .filter(|e| categories.category_of(&e.item_id) == Some(category))
        .collect();
    let fallback_used = same.is_empty() && !history.is_empty();
    let slice: Vec<&HistoryEntry> = if same.is_empty() { history.iter().collect() } else { same };

    let mut latest: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in slice.iter().enumerate() {
        latest.insert(e.item_id.as_str(), i);
    }
    let h_c: Vec<HistoryEntry> = slice
        .iter()
        .enumerate()
        .filter(|(i, e)| latest[e.item_id.as_str()] == *i)
        .map(|(_, e)| (*e).clone())
        .collect();
    let mut i_pos = BTreeSet::new();
    let mut i_neg = BTreeSet::new();
    for e in &h_c {
        match e.label {
            Label::Like => i_pos.insert(e.item_id.clone()),
            Label::Dislike => i_neg.insert(e.item_id.clone()),
        };
    }
    Ok(PreferenceContext {
        candidate_id: candidate.to_string(),
        h_c,
        i_pos,
        i_neg,
        fallback_used,
    })
}

/// Profiles with keywords interned to sorted id lists, so set intersection
/// is a linear merge.
#[derive(Debug, Clone, Default)]
pub struct ProfileStore {
    vocab: Vec<String>,
    items: BTreeMap<String, (Vec<u32>, Vec<u32>)>,
}

impl ProfileStore {
    pub fn new(profiles: &[ItemProfile]) -> Self {
        let words: BTreeSet<&str> = profiles
            .iter()
            .flat_map(|p| p.pros.iter().chain(&p.cons).map(String::as_str))
            .collect();
        let vocab: Vec<String> = words.into_iter().map(str::to_string).collect();
        let id = |k: &String| vocab.binary_search(k).expect("keyword interned") as u32;
        let items = profiles
            .iter()
            .map(|p| {
                // BTreeSet iteration is sorted and so is the vocabulary
                let pros = p.pros.iter().map(id).collect();
                let cons = p.cons.iter().map(id).collect();
                (p.item_id.clone(), (pros, cons))
            })
            .collect();
        Self { vocab, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn keywords(&self, item: &str, pros: bool) -> &[u32] {
        match self.items.get(item) {
            Some((p, c)) => {
                if pros {
                    p
                } else {
                    c
                }
            }
            None => &[],
        }
    }
}

fn intersect(a: &[u32], b: &[u32], mut hit: impl FnMut(u32)) {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                hit(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordMatch {
    pub history_item: String,
    pub keyword: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchScore {
    pub alpha_pos: u32,
    pub alpha_neg: u32,
    pub matched_pro_keywords: Vec<KeywordMatch>,
    pub matched_con_keywords: Vec<KeywordMatch>,
    pub tie_broken_by_coin: bool,
}

/// Strict comparison to a vote; exact ties consume one coin.
fn decide(ord: std::cmp::Ordering, coins: &mut CoinSource) -> (Vote, bool) {
    match ord {
        std::cmp::Ordering::Greater => (1, false),
        std::cmp::Ordering::Less => (0, false),
        std::cmp::Ordering::Equal => (coins.flip(), true),
    }
}

pub fn f_mat(ctx: &PreferenceContext, profiles: &ProfileStore, coins: &mut CoinSource) -> (Vote, MatchScore) {
    let collect = |items: &BTreeSet<String>, pros: bool| {
        let cand = profiles.keywords(&ctx.candidate_id, pros);
        let mut matches = Vec::new();
        for item in items {
            intersect(cand, profiles.keywords(item, pros), |k| {
                matches.push(KeywordMatch {
                    history_item: item.clone(),
                    keyword: profiles.vocab[k as usize].clone(),
                })
            });
        }
        matches
    };
    let matched_pro_keywords = collect(&ctx.i_pos, true);
    let matched_con_keywords = collect(&ctx.i_neg, false);
    let alpha_pos = matched_pro_keywords.len() as u32;
    let alpha_neg = matched_con_keywords.len() as u32;
    let (vote, tie) = decide(alpha_pos.cmp(&alpha_neg), coins);
    (
        vote,
        MatchScore {
            alpha_pos,
            alpha_neg,
            matched_pro_keywords,
            matched_con_keywords,
            tie_broken_by_coin: tie,
        },
    )
}

/// How f_sim aggregates per-item cosines. `Mean` exists for ablations only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimAggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub beta_pos: Option<f64>,
    pub beta_neg: Option<f64>,
    pub argmax_pos_item: Option<String>,
    pub argmax_neg_item: Option<String>,
    pub tie_broken_by_coin: bool,
}

fn aggregate(
    candidate: Option<&Vec<f64>>,
    items: &BTreeSet<String>,
    store: &EmbeddingStore,
    side: impl Fn(&crate::embedding::ProfileEmbedding) -> Option<&Vec<f64>>,
    agg: SimAggregation,
) -> (Option<f64>, Option<String>) {
    let Some(cand) = candidate else {
        return (None, None);
    };
    let mut best: Option<(f64, &String)> = None;
    let (mut sum, mut n) = (0.0, 0usize);
    for item in items {
        let Some(v) = store.get(item).and_then(&side) else { continue };
        let Ok(c) = cosine(cand, v) else { continue };
        sum += c;
        n += 1;
        if best.is_none_or(|(b, _)| c > b) {
            best = Some((c, item));
        }
    }
    let arg = best.map(|(_, i)| i.clone());
    match agg {
        SimAggregation::Max => (best.map(|(b, _)| b), arg),
        SimAggregation::Mean => ((n > 0).then(|| sum / n as f64), arg),
    }
}

/// Absent β loses to any present β; both absent is a tie.
fn compare_betas(pos: Option<f64>, neg: Option<f64>) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match (pos, neg) {
        (Some(p), Some(n)) => p.partial_cmp(&n).unwrap_or(Equal),
        (Some(_), None) => Greater,
        (None, Some(_)) => Less,
        (None, None) => Equal,
    }
}

pub fn f_sim(
    ctx: &PreferenceContext,
    store: &EmbeddingStore,
    agg: SimAggregation,
    coins: &mut CoinSource,
) -> (Vote, SimilarityScore) {
    let cand = store.get(&ctx.candidate_id);
    let (beta_pos, argmax_pos_item) =
        aggregate(cand.and_then(|c| c.e_pos.as_ref()), &ctx.i_pos, store, |e| e.e_pos.as_ref(), agg);
    let (beta_neg, argmax_neg_item) =
        aggregate(cand.and_then(|c| c.e_neg.as_ref()), &ctx.i_neg, store, |e| e.e_neg.as_ref(), agg);
    let (vote, tie) = decide(compare_betas(beta_pos, beta_neg), coins);
    (
        vote,
        SimilarityScore {
            beta_pos,
            beta_neg,
            argmax_pos_item,
            argmax_neg_item,
            tie_broken_by_coin: tie,
        },
    )
}
