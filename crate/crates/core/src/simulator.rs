//! Ensemble user simulator and the recommendation MDP built on it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basemodels::{
    build_context, f_mat, f_sim, f_sta, BaseModelError, CoinSource, KeywordMatch, MatchScore, PreferenceContext,
    ProfileStore, SequentialModel, SimAggregation, SimilarityScore, Vote,
};
use crate::corpus::{CategoryTable, Label, UserHistory};
use crate::embedding::EmbeddingStore;
use crate::seeding::{derive_seed, stable_hash};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("action {0:?} is not in the action space")]
    OutOfSpace(String),
    #[error("step {step}: item {item:?} was already recommended this episode")]
    Repeat { step: usize, item: String },
    #[error("episode already finished after {0} steps")]
    EpisodeOver(usize),
    #[error("no legal action left at step {0}")]
    NoLegalAction(usize),
    #[error("vote must be 0 or 1, got {0}")]
    InvalidVote(u8),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    BaseModel(#[from] BaseModelError),
}

/// Majority of three binary votes.
pub fn ensemble_reward(votes: [Vote; 3]) -> Result<Vote, SimError> {
    if let Some(&v) = votes.iter().find(|&&v| v > 1) {
        return Err(SimError::InvalidVote(v));
    }
    Ok((votes.iter().sum::<u8>() >= 2) as Vote)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSummary {
    pub h_c_len: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub fallback_used: bool,
}

impl From<&PreferenceContext> for ContextSummary {
    fn from(c: &PreferenceContext) -> Self {
        Self {
            h_c_len: c.h_c.len(),
            n_pos: c.i_pos.len(),
            n_neg: c.i_neg.len(),
            fallback_used: c.fallback_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleVerdict {
    pub vote_mat: Vote,
    pub vote_sim: Vote,
    pub vote_sta: Vote,
    #[serde(rename = "match")]
    pub match_score: MatchScore,
    pub similarity: SimilarityScore,
    pub sta_score: f64,
    pub context: Option<ContextSummary>,
    pub reward: Vote,
}

impl EnsembleVerdict {
    pub fn from_votes(
        vote_mat: Vote,
        vote_sim: Vote,
        vote_sta: Vote,
        match_score: MatchScore,
        similarity: SimilarityScore,
        sta_score: f64,
        context: Option<ContextSummary>,
    ) -> Result<Self, SimError> {
        Ok(Self {
            reward: ensemble_reward([vote_mat, vote_sim, vote_sta])?,
            vote_mat,
            vote_sim,
            vote_sta,
            match_score,
            similarity,
            sta_score,
            context,
        })
    }

    pub fn is_consistent(&self) -> bool {
        ensemble_reward([self.vote_mat, self.vote_sim, self.vote_sta]).ok() == Some(self.reward)
    }
}

/// Anything that can judge (history, candidate) → verdict.
pub trait UserSimulator: Send + Sync {
    fn judge(&self, history: &UserHistory, candidate: &str, coins: &mut CoinSource) -> Result<EnsembleVerdict, SimError>;
}

/// The three-model majority-vote simulator over immutable stores.
pub struct EnsembleUserSimulator {
    pub categories: CategoryTable,
    pub profiles: ProfileStore,
    pub embeddings: EmbeddingStore,
    pub model: SequentialModel,
    pub aggregation: SimAggregation,
}

impl UserSimulator for EnsembleUserSimulator {
    fn judge(&self, history: &UserHistory, candidate: &str, coins: &mut CoinSource) -> Result<EnsembleVerdict, SimError> {
        let ctx = build_context(history, candidate, &self.categories)?;
        let (vote_mat, match_score) = f_mat(&ctx, &self.profiles, coins);
        let (vote_sim, similarity) = f_sim(&ctx, &self.embeddings, self.aggregation, coins);
        let (vote_sta, sta_score) = f_sta(&self.model, history, candidate);
        EnsembleVerdict::from_votes(
            vote_mat,
            vote_sim,
            vote_sta,
            match_score,
            similarity,
            sta_score,
            Some(ContextSummary::from(&ctx)),
        )
    }
}

/// Stub that gives every base model the same fixed vote.
pub struct ConstantSimulator(pub Vote);

impl UserSimulator for ConstantSimulator {
    fn judge(&self, _: &UserHistory, _: &str, _: &mut CoinSource) -> Result<EnsembleVerdict, SimError> {
        let v = self.0;
        EnsembleVerdict::from_votes(v, v, v, MatchScore::default(), SimilarityScore::default(), v as f64, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub allow_repeats: bool,
    /// Keep only the first `n` catalog items as actions.
    pub action_cap: Option<usize>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            gamma: 0.95,
            allow_repeats: false,
            action_cap: None,
            seed: 7,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.horizon == 0 {
            return Err(SimError::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SimError::InvalidConfig(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.action_cap == Some(0) {
            return Err(SimError::InvalidConfig("action_cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub user_id: String,
    pub history: UserHistory,
    pub seed_len: usize,
    pub step_index: usize,
    pub episode_seed: u64,
    pub recommended: BTreeSet<String>,
    pub last_context: Option<ContextSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: Vote,
    pub verdict: EnsembleVerdict,
    pub done: bool,
    pub coins_drawn: u32,
}

/// Environment over shared immutable stores; `step` is a pure function of
/// (state, action).
#[derive(Clone)]
pub struct RecEnv {
    sim: Arc<dyn UserSimulator>,
    users: Arc<BTreeMap<String, UserHistory>>,
    config: EnvConfig,
    actions: Arc<Vec<String>>,
    action_index: Arc<HashMap<String, usize>>,
}

impl RecEnv {
    pub fn new(
        sim: Arc<dyn UserSimulator>,
        users: BTreeMap<String, UserHistory>,
        catalog_ids: Vec<String>,
        config: EnvConfig,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let mut actions = catalog_ids;
        if let Some(cap) = config.action_cap {
            actions.truncate(cap);
        }
        if actions.is_empty() {
            return Err(SimError::InvalidConfig("action space is empty".into()));
        }
        if !config.allow_repeats && config.horizon > actions.len() {
            return Err(SimError::InvalidConfig(format!(
                "horizon {} exceeds the {} available actions with repeats disallowed",
                config.horizon,
                actions.len()
            )));
        }
        let action_index = actions.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        Ok(Self {
            sim,
            users: Arc::new(users),
            config,
            actions: Arc::new(actions),
            action_index: Arc::new(action_index),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn action_of(&self, item: &str) -> Option<usize> {
        self.action_index.get(item).copied()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &String> {
        self.users.keys()
    }

    pub fn seed_history(&self, user: &str) -> Option<&UserHistory> {
        self.users.get(user)
    }

    /// Episode with the default per-user stream seeded from (config seed, user).
    pub fn reset(&self, user_id: &str) -> Result<EnvState, SimError> {
        self.reset_with_seed(user_id, derive_seed(self.config.seed, user_id))
    }

    pub fn reset_with_seed(&self, user_id: &str, episode_seed: u64) -> Result<EnvState, SimError> {
        let history = self
            .users
            .get(user_id)
            .ok_or_else(|| SimError::UnknownUser(user_id.to_string()))?
            .clone();
        Ok(EnvState {
            user_id: user_id.to_string(),
            seed_len: history.len(),
            history,
            step_index: 0,
            episode_seed,
            recommended: BTreeSet::new(),
            last_context: None,
        })
    }

    pub fn is_legal(&self, state: &EnvState, action: usize) -> bool {
        action < self.actions.len() && (self.config.allow_repeats || !state.recommended.contains(&self.actions[action]))
    }

    pub fn legal_mask(&self, state: &EnvState) -> Vec<bool> {
        (0..self.actions.len()).map(|a| self.is_legal(state, a)).collect()
    }

    pub fn step(&self, state: &EnvState, item: &str) -> Result<StepOutcome, SimError> {
        let action = self.action_of(item).ok_or_else(|| SimError::OutOfSpace(item.to_string()))?;
        self.step_index(state, action)
    }

    pub fn step_index(&self, state: &EnvState, action: usize) -> Result<StepOutcome, SimError> {
        if state.step_index >= self.config.horizon {
            return Err(SimError::EpisodeOver(state.step_index));
        }
        let item = self
            .actions
            .get(action)
            .ok_or_else(|| SimError::OutOfSpace(format!("#{action}")))?;
        if !self.config.allow_repeats && state.recommended.contains(item) {
            return Err(SimError::Repeat {
                step: state.step_index,
                item: item.clone(),
            });
        }
        let mut coins = CoinSource::for_step(state.episode_seed, state.step_index);
        let verdict = self.sim.judge(&state.history, item, &mut coins)?;
        let mut next = state.clone();
        next.history.push(item.clone(), Label::from_bool(verdict.reward == 1));
        next.recommended.insert(item.clone());
        next.step_index += 1;
        next.last_context = verdict.context.clone();
        Ok(StepOutcome {
            done: next.step_index == self.config.horizon,
            reward: verdict.reward,
            coins_drawn: coins.drawn(),
            verdict,
            next,
        })
    }
}

/// Picks the user and stream seed for each training/evaluation episode.
#[derive(Clone)]
pub struct EnvFactory {
    pub env: RecEnv,
    users: Vec<String>,
}

impl EnvFactory {
    pub fn new(env: RecEnv) -> Result<Self, SimError> {
        let users: Vec<String> = env.user_ids().cloned().collect();
        if users.is_empty() {
            return Err(SimError::InvalidConfig("no users to simulate".into()));
        }
        Ok(Self { env, users })
    }

    pub fn episode(&self, seed: u64, episode: usize) -> Result<EnvState, SimError> {
        let h = stable_hash(&[b"episode", &seed.to_le_bytes(), &(episode as u64).to_le_bytes()]);
        let user = &self.users[(h % self.users.len() as u64) as usize];
        self.env.reset_with_seed(user, derive_seed(h, user))
    }
}

/// One row of an explanation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: String,
    pub category: Option<String>,
    pub fallback_used: bool,
    pub matched_pros: Vec<KeywordMatch>,
    pub matched_cons: Vec<KeywordMatch>,
    pub alpha_pos: u32,
    pub alpha_neg: u32,
    pub beta_pos: Option<f64>,
    pub beta_neg: Option<f64>,
    pub vote_mat: Vote,
    pub vote_sim: Vote,
    pub vote_sta: Vote,
    pub sta_score: f64,
    pub reward: Vote,
}

impl StepRecord {
    pub fn new(step: usize, action: &str, category: Option<&str>, v: &EnsembleVerdict) -> Self {
        Self {
            step,
            action: action.to_string(),
            category: category.map(str::to_string),
            fallback_used: v.context.as_ref().is_some_and(|c| c.fallback_used),
            matched_pros: v.match_score.matched_pro_keywords.clone(),
            matched_cons: v.match_score.matched_con_keywords.clone(),
            alpha_pos: v.match_score.alpha_pos,
            alpha_neg: v.match_score.alpha_neg,
            beta_pos: v.similarity.beta_pos,
            beta_neg: v.similarity.beta_neg,
            vote_mat: v.vote_mat,
            vote_sim: v.vote_sim,
            vote_sta: v.vote_sta,
            sta_score: v.sta_score,
            reward: v.reward,
        }
    }

    pub fn is_consistent(&self) -> bool {
        ensemble_reward([self.vote_mat, self.vote_sim, self.vote_sta]).ok() == Some(self.reward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub user_id: String,
    pub episode_seed: u64,
    pub steps: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> u64 {
        self.steps.iter().map(|s| s.reward as u64).sum()
    }

    pub fn is_valid(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, s)| s.step == i && s.is_consistent())
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
enum Request {
    Reset {
        user_id: String,
        #[serde(default)]
        seed: Option<u64>,
    },
    Step {
        action: String,
    },
    Actions,
}

#[derive(Serialize)]
struct StateSummary<'a> {
    user_id: &'a str,
    step_index: usize,
    history_len: usize,
    seed_len: usize,
}

impl<'a> From<&'a EnvState> for StateSummary<'a> {
    fn from(s: &'a EnvState) -> Self {
        Self {
            user_id: &s.user_id,
            step_index: s.step_index,
            history_len: s.history.len(),
            seed_len: s.seed_len,
        }
    }
}

/// Newline-delimited JSON session: one request per line, one response per
/// line. Requests: `{"cmd":"reset","user_id":..,"seed":..}`,
/// `{"cmd":"step","action":<item id>}`, `{"cmd":"actions"}`.
pub fn serve(env: &RecEnv, input: impl BufRead, mut output: impl Write) -> std::io::Result<()> {
    let mut state: Option<EnvState> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Err(e) => serde_json::json!({"ok": false, "error": format!("bad request: {e}")}),
            Ok(Request::Actions) => serde_json::json!({"ok": true, "actions": env.actions()}),
            Ok(Request::Reset { user_id, seed }) => {
                let r = match seed {
                    Some(s) => env.reset_with_seed(&user_id, s),
                    None => env.reset(&user_id),
                };
                match r {
                    Ok(s) => {
                        let j = serde_json::json!({"ok": true, "state": StateSummary::from(&s)});
                        state = Some(s);
                        j
                    }
                    Err(e) => serde_json::json!({"ok": false, "error": e.to_string()}),
                }
            }
            Ok(Request::Step { action }) => match &state {
                None => serde_json::json!({"ok": false, "error": "step before reset"}),
                Some(s) => match env.step(s, &action) {
                    Ok(out) => {
                        let j = serde_json::json!({
                            "ok": true,
                            "reward": out.reward,
                            "done": out.done,
                            "verdict": out.verdict,
                            "state": StateSummary::from(&out.next),
                        });
                        state = Some(out.next);
                        j
                    }
                    Err(e) => serde_json::json!({"ok": false, "error": e.to_string()}),
                },
            },
        };
        writeln!(output, "{response}")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::HistoryEntry;

    #[test]
    fn majority_truth_table() {
        for bits in 0u8..8 {
            let v = [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1];
            let expected = (v[0] & v[1]) | (v[0] & v[2]) | (v[1] & v[2]);
            assert_eq!(ensemble_reward(v).unwrap(), expected, "{v:?}");
        }
        assert_eq!(ensemble_reward([0, 0, 1]).unwrap(), 0);
        assert_eq!(ensemble_reward([1, 0, 1]).unwrap(), 1);
        assert_eq!(ensemble_reward([1, 1, 1]).unwrap(), 1);
        assert!(matches!(ensemble_reward([2, 0, 0]), Err(SimError::InvalidVote(2))));
    }

    #[test]
    fn single_vote_flip_matters_only_when_others_disagree() {
        for bits in 0u8..8 {
            let v = [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1];
            for i in 0..3 {
                let mut w = v;
                w[i] ^= 1;
                let others_disagree = v[(i + 1) % 3] != v[(i + 2) % 3];
                assert_eq!(ensemble_reward(v).unwrap() != ensemble_reward(w).unwrap(), others_disagree);
            }
        }
    }

    /// Likes items whose id ends in an even digit; flips a coin on ids
    /// ending in 'x'.
    struct Parity;
    impl UserSimulator for Parity {
        fn judge(&self, _: &UserHistory, c: &str, coins: &mut CoinSource) -> Result<EnsembleVerdict, SimError> {
            let v = if c.ends_with('x') {
                coins.flip()
            } else {
                (c.chars().last().unwrap().to_digit(10).unwrap() % 2 == 0) as Vote
            };
            EnsembleVerdict::from_votes(v, v, v, MatchScore::default(), SimilarityScore::default(), 0.0, None)
        }
    }

    fn env(horizon: usize, allow_repeats: bool) -> RecEnv {
        let mut users = BTreeMap::new();
        users.insert("u1".to_string(), UserHistory::new(vec![HistoryEntry::new("i0", Label::Like)]));
        users.insert("cold".to_string(), UserHistory::default());
        let items = vec!["i0".into(), "i1".into(), "i2".into(), "i3".into(), "ax".into()];
        RecEnv::new(
            Arc::new(Parity),
            users,
            items,
            EnvConfig {
                horizon,
                allow_repeats,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn step_appends_simulated_label_and_finishes_at_horizon() {
        let e = env(3, false);
        let s0 = e.reset("u1").unwrap();
        let o1 = e.step(&s0, "i2").unwrap();
        assert_eq!((o1.reward, o1.done), (1, false));
        assert_eq!(o1.next.history.len(), 2);
        assert_eq!(o1.next.history.entries[0], s0.history.entries[0]);
        assert_eq!(o1.next.history.entries[1], HistoryEntry::new("i2", Label::Like));
        let o2 = e.step(&o1.next, "i1").unwrap();
        assert_eq!(o2.next.history.entries[2].label, Label::Dislike);
        let o3 = e.step(&o2.next, "i3").unwrap();
        assert!(o3.done);
        assert!(matches!(e.step(&o3.next, "i0"), Err(SimError::EpisodeOver(3))));
        // state is untouched by step
        assert_eq!(s0.history.len(), 1);
        let again = e.reset("u1").unwrap();
        assert_eq!(again, s0);
    }

    #[test]
    fn repeats_and_out_of_space_are_errors() {
        let e = env(3, false);
        let s = e.reset("cold").unwrap();
        let o = e.step(&s, "i1").unwrap();
        assert!(matches!(e.step(&o.next, "i1"), Err(SimError::Repeat { step: 1, .. })));
        assert!(matches!(e.step(&s, "nope"), Err(SimError::OutOfSpace(_))));
        assert_eq!(e.legal_mask(&o.next), vec![true, false, true, true, true]);
        let r = env(3, true);
        let o = r.step(&r.reset("cold").unwrap(), "i1").unwrap();
        assert!(r.step(&o.next, "i1").is_ok());
        assert!(matches!(e.reset("ghost"), Err(SimError::UnknownUser(_))));
    }

    #[test]
    fn replay_is_deterministic_including_coins() {
        let e = env(4, true);
        let run = |seed| {
            let mut s = e.reset_with_seed("u1", seed).unwrap();
            let mut out = Vec::new();
            for _ in 0..4 {
                let o = e.step(&s, "ax").unwrap();
                out.push((o.reward, o.coins_drawn));
                s = o.next;
            }
            (out, s)
        };
        assert_eq!(run(5), run(5));
        assert!(run(5).0.iter().all(|&(_, c)| c == 1));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = |c: EnvConfig| RecEnv::new(Arc::new(Parity), BTreeMap::new(), vec!["a".into()], c).is_err();
        assert!(bad(EnvConfig {
            horizon: 0,
            ..Default::default()
        }));
        assert!(bad(EnvConfig {
            gamma: 1.5,
            ..Default::default()
        }));
        assert!(bad(EnvConfig {
            horizon: 2,
            ..Default::default()
        }));
    }

    #[test]
    fn ndjson_session() {
        let e = env(2, false);
        let input = concat!(
            "{\"cmd\":\"reset\",\"user_id\":\"u1\"}\n",
            "{\"cmd\":\"step\",\"action\":\"i2\"}\n",
            "{\"cmd\":\"step\",\"action\":\"i2\"}\n",
            "{\"cmd\":\"bogus\"}\n",
            "{\"cmd\":\"step\",\"action\":\"i1\"}\n",
        );
        let mut out = Vec::new();
        serve(&e, input.as_bytes(), &mut out).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0]["state"]["history_len"], 1);
        assert_eq!(lines[1]["reward"], 1);
        assert_eq!(lines[1]["verdict"]["vote_mat"], 1);
        assert_eq!(lines[2]["ok"], false);
        assert_eq!(lines[3]["ok"], false);
        assert_eq!(lines[4]["done"], true);
    }
}
