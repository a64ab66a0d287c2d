//! Agents trained against the simulator: DQN (replay, target network,
//! ε-greedy) and a uniform random baseline.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CategoryTable, Label, UserHistory};
use crate::embedding::EmbeddingStore;
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::seeding::derive_seed;
use crate::simulator::{EnvFactory, EnvState, RecEnv, SimError};

pub const CHECKPOINT_FORMAT: &str = "simrec-dqn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no legal action remaining")]
    NoLegalAction,
    #[error("epsilon {0} outside [0, 1]")]
    BadEpsilon(f64),
    #[error("non-finite TD loss after {updates} updates (max |Q| = {max_q}, max |target| = {max_target})")]
    NonFiniteLoss { updates: u64, max_q: f64, max_target: f64 },
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] SimError),
}

/// The agent's view of a state: the last K history items (catalog index,
/// padded with `pad_index`) and labels (2 = padding), plus dense features.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub recent_items: Vec<u32>,
    pub recent_labels: Vec<u8>,
    pub features: Vec<f64>,
}

pub const PAD_LABEL: u8 = 2;

/// Maps a history to an [`AgentObservation`]. Dense features: liked and
/// disliked category histograms over the recent window (divided by K), the
/// padding fraction, and optionally mean pooled profile embeddings of the
/// recent liked (e_pos) and disliked (e_neg) items.
/// Per-item (e_pos, e_neg), either possibly absent.
type PooledRow = (Option<Vec<f64>>, Option<Vec<f64>>);

#[derive(Debug, Clone)]
pub struct ObservationEncoder {
    k: usize,
    item_index: HashMap<String, u32>,
    item_category: Vec<Option<usize>>,
    n_categories: usize,
    embeddings: Option<(usize, Vec<PooledRow>)>,
}

impl ObservationEncoder {
    pub fn new(k: usize, catalog_ids: &[String], categories: &CategoryTable, embeddings: Option<&EmbeddingStore>) -> Self {
        let cats = categories.category_list();
        let cat_index: HashMap<&str, usize> = cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let item_index = catalog_ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect();
        let item_category = catalog_ids
            .iter()
            .map(|id| categories.category_of(id).and_then(|c| cat_index.get(c).copied()))
            .collect();
        let embeddings = embeddings.and_then(|store| {
            let dim = store
                .by_item
                .values()
                .find_map(|e| e.e_pos.as_ref().or(e.e_neg.as_ref()).map(Vec::len))?;
            let rows = catalog_ids
                .iter()
                .map(|id| match store.get(id) {
                    Some(e) => (e.e_pos.clone(), e.e_neg.clone()),
                    None => (None, None),
                })
                .collect();
            Some((dim, rows))
        });
        Self {
            k,
            item_index,
            item_category,
            n_categories: cats.len(),
            embeddings,
        }
    }

    pub fn pad_index(&self) -> u32 {
        self.item_category.len() as u32
    }

    pub fn dim(&self) -> usize {
        2 * self.n_categories + 1 + self.embeddings.as_ref().map_or(0, |(d, _)| 2 * d)
    }

    pub fn encode(&self, history: &UserHistory) -> AgentObservation {
        let start = history.len().saturating_sub(self.k);
        let recent: Vec<(Option<u32>, Label)> = history.entries[start..]
            .iter()
            .map(|e| (self.item_index.get(&e.item_id).copied(), e.label))
            .collect();
        let pad = self.k - recent.len();
        let mut recent_items = vec![self.pad_index(); pad];
        let mut recent_labels = vec![PAD_LABEL; pad];
        let nc = self.n_categories;
        let mut features = vec![0.0; self.dim()];
        let kf = self.k.max(1) as f64;
        features[2 * nc] = pad as f64 / kf;
        let mut pooled: Option<(Vec<f64>, usize, Vec<f64>, usize)> =
            self.embeddings.as_ref().map(|(d, _)| (vec![0.0; *d], 0, vec![0.0; *d], 0));
        for (idx, label) in recent {
            recent_items.push(idx.unwrap_or(self.pad_index()));
            recent_labels.push(label.as_u8());
            let Some(i) = idx else { continue };
            if let Some(c) = self.item_category[i as usize] {
                let offset = if label.is_like() { 0 } else { nc };
                features[offset + c] += 1.0 / kf;
            }
            if let (Some((_, rows)), Some((pos, np, neg, nn))) = (&self.embeddings, pooled.as_mut()) {
                let (e_pos, e_neg) = &rows[i as usize];
                match (label, e_pos, e_neg) {
                    (Label::Like, Some(v), _) => {
                        pos.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                        *np += 1;
                    }
                    (Label::Dislike, _, Some(v)) => {
                        neg.iter_mut().zip(v).for_each(|(a, x)| *a += x);
                        *nn += 1;
                    }
                    _ => {}
                }
            }
        }
        if let Some((pos, np, neg, nn)) = pooled {
            let base = 2 * nc + 1;
            let d = pos.len();
            for j in 0..d {
                features[base + j] = if np > 0 { pos[j] / np as f64 } else { 0.0 };
                features[base + d + j] = if nn > 0 { neg[j] / nn as f64 } else { 0.0 };
            }
        }
        AgentObservation {
            recent_items,
            recent_labels,
            features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO ring buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Uniform sample of `n` distinct transitions (all of them if fewer).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&Transition> {
        let n = n.min(self.data.len());
        index::sample(rng, self.data.len(), n).into_iter().map(|i| &self.data[i]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }
}

/// ε-greedy over legal actions; greedy ties go to the lowest index.
pub fn select_action(q_values: &[f64], legal: &[bool], epsilon: f64, rng: &mut impl Rng) -> Result<usize, AgentError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AgentError::BadEpsilon(epsilon));
    }
    let legal_ix: Vec<usize> = (0..legal.len()).filter(|&a| legal[a]).collect();
    if legal_ix.is_empty() {
        return Err(AgentError::NoLegalAction);
    }
    if rng.random::<f64>() < epsilon {
        return Ok(legal_ix[rng.random_range(0..legal_ix.len())]);
    }
    let mut best = legal_ix[0];
    for &a in &legal_ix[1..] {
        if q_values[a] > q_values[best] {
            best = a;
        }
    }
    Ok(best)
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.flatten().collect();
    Array2::from_shape_vec((flat.len() / width.max(1), width), flat).expect("rows have equal width")
}

/// TD targets r + γ(1 − done)·max_a Q_target(s′, a).
pub fn td_targets(target: &Mlp, batch: &[&Transition], gamma: f64) -> Vec<f64> {
    let width = target.input_dim();
    let next = target.forward(stack(batch.iter().map(|t| t.next_obs.clone()), width));
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.reward
            } else {
                let max = next.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * max
            }
        })
        .collect()
}

/// Mean squared TD error and its gradient w.r.t. the online network.
pub fn td_loss_and_grad(online: &Mlp, batch: &[&Transition], targets: &[f64]) -> (f64, Mlp, f64) {
    let width = online.input_dim();
    let trace = online.forward_trace(stack(batch.iter().map(|t| t.obs.clone()), width));
    let q = trace.output();
    let b = batch.len() as f64;
    let mut d_out = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    let mut max_q: f64 = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let err = q[[i, t.action]] - targets[i];
        loss += err * err / b;
        d_out[[i, t.action]] = 2.0 * err / b;
        max_q = max_q.max(q[[i, t.action]].abs());
    }
    (loss, online.backward(&trace, d_out), max_q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_sync_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the training episodes over which ε is annealed.
    pub epsilon_decay_fraction: f64,
    /// Gradient updates run after each episode.
    pub updates_per_episode: usize,
    pub recent_k: usize,
    pub use_embeddings: bool,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            lr: 1e-3,
            gamma: 0.95,
            buffer_capacity: 10_000,
            batch_size: 64,
            target_sync_every: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            updates_per_episode: 20,
            recent_k: 10,
            use_embeddings: true,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.buffer_capacity == 0 || self.batch_size == 0 || self.target_sync_every == 0 {
            return bad("buffer_capacity, batch_size and target_sync_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon bounds must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must lie in [0, 1]");
        }
        if self.recent_k == 0 {
            return bad("recent_k must be positive");
        }
        Ok(())
    }

    /// Linear anneal from start to end over the decay window, then flat.
    pub fn epsilon(&self, episode: usize, episodes: usize) -> f64 {
        let window = self.epsilon_decay_fraction * episodes as f64;
        if window <= 0.0 {
            return self.epsilon_end;
        }
        let frac = episode as f64 / window;
        if frac >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// DQN state: online and target networks, optimizer and exploration RNG.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub config: DqnConfig,
    pub online: Mlp,
    pub target: Mlp,
    adam: Adam,
    pub updates: u64,
    rng: ChaCha8Rng,
    rng_seed: u64,
}

impl DqnAgent {
    pub fn new(config: DqnConfig, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self, AgentError> {
        config.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(n_actions);
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "dqn-init"));
        let online = Mlp::new(&sizes, &mut init_rng);
        let rng_seed = derive_seed(seed, "dqn-explore");
        Ok(Self {
            adam: Adam::new(AdamConfig::with_lr(config.lr), &online.param_sizes()),
            target: online.clone(),
            online,
            config,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
        })
    }

    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("one row");
        self.online.forward(x).row(0).to_vec()
    }

    pub fn act(&mut self, obs: &[f64], legal: &[bool], epsilon: f64) -> Result<usize, AgentError> {
        let q = self.q_values(obs);
        select_action(&q, legal, epsilon, &mut self.rng)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One Adam step on the batch; returns the pre-step loss.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let targets = td_targets(&self.target, batch, self.config.gamma);
        let (loss, grads, max_q) = td_loss_and_grad(&self.online, batch, &targets);
        if !loss.is_finite() {
            return Err(AgentError::NonFiniteLoss {
                updates: self.updates,
                max_q,
                max_target: targets.iter().fold(0.0, |m: f64, t| m.max(t.abs())),
            });
        }
        let g = grads.slices();
        self.adam.step(&mut self.online.slices_mut(), &g);
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync_every) {
            self.sync_target();
        }
        Ok(loss)
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        std::fs::write(path, self.to_json()).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            online: self.online.clone(),
            target: self.target.clone(),
            updates: self.updates,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        let bad = |m: String| AgentError::Checkpoint(m);
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.config.validate()?;
        let shapes = |m: &Mlp| m.layers.iter().map(|l| (l.w.dim(), l.b.len())).collect::<Vec<_>>();
        if shapes(&ck.online) != shapes(&ck.target) {
            return Err(bad("online and target networks differ in shape".into()));
        }
        if ck.online.layers.len() != ck.config.hidden.len() + 1
            || ck.online.layers.windows(2).any(|w| w[0].w.ncols() != w[1].w.nrows())
            || ck.online.layers.iter().any(|l| l.w.ncols() != l.b.len())
        {
            return Err(bad("network shapes do not match the config".into()));
        }
        if !ck.online.is_finite() || !ck.target.is_finite() {
            return Err(bad("non-finite weights".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ck.rng_seed);
        rng.set_word_pos(ck.rng_word_pos.parse().map_err(|_| bad("bad rng position".into()))?);
        Ok(Self {
            adam: Adam::new(AdamConfig::with_lr(ck.config.lr), &ck.online.param_sizes()),
            config: ck.config,
            online: ck.online,
            target: ck.target,
            updates: ck.updates,
            rng,
            rng_seed: ck.rng_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DqnConfig,
    online: Mlp,
    target: Mlp,
    updates: u64,
    rng_seed: u64,
    /// u128 as a decimal string; JSON numbers cannot carry it.
    rng_word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub total_reward: f64,
    pub epsilon: f64,
    pub loss_mean: Option<f64>,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), AgentError> {
    let io = |e: csv::Error| AgentError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["episode", "total_reward", "epsilon", "loss_mean"]).map_err(io)?;
    for p in curve {
        w.write_record([
            p.episode.to_string(),
            p.total_reward.to_string(),
            p.epsilon.to_string(),
            p.loss_mean.map(|l| l.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| AgentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Anything that picks an action index for a state.
pub trait Policy {
    fn act(&mut self, env: &RecEnv, state: &EnvState) -> Result<usize, AgentError>;
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-policy")),
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, env: &RecEnv, state: &EnvState) -> Result<usize, AgentError> {
        select_action(&[], &env.legal_mask(state), 1.0, &mut self.rng)
    }
}

/// DQN acting greedily (ε = 0).
pub struct GreedyPolicy<'a> {
    pub agent: &'a DqnAgent,
    pub encoder: &'a ObservationEncoder,
}

impl Policy for GreedyPolicy<'_> {
    fn act(&mut self, env: &RecEnv, state: &EnvState) -> Result<usize, AgentError> {
        let obs = self.encoder.encode(&state.history);
        let q = self.agent.q_values(&obs.features);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        select_action(&q, &env.legal_mask(state), 0.0, &mut unused)
    }
}

/// Run `episodes` of the random baseline; same episode seeding as training.
pub fn random_policy(factory: &EnvFactory, episodes: usize, seed: u64) -> Result<Vec<CurvePoint>, AgentError> {
    let mut policy = RandomPolicy::new(seed);
    let env = &factory.env;
    let mut curve = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut state = factory.episode(seed, ep)?;
        let mut total = 0.0;
        loop {
            let a = policy.act(env, &state)?;
            let out = env.step_index(&state, a)?;
            total += out.reward as f64;
            state = out.next;
            if out.done {
                break;
            }
        }
        curve.push(CurvePoint {
            episode: ep,
            total_reward: total,
            epsilon: 1.0,
            loss_mean: None,
        });
    }
    Ok(curve)
}

/// Episode loop with ε annealing, replay and periodic target sync.
pub fn train_agent(
    factory: &EnvFactory,
    encoder: &ObservationEncoder,
    config: &DqnConfig,
    episodes: usize,
    seed: u64,
) -> Result<(DqnAgent, Vec<CurvePoint>), AgentError> {
    let env = &factory.env;
    let mut agent = DqnAgent::new(config.clone(), encoder.dim(), env.actions().len(), seed)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "replay-sample"));
    let mut curve = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let epsilon = config.epsilon(ep, episodes);
        let mut state = factory.episode(seed, ep)?;
        let mut obs = encoder.encode(&state.history).features;
        let mut total = 0.0;
        loop {
            let a = agent.act(&obs, &env.legal_mask(&state), epsilon)?;
            let out = env.step_index(&state, a)?;
            let next_obs = encoder.encode(&out.next.history).features;
            buffer.push(Transition {
                obs: std::mem::take(&mut obs),
                action: a,
                reward: out.reward as f64,
                next_obs: next_obs.clone(),
                done: out.done,
            });
            total += out.reward as f64;
            obs = next_obs;
            state = out.next;
            if out.done {
                break;
            }
        }
        let mut losses = Vec::new();
        if buffer.len() >= config.batch_size {
            for _ in 0..config.updates_per_episode {
                let batch = buffer.sample(config.batch_size, &mut sample_rng);
                losses.push(agent.update(&batch)?);
            }
        }
        let loss_mean = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        if ep % 100 == 0 || ep + 1 == episodes {
            tracing::info!(episode = ep, total_reward = total, epsilon, loss_mean = loss_mean.unwrap_or(f64::NAN), "dqn episode");
        }
        curve.push(CurvePoint {
            episode: ep,
            total_reward: total,
            epsilon,
            loss_mean,
        });
    }
    Ok((agent, curve))
}
