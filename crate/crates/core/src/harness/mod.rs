//! Evaluation runs, metrics and explanation traces.

pub mod world;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Policy};
use crate::basemodels::KeywordMatch;
use crate::corpus::CategoryTable;
use crate::simulator::{EnvFactory, EpisodeTrace, SimError, StepRecord};

pub use world::{generate_world, PlantedUser, World, WorldSpec};

/// Liking% looks at the first this-many steps of each episode.
pub const LIKING_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] SimError),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace csv: bad cell {column}: {detail}")]
    Cell { column: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Mean per-episode cumulative reward.
    pub avg_reward: f64,
    /// Sum of rewards over all episodes.
    pub total_reward: f64,
    /// Mean fraction of likes among the first `liking_window` steps.
    pub liking_pct: f64,
    pub liking_window: usize,
    /// Set when the horizon is shorter than the standard window.
    pub short_horizon: bool,
    pub config_digest: String,
}

impl EvalReport {
    /// Metrics from per-episode reward sequences.
    pub fn from_rewards(rewards: &[Vec<u8>], horizon: usize, seed: u64, policy: &str, config_digest: &str) -> Self {
        let window = LIKING_WINDOW.min(horizon).max(1);
        let n = rewards.len();
        let totals: Vec<f64> = rewards.iter().map(|r| r.iter().map(|&x| x as f64).sum()).collect();
        let total_reward: f64 = totals.iter().sum();
        let liking: f64 = rewards
            .iter()
            .map(|r| r.iter().take(window).map(|&x| x as f64).sum::<f64>() / window as f64)
            .sum();
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            policy: policy.to_string(),
            episodes: n,
            horizon,
            seed,
            avg_reward: mean(total_reward),
            total_reward,
            liking_pct: mean(liking),
            liking_window: window,
            short_horizon: horizon < LIKING_WINDOW,
            config_digest: config_digest.to_string(),
        }
    }

    pub fn from_traces(traces: &[EpisodeTrace], horizon: usize, seed: u64, policy: &str, config_digest: &str) -> Self {
        let rewards: Vec<Vec<u8>> = traces.iter().map(|t| t.steps.iter().map(|s| s.reward).collect()).collect();
        Self::from_rewards(&rewards, horizon, seed, policy, config_digest)
    }
}

/// Roll out `episodes` episodes with `policy`, recording full traces.
pub fn run_episodes(
    factory: &EnvFactory,
    categories: &CategoryTable,
    policy: &mut dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let env = &factory.env;
    let mut traces = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut state = factory.episode(seed, ep)?;
        let mut trace = EpisodeTrace {
            episode: ep,
            user_id: state.user_id.clone(),
            episode_seed: state.episode_seed,
            steps: Vec::with_capacity(env.config().horizon),
        };
        loop {
            let a = policy.act(env, &state)?;
            let out = env.step_index(&state, a)?;
            let item = &env.actions()[a];
            trace
                .steps
                .push(StepRecord::new(state.step_index, item, categories.category_of(item), &out.verdict));
            state = out.next;
            if out.done {
                break;
            }
        }
        traces.push(trace);
    }
    Ok(traces)
}

pub fn evaluate(
    factory: &EnvFactory,
    categories: &CategoryTable,
    policy: &mut dyn Policy,
    policy_name: &str,
    episodes: usize,
    seed: u64,
    config_digest: &str,
) -> Result<(EvalReport, Vec<EpisodeTrace>), HarnessError> {
    let traces = run_episodes(factory, categories, policy, episodes, seed)?;
    let report = EvalReport::from_traces(&traces, factory.env.config().horizon, seed, policy_name, config_digest);
    Ok((report, traces))
}

fn fmt_matches(m: &[KeywordMatch]) -> String {
    if m.is_empty() {
        return "-".into();
    }
    m.iter().map(|k| format!("{} ({})", k.keyword, k.history_item)).collect::<Vec<_>>().join(", ")
}

fn fmt_beta(b: Option<f64>) -> String {
    b.map_or_else(|| "absent".into(), |v| format!("{v:.4}"))
}

/// Human-readable per-step explanation.
pub fn trace_text(trace: &EpisodeTrace) -> String {
    let mut out = format!(
        "episode {} user {} (stream seed {}), total reward {}\n",
        trace.episode,
        trace.user_id,
        trace.episode_seed,
        trace.total_reward()
    );
    for s in &trace.steps {
        out.push_str(&format!(
            "step {:>3}  item {}  category {}{}\n",
            s.step,
            s.action,
            s.category.as_deref().unwrap_or("?"),
            if s.fallback_used { "  [full-history fallback]" } else { "" }
        ));
        out.push_str(&format!(
            "    match: a+={} a-={}  vote {}  pros: {}  cons: {}\n",
            s.alpha_pos,
            s.alpha_neg,
            s.vote_mat,
            fmt_matches(&s.matched_pros),
            fmt_matches(&s.matched_cons)
        ));
        out.push_str(&format!(
            "    similarity: b+={} b-={}  vote {}\n",
            fmt_beta(s.beta_pos),
            fmt_beta(s.beta_neg),
            s.vote_sim
        ));
        out.push_str(&format!(
            "    sequential: p={:.4}  vote {}\n    reward {}\n",
            s.sta_score, s.vote_sta, s.reward
        ));
    }
    out
}

pub const TRACE_CSV_HEADER: [&str; 18] = [
    "episode",
    "user_id",
    "episode_seed",
    "step",
    "action",
    "category",
    "fallback_used",
    "matched_pros",
    "matched_cons",
    "alpha_pos",
    "alpha_neg",
    "beta_pos",
    "beta_neg",
    "vote_mat",
    "vote_sim",
    "vote_sta",
    "sta_score",
    "reward",
];

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    episode: usize,
    user_id: String,
    episode_seed: u64,
    step: usize,
    action: String,
    category: Option<String>,
    fallback_used: bool,
    /// JSON array of {history_item, keyword}.
    matched_pros: String,
    matched_cons: String,
    alpha_pos: u32,
    alpha_neg: u32,
    beta_pos: Option<f64>,
    beta_neg: Option<f64>,
    vote_mat: u8,
    vote_sim: u8,
    vote_sta: u8,
    sta_score: f64,
    reward: u8,
}

/// One row per step; an empty trace list yields just the header.
pub fn write_trace_csv(out: impl Write, traces: &[EpisodeTrace]) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_CSV_HEADER)?;
    for t in traces {
        for s in &t.steps {
            w.serialize(TraceRow {
                episode: t.episode,
                user_id: t.user_id.clone(),
                episode_seed: t.episode_seed,
                step: s.step,
                action: s.action.clone(),
                category: s.category.clone(),
                fallback_used: s.fallback_used,
                matched_pros: serde_json::to_string(&s.matched_pros).expect("matches serialize"),
                matched_cons: serde_json::to_string(&s.matched_cons).expect("matches serialize"),
                alpha_pos: s.alpha_pos,
                alpha_neg: s.alpha_neg,
                beta_pos: s.beta_pos,
                beta_neg: s.beta_neg,
                vote_mat: s.vote_mat,
                vote_sim: s.vote_sim,
                vote_sta: s.vote_sta,
                sta_score: s.sta_score,
                reward: s.reward,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(input: impl Read) -> Result<Vec<EpisodeTrace>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let mut traces: Vec<EpisodeTrace> = Vec::new();
    for row in r.deserialize::<TraceRow>() {
        let row = row?;
        let parse = |column: &'static str, s: &str| {
            serde_json::from_str::<Vec<KeywordMatch>>(s).map_err(|e| HarnessError::Cell {
                column,
                detail: e.to_string(),
            })
        };
        let step = StepRecord {
            step: row.step,
            action: row.action,
            category: row.category,
            fallback_used: row.fallback_used,
            matched_pros: parse("matched_pros", &row.matched_pros)?,
            matched_cons: parse("matched_cons", &row.matched_cons)?,
            alpha_pos: row.alpha_pos,
            alpha_neg: row.alpha_neg,
            beta_pos: row.beta_pos,
            beta_neg: row.beta_neg,
            vote_mat: row.vote_mat,
            vote_sim: row.vote_sim,
            vote_sta: row.vote_sta,
            sta_score: row.sta_score,
            reward: row.reward,
        };
        match traces.last_mut() {
            Some(t) if t.episode == row.episode && t.user_id == row.user_id => t.steps.push(step),
            _ => traces.push(EpisodeTrace {
                episode: row.episode,
                user_id: row.user_id,
                episode_seed: row.episode_seed,
                steps: vec![step],
            }),
        }
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_fixture() {
        // three episodes, T = 12
        let r = vec![
            vec![1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 1, 1], // total 8, first ten 6
            vec![0; 12],                              // total 0, first ten 0
            vec![1; 12],                              // total 12, first ten 10
        ];
        let rep = EvalReport::from_rewards(&r, 12, 5, "fixture", "d");
        assert_eq!(rep.total_reward, 20.0);
        assert!((rep.avg_reward - 20.0 / 3.0).abs() < 1e-12);
        assert!((rep.liking_pct - (0.6 + 0.0 + 1.0) / 3.0).abs() < 1e-12);
        assert!(!rep.short_horizon);
    }

    #[test]
    fn short_horizon_is_flagged() {
        let rep = EvalReport::from_rewards(&[vec![1, 0, 1, 1]], 4, 0, "p", "");
        assert!(rep.short_horizon);
        assert_eq!(rep.liking_window, 4);
        assert!((rep.liking_pct - 0.75).abs() < 1e-12);
    }

    #[test]
    fn saturation_stubs() {
        for (reward, avg, pct) in [(1u8, 20.0, 1.0), (0, 0.0, 0.0)] {
            let rep = EvalReport::from_rewards(&vec![vec![reward; 20]; 7], 20, 0, "stub", "");
            assert_eq!(rep.avg_reward, avg);
            assert_eq!(rep.liking_pct, pct);
            assert_eq!(rep.total_reward, avg * 7.0);
        }
    }

    fn sample_trace() -> EpisodeTrace {
        EpisodeTrace {
            episode: 3,
            user_id: "u,1".into(),
            episode_seed: u64::MAX,
            steps: vec![
                StepRecord {
                    step: 0,
                    action: "i\"9".into(),
                    category: Some("Diner".into()),
                    fallback_used: true,
                    matched_pros: vec![KeywordMatch {
                        history_item: "i2".into(),
                        keyword: "cozy, warm".into(),
                    }],
                    matched_cons: vec![],
                    alpha_pos: 1,
                    alpha_neg: 0,
                    beta_pos: Some(0.1 + 0.2),
                    beta_neg: None,
                    vote_mat: 1,
                    vote_sim: 1,
                    vote_sta: 0,
                    sta_score: 1.0 / 3.0,
                    reward: 1,
                },
                StepRecord {
                    step: 1,
                    action: "i4".into(),
                    category: None,
                    fallback_used: false,
                    matched_pros: vec![],
                    matched_cons: vec![],
                    alpha_pos: 0,
                    alpha_neg: 2,
                    beta_pos: None,
                    beta_neg: Some(-0.5),
                    vote_mat: 0,
                    vote_sim: 0,
                    vote_sta: 0,
                    sta_score: 0.0,
                    reward: 0,
                },
            ],
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let traces = vec![sample_trace(), EpisodeTrace { episode: 4, ..sample_trace() }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &traces).unwrap();
        assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), traces);
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("episode,user_id,"));
        assert!(text.trim_end().ends_with(",reward"));
        assert!(read_trace_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn text_trace_mentions_every_step() {
        let t = sample_trace();
        let text = trace_text(&t);
        assert!(text.contains("step   0"));
        assert!(text.contains("step   1"));
        assert!(text.contains("cozy, warm (i2)"));
        assert!(text.contains("b-=absent"));
        assert!(text.contains("[full-history fallback]"));
    }
}
