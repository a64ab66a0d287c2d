//! Chat-completion clients: an OpenAI-compatible HTTP backend and a
//! deterministic offline mock.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::stable_hash;

pub const ENV_LLM_URL: &str = "SIMREC_LLM_URL";
pub const ENV_LLM_MODEL: &str = "SIMREC_LLM_MODEL";
pub const ENV_LLM_KEY: &str = "SIMREC_LLM_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode completion: {0}")]
    Decode(String),
    #[error("llm configuration error: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => matches!(status, 408 | 429 | 500 | 502 | 503 | 504),
            LlmError::Decode(_) | LlmError::Config(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Item the prompt is about; used by the mock backend, never sent.
    #[serde(skip)]
    pub item_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

pub trait LlmClient: Send + Sync {
    fn model(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    fn prompt(&self, prompt: &str, item_id: &str) -> Result<String, LlmError> {
        let request = CompletionRequest {
            model: self.model().to_string(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: 0.0,
            item_id: Some(item_id.to_string()),
        };
        self.complete(&request)
    }
}

/// Token bucket limiting request rate across worker threads.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_second: f64, burst: usize) -> Self {
        let capacity = burst.max(1) as f64;
        Self {
            capacity,
            per_second,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Block until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("rate limiter poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.per_second).min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - *tokens) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// OpenAI-compatible chat completion endpoint over blocking HTTP.
pub struct HttpChatClient {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
    limiter: Option<RateLimiter>,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            http,
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
            limiter: None,
        })
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_LLM_URL).map_err(|_| LlmError::Config(format!("{ENV_LLM_URL} is not set")))?;
        let model = std::env::var(ENV_LLM_MODEL).unwrap_or_else(|_| "chatglm-6b".to_string());
        let key = std::env::var(ENV_LLM_KEY).unwrap_or_default();
        Self::new(url, model, key)
    }

    pub fn with_rate_limit(mut self, per_second: f64, burst: usize) -> Self {
        if per_second > 0.0 {
            self.limiter = Some(RateLimiter::new(per_second, burst));
        }
        self
    }
}

impl LlmClient for HttpChatClient {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let mut req = self.http.post(&self.url).json(request);
        if !self.api_key.is_empty() {
            req = req.bearer_auth(&self.api_key);
        }
        let response = req.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(LlmError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: CompletionResponse = response.json().map_err(|e| LlmError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Decode("response has no choices[0].message.content".into()))
    }
}

const MOCK_PROS: &[&str] = &[
    "affordable", "cozy", "friendly staff", "fast service", "clean", "spacious", "family friendly",
    "great value", "authentic", "fresh", "creative", "quiet", "scenic", "convenient", "well paced",
    "memorable soundtrack", "strong cast", "funny", "heartwarming", "generous portions", "stylish",
    "relaxing", "kid friendly", "good parking", "open late", "vegan options", "great coffee",
    "live music", "welcoming", "attentive service", "innovative", "nostalgic",
];

const MOCK_CONS: &[&str] = &[
    "expensive", "loud", "crowded", "slow service", "dirty", "cramped", "rude staff", "bland",
    "overpriced", "long wait", "poor parking", "noisy", "predictable", "too long", "confusing plot",
    "small portions", "outdated", "limited menu", "no reservations", "cash only", "greasy",
    "inconsistent", "weak ending", "uncomfortable seats", "closes early", "poor lighting",
    "pushy upselling", "stale", "shallow characters", "bad acoustics",
];

/// Attribute tags the mock backend treats as ground truth: an attribute
/// `good: cozy` is reported as a pro keyword, `bad: loud` as a con.
pub const GROUNDED_PRO_TAG: &str = "good: ";
pub const GROUNDED_CON_TAG: &str = "bad: ";

fn tagged(prompt: &str, tag: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (at, _) in prompt.match_indices(tag) {
        let boundary = prompt[..at].chars().next_back().is_none_or(|c| c == ' ' || c == ',' || c == '\n');
        if !boundary {
            continue;
        }
        let rest = &prompt[at + tag.len()..];
        let end = rest.find([',', '.', '\n']).unwrap_or(rest.len());
        let kw = rest[..end].trim().to_string();
        if !kw.is_empty() && !out.contains(&kw) {
            out.push(kw);
        }
    }
    out
}

/// Tagged (pros, cons) when the prompt carries any tagged attribute.
fn grounded_keywords(prompt: &str) -> Option<(Vec<String>, Vec<String>)> {
    let pros = tagged(prompt, GROUNDED_PRO_TAG);
    let cons = tagged(prompt, GROUNDED_CON_TAG);
    (!pros.is_empty() || !cons.is_empty()).then_some((pros, cons))
}

/// Offline backend. Prompts whose attributes carry `good:`/`bad:` tags are
/// answered with exactly those keywords; otherwise every requested block
/// gets keywords drawn by a seeded hash of (item id, prompt, block index).
#[derive(Debug, Clone)]
pub struct MockLlm {
    seed: u64,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn requested_blocks(prompt: &str) -> Vec<(&'static str, usize)> {
        let mut out = Vec::new();
        for label in ["Pros", "Cons"] {
            for k in 1..=3 {
                if prompt.contains(&format!("\n{label} {k}: [")) {
                    out.push((label, k));
                }
            }
        }
        out
    }
}

impl LlmClient for MockLlm {
    fn model(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let prompt = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let item = request.item_id.as_deref().unwrap_or("");
        let prompt_key = stable_hash(&[prompt.as_bytes()]);
        let blocks = Self::requested_blocks(&prompt);
        if blocks.is_empty() {
            return Ok("I cannot help with that.".to_string());
        }
        let grounded = grounded_keywords(&prompt);
        let mut out = String::new();
        for (block_index, (label, k)) in blocks.iter().copied().enumerate() {
            let lower = label.to_lowercase();
            let keywords: Vec<String> = match &grounded {
                Some((pros, cons)) => {
                    // spread the tagged keywords over the requested blocks
                    let pool = if label == "Pros" { pros } else { cons };
                    let same: Vec<usize> = blocks.iter().filter(|(l, _)| *l == label).map(|(_, k)| *k).collect();
                    let slot = same.iter().position(|&x| x == k).expect("block requested");
                    pool.iter().skip(slot).step_by(same.len()).cloned().collect()
                }
                None => {
                    let vocab = if label == "Pros" { MOCK_PROS } else { MOCK_CONS };
                    let h = stable_hash(&[
                        &self.seed.to_le_bytes(),
                        item.as_bytes(),
                        &prompt_key.to_le_bytes(),
                        &(block_index as u64).to_le_bytes(),
                    ]);
                    let count = 1 + (h % 2) as usize;
                    (0..count)
                        .map(|j| vocab[((h >> (8 + 16 * j)) as usize) % vocab.len()].to_string())
                        .collect()
                }
            };
            if keywords.is_empty() {
                continue;
            }
            out.push_str(&format!(
                "{label} {k}: [{lower} {k} of {item}]\nEvidence: [mock evidence {k}]\nKeywords: [{}]\n",
                keywords.join(", ")
            ));
        }
        if out.is_empty() {
            return Ok("I cannot help with that.".to_string());
        }
        // objective layout has Evidence before Keywords; order does not matter to the parser
        Ok(out)
    }
}

/// Parse a backend selector: `mock:<seed>` or `http` (environment-configured).
pub fn client_from_spec(spec: &str) -> Result<Box<dyn LlmClient>, LlmError> {
    if let Some(seed) = spec.strip_prefix("mock:") {
        let seed = seed
            .parse::<u64>()
            .map_err(|_| LlmError::Config(format!("invalid mock seed in `{spec}`")))?;
        return Ok(Box::new(MockLlm::new(seed)));
    }
    match spec {
        "mock" => Ok(Box::new(MockLlm::new(0))),
        "http" | "remote" => Ok(Box::new(HttpChatClient::from_env()?)),
        other => Err(LlmError::Config(format!("unknown llm backend `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve exactly one HTTP request with the given status and body, and
    /// hand back the raw request body.
    fn one_shot_server(status: u16, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.trim_end();
                if l.is_empty() {
                    break;
                }
                let lower = l.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = l.to_string();
                }
            }
            let mut buf = vec![0u8; content_length];
            reader.read_exact(&mut buf).unwrap();
            let response = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
            format!("{auth}\n{}", String::from_utf8(buf).unwrap())
        });
        (url, handle)
    }

    #[test]
    fn http_client_speaks_chat_completion_wire_format() {
        let (url, server) = one_shot_server(200, r#"{"choices":[{"message":{"role":"assistant","content":"Pros 1: [x]"}}]}"#);
        let client = HttpChatClient::new(url, "glm", "secret").unwrap();
        let reply = client.prompt("hello", "item-1").unwrap();
        assert_eq!(reply, "Pros 1: [x]");
        let seen = server.join().unwrap();
        let (auth, body) = seen.split_once('\n').unwrap();
        assert_eq!(auth, "authorization: Bearer secret");
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "glm");
        assert_eq!(v["messages"][0]["role"], "user");
        assert_eq!(v["messages"][0]["content"], "hello");
        assert_eq!(v["temperature"], 0.0);
        assert!(v.get("item_id").is_none());
    }

    #[test]
    fn http_status_errors_classify_retryability() {
        let (url, server) = one_shot_server(503, r#"{"error":"busy"}"#);
        let client = HttpChatClient::new(url, "glm", "").unwrap();
        let err = client.prompt("hello", "i").unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, LlmError::Status { status: 503, .. }));
        assert!(err.is_retryable());
    }

    #[test]
    fn http_decode_error_on_missing_content() {
        let (url, server) = one_shot_server(200, r#"{"choices":[]}"#);
        let client = HttpChatClient::new(url, "glm", "").unwrap();
        let err = client.prompt("hello", "i").unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, LlmError::Decode(_)));
        assert!(!err.is_retryable());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let client = HttpChatClient::new(format!("http://{addr}/x"), "m", "").unwrap();
        assert!(matches!(client.prompt("p", "i"), Err(LlmError::Transport(_))));
    }

    #[test]
    fn mock_is_deterministic_and_follows_requested_blocks() {
        let m = MockLlm::new(3);
        let prompt = "intro\nPros 1: [pros 1]\nPros 2: [pros 2]\n";
        let a = m.prompt(prompt, "item").unwrap();
        assert_eq!(a, m.prompt(prompt, "item").unwrap());
        assert!(a.contains("Pros 2:") && !a.contains("Cons"));
        assert_ne!(a, MockLlm::new(4).prompt(prompt, "item").unwrap());
        assert_eq!(m.prompt("no blocks here", "item").unwrap(), "I cannot help with that.");
    }

    #[test]
    fn mock_reports_tagged_attributes() {
        let m = MockLlm::new(1);
        let prompt = "has the following attributes: good: cozy, good: cheap eats, bad: loud, notbad: x.\n\
                      Pros 1: [p]\nPros 2: [p]\nPros 3: [p]\nCons 1: [c]\nCons 2: [c]\nCons 3: [c]\n";
        let reply = m.prompt(prompt, "i").unwrap();
        assert!(reply.contains("Keywords: [cozy]") && reply.contains("Keywords: [cheap eats]"));
        assert!(reply.contains("Keywords: [loud]"));
        assert!(!reply.contains("Pros 3") && !reply.contains("Cons 2") && !reply.contains("x"));
        let only_cons = "attributes: good: cozy.\nCons 1: [c]\n";
        assert_eq!(m.prompt(only_cons, "i").unwrap(), "I cannot help with that.");
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!(client_from_spec("mock:9").unwrap().model(), "mock");
        assert!(client_from_spec("mock:x").is_err());
        assert!(client_from_spec("gpt").is_err());
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let limiter = RateLimiter::new(100.0, 1);
        let start = Instant::now();
        for _ in 0..4 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(25));
    }
}
