//! Chat-completion transport: an OpenAI-compatible HTTP client, a replay
//! backend fed from recorded transcripts, the JSON-lines transcript log,
//! and the planner extractor shared by every backend.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agent::{PlannerSpec, ReasonBackend};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("no planner JSON with numeric v0, a_max, s0 found")]
    NoPlanner,
    #[error("replay exhausted for {agent_id}/{stage}")]
    ReplayExhausted { agent_id: String, stage: String },
    #[error("transcript: {0}")]
    Transcript(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
}

impl ChatTurn {
    /// Empty content is rejected; endpoints treat it inconsistently.
    pub fn new(role: ChatRole, content: impl Into<String>) -> Result<Self, LlmError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(LlmError::Config("chat turn content is empty".into()));
        }
        Ok(ChatTurn { role, content })
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn {
            role: ChatRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Base URL; `/v1/chat/completions` is appended unless already present.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// First backoff delay; doubles per retry, plus up to 25% jitter.
    pub backoff_base_s: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "https://api.openai.com".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "COMAL_API_KEY".into(),
            timeout_s: 60.0,
            max_retries: 3,
            temperature: 0.0,
            backoff_base_s: 1.0,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(LlmError::Config(format!(
                "timeout must be > 0, got {}",
                self.timeout_s
            )));
        }
        if !(self.backoff_base_s >= 0.0 && self.backoff_base_s.is_finite()) {
            return Err(LlmError::Config("backoff base must be >= 0".into()));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(LlmError::Config("endpoint and model are required".into()));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }

    /// Delay before retry number `attempt` (0-based), jitter excluded.
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_s * 2f64.powi(attempt as i32))
    }
}

/// Who is calling and why; becomes the transcript key.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub run_id: &'a str,
    pub agent_id: &'a str,
    pub stage: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub timestamp: String,
    pub run_id: String,
    pub agent_id: String,
    pub stage: String,
    pub request: Value,
    /// Assistant text on success, `{"error": ...}` on a failed attempt.
    pub response: Value,
    pub latency_ms: u64,
}

impl TranscriptEntry {
    pub fn response_text(&self) -> Option<&str> {
        self.response.as_str()
    }
}

/// Append-only log of every backend exchange in one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn record(
        &mut self,
        ctx: &CallContext<'_>,
        request: Value,
        response: Result<&str, &LlmError>,
        latency: Duration,
    ) {
        let response = match response {
            Ok(text) => Value::String(text.to_string()),
            Err(e) => json!({ "error": e.to_string() }),
        };
        self.entries.push(TranscriptEntry {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            run_id: ctx.run_id.to_string(),
            agent_id: ctx.agent_id.to_string(),
            stage: ctx.stage.to_string(),
            request,
            response,
            latency_ms: latency.as_millis() as u64,
        });
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line)
                .map_err(|e| LlmError::Transcript(format!("line {}: {e}", n + 1)))?;
            entries.push(e);
        }
        Ok(Transcript { entries })
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Transcript(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }
}

fn request_body(config: &BackendConfig, turns: &[ChatTurn]) -> Value {
    json!({
        "model": config.model,
        "messages": turns,
        "temperature": config.temperature,
    })
}

/// Blocking client for `POST /v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: BackendConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend { config, agent })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn api_key(&self) -> Result<String, LlmError> {
        match std::env::var(&self.config.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(LlmError::Config(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))),
        }
    }

    fn attempt(&self, key: &str, body: &Value) -> Result<String, LlmError> {
        let mut resp = self
            .agent
            .post(&self.config.url())
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: text });
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| LlmError::Response(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Response("missing choices[0].message.content".into()))
    }

    /// Sends `turns`, retrying transient failures. Every attempt is logged.
    pub fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError> {
        let key = self.api_key()?;
        let body = request_body(&self.config, turns);
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            let result = self.attempt(&key, &body);
            log.record(ctx, body.clone(), result.as_deref(), started.elapsed());
            match result {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    let delay = self.config.backoff(attempt);
                    let jitter = rand::rng().random_range(0.0..=0.25) * delay.as_secs_f64();
                    std::thread::sleep(delay + Duration::from_secs_f64(jitter));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl ReasonBackend for RemoteBackend {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError> {
        RemoteBackend::complete(self, ctx, turns, log)
    }
}

/// Serves recorded responses in order, keyed by (agent, stage).
#[derive(Debug, Default)]
pub struct ReplayBackend {
    queues: Mutex<BTreeMap<(String, String), VecDeque<String>>>,
}

impl ReplayBackend {
    /// Failed attempts in the recording are skipped; only answers replay.
    pub fn new(transcript: &Transcript) -> Self {
        let mut queues: BTreeMap<(String, String), VecDeque<String>> = BTreeMap::new();
        for e in transcript.entries() {
            if let Some(text) = e.response_text() {
                queues
                    .entry((e.agent_id.clone(), e.stage.clone()))
                    .or_default()
                    .push_back(text.to_string());
            }
        }
        ReplayBackend {
            queues: Mutex::new(queues),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .unwrap()
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

impl ReasonBackend for ReplayBackend {
    fn complete(
        &self,
        ctx: &CallContext<'_>,
        turns: &[ChatTurn],
        log: &mut Transcript,
    ) -> Result<String, LlmError> {
        let next = self
            .queues
            .lock()
            .unwrap()
            .get_mut(&(ctx.agent_id.to_string(), ctx.stage.to_string()))
            .and_then(VecDeque::pop_front);
        let result = next.ok_or_else(|| LlmError::ReplayExhausted {
            agent_id: ctx.agent_id.to_string(),
            stage: ctx.stage.to_string(),
        });
        let body = json!({ "messages": turns });
        log.record(ctx, body, result.as_deref(), Duration::ZERO);
        result
    }
}

fn planner_from_object(v: &Value) -> Option<PlannerSpec> {
    let obj = v.as_object()?;
    let num = |k: &str| obj.get(k).and_then(Value::as_f64);
    Some(PlannerSpec {
        v0: num("v0")?,
        a_max: num("a_max")?,
        s0: num("s0")?,
    })
}

/// Last JSON object in `text` carrying numeric `v0`, `a_max` and `s0`.
/// Prose, code fences and nesting around it are ignored. Values are not
/// clamped here.
pub fn extract_planner_json(text: &str) -> Result<PlannerSpec, LlmError> {
    // An enclosing object closes after the ones nested in it, so "last" is
    // decided by where an object ends.
    let mut best: Option<(usize, PlannerSpec)> = None;
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            if let Some(p) = planner_from_object(&v) {
                let end = i + stream.byte_offset();
                if best.is_none_or(|(b, _)| end > b) {
                    best = Some((end, p));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or(LlmError::NoPlanner)
}
