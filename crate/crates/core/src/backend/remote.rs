//! OpenAI-compatible chat-completions and embeddings client.

use std::env;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::{template_for, PromptSet};
use super::{AnswerMode, BackendRequest, Provider, RequestKind};
use crate::error::BackendError;

pub const DEFAULT_MAX_PARALLEL: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    /// Extra random delay as a fraction of the current backoff.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
            jitter: 0.5,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay_ms.saturating_mul(1 << (attempt.saturating_sub(1)).min(16));
        let extra = if self.jitter > 0.0 {
            rand::rng().random_range(0.0..=self.jitter) * base as f64
        } else {
            0.0
        };
        Duration::from_millis(base + extra as u64)
    }

    pub fn is_retryable_status(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(skip_serializing, default)]
    pub api_key: String,
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dimension: usize,
    pub timeout_secs: u64,
    pub max_parallel: usize,
    pub temperature: f64,
    pub retry: RetryPolicy,
}

impl RemoteConfig {
    /// Reads `DIALMEM_BASE_URL`, `DIALMEM_API_KEY`, `DIALMEM_CHAT_MODEL`,
    /// `DIALMEM_EMBED_MODEL` and `DIALMEM_EMBED_DIM`, falling back to the
    /// `OPENAI_*` names for URL and key.
    pub fn from_env() -> Result<Self, BackendError> {
        let var = |names: &[&str]| names.iter().find_map(|n| env::var(n).ok().filter(|v| !v.is_empty()));
        let api_key = var(&["DIALMEM_API_KEY", "OPENAI_API_KEY"])
            .ok_or_else(|| BackendError::Config("set DIALMEM_API_KEY or OPENAI_API_KEY".into()))?;
        let embed_dimension = match var(&["DIALMEM_EMBED_DIM"]) {
            Some(raw) => raw
                .parse()
                .map_err(|_| BackendError::Config(format!("DIALMEM_EMBED_DIM={raw} is not a number")))?,
            None => 1536,
        };
        Ok(RemoteConfig {
            base_url: var(&["DIALMEM_BASE_URL", "OPENAI_BASE_URL"])
                .unwrap_or_else(|| "https://api.openai.com/v1".into()),
            api_key,
            chat_model: var(&["DIALMEM_CHAT_MODEL"]).unwrap_or_else(|| "gpt-4o-mini".into()),
            embed_model: var(&["DIALMEM_EMBED_MODEL"])
                .unwrap_or_else(|| "text-embedding-3-small".into()),
            embed_dimension,
            timeout_secs: 120,
            max_parallel: DEFAULT_MAX_PARALLEL,
            temperature: 0.0,
            retry: RetryPolicy::default(),
        })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        GatePass(self)
    }
}

struct GatePass<'a>(&'a Gate);

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteClient {
            gate: Gate::new(config.max_parallel),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs JSON with the retry policy: transport errors and 429/5xx are
    /// retried, other statuses fail immediately.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _pass = self.gate.acquire();
        let url = self.url(path);
        let policy = &self.config.retry;
        let attempts = policy.attempts.max(1);
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 1..=attempts {
            let sent = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.config.api_key))
                .send_json(body);
            let retryable = match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp
                        .body_mut()
                        .read_to_string()
                        .map_err(|e| BackendError::Failed {
                            status: Some(status),
                            message: format!("reading body: {e}"),
                        })?;
                    if (200..300).contains(&status) {
                        return serde_json::from_str(&text).map_err(|e| BackendError::Extraction {
                            message: format!("response is not JSON: {e}"),
                            raw: text,
                        });
                    }
                    last_status = Some(status);
                    last_message = text;
                    RetryPolicy::is_retryable_status(status)
                }
                Err(e) => {
                    last_status = None;
                    last_message = e.to_string();
                    true
                }
            };
            if !retryable {
                break;
            }
            if attempt < attempts {
                log::warn!(
                    "{}",
                    BackendError::Retryable {
                        attempt,
                        message: last_message.clone()
                    }
                );
                std::thread::sleep(policy.delay(attempt));
            }
        }
        Err(BackendError::Failed {
            status: last_status,
            message: last_message,
        })
    }

    pub fn chat(&self, model: &str, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol(format!("no choices[0].message.content in {resp}")))
    }

    pub fn embeddings(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = json!({"model": model, "input": inputs});
        let resp = self.post("embeddings", &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("embeddings response without data".into()))?;
        let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Protocol("data item without embedding".into()))?
                .iter()
                .map(|v| v.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| BackendError::Protocol("non-numeric embedding".into()))?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Serves [`BackendRequest`]s by rendering prompt templates and calling chat.
pub struct RemoteProvider {
    client: std::sync::Arc<RemoteClient>,
    prompts: PromptSet,
}

impl RemoteProvider {
    pub fn new(client: std::sync::Arc<RemoteClient>, prompts: PromptSet) -> Self {
        RemoteProvider { client, prompts }
    }

    pub fn render(&self, request: &BackendRequest) -> String {
        let p = &self.prompts;
        match request {
            BackendRequest::ExtractFlat {
                dialogue_time,
                user_text,
            } => p.render(
                "extract_flat",
                &[
                    ("dialogue_time", &dialogue_time.to_string()),
                    ("input_text", user_text),
                ],
            ),
            BackendRequest::ExtractGraph {
                dialogue_time,
                input_text,
            } => p.render(
                "extract_graph",
                &[
                    ("dialogue_time", &dialogue_time.to_string()),
                    ("input_text", input_text),
                ],
            ),
            BackendRequest::Prejudge { chunk } => p.render("prejudge", &[("input_text", chunk)]),
            BackendRequest::DecideMemOp {
                new_fact,
                candidates,
            } => {
                let listed = candidates
                    .iter()
                    .map(|(id, text)| format!("{id}: {text}"))
                    .collect::<Vec<_>>()
                    .join("\n");
                p.render("mem_op", &[("new_fact", new_fact), ("candidates", &listed)])
            }
            BackendRequest::Answer {
                question,
                question_date,
                context,
                mode,
            } => {
                let listed = context
                    .iter()
                    .enumerate()
                    .map(|(i, c)| format!("### Chat {}\n{c}", i + 1))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                let date = question_date.map(|d| d.to_string()).unwrap_or_default();
                p.render(
                    template_for(RequestKind::Answer, *mode == AnswerMode::ChainOfNote),
                    &[("question", question), ("question_date", &date), ("context", &listed)],
                )
            }
            BackendRequest::Summarize {
                descriptions,
                max_chars,
            } => p.render(
                "summarize",
                &[
                    ("descriptions", &descriptions.join("\n")),
                    ("max_chars", &max_chars.to_string()),
                ],
            ),
            BackendRequest::JudgeSimilar { first, second } => {
                p.render("judge_similar", &[("first", first), ("second", second)])
            }
        }
    }
}

impl Provider for RemoteProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn model(&self) -> &str {
        &self.client.config.chat_model
    }

    fn template_version(&self, kind: RequestKind) -> String {
        if kind == RequestKind::Answer {
            format!(
                "{}+{}",
                self.prompts.version("answer_direct"),
                self.prompts.version("answer_chain_of_note")
            )
        } else {
            self.prompts.version(template_for(kind, false))
        }
    }

    fn call(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let prompt = self.render(request);
        let reply = self.client.chat(&self.client.config.chat_model, &prompt)?;
        Ok(match request {
            BackendRequest::Answer {
                mode: AnswerMode::ChainOfNote,
                ..
            } => chain_of_note_answer(&reply),
            _ => reply,
        })
    }
}

/// Pulls `answer` out of a chain-of-note JSON reply; falls back to the raw text.
fn chain_of_note_answer(reply: &str) -> String {
    serde_json::from_str::<Value>(reply.trim())
        .ok()
        .and_then(|v| v.get("answer").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| reply.to_string())
}
