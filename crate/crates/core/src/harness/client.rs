//! OpenAI-compatible chat-completion client with bounded retries.

use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use crate::domain::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry` plus up to `base` of jitter.
    fn delay(&self, retry: u32) -> Duration {
        let base = self.base_delay.as_millis() as u64;
        let jitter = if base == 0 {
            0
        } else {
            rand::rng().random_range(0..=base)
        };
        Duration::from_millis(base.saturating_mul(1 << retry.min(16)) + jitter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallFailure {
    /// 401 or 403: retrying cannot help and the run must stop.
    Auth(u16),
    /// No HTTP response at all (connect, DNS, timeout).
    Transport(String),
    /// A non-success status other than auth.
    Status(u16),
    /// The body did not contain a completion.
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ModelClient {
    http: reqwest::Client,
    retry: RetryPolicy,
}

impl ModelClient {
    pub fn new(retry: RetryPolicy, timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .expect("static client configuration");
        ModelClient { http, retry }
    }

    pub fn retry(&self) -> RetryPolicy {
        self.retry
    }

    /// One logical request; transport errors, 429 and 5xx are retried.
    pub async fn complete(
        &self,
        model: &ModelSpec,
        api_key: Option<&str>,
        prompt: &str,
    ) -> Result<Completion, CallFailure> {
        let url = format!(
            "{}/chat/completions",
            model.endpoint().trim_end_matches('/')
        );
        let d = model.decoding();
        let body = json!({
            "model": model.model_name(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": d.temperature(),
            "top_p": d.top_p(),
            "max_tokens": d.max_tokens(),
        });
        let mut last = CallFailure::Transport("no attempt made".into());
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                tokio::time::sleep(self.retry.delay(attempt - 1)).await;
            }
            let mut req = self.http.post(&url).json(&body);
            if let Some(key) = api_key {
                req = req.bearer_auth(key);
            }
            let resp = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    last = CallFailure::Transport(e.to_string());
                    continue;
                }
            };
            let status = resp.status().as_u16();
            if status == 401 || status == 403 {
                return Err(CallFailure::Auth(status));
            }
            if !resp.status().is_success() {
                last = CallFailure::Status(status);
                if status == 429 || resp.status().is_server_error() {
                    continue;
                }
                return Err(last);
            }
            return match resp.json::<ChatResponse>().await {
                Ok(parsed) => parsed
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.message.content)
                    .map(|text| Completion {
                        text,
                        usage: parsed.usage,
                    })
                    .ok_or_else(|| CallFailure::Malformed("no message content".into())),
                Err(e) => Err(CallFailure::Malformed(e.to_string())),
            };
        }
        Err(last)
    }
}
