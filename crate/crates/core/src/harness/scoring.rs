//! Per-cell metrics.

use std::collections::HashMap;
use std::sync::Arc;

use async_trait::async_trait;

use super::cache::{CacheKey, ResponseCache};
use super::client::ModelClient;
use crate::domain::{Example, Gold, ModelSpec};
use crate::perturb::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("scorer {scorer}: {reason}")]
pub struct ScoreError {
    pub scorer: String,
    pub reason: String,
}

#[async_trait]
pub trait Scorer: Send + Sync {
    fn id(&self) -> &str;

    /// Score in `[0, 1]` for `response` to `prompt`, which rendered `example`.
    async fn score(
        &self,
        response: &str,
        example: &Example,
        prompt: &RenderedPrompt,
    ) -> Result<f64, ScoreError>;
}

/// Lowercases, collapses whitespace and strips surrounding quotes and
/// trailing punctuation.
pub fn normalize(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .to_lowercase()
        .trim_start_matches(['"', '\'', '`'])
        .trim_end_matches(['"', '\'', '`', '.', ',', ';', ':', '!', '?'])
        .trim()
        .to_string()
}

/// Exact match after [`normalize`]. For multiple choice, the response may
/// give the rendered label (`B`, `B.`, `B)`), the gold choice text, or both
/// (`B. Paris`).
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactMatch;

impl ExactMatch {
    pub fn matches(response: &str, example: &Example, prompt: &RenderedPrompt) -> bool {
        let got = normalize(response);
        match (example.gold(), &prompt.gold_map) {
            (Gold::Choice(g), Some(map)) => {
                let text = normalize(example.gold_text());
                let label = map.label_for(*g).map(normalize).unwrap_or_default();
                if got == text || got == label {
                    return true;
                }
                ['.', ')', ':'].iter().any(|sep| {
                    got.strip_prefix(&format!("{label}{sep}"))
                        .is_some_and(|rest| rest.trim().is_empty() || normalize(rest) == text)
                })
            }
            _ => got == normalize(example.gold_text()),
        }
    }
}

#[async_trait]
impl Scorer for ExactMatch {
    fn id(&self) -> &str {
        "exact_match"
    }

    async fn score(
        &self,
        response: &str,
        example: &Example,
        prompt: &RenderedPrompt,
    ) -> Result<f64, ScoreError> {
        Ok(if Self::matches(response, example, prompt) {
            1.0
        } else {
            0.0
        })
    }
}

/// LLM-as-judge scoring. The template may use `{question}`, `{gold}` and
/// `{response}`; a verdict passes when its normalized form starts with one
/// of `pass_verdicts`.
pub struct JudgeScorer {
    pub id: String,
    pub judge: ModelSpec,
    pub api_key: Option<String>,
    pub template: String,
    pub pass_verdicts: Vec<String>,
    pub client: ModelClient,
    pub cache: Option<ResponseCache>,
}

impl JudgeScorer {
    pub fn judge_prompt(&self, response: &str, example: &Example) -> String {
        let mut out = String::with_capacity(self.template.len() + response.len());
        let mut rest = self.template.as_str();
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let tail = &rest[start..];
            let (fill, len) = if tail.starts_with("{question}") {
                (example.question(), "{question}".len())
            } else if tail.starts_with("{gold}") {
                (example.gold_text(), "{gold}".len())
            } else if tail.starts_with("{response}") {
                (response, "{response}".len())
            } else {
                ("{", 1)
            };
            out.push_str(fill);
            rest = &tail[len..];
        }
        out.push_str(rest);
        out
    }

    pub fn passes(&self, verdict: &str) -> bool {
        let v = normalize(verdict);
        self.pass_verdicts
            .iter()
            .any(|p| v.starts_with(&normalize(p)))
    }
}

#[async_trait]
impl Scorer for JudgeScorer {
    fn id(&self) -> &str {
        &self.id
    }

    async fn score(
        &self,
        response: &str,
        example: &Example,
        _prompt: &RenderedPrompt,
    ) -> Result<f64, ScoreError> {
        let err = |reason: String| ScoreError {
            scorer: self.id.clone(),
            reason,
        };
        let prompt = self.judge_prompt(response, example);
        let key = CacheKey::new(self.judge.model_name(), self.judge.decoding(), &prompt);
        let cached = match &self.cache {
            Some(c) => c.get(&key).map_err(|e| err(e.to_string()))?,
            None => None,
        };
        let verdict = match cached {
            Some(entry) => entry.response_text,
            None => {
                let done = self
                    .client
                    .complete(&self.judge, self.api_key.as_deref(), &prompt)
                    .await
                    .map_err(|f| err(format!("{f:?}")))?;
                if let Some(c) = &self.cache {
                    c.put(&key, &done.text, done.usage)
                        .map_err(|e| err(e.to_string()))?;
                }
                done.text
            }
        };
        Ok(if self.passes(&verdict) { 1.0 } else { 0.0 })
    }
}

/// Metric id to scorer.
#[derive(Clone)]
pub struct ScorerRegistry {
    scorers: HashMap<String, Arc<dyn Scorer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = ScorerRegistry {
            scorers: HashMap::new(),
        };
        r.register(Arc::new(ExactMatch));
        r
    }
}

impl ScorerRegistry {
    pub fn register(&mut self, scorer: Arc<dyn Scorer>) {
        self.scorers.insert(scorer.id().to_string(), scorer);
    }

    pub fn get(&self, metric_id: &str) -> Option<Arc<dyn Scorer>> {
        self.scorers.get(metric_id).cloned()
    }
}
