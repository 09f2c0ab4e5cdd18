//! Runs a model over perturbation configurations and collects the score matrix.

pub mod cache;
pub mod client;
pub mod scoring;
pub mod synthetic;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;

use crate::domain::{DatasetSpec, ModelSpec, ScoreMatrix, ValidationError};
use crate::perturb::{
    render_prompt, PerturbationConfig, PerturbationSpace, RenderedPrompt, SpaceError,
};
use cache::{CacheError, CacheKey, ResponseCache};
use client::{CallFailure, ModelClient, RetryPolicy};
use scoring::ScorerRegistry;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("model {model}: authentication rejected (HTTP {status})")]
    AuthFailure { model: String, status: u16 },
    #[error("model {model}: endpoint unreachable ({detail})")]
    EndpointUnreachable { model: String, detail: String },
    #[error("model {model}: environment variable {var} is not set")]
    MissingApiKey { model: String, var: String },
    #[error("no scorer registered as {0:?}")]
    ScorerUnknown(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Maximum requests in flight at once.
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
    pub request_timeout: Duration,
    pub cache_dir: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            concurrency_limit: 8,
            retry: RetryPolicy::default(),
            request_timeout: Duration::from_secs(60),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    /// Distinct prompts sent to the endpoint.
    pub requests: usize,
    pub cache_hits: usize,
    pub failed_requests: usize,
    pub missing_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub matrix: ScoreMatrix,
    pub stats: RunStats,
}

/// Column ids of the score matrix: example ids, or `slot-j` when each
/// configuration evaluates its own example subset.
pub fn column_ids(dataset: &DatasetSpec, space: &PerturbationSpace) -> Vec<String> {
    match space.subset_size() {
        Some(m) => (0..m).map(|j| format!("slot-{j}")).collect(),
        None => dataset
            .examples()
            .iter()
            .map(|e| e.id().to_string())
            .collect(),
    }
}

struct Cell {
    row: usize,
    col: usize,
    example: usize,
    prompt: RenderedPrompt,
    request: usize,
}

fn api_key(model: &ModelSpec) -> Result<Option<String>, HarnessError> {
    match model.api_key_env() {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .map_err(|_| HarnessError::MissingApiKey {
                model: model.id().to_string(),
                var: var.to_string(),
            }),
    }
}

/// Renders every (configuration, example) cell, answers it from the cache
/// or the endpoint, and scores it. A cell whose request or scoring fails is
/// left missing; authentication failures abort the run.
pub async fn run_evaluation(
    model: &ModelSpec,
    dataset: &DatasetSpec,
    space: &PerturbationSpace,
    configs: &[PerturbationConfig],
    scorers: &ScorerRegistry,
    scorer_id: &str,
    options: &RunOptions,
) -> Result<RunOutcome, HarnessError> {
    let scorer = scorers
        .get(scorer_id)
        .ok_or_else(|| HarnessError::ScorerUnknown(scorer_id.to_string()))?;
    let key = api_key(model)?;
    let cache = options
        .cache_dir
        .as_ref()
        .map(ResponseCache::open)
        .transpose()?;
    let columns = column_ids(dataset, space);

    let mut requests: Vec<(CacheKey, String)> = Vec::new();
    let mut by_key: HashMap<CacheKey, usize> = HashMap::new();
    let mut cells = Vec::new();
    for (row, config) in configs.iter().enumerate() {
        space.check_config(config)?;
        for (col, &example) in space.selected_examples(config).iter().enumerate() {
            let prompt = render_prompt(config, &dataset.examples()[example], space.inventory())?;
            let cache_key = CacheKey::new(model.model_name(), model.decoding(), &prompt.text);
            let request = *by_key.entry(cache_key.clone()).or_insert_with(|| {
                requests.push((cache_key, prompt.text.clone()));
                requests.len() - 1
            });
            cells.push(Cell {
                row,
                col,
                example,
                prompt,
                request,
            });
        }
    }

    let mut stats = RunStats::default();
    let mut responses: Vec<Option<String>> = vec![None; requests.len()];
    let mut pending = Vec::new();
    for (i, (cache_key, _)) in requests.iter().enumerate() {
        match cache
            .as_ref()
            .map(|c| c.get(cache_key))
            .transpose()?
            .flatten()
        {
            Some(entry) => {
                responses[i] = Some(entry.response_text);
                stats.cache_hits += 1;
            }
            None => pending.push(i),
        }
    }
    stats.requests = pending.len();

    let client = ModelClient::new(options.retry, options.request_timeout);
    let permits = Arc::new(Semaphore::new(options.concurrency_limit.max(1)));
    let mut tasks = JoinSet::new();
    for i in pending {
        let (client, model, key, permits) =
            (client.clone(), model.clone(), key.clone(), permits.clone());
        let prompt = requests[i].1.clone();
        tasks.spawn(async move {
            let _permit = permits
                .acquire_owned()
                .await
                .expect("semaphore is never closed");
            (i, client.complete(&model, key.as_deref(), &prompt).await)
        });
    }
    let mut successes = 0;
    let mut failures = Vec::new();
    while let Some(joined) = tasks.join_next().await {
        let (i, result) = joined.expect("request task panicked");
        match result {
            Ok(done) => {
                if let Some(c) = &cache {
                    c.put(&requests[i].0, &done.text, done.usage)?;
                }
                responses[i] = Some(done.text);
                successes += 1;
            }
            Err(CallFailure::Auth(status)) => {
                tasks.abort_all();
                return Err(HarnessError::AuthFailure {
                    model: model.id().to_string(),
                    status,
                });
            }
            Err(failure) => failures.push(failure),
        }
    }
    stats.failed_requests = failures.len();
    if successes == 0 && !failures.is_empty() {
        if let Some(CallFailure::Transport(detail)) = failures
            .iter()
            .all(|f| matches!(f, CallFailure::Transport(_)))
            .then(|| failures[0].clone())
        {
            return Err(HarnessError::EndpointUnreachable {
                model: model.id().to_string(),
                detail,
            });
        }
    }

    let mut values: Vec<Option<f64>> = vec![None; configs.len() * columns.len()];
    let mut scoring = JoinSet::new();
    for cell in cells {
        let Some(response) = responses[cell.request].clone() else {
            continue;
        };
        let (scorer, permits) = (scorer.clone(), permits.clone());
        let example = dataset.examples()[cell.example].clone();
        scoring.spawn(async move {
            let _permit = permits
                .acquire_owned()
                .await
                .expect("semaphore is never closed");
            let score = scorer.score(&response, &example, &cell.prompt).await;
            (cell.row, cell.col, score)
        });
    }
    while let Some(joined) = scoring.join_next().await {
        let (row, col, score) = joined.expect("scoring task panicked");
        if let Ok(v) = score {
            if (0.0..=1.0).contains(&v) {
                values[row * columns.len() + col] = Some(v);
            }
        }
    }
    stats.missing_cells = values.iter().filter(|v| v.is_none()).count();
    let matrix = ScoreMatrix::new(
        configs.iter().map(|c| c.config_id().to_string()).collect(),
        columns,
        values,
        model.id(),
        dataset.id(),
    )?;
    Ok(RunOutcome { matrix, stats })
}
