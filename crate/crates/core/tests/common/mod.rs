#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use reliable_eval::domain::{DatasetSpec, Example, TaskKind};

/// Status and message content for one prompt.
pub type Responder = dyn Fn(&str, &HeaderMap) -> (u16, String) + Send + Sync;

#[derive(Default)]
pub struct MockStats {
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
}

struct Shared {
    responder: Box<Responder>,
    delay: Duration,
    stats: Arc<MockStats>,
}

/// An OpenAI-compatible chat endpoint on its own thread and runtime, so
/// both sync and async tests can use it.
pub struct MockServer {
    pub base_url: String,
    pub stats: Arc<MockStats>,
}

async fn chat(
    State(s): State<Arc<Shared>>,
    headers: HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    s.stats.requests.fetch_add(1, Ordering::SeqCst);
    let now = s.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    s.stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    if !s.delay.is_zero() {
        tokio::time::sleep(s.delay).await;
    }
    let prompt = body["messages"][0]["content"]
        .as_str()
        .unwrap_or_default()
        .to_string();
    let (status, content) = (s.responder)(&prompt, &headers);
    s.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    let body = json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": prompt.len(), "completion_tokens": 1},
    });
    (StatusCode::from_u16(status).unwrap(), Json(body))
}

impl MockServer {
    pub fn start(responder: Box<Responder>, delay: Duration) -> MockServer {
        let stats = Arc::new(MockStats::default());
        let shared = Arc::new(Shared {
            responder,
            delay,
            stats: stats.clone(),
        });
        let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                let app = Router::new()
                    .route("/v1/chat/completions", post(chat))
                    .with_state(shared);
                axum::serve(listener, app).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        MockServer {
            base_url: format!("http://{addr}/v1"),
            stats,
        }
    }

    pub fn requests(&self) -> usize {
        self.stats.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }
}

/// Uniform value in [0, 1) from a hash of the prompt and a seed.
pub fn prompt_u01(prompt: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    let d = h.finalize();
    (u64::from_le_bytes(d[..8].try_into().unwrap()) >> 11) as f64 / (1u64 << 53) as f64
}

/// Multiple-choice dataset whose questions carry a `[[tag]]` the mock
/// server can look up. Choice `gold` of example i reads `gold-i`.
pub fn tagged_dataset(count: usize, choices: usize) -> DatasetSpec {
    let examples = (0..count)
        .map(|i| {
            let gold = i % choices;
            let texts = (0..choices)
                .map(|c| {
                    if c == gold {
                        format!("gold-{i}")
                    } else {
                        format!("wrong-{i}-{c}")
                    }
                })
                .collect();
            Example::multiple_choice(
                format!("ex{i:03}"),
                format!("[[{i}]] Which option is marked gold?"),
                texts,
                gold,
            )
            .unwrap()
        })
        .collect();
    DatasetSpec::new("tagged", TaskKind::MultipleChoice, examples, "exact_match").unwrap()
}

pub fn tag_of(prompt: &str) -> Option<usize> {
    // The target question is the last tagged one (demonstrations come first).
    let start = prompt.rfind("[[")? + 2;
    let end = start + prompt[start..].find("]]")?;
    prompt[start..end].parse().ok()
}

/// Answers with the gold choice text with probability `accuracy`, decided by
/// a hash of the prompt; otherwise with a wrong choice.
pub fn accuracy_responder(accuracy: f64, seed: u64) -> Box<Responder> {
    Box::new(move |prompt, _| {
        let tag = tag_of(prompt).expect("tagged prompt");
        if prompt_u01(prompt, seed) < accuracy {
            (200, format!("gold-{tag}"))
        } else {
            (200, "none of these".to_string())
        }
    })
}

/// Deviation multiset for one moment by enumerating every subset of size n
/// as a bitmask. Subset elements are visited in index order.
pub fn oracle_deviations(scores: &[f64], n: usize, moment: usize) -> Vec<f64> {
    let total = scores.len();
    let stat = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        if moment == 1 {
            mean
        } else {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64
        }
    };
    let reference = stat(scores);
    let mut out = Vec::new();
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != n {
            continue;
        }
        let subset: Vec<f64> = (0..total)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| scores[i])
            .collect();
        out.push((stat(&subset) - reference).abs());
    }
    out
}

/// Percentile by linear interpolation between closest ranks, rank q(m - 1).
pub fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

pub struct OracleCurve {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_star: Option<usize>,
}

pub fn oracle_curve(scores: &[f64], moment: usize, epsilon: f64, delta: f64) -> OracleCurve {
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for n in 1..=scores.len() {
        let d = oracle_deviations(scores, n, moment);
        lower.push(oracle_percentile(&d, delta / 2.0));
        upper.push(oracle_percentile(&d, 1.0 - delta / 2.0));
    }
    let n_star = upper.iter().position(|u| epsilon >= *u).map(|i| i + 1);
    OracleCurve {
        lower,
        upper,
        n_star,
    }
}
