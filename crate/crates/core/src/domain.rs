//! Domain types shared across the toolkit.
//!
//! Every type validates its invariants on construction and on
//! deserialization. A failed construction reports every violated invariant
//! at once, not just the first.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub invariant: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.invariant, self.detail)
    }
}

/// Construction failed; carries every violation found.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {type_name}: {}", format_violations(.violations))]
pub struct ValidationError {
    pub type_name: &'static str,
    pub violations: Vec<Violation>,
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl ValidationError {
    pub fn names(&self, invariant: &str) -> bool {
        self.violations.iter().any(|v| v.invariant == invariant)
    }
}

#[derive(Default)]
struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn check(&mut self, ok: bool, invariant: &'static str, detail: impl FnOnce() -> String) {
        if !ok {
            self.violations.push(Violation {
                invariant,
                detail: detail(),
            });
        }
    }

    fn finish<T>(self, type_name: &'static str, value: T) -> Result<T, ValidationError> {
        if self.violations.is_empty() {
            Ok(value)
        } else {
            Err(ValidationError {
                type_name,
                violations: self.violations,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultipleChoice,
    OpenEnded,
}

/// Gold answer: a choice index for multiple choice, free text otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Choice(usize),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "UncheckedExample")]
pub struct Example {
    id: String,
    question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    gold: Gold,
}

#[derive(Deserialize)]
struct UncheckedExample {
    id: String,
    question: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    gold: Gold,
}

impl TryFrom<UncheckedExample> for Example {
    type Error = ValidationError;
    fn try_from(u: UncheckedExample) -> Result<Self, Self::Error> {
        Example::new(u.id, u.question, u.choices, u.gold)
    }
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        choices: Option<Vec<String>>,
        gold: Gold,
    ) -> Result<Self, ValidationError> {
        let example = Example {
            id: id.into(),
            question: question.into(),
            choices,
            gold,
        };
        let mut c = Checker::default();
        c.check(!example.id.is_empty(), "example_id_non_empty", || {
            "example id is empty".into()
        });
        match (&example.choices, &example.gold) {
            (Some(choices), Gold::Choice(idx)) => {
                c.check(choices.len() >= 2, "mcqa_at_least_two_choices", || {
                    format!("example {:?} has {} choices", example.id, choices.len())
                });
                c.check(*idx < choices.len(), "mcqa_gold_in_bounds", || {
                    format!(
                        "example {:?} gold index {idx} outside {} choices",
                        example.id,
                        choices.len()
                    )
                });
            }
            (Some(_), Gold::Text(_)) => c.check(false, "mcqa_gold_is_index", || {
                format!("example {:?} has choices but a text gold", example.id)
            }),
            (None, Gold::Choice(_)) => c.check(false, "open_gold_is_text", || {
                format!("example {:?} has no choices but an index gold", example.id)
            }),
            (None, Gold::Text(_)) => {}
        }
        c.finish("Example", example)
    }

    pub fn multiple_choice(
        id: impl Into<String>,
        question: impl Into<String>,
        choices: Vec<String>,
        gold: usize,
    ) -> Result<Self, ValidationError> {
        Example::new(id, question, Some(choices), Gold::Choice(gold))
    }

    pub fn open_ended(
        id: impl Into<String>,
        question: impl Into<String>,
        gold: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        Example::new(id, question, None, Gold::Text(gold.into()))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn choices(&self) -> Option<&[String]> {
        self.choices.as_deref()
    }

    pub fn gold(&self) -> &Gold {
        &self.gold
    }

    /// Text of the gold answer: the gold choice for MCQA, the gold text otherwise.
    pub fn gold_text(&self) -> &str {
        match (&self.gold, &self.choices) {
            (Gold::Choice(i), Some(choices)) => &choices[*i],
            (Gold::Text(t), _) => t,
            (Gold::Choice(_), None) => unreachable!("validated on construction"),
        }
    }

    pub fn task_kind(&self) -> TaskKind {
        if self.choices.is_some() {
            TaskKind::MultipleChoice
        } else {
            TaskKind::OpenEnded
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedDataset")]
pub struct DatasetSpec {
    id: String,
    task_kind: TaskKind,
    examples: Vec<Example>,
    metric_id: String,
}

#[derive(Deserialize)]
struct UncheckedDataset {
    id: String,
    task_kind: TaskKind,
    examples: Vec<Example>,
    #[serde(default = "default_metric")]
    metric_id: String,
}

fn default_metric() -> String {
    "exact_match".to_string()
}

impl TryFrom<UncheckedDataset> for DatasetSpec {
    type Error = ValidationError;
    fn try_from(u: UncheckedDataset) -> Result<Self, Self::Error> {
        DatasetSpec::new(u.id, u.task_kind, u.examples, u.metric_id)
    }
}

impl DatasetSpec {
    pub fn new(
        id: impl Into<String>,
        task_kind: TaskKind,
        examples: Vec<Example>,
        metric_id: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let spec = DatasetSpec {
            id: id.into(),
            task_kind,
            examples,
            metric_id: metric_id.into(),
        };
        let mut c = Checker::default();
        c.check(!spec.examples.is_empty(), "examples_non_empty", || {
            format!("dataset {:?} has no examples", spec.id)
        });
        let mut seen = HashSet::new();
        for ex in &spec.examples {
            c.check(seen.insert(ex.id()), "unique_example_ids", || {
                format!("duplicate example id {:?}", ex.id())
            });
            c.check(
                ex.task_kind() == task_kind,
                "example_matches_task_kind",
                || {
                    format!(
                        "example {:?} does not match task kind {task_kind:?}",
                        ex.id()
                    )
                },
            );
        }
        c.finish("DatasetSpec", spec)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn metric_id(&self) -> &str {
        &self.metric_id
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id() == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedDecoding")]
pub struct DecodingParams {
    temperature: f64,
    max_tokens: u32,
    top_p: f64,
}

#[derive(Deserialize)]
struct UncheckedDecoding {
    #[serde(default)]
    temperature: f64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
    #[serde(default = "default_top_p")]
    top_p: f64,
}

fn default_max_tokens() -> u32 {
    32
}

fn default_top_p() -> f64 {
    1.0
}

impl TryFrom<UncheckedDecoding> for DecodingParams {
    type Error = ValidationError;
    fn try_from(u: UncheckedDecoding) -> Result<Self, Self::Error> {
        DecodingParams::new(u.temperature, u.max_tokens, u.top_p)
    }
}

/// Decoding temperatures commonly used for a few hosted models.
const KNOWN_TEMPERATURES: &[(&str, f64)] = &[
    ("gpt-4o-2024-08-06", 1.0),
    ("Llama-3.3-70B-Instruct-Turbo", 0.0),
    ("meta-llama/Llama-3.3-70B-Instruct-Turbo", 0.0),
    ("DeepSeek-V3", 0.3),
    ("deepseek-ai/DeepSeek-V3", 0.3),
    ("grok-3", 0.1),
    ("claude-3-7-sonnet-20250219", 0.0),
    ("meta-llama/Llama-3.1-8B-Instruct", 0.0),
];

impl DecodingParams {
    pub fn new(temperature: f64, max_tokens: u32, top_p: f64) -> Result<Self, ValidationError> {
        let p = DecodingParams {
            temperature,
            max_tokens,
            top_p,
        };
        let mut c = Checker::default();
        c.check(
            temperature.is_finite() && temperature >= 0.0,
            "temperature_non_negative",
            || format!("temperature {temperature}"),
        );
        c.check(max_tokens > 0, "max_tokens_positive", || {
            "max_tokens is 0".into()
        });
        c.check(
            top_p > 0.0 && top_p <= 1.0,
            "top_p_in_unit_interval",
            || format!("top_p {top_p} outside (0, 1]"),
        );
        c.finish("DecodingParams", p)
    }

    /// Greedy decoding with default limits.
    pub fn greedy() -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            top_p: 1.0,
        }
    }

    /// Default decoding for a model name: the customary temperature when the
    /// model is a known hosted one, greedy otherwise.
    pub fn for_model(model_name: &str) -> Self {
        let temperature = KNOWN_TEMPERATURES
            .iter()
            .find(|(name, _)| *name == model_name)
            .map_or(0.0, |(_, t)| *t);
        DecodingParams {
            temperature,
            ..Self::greedy()
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn max_tokens(&self) -> u32 {
        self.max_tokens
    }

    pub fn top_p(&self) -> f64 {
        self.top_p
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::greedy()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    #[default]
    Candidate,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedModel")]
pub struct ModelSpec {
    id: String,
    endpoint: String,
    model_name: String,
    decoding: DecodingParams,
    role: ModelRole,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    #[serde(skip_serializing_if = "Option::is_none")]
    api_key_env: Option<String>,
}

#[derive(Deserialize)]
struct UncheckedModel {
    id: String,
    endpoint: String,
    model_name: String,
    #[serde(default)]
    decoding: Option<DecodingParams>,
    #[serde(default)]
    role: ModelRole,
    #[serde(default)]
    api_key_env: Option<String>,
}

impl TryFrom<UncheckedModel> for ModelSpec {
    type Error = ValidationError;
    fn try_from(u: UncheckedModel) -> Result<Self, Self::Error> {
        let decoding = u
            .decoding
            .unwrap_or_else(|| DecodingParams::for_model(&u.model_name));
        ModelSpec::new(
            u.id,
            u.endpoint,
            u.model_name,
            decoding,
            u.role,
            u.api_key_env,
        )
    }
}

impl ModelSpec {
    pub fn new(
        id: impl Into<String>,
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
        decoding: DecodingParams,
        role: ModelRole,
        api_key_env: Option<String>,
    ) -> Result<Self, ValidationError> {
        let spec = ModelSpec {
            id: id.into(),
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            decoding,
            role,
            api_key_env,
        };
        let mut c = Checker::default();
        c.check(!spec.id.is_empty(), "model_id_non_empty", || {
            "model id is empty".into()
        });
        c.check(!spec.model_name.is_empty(), "model_name_non_empty", || {
            "model name is empty".into()
        });
        let url_ok = url::Url::parse(&spec.endpoint)
            .map(|u| matches!(u.scheme(), "http" | "https"))
            .unwrap_or(false);
        c.check(url_ok, "endpoint_is_http_url", || {
            format!("endpoint {:?} is not an http(s) URL", spec.endpoint)
        });
        c.finish("ModelSpec", spec)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn decoding(&self) -> &DecodingParams {
        &self.decoding
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn api_key_env(&self) -> Option<&str> {
        self.api_key_env.as_deref()
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }
}

/// A set of models evaluated together; at most one is the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModelSpec>", into = "Vec<ModelSpec>")]
pub struct EvaluationSuite {
    models: Vec<ModelSpec>,
}

impl TryFrom<Vec<ModelSpec>> for EvaluationSuite {
    type Error = ValidationError;
    fn try_from(models: Vec<ModelSpec>) -> Result<Self, Self::Error> {
        EvaluationSuite::new(models)
    }
}

impl From<EvaluationSuite> for Vec<ModelSpec> {
    fn from(s: EvaluationSuite) -> Self {
        s.models
    }
}

impl EvaluationSuite {
    pub fn new(models: Vec<ModelSpec>) -> Result<Self, ValidationError> {
        let mut c = Checker::default();
        let refs = models
            .iter()
            .filter(|m| m.role() == ModelRole::Reference)
            .count();
        c.check(refs <= 1, "single_reference_model", || {
            format!("{refs} models carry the reference role")
        });
        let mut seen = HashSet::new();
        for m in &models {
            c.check(seen.insert(m.id()), "unique_model_ids", || {
                format!("duplicate model id {:?}", m.id())
            });
        }
        c.finish("EvaluationSuite", EvaluationSuite { models })
    }

    pub fn models(&self) -> &[ModelSpec] {
        &self.models
    }

    pub fn reference(&self) -> Option<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.role() == ModelRole::Reference)
    }
}

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_REFERENCE_SAMPLES: usize = 100;
pub const DEFAULT_RESAMPLES_PER_N: usize = 1000;
pub const DEFAULT_FEWSHOT_K: usize = 5;

/// Everything the reliability criterion needs: (epsilon, delta), the
/// reference sample count N, the Monte Carlo subset count K and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedParams")]
pub struct ReliabilityParams {
    epsilon: f64,
    delta: f64,
    reference_sample_count: usize,
    resamples_per_n: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct UncheckedParams {
    epsilon: f64,
    delta: f64,
    reference_sample_count: usize,
    resamples_per_n: usize,
    seed: u64,
}

impl TryFrom<UncheckedParams> for ReliabilityParams {
    type Error = ValidationError;
    fn try_from(u: UncheckedParams) -> Result<Self, Self::Error> {
        ReliabilityParams::new(
            u.epsilon,
            u.delta,
            u.reference_sample_count,
            u.resamples_per_n,
            u.seed,
        )
    }
}

impl ReliabilityParams {
    pub fn new(
        epsilon: f64,
        delta: f64,
        reference_sample_count: usize,
        resamples_per_n: usize,
        seed: u64,
    ) -> Result<Self, ValidationError> {
        let p = ReliabilityParams {
            epsilon,
            delta,
            reference_sample_count,
            resamples_per_n,
            seed,
        };
        let mut c = Checker::default();
        c.check(
            epsilon > 0.0 && epsilon < 1.0,
            "epsilon_in_unit_interval",
            || format!("epsilon {epsilon} outside (0, 1)"),
        );
        c.check(delta > 0.0 && delta < 1.0, "delta_in_unit_interval", || {
            format!("delta {delta} outside (0, 1)")
        });
        c.check(
            reference_sample_count > 0,
            "reference_sample_count_positive",
            || "N is 0".into(),
        );
        c.check(resamples_per_n > 0, "resamples_per_n_positive", || {
            "K is 0".into()
        });
        c.finish("ReliabilityParams", p)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn reference_sample_count(&self) -> usize {
        self.reference_sample_count
    }

    pub fn resamples_per_n(&self) -> usize {
        self.resamples_per_n
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_reference_sample_count(self, n: usize) -> Result<Self, ValidationError> {
        Self::new(self.epsilon, self.delta, n, self.resamples_per_n, self.seed)
    }
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        ReliabilityParams {
            epsilon: DEFAULT_EPSILON,
            delta: DEFAULT_DELTA,
            reference_sample_count: DEFAULT_REFERENCE_SAMPLES,
            resamples_per_n: DEFAULT_RESAMPLES_PER_N,
            seed: 0,
        }
    }
}

/// Per-(perturbation, example) metric values. Rows are perturbations,
/// columns are examples; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedMatrix")]
pub struct ScoreMatrix {
    perturbation_ids: Vec<String>,
    example_ids: Vec<String>,
    values: Vec<Option<f64>>,
    model_id: String,
    dataset_id: String,
}

#[derive(Deserialize)]
struct UncheckedMatrix {
    perturbation_ids: Vec<String>,
    example_ids: Vec<String>,
    values: Vec<Option<f64>>,
    model_id: String,
    dataset_id: String,
}

impl TryFrom<UncheckedMatrix> for ScoreMatrix {
    type Error = ValidationError;
    fn try_from(u: UncheckedMatrix) -> Result<Self, Self::Error> {
        ScoreMatrix::new(
            u.perturbation_ids,
            u.example_ids,
            u.values,
            u.model_id,
            u.dataset_id,
        )
    }
}

impl ScoreMatrix {
    /// `values` is row-major with `perturbation_ids.len() * example_ids.len()` cells.
    pub fn new(
        perturbation_ids: Vec<String>,
        example_ids: Vec<String>,
        values: Vec<Option<f64>>,
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let m = ScoreMatrix {
            perturbation_ids,
            example_ids,
            values,
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
        };
        let mut c = Checker::default();
        let expected = m.perturbation_ids.len() * m.example_ids.len();
        c.check(m.values.len() == expected, "dense_shape", || {
            format!("{} values for {expected} cells", m.values.len())
        });
        let mut rows = HashSet::new();
        for id in &m.perturbation_ids {
            c.check(rows.insert(id), "unique_row_ids", || {
                format!("duplicate perturbation id {id:?}")
            });
        }
        let mut cols = HashSet::new();
        for id in &m.example_ids {
            c.check(cols.insert(id), "unique_column_ids", || {
                format!("duplicate example id {id:?}")
            });
        }
        for (i, v) in m.values.iter().enumerate() {
            if let Some(v) = v {
                c.check((0.0..=1.0).contains(v), "values_in_unit_interval", || {
                    format!("cell {i} holds {v}")
                });
            }
        }
        c.finish("ScoreMatrix", m)
    }

    /// Builds a matrix from rows of cells.
    pub fn from_rows(
        perturbation_ids: Vec<String>,
        example_ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
        model_id: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self, ValidationError> {
        let cols = example_ids.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(ValidationError {
                type_name: "ScoreMatrix",
                violations: vec![Violation {
                    invariant: "dense_shape",
                    detail: format!("row {i} has {} cells, expected {cols}", row.len()),
                }],
            });
        }
        let values = rows.into_iter().flatten().collect();
        ScoreMatrix::new(perturbation_ids, example_ids, values, model_id, dataset_id)
    }

    pub fn perturbation_ids(&self) -> &[String] {
        &self.perturbation_ids
    }

    pub fn example_ids(&self) -> &[String] {
        &self.example_ids
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn row_count(&self) -> usize {
        self.perturbation_ids.len()
    }

    pub fn column_count(&self) -> usize {
        self.example_ids.len()
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn row(&self, index: usize) -> &[Option<f64>] {
        let cols = self.column_count();
        &self.values[index * cols..(index + 1) * cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[Option<f64>])> {
        self.perturbation_ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn row_index(&self, perturbation_id: &str) -> Option<usize> {
        self.perturbation_ids
            .iter()
            .position(|p| p == perturbation_id)
    }

    pub fn get(&self, row: usize, column: usize) -> Option<f64> {
        self.values[row * self.column_count() + column]
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Perturbation ids of rows with at least one missing cell, with counts.
    pub fn incomplete_rows(&self) -> Vec<(String, usize)> {
        self.rows()
            .filter_map(|(id, row)| {
                let missing = row.iter().filter(|v| v.is_none()).count();
                (missing > 0).then(|| (id.to_string(), missing))
            })
            .collect()
    }

    /// Keeps only the first `count` rows.
    pub fn truncated(&self, count: usize) -> ScoreMatrix {
        let count = count.min(self.row_count());
        ScoreMatrix {
            perturbation_ids: self.perturbation_ids[..count].to_vec(),
            example_ids: self.example_ids.clone(),
            values: self.values[..count * self.column_count()].to_vec(),
            model_id: self.model_id.clone(),
            dataset_id: self.dataset_id.clone(),
        }
    }
}

/// Empirical first and second moment over a score sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedMoments")]
pub struct MomentEstimate {
    mean: f64,
    variance: f64,
    sample_count: usize,
}

#[derive(Deserialize)]
struct UncheckedMoments {
    mean: f64,
    variance: f64,
    sample_count: usize,
}

impl TryFrom<UncheckedMoments> for MomentEstimate {
    type Error = ValidationError;
    fn try_from(u: UncheckedMoments) -> Result<Self, Self::Error> {
        MomentEstimate::new(u.mean, u.variance, u.sample_count)
    }
}

impl MomentEstimate {
    pub fn new(mean: f64, variance: f64, sample_count: usize) -> Result<Self, ValidationError> {
        let m = MomentEstimate {
            mean,
            variance,
            sample_count,
        };
        let mut c = Checker::default();
        c.check(mean.is_finite(), "mean_finite", || format!("mean {mean}"));
        c.check(
            variance.is_finite() && variance >= 0.0,
            "variance_non_negative",
            || format!("variance {variance}"),
        );
        c.check(sample_count > 0, "sample_count_positive", || {
            "sample_count is 0".into()
        });
        c.finish("MomentEstimate", m)
    }

    /// Estimates both moments from a sample.
    pub fn from_scores(scores: &[f64]) -> Result<Self, crate::moments::MomentsError> {
        let mean = crate::moments::first_moment(scores)?;
        let variance = crate::moments::second_moment(scores)?;
        Ok(MomentEstimate {
            mean,
            variance,
            sample_count: scores.len(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mcqa(id: &str) -> Example {
        Example::multiple_choice(id, "q?", vec!["a".into(), "b".into()], 1).unwrap()
    }

    #[test]
    fn dataset_lists_every_violation() {
        let err = DatasetSpec::new("d", TaskKind::OpenEnded, vec![mcqa("x"), mcqa("x")], "em")
            .unwrap_err();
        assert!(err.names("unique_example_ids"));
        assert!(err.names("example_matches_task_kind"));
        assert_eq!(err.violations.len(), 3);
    }

    #[test]
    fn empty_dataset_rejected() {
        let err = DatasetSpec::new("d", TaskKind::OpenEnded, vec![], "em").unwrap_err();
        assert!(err.names("examples_non_empty"));
    }

    #[test]
    fn mcqa_example_invariants() {
        let err = Example::multiple_choice("e", "q", vec!["only".into()], 3).unwrap_err();
        assert!(err.names("mcqa_at_least_two_choices"));
        assert!(err.names("mcqa_gold_in_bounds"));
        assert!(Example::new("e", "q", None, Gold::Choice(0)).is_err());
    }

    #[test]
    fn decoding_bounds() {
        assert!(DecodingParams::new(0.0, 16, 1.0).unwrap().is_greedy());
        let err = DecodingParams::new(-1.0, 0, 0.0).unwrap_err();
        assert_eq!(err.violations.len(), 3);
        assert_eq!(
            DecodingParams::for_model("gpt-4o-2024-08-06").temperature(),
            1.0
        );
        assert_eq!(DecodingParams::for_model("DeepSeek-V3").temperature(), 0.3);
        assert_eq!(DecodingParams::for_model("grok-3").temperature(), 0.1);
        assert_eq!(
            DecodingParams::for_model("some-local-model").temperature(),
            0.0
        );
    }

    #[test]
    fn reliability_defaults() {
        let p = ReliabilityParams::default();
        assert_eq!(p.epsilon(), 0.01);
        assert_eq!(p.delta(), 0.1);
        assert_eq!(p.reference_sample_count(), 100);
        assert_eq!(p.resamples_per_n(), 1000);
        assert!(
            ReliabilityParams::new(0.0, 1.0, 0, 0, 1)
                .unwrap_err()
                .violations
                .len()
                == 4
        );
    }

    #[test]
    fn suite_allows_one_reference() {
        let model = |id: &str, role| {
            ModelSpec::new(
                id,
                "http://localhost:1/v1",
                "m",
                DecodingParams::greedy(),
                role,
                None,
            )
            .unwrap()
        };
        assert!(EvaluationSuite::new(vec![
            model("a", ModelRole::Reference),
            model("b", ModelRole::Candidate)
        ])
        .is_ok());
        let err = EvaluationSuite::new(vec![
            model("a", ModelRole::Reference),
            model("b", ModelRole::Reference),
        ])
        .unwrap_err();
        assert!(err.names("single_reference_model"));
        assert!(ModelSpec::new(
            "x",
            "not a url",
            "m",
            DecodingParams::greedy(),
            ModelRole::Candidate,
            None
        )
        .is_err());
    }

    #[test]
    fn matrix_validation() {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let err = ScoreMatrix::new(
            ids(&["r", "r"]),
            ids(&["c"]),
            vec![Some(1.5), None],
            "m",
            "d",
        )
        .unwrap_err();
        assert!(err.names("unique_row_ids"));
        assert!(err.names("values_in_unit_interval"));
        let m = ScoreMatrix::new(
            ids(&["r1", "r2"]),
            ids(&["c1", "c2"]),
            vec![Some(1.0), Some(0.0), None, Some(0.5)],
            "m",
            "d",
        )
        .unwrap();
        assert_eq!(m.row(1), &[None, Some(0.5)]);
        assert_eq!(m.incomplete_rows(), vec![("r2".to_string(), 1)]);
    }

    #[test]
    fn deserialization_validates() {
        let bad = r#"{"id":"e","question":"q","choices":["a","b"],"gold":5}"#;
        assert!(serde_json::from_str::<Example>(bad).is_err());
        let ok = r#"{"id":"e","question":"q","gold":"Paris"}"#;
        let ex: Example = serde_json::from_str(ok).unwrap();
        assert_eq!(ex.gold_text(), "Paris");
    }

    #[test]
    fn moment_estimate_invariants() {
        assert!(MomentEstimate::new(0.5, -0.1, 3).is_err());
        let m = MomentEstimate::from_scores(&[0.0, 1.0]).unwrap();
        assert_eq!(m.mean(), 0.5);
        assert_eq!(m.variance(), 0.25);
    }
}
