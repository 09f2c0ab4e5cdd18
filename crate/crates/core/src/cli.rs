//! Command-line pipeline: `space` → `run` → `estimate` → `report`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::domain::{
    DatasetSpec, ModelSpec, ReliabilityParams, ScoreMatrix, DEFAULT_DELTA, DEFAULT_EPSILON,
    DEFAULT_REFERENCE_SAMPLES, DEFAULT_RESAMPLES_PER_N,
};
use crate::harness::client::{ModelClient, RetryPolicy};
use crate::harness::scoring::{JudgeScorer, ScorerRegistry};
use crate::harness::synthetic::{synth_scores_for, CellMode, EffectKey, ScoreLaw, SyntheticModel};
use crate::harness::{column_ids, run_evaluation, HarnessError, RunOptions};
use crate::moments::{aggregate_rows, summary};
use crate::perturb::{build_space, sample_configs, DimensionInventory, SpaceError};
use crate::reliability::{convergence_curve, estimate_n_star, Moment, ReliabilityError};
use crate::report::svg::{emit_boxplot, emit_convergence, ChartLayout};
use crate::report::{
    read_matrix, read_reliability_report, write_atomic, write_matrix, write_reliability_report,
    ArtifactHeader, ReportError, RunManifest,
};

const DEFAULTS: &str = "\
Defaults: ε = 0.01 (--epsilon), δ = 0.1 (--delta), N = 100 reference resamplings
(run --reference), K = 1000 Monte Carlo subsets per n (--resamples) and 5-shot
demonstrations (fewshot_k in the inventory). API keys are read from the environment
variable named by the model file's api_key_env, never from flags.";

#[derive(Parser, Debug)]
#[command(name = "reliable-eval", version, about = "Reliable LLM evaluation over prompt perturbations", after_help = DEFAULTS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the size of the perturbation space and its per-dimension breakdown.
    #[command(after_help = DEFAULTS)]
    Space(SpaceArgs),
    /// Sample configurations and score a model (or a synthetic law) on each.
    #[command(after_help = DEFAULTS)]
    Run(RunArgs),
    /// Estimate the minimal reliable number of resamplings n* from reference scores.
    #[command(after_help = DEFAULTS)]
    Estimate(EstimateArgs),
    /// Box plot and summary table of per-perturbation scores for several models.
    #[command(after_help = DEFAULTS)]
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SpaceArgs {
    /// Dataset file (JSON).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Dimension inventory file (TOML).
    #[arg(long)]
    pub inventory: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CellArg {
    PerCell,
    Level,
    Bernoulli,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub inventory: PathBuf,
    /// Model file (TOML): id, endpoint, model_name, optional decoding, role, api_key_env.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    pub model: Option<PathBuf>,
    /// Synthetic score law instead of a model, e.g. "uniform(0.4, 0.6)".
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Additive offset for synthetic runs as KEY=LAW; KEY is "config" or a dimension name.
    #[arg(long = "effect", requires = "synthetic")]
    pub effects: Vec<String>,
    /// How synthetic cells are drawn.
    #[arg(long, value_enum, default_value = "per-cell", requires = "synthetic")]
    pub cells: CellArg,
    /// Model id for synthetic runs.
    #[arg(long, default_value = "synthetic", requires = "synthetic")]
    pub model_id: String,
    /// Judge scorer file (TOML) for datasets whose metric is not exact_match.
    #[arg(long)]
    pub judge: Option<PathBuf>,
    /// Number of configurations to sample.
    #[arg(long)]
    pub count: Option<usize>,
    /// Take the count from a report's recommended n*.
    #[arg(long, conflicts_with = "count")]
    pub from_report: Option<PathBuf>,
    /// Reference-model run: sample N = 100 configurations unless --count is given.
    #[arg(long)]
    pub reference: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Response cache directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Maximum requests in flight.
    #[arg(long, default_value_t = 8)]
    pub concurrency: usize,
    /// Output score-matrix file (CSV); the manifest is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    /// Reference score matrix (CSV).
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Monte Carlo subsets per n when exhaustive enumeration is too large.
    #[arg(long, default_value_t = DEFAULT_RESAMPLES_PER_N)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Output convergence chart (SVG).
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Score matrix per model (CSV); repeat for each model.
    #[arg(long = "scores", required = true)]
    pub scores: Vec<PathBuf>,
    /// Use the first n rows of each matrix.
    #[arg(long)]
    pub n: Option<usize>,
    /// Take n from a report's recommended n*.
    #[arg(long, conflicts_with = "n")]
    pub from_report: Option<PathBuf>,
    /// Output box plot (SVG).
    #[arg(long)]
    pub out: PathBuf,
    /// Output summary table (CSV).
    #[arg(long)]
    pub table: Option<PathBuf>,
}

/// A failure with its exit code: 1 for runtime and network, 2 for invalid input.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<SpaceError> for CliError {
    fn from(e: SpaceError) -> Self {
        CliError::invalid(format!("{e:?}: {e}"))
    }
}

impl From<ReliabilityError> for CliError {
    fn from(e: ReliabilityError) -> Self {
        CliError::invalid(format!("{e:?}"))
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::runtime(e.to_string()),
            ReportError::Reliability(r) => r.into(),
            other => CliError::invalid(other.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::AuthFailure { .. }
            | HarnessError::EndpointUnreachable { .. }
            | HarnessError::Cache(_) => CliError::runtime(e.to_string()),
            other => CliError::invalid(other.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<DatasetSpec, CliError> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    toml::from_str(&read_text(path)?)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn space(args: &SpaceArgs) -> Result<String, CliError> {
    let dataset = load_dataset(&args.dataset)?;
    let inventory = DimensionInventory::load(&args.inventory)?;
    let space = build_space(&dataset, &inventory)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "dataset: {} ({} examples)",
        dataset.id(),
        dataset.examples().len()
    );
    let _ = writeln!(out, "cardinality: {}", space.cardinality());
    for (dim, count) in space.breakdown() {
        let _ = writeln!(out, "  {dim}: {count}");
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeFile {
    id: String,
    template: String,
    pass_verdicts: Vec<String>,
    model: ModelSpec,
}

fn run_count(args: &RunArgs) -> Result<usize, CliError> {
    if let Some(n) = args.count {
        return Ok(n);
    }
    if let Some(path) = &args.from_report {
        let file = read_reliability_report(path)?;
        return file.report.recommended_n().ok_or_else(|| {
            CliError::invalid(format!("{}: report has no reliable n*", path.display()))
        });
    }
    if args.reference {
        return Ok(DEFAULT_REFERENCE_SAMPLES);
    }
    Err(CliError::invalid(
        "choose a sample size: --count, --from-report or --reference",
    ))
}

fn synthetic_model(args: &RunArgs, law: &str) -> Result<SyntheticModel, CliError> {
    let law: ScoreLaw = law.parse().map_err(CliError::invalid)?;
    let mut model = SyntheticModel::new(args.model_id.clone(), law).with_cells(match args.cells {
        CellArg::PerCell => CellMode::PerCell,
        CellArg::Level => CellMode::Level,
        CellArg::Bernoulli => CellMode::Bernoulli,
    });
    for effect in &args.effects {
        let (key, law) = effect
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("effect {effect:?} is not KEY=LAW")))?;
        let key: EffectKey = key.trim().parse().map_err(CliError::invalid)?;
        let law: ScoreLaw = law.parse().map_err(CliError::invalid)?;
        model = model.with_effect(key, law);
    }
    Ok(model)
}

/// Returns the log line.
pub fn run(args: &RunArgs) -> Result<String, CliError> {
    let dataset = load_dataset(&args.dataset)?;
    let inventory = DimensionInventory::load(&args.inventory)?;
    let space = build_space(&dataset, &inventory)?;
    let count = run_count(args)?;
    if count == 0 {
        return Err(CliError::invalid("count must be at least 1"));
    }
    let configs = sample_configs(&space, count, args.seed)?;

    let (matrix, stats, decoding, law) = match (&args.synthetic, &args.model) {
        (Some(law), _) => {
            let model = synthetic_model(args, law)?;
            let matrix = synth_scores_for(
                &model,
                &configs,
                &column_ids(&dataset, &space),
                dataset.id(),
                args.seed,
            )
            .map_err(|e| CliError::invalid(e.to_string()))?;
            (
                matrix,
                Default::default(),
                None,
                Some(model.law.to_string()),
            )
        }
        (None, Some(path)) => {
            let model: ModelSpec = load_toml(path)?;
            let options = RunOptions {
                concurrency_limit: args.concurrency.max(1),
                cache_dir: args.cache_dir.clone(),
                ..RunOptions::default()
            };
            let mut scorers = ScorerRegistry::default();
            if let Some(judge_path) = &args.judge {
                let judge: JudgeFile = load_toml(judge_path)?;
                let api_key = match judge.model.api_key_env() {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CliError::invalid(format!("environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let cache = match &args.cache_dir {
                    Some(dir) => Some(
                        crate::harness::cache::ResponseCache::open(dir)
                            .map_err(|e| CliError::runtime(e.to_string()))?,
                    ),
                    None => None,
                };
                scorers.register(Arc::new(JudgeScorer {
                    id: judge.id,
                    judge: judge.model,
                    api_key,
                    template: judge.template,
                    pass_verdicts: judge.pass_verdicts,
                    client: ModelClient::new(RetryPolicy::default(), options.request_timeout),
                    cache,
                }));
            }
            let runtime =
                tokio::runtime::Runtime::new().map_err(|e| CliError::runtime(e.to_string()))?;
            let outcome = runtime.block_on(run_evaluation(
                &model,
                &dataset,
                &space,
                &configs,
                &scorers,
                dataset.metric_id(),
                &options,
            ))?;
            (
                outcome.matrix,
                outcome.stats,
                Some(model.decoding().clone()),
                None,
            )
        }
        (None, None) => {
            return Err(CliError::invalid(
                "either --model or --synthetic is required",
            ))
        }
    };

    let mut manifest = RunManifest::new(
        &matrix,
        &configs,
        args.seed,
        ArtifactHeader::new(Some(stats)),
    );
    manifest.decoding = decoding;
    manifest.synthetic_law = law;
    write_matrix(&args.out, &matrix, &manifest)?;
    Ok(format!(
        "{} requests, {} cache hits, {} missing cells; wrote {} rows to {}",
        stats.requests,
        stats.cache_hits,
        stats.missing_cells,
        matrix.row_count(),
        args.out.display()
    ))
}

fn reference_scores(matrix: &ScoreMatrix) -> Result<Vec<f64>, CliError> {
    let incomplete = matrix.incomplete_rows();
    if !incomplete.is_empty() {
        let rows = incomplete
            .iter()
            .map(|(id, n)| format!("{id} ({n} missing)"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(ReliabilityError::IncompleteScores(rows).into());
    }
    aggregate_rows(matrix).map_err(|e| CliError::invalid(e.to_string()))
}

pub fn estimate(args: &EstimateArgs) -> Result<String, CliError> {
    let (matrix, _) = read_matrix(&args.scores)?;
    let scores = reference_scores(&matrix)?;
    let params = ReliabilityParams::new(
        args.epsilon,
        args.delta,
        scores.len(),
        args.resamples,
        args.seed,
    )
    .map_err(|e| CliError::invalid(e.to_string()))?;
    let report = estimate_n_star(&scores, &params, matrix.model_id())?;
    write_reliability_report(&args.out, &report, ArtifactHeader::new(None))?;
    if let Some(plot) = &args.plot {
        let curves = Moment::ALL
            .iter()
            .map(|&m| Ok((m.label().to_string(), convergence_curve(&report, m)?)))
            .collect::<Result<Vec<_>, ReliabilityError>>()?;
        emit_convergence(&curves, args.epsilon, plot, &ChartLayout::default())?;
    }
    let show = |v: Option<usize>| v.map_or("none".to_string(), |n| n.to_string());
    Ok(format!(
        "n* first moment: {} (stable {})\nn* second moment: {} (stable {})\nn* combined: {} (stable {})\n",
        show(report.n_star_first),
        show(report.stable_n_star_first),
        show(report.n_star_second),
        show(report.stable_n_star_second),
        show(report.n_star_combined),
        show(report.stable_n_star_combined),
    ))
}

/// Returns the summary table (CSV).
pub fn report(args: &ReportArgs) -> Result<String, CliError> {
    let n = match (&args.n, &args.from_report) {
        (Some(n), _) => Some(*n),
        (None, Some(path)) => Some(
            read_reliability_report(path)?
                .report
                .recommended_n()
                .ok_or_else(|| {
                    CliError::invalid(format!("{}: report has no reliable n*", path.display()))
                })?,
        ),
        (None, None) => None,
    };
    let mut series = Vec::new();
    for path in &args.scores {
        let (matrix, _) = read_matrix(path)?;
        let rows = n.unwrap_or(matrix.row_count());
        if rows == 0 || rows > matrix.row_count() {
            return Err(CliError::invalid(format!(
                "{}: n = {rows} but the matrix has {} rows",
                path.display(),
                matrix.row_count()
            )));
        }
        let scores = reference_scores(&matrix.truncated(rows))?;
        series.push((matrix.model_id().to_string(), scores));
    }
    emit_boxplot(&series, &args.out, &ChartLayout::default())?;
    let mut table = String::from("model,n,mean,variance,median,q1,q3,min,max\n");
    for (model, scores) in &series {
        let s = summary(scores).map_err(|e| CliError::invalid(e.to_string()))?;
        let _ = writeln!(
            table,
            "{model},{},{},{},{},{},{},{},{}",
            s.count, s.mean, s.variance, s.median, s.q1, s.q3, s.min, s.max
        );
    }
    if let Some(path) = &args.table {
        write_atomic(path, table.as_bytes())?;
    }
    Ok(table)
}

/// Runs one parsed command; output goes to stdout, logs to stderr.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Space(a) => print!("{}", space(a)?),
        Command::Run(a) => eprintln!("{}", run(a)?),
        Command::Estimate(a) => print!("{}", estimate(a)?),
        Command::Report(a) => print!("{}", report(a)?),
    }
    Ok(())
}
