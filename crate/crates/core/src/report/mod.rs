//! Artifacts on disk: score matrices (CSV plus a JSON manifest), reliability
//! reports (JSON) and charts (SVG). Every write goes through a temporary
//! file in the target directory and is renamed into place.

pub mod svg;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DecodingParams, ScoreMatrix, ValidationError};
use crate::harness::RunStats;
use crate::perturb::PerturbationConfig;
use crate::reliability::{ReliabilityError, ReliabilityReport};

pub const FORMAT_VERSION: &str = "reliable-eval/1";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    MalformedFile { line: u64, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: u64, id: String },
    #[error("{path}: {reason}")]
    Json { path: PathBuf, reason: String },
    #[error("unsupported artifact version {0:?}")]
    Version(String),
    #[error("manifest does not describe row {0:?}")]
    ManifestMismatch(String),
    #[error("nothing to plot")]
    EmptyPlot,
    #[error("no scores for {0:?}")]
    EmptyScores(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Reliability(#[from] ReliabilityError),
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Replaces `path` with `bytes` via rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_error(path))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_error(path))?;
    tmp.write_all(bytes).map_err(io_error(path))?;
    tmp.flush().map_err(io_error(path))?;
    tmp.persist(path).map_err(|e| io_error(path)(e.error))?;
    Ok(())
}

/// RFC 3339 timestamp; `SOURCE_DATE_EPOCH` pins it for reproducible output.
pub fn created_at() -> String {
    let pinned = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0));
    pinned
        .unwrap_or_else(chrono::Utc::now)
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub created_at: String,
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_stats: Option<RunStats>,
}

impl ArtifactHeader {
    pub fn new(run_stats: Option<RunStats>) -> Self {
        ArtifactHeader {
            created_at: created_at(),
            tool: format!("reliable-eval {}", env!("CARGO_PKG_VERSION")),
            run_stats,
        }
    }
}

/// Provenance of a score matrix, stored beside it as `<stem>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub header: ArtifactHeader,
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<DecodingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_law: Option<String>,
    /// Row id to configuration.
    pub configs: BTreeMap<String, PerturbationConfig>,
}

impl RunManifest {
    pub fn new(
        matrix: &ScoreMatrix,
        configs: &[PerturbationConfig],
        seed: u64,
        header: ArtifactHeader,
    ) -> Self {
        RunManifest {
            version: FORMAT_VERSION.to_string(),
            header,
            model_id: matrix.model_id().to_string(),
            dataset_id: matrix.dataset_id().to_string(),
            seed,
            decoding: None,
            synthetic_law: None,
            configs: configs
                .iter()
                .map(|c| (c.config_id().to_string(), c.clone()))
                .collect(),
        }
    }
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.manifest.json"))
}

/// `perturbation_id,<example ids...>`, one row per perturbation; an empty
/// field is a missing cell.
pub fn score_matrix_to_csv(matrix: &ScoreMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header =
        std::iter::once("perturbation_id").chain(matrix.example_ids().iter().map(String::as_str));
    w.write_record(header).expect("in-memory write");
    for (id, row) in matrix.rows() {
        let fields = std::iter::once(id.to_string()).chain(row.iter().map(|v| match v {
            Some(v) => format!("{v}"),
            None => String::new(),
        }));
        w.write_record(fields).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

pub fn score_matrix_from_csv(
    text: &str,
    model_id: &str,
    dataset_id: &str,
) -> Result<ScoreMatrix, ReportError> {
    let malformed = |line: u64, reason: String| ReportError::MalformedFile { line, reason };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    if header.get(0) != Some("perturbation_id") {
        return Err(malformed(1, "first column must be perturbation_id".into()));
    }
    let example_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    for id in &example_ids {
        if !seen.insert(id) {
            return Err(ReportError::DuplicateId {
                line: 1,
                id: id.clone(),
            });
        }
    }
    let mut row_ids = Vec::new();
    let mut seen_rows = HashSet::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(malformed(line, "empty perturbation id".into()));
        }
        if !seen_rows.insert(id.clone()) {
            return Err(ReportError::DuplicateId { line, id });
        }
        for field in record.iter().skip(1) {
            let field = field.trim();
            if field.is_empty() {
                values.push(None);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| malformed(line, format!("not a number: {field:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(malformed(line, format!("score {v} outside [0, 1]")));
                }
                values.push(Some(v));
            }
        }
        row_ids.push(id);
    }
    Ok(ScoreMatrix::new(
        row_ids,
        example_ids,
        values,
        model_id,
        dataset_id,
    )?)
}

/// Writes the CSV and its sibling manifest.
pub fn write_matrix(
    path: &Path,
    matrix: &ScoreMatrix,
    manifest: &RunManifest,
) -> Result<(), ReportError> {
    for id in matrix.perturbation_ids() {
        if !manifest.configs.contains_key(id) {
            return Err(ReportError::ManifestMismatch(id.clone()));
        }
    }
    write_atomic(path, score_matrix_to_csv(matrix).as_bytes())?;
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    write_atomic(&manifest_path(path), json.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, ReportError> {
    let manifest: RunManifest = read_json(path)?;
    if manifest.version != FORMAT_VERSION {
        return Err(ReportError::Version(manifest.version));
    }
    Ok(manifest)
}

/// Reads a score matrix and, when present, its manifest. Without a manifest
/// the model id is the file stem and the dataset id is `unknown`.
pub fn read_matrix(path: &Path) -> Result<(ScoreMatrix, Option<RunManifest>), ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        Some(read_manifest(&mpath)?)
    } else {
        None
    };
    let (model_id, dataset_id) = match &manifest {
        Some(m) => (m.model_id.clone(), m.dataset_id.clone()),
        None => (
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            "unknown".to_string(),
        ),
    };
    let matrix = score_matrix_from_csv(&text, &model_id, &dataset_id)?;
    if let Some(m) = &manifest {
        if let Some(id) = matrix
            .perturbation_ids()
            .iter()
            .find(|id| !m.configs.contains_key(*id))
        {
            return Err(ReportError::ManifestMismatch(id.clone()));
        }
    }
    Ok((matrix, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: String,
    pub header: ArtifactHeader,
    #[serde(flatten)]
    pub report: ReliabilityReport,
}

pub fn reliability_report_json(report: &ReliabilityReport, header: ArtifactHeader) -> String {
    let file = ReportFile {
        version: FORMAT_VERSION.to_string(),
        header,
        report: report.clone(),
    };
    serde_json::to_string_pretty(&file).expect("report serializes") + "\n"
}

pub fn write_reliability_report(
    path: &Path,
    report: &ReliabilityReport,
    header: ArtifactHeader,
) -> Result<(), ReportError> {
    report.validate()?;
    write_atomic(path, reliability_report_json(report, header).as_bytes())
}

/// Reads a report and checks its n* values against its curves.
pub fn read_reliability_report(path: &Path) -> Result<ReportFile, ReportError> {
    let file: ReportFile = read_json(path)?;
    if file.version != FORMAT_VERSION {
        return Err(ReportError::Version(file.version));
    }
    file.report.validate()?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix() -> ScoreMatrix {
        ScoreMatrix::from_rows(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y,z".into()],
            vec![vec![Some(0.1), None], vec![Some(1.0 / 3.0), Some(0.0)]],
            "m",
            "d",
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = matrix();
        let text = score_matrix_to_csv(&m);
        assert!(text.starts_with("perturbation_id,x,\"y,z\"\n"));
        assert!(text.contains("a,0.1,\n"));
        assert_eq!(score_matrix_from_csv(&text, "m", "d").unwrap(), m);
    }

    #[test]
    fn csv_errors() {
        let dup = "perturbation_id,x\na,1\na,0\n";
        assert!(matches!(
            score_matrix_from_csv(dup, "m", "d"),
            Err(ReportError::DuplicateId { line: 3, .. })
        ));
        let ragged = "perturbation_id,x,y\na,1\n";
        assert!(matches!(
            score_matrix_from_csv(ragged, "m", "d"),
            Err(ReportError::MalformedFile { .. })
        ));
        let nan = "perturbation_id,x\na,high\n";
        assert!(matches!(
            score_matrix_from_csv(nan, "m", "d"),
            Err(ReportError::MalformedFile { line: 2, .. })
        ));
        let header = "id,x\na,1\n";
        assert!(matches!(
            score_matrix_from_csv(header, "m", "d"),
            Err(ReportError::MalformedFile { line: 1, .. })
        ));
        let range = "perturbation_id,x\na,1.5\n";
        assert!(matches!(
            score_matrix_from_csv(range, "m", "d"),
            Err(ReportError::MalformedFile { line: 2, .. })
        ));
    }

    #[test]
    fn pinned_timestamp() {
        // Only this test touches the variable within the unit-test binary.
        std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
        assert_eq!(created_at(), "2023-11-14T22:13:20Z");
        std::env::remove_var("SOURCE_DATE_EPOCH");
    }

    #[test]
    fn manifest_path_is_sibling() {
        assert_eq!(
            manifest_path(Path::new("/tmp/out/scores.csv")),
            PathBuf::from("/tmp/out/scores.manifest.json")
        );
    }
}
