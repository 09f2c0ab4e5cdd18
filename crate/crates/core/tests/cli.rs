mod common;

use std::path::Path;
use std::process::{Command, Output};
use std::time::Duration;

use reliable_eval::domain::{DatasetSpec, ScoreMatrix};
use reliable_eval::perturb::{ChoicePermutation, PerturbationConfig};
use reliable_eval::report::{read_reliability_report, write_matrix, ArtifactHeader, RunManifest};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reliable-eval"))
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const INVENTORY: &str = r#"
instruction_paraphrases = ["Answer the question.\n{question}\n{choices}", "{question}\nOptions:\n{choices}"]
choice_order = "identity_only"
fewshot_k = 0
qa_markers = [["", ""]]
"#;

fn write_inputs(dir: &Path, dataset: &DatasetSpec, inventory: &str) {
    std::fs::write(
        dir.join("data.json"),
        serde_json::to_string(dataset).unwrap(),
    )
    .unwrap();
    std::fs::write(dir.join("inv.toml"), inventory).unwrap();
}

fn inputs() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(dir.path(), &common::tagged_dataset(5, 4), INVENTORY);
    dir
}

fn write_scores(dir: &Path, name: &str, rows: Vec<Vec<Option<f64>>>) {
    let configs: Vec<PerturbationConfig> = (0..rows.len())
        .map(|i| PerturbationConfig::new(i, 0, 0, ChoicePermutation::Identity, vec![], 0, None))
        .collect();
    let cols = rows[0].len();
    let matrix = ScoreMatrix::from_rows(
        configs.iter().map(|c| c.config_id().to_string()).collect(),
        (0..cols).map(|i| format!("e{i}")).collect(),
        rows,
        name,
        "fixture",
    )
    .unwrap();
    let manifest = RunManifest::new(&matrix, &configs, 0, ArtifactHeader::new(None));
    write_matrix(&dir.join(format!("{name}.csv")), &matrix, &manifest).unwrap();
}

#[test]
fn space_prints_the_cardinality_and_breakdown() {
    let dir = inputs();
    let out = cli(
        dir.path(),
        &["space", "--dataset", "data.json", "--inventory", "inv.toml"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("cardinality: 48"), "{text}");
    assert!(text.contains("answer choice enumerator: 4"));
    assert!(text.contains("choice separators: 6"));
}

#[test]
fn missing_placeholder_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    write_inputs(
        dir.path(),
        &common::tagged_dataset(3, 4),
        "instruction_paraphrases = [\"{question} only\"]\nfewshot_k = 0\n",
    );
    let out = cli(
        dir.path(),
        &["space", "--dataset", "data.json", "--inventory", "inv.toml"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("{choices}"), "{}", stderr(&out));
}

#[test]
fn constant_synthetic_scores_give_n_star_one() {
    let dir = inputs();
    let p = dir.path();
    let run = cli(
        p,
        &[
            "run",
            "--dataset",
            "data.json",
            "--inventory",
            "inv.toml",
            "--synthetic",
            "constant(0.9)",
            "--count",
            "30",
            "--out",
            "c.csv",
        ],
    );
    assert!(run.status.success(), "{}", stderr(&run));
    let csv = std::fs::read_to_string(p.join("c.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').skip(1).all(|v| v == "0.9")));
    let est = cli(p, &["estimate", "--scores", "c.csv", "--out", "r.json"]);
    assert!(est.status.success(), "{}", stderr(&est));
    assert!(
        stdout(&est).contains("n* combined: 1 (stable 1)"),
        "{}",
        stdout(&est)
    );
}

#[test]
fn estimate_matches_the_brute_force_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let rows = [0.9, 0.1, 0.5, 0.45, 0.7, 0.3, 0.65, 0.2];
    write_scores(
        dir.path(),
        "ref",
        rows.iter().map(|&v| vec![Some(v)]).collect(),
    );
    let out = cli(
        dir.path(),
        &[
            "estimate",
            "--scores",
            "ref.csv",
            "--epsilon",
            "0.08",
            "--delta",
            "0.2",
            "--out",
            "r.json",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = read_reliability_report(&dir.path().join("r.json"))
        .unwrap()
        .report;
    for (m, curve) in report.per_moment_curves.iter().enumerate() {
        let oracle = common::oracle_curve(&rows, m + 1, 0.08, 0.2);
        let upper: Vec<f64> = curve.points.iter().map(|p| p.ci_upper).collect();
        assert_eq!(upper, oracle.upper);
        assert_eq!(curve.n_star, oracle.n_star);
    }
}

#[test]
fn missing_cells_are_named_and_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(
        dir.path(),
        "holes",
        vec![
            vec![Some(1.0), None],
            vec![Some(0.5), Some(0.5)],
            vec![None, None],
        ],
    );
    let out = cli(
        dir.path(),
        &["estimate", "--scores", "holes.csv", "--out", "r.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("(1 missing)") && err.contains("(2 missing)"),
        "{err}"
    );
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn constant_scores_draw_a_flat_box() {
    let dir = tempfile::tempdir().unwrap();
    write_scores(dir.path(), "flat", vec![vec![Some(0.5)]; 6]);
    let out = cli(
        dir.path(),
        &[
            "report", "--scores", "flat.csv", "--out", "box.svg", "--table", "t.csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(dir.path().join("box.svg")).unwrap();
    assert!(svg.contains("height=\"0.000\""), "{svg}");
    assert!(!svg.contains("class=\"outlier\""));
    let table = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(
        table.lines().nth(1),
        Some("flat,6,0.5,0,0.5,0.5,0.5,0.5,0.5")
    );
}

#[test]
fn every_subcommand_documents_the_defaults() {
    for sub in [
        None,
        Some("space"),
        Some("run"),
        Some("estimate"),
        Some("report"),
    ] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let out = cli(Path::new("."), &args);
        assert!(out.status.success());
        let text = stdout(&out);
        for needle in ["ε = 0.01", "δ = 0.1", "N = 100", "K = 1000", "5-shot"] {
            assert!(text.contains(needle), "{sub:?} help lacks {needle}");
        }
    }
}

#[test]
fn bad_arguments_exit_with_code_two() {
    let out = cli(Path::new("."), &["estimate", "--scores", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = inputs();
    let out = cli(
        dir.path(),
        &[
            "run",
            "--dataset",
            "data.json",
            "--inventory",
            "inv.toml",
            "--synthetic",
            "uniform(0.6, 0.2)",
            "--count",
            "2",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn model_runs_reuse_the_cache() {
    let server = common::MockServer::start(common::accuracy_responder(0.7, 1), Duration::ZERO);
    let dir = inputs();
    let p = dir.path();
    std::fs::write(
        p.join("model.toml"),
        format!(
            "id = \"mock\"\nendpoint = \"{}\"\nmodel_name = \"mock-model\"\n",
            server.base_url
        ),
    )
    .unwrap();
    let args = [
        "run",
        "--dataset",
        "data.json",
        "--inventory",
        "inv.toml",
        "--model",
        "model.toml",
        "--count",
        "6",
        "--cache-dir",
        "cache",
        "--out",
        "m.csv",
    ];
    let cold = cli(p, &args);
    assert!(cold.status.success(), "{}", stderr(&cold));
    assert!(
        stderr(&cold).starts_with("30 requests, 0 cache hits"),
        "{}",
        stderr(&cold)
    );
    let first = std::fs::read(p.join("m.csv")).unwrap();
    let warm = cli(p, &args);
    assert!(
        stderr(&warm).starts_with("0 requests, 30 cache hits"),
        "{}",
        stderr(&warm)
    );
    assert_eq!(std::fs::read(p.join("m.csv")).unwrap(), first);
    assert_eq!(server.requests(), 30);
}

#[test]
fn unreachable_endpoint_exits_with_code_one() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let dir = inputs();
    std::fs::write(
        dir.path().join("model.toml"),
        format!("id = \"gone\"\nendpoint = \"http://127.0.0.1:{port}/v1\"\nmodel_name = \"m\"\n"),
    )
    .unwrap();
    let out = cli(
        dir.path(),
        &[
            "run",
            "--dataset",
            "data.json",
            "--inventory",
            "inv.toml",
            "--model",
            "model.toml",
            "--count",
            "1",
            "--out",
            "m.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("unreachable"));
}
