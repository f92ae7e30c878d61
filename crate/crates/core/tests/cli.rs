use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quotasteer::generator::{write_fixture, GenerationResponse};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quotasteer"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const GENDER: &str = r#"
n = 20
[target]
name = "gender"
kind = "nominal"
labels = ["male", "female"]
weights = [0.5, 0.5]
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn run_writes_all_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("race");
    let cfg = configs().join("race-uniform.toml");
    let o = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "trace.jsonl",
        "report.json",
        "histogram.csv",
        "target.csv",
        "choices.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist, fs::read_to_string(out.join("target.csv")).unwrap());
    assert!(hist.starts_with("label,count\nBlack,6\n"), "{hist}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "quotasteer.report.v1");
    assert_eq!(report["converged"], true);
}

#[test]
fn seed_override_changes_the_trace_only_when_it_differs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("gender-90-10.toml");
    let trace = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = run(&[
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        fs::read(out.join("trace.jsonl")).unwrap()
    };
    assert_eq!(trace("5", "a"), trace("5", "b"));
    assert_ne!(trace("5", "a"), trace("6", "c"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        run(&["run", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );

    // mock without a seed
    let cfg = write_config(
        dir.path(),
        &format!("{GENDER}[generator]\nbackend = \"mock\"\n"),
    );
    assert_eq!(run(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));

    // weights that do not sum to one
    let bad = GENDER.replace("[0.5, 0.5]", "[0.5, 0.6]");
    let cfg = write_config(
        dir.path(),
        &format!("seed = 1\n{bad}[generator]\nbackend = \"mock\"\n"),
    );
    assert_eq!(run(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn exhausted_retries_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // the mock never produces "female" and ignores the menu
    let cfg = write_config(
        dir.path(),
        &format!(
            "seed = 1\nmax_retries = 2\nout_dir = \"out\"\n{GENDER}[generator]\nbackend = \"mock\"\n\
             weights = [1.0, 0.0]\ncompliance = 0.0\n"
        ),
    );
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["converged"], false);
    assert!(report["unmatched"].as_u64().unwrap() > 0);
}

#[test]
fn fixture_exhaustion_exits_four_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let responses: Vec<GenerationResponse> = (0..7)
        .map(|i| GenerationResponse {
            claimed_label: Some(if i % 2 == 0 { "male" } else { "female" }.to_string()),
            image_ref: format!("fx{i}"),
        })
        .collect();
    fs::write(dir.path().join("fixture.jsonl"), write_fixture(&responses)).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("out_dir = \"out\"\n{GENDER}[generator]\nbackend = \"fixture\"\npath = \"fixture.jsonl\"\n"),
    );
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    let trace = fs::read_to_string(dir.path().join("out/trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 7);
}

#[test]
fn ablate_exits_zero_and_shows_bias() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    let cfg = configs().join("gender-ablate.toml");
    let o = run(&[
        "ablate",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    let male: u64 = hist
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(male > 950, "{hist}");
}

#[test]
fn trace_export_lists_accepted_generations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let cfg = configs().join("gender-90-10.toml");
    assert_eq!(
        run(&[
            "run",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--batch-size",
            "3"
        ])
        .status
        .code(),
        Some(0)
    );
    let o = run(&["trace-export", out.join("report.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("index,step,iteration,subgroup,label,running_tv")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50);
    assert_eq!(rows.last().unwrap().rsplit(',').next(), Some("0.000000"));
    assert_eq!(csv, fs::read_to_string(out.join("choices.csv")).unwrap());
}

#[test]
fn metrics_command_reports_all_three() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "label,count\nlow,4\nmid,0\nhigh,0\n").unwrap();
    fs::write(&b, "label,count\nlow,0\nmid,0\nhigh,2\n").unwrap();
    let o = run(&[
        "metrics",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--ground",
        "linear",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["emd"], 2.0);
    assert_eq!(v["tv"], 1.0);
    assert_eq!(v["js_div"], 1.0);
}

#[test]
fn kappa_command_scores_coder_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(
        &a,
        "item_id,coder_id,schema_name,label\n1,ann1,gender,Male\n2,ann1,gender,Female\n",
    )
    .unwrap();
    fs::write(&b, "1,ann2,gender,Male\n2,ann2,gender,Female\n").unwrap();
    let o = run(&["kappa", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["kappa"], 1.0);
    assert_eq!(v["robust"], true);
}

#[test]
fn simulate_prints_exact_probability() {
    let o = run(&[
        "simulate", "--k", "9", "--b", "5", "--trials", "40", "--runs", "2000", "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["analysis"]["p"], "5/9");
    assert!((v["analysis"]["expected"].as_f64().unwrap() - 22.222).abs() < 1e-3);
}
