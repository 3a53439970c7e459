use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn livekt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_livekt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth_csv(dir: &Path, students: usize) -> PathBuf {
    let csv = dir.join("synth.csv");
    let o = livekt(&["synth", "--out", p(&csv), "--students", &students.to_string(), "--questions", "30", "--skills", "5", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    csv
}

fn tiny_weights(dir: &Path) -> PathBuf {
    let w = dir.join("tiny.lktw");
    let o = livekt(&[
        "pretrain", "--out", p(&w), "--episodes", "0", "--d-model", "8", "--heads", "2", "--blocks", "1", "--d-ff", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    w
}

#[test]
fn ingest_prints_stats_and_rejects_reingest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 40);
    let bin = dir.path().join("d.lktd");
    let o = livekt(&["ingest", "--data", p(&csv), "--out", p(&bin)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("students=40 questions=30 skills=5 interactions="), "{}", stdout(&o));
    let again = livekt(&["ingest", "--data", p(&bin), "--out", p(&dir.path().join("x.lktd"))]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn empty_csv_names_missing_header() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("empty.csv");
    std::fs::write(&csv, "").unwrap();
    let o = livekt(&["ingest", "--data", p(&csv), "--out", p(&dir.path().join("d.lktd"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("student_id"), "{}", stderr(&o));
}

#[test]
fn malformed_row_is_usage_error_unless_lenient() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "student_id,question_id,skill_id,correct,timestamp\nu1,q1,k1,1,1\nu1,q2,k1,7,2\nu1,q3,k1,0,3\n").unwrap();
    let out = dir.path().join("d.lktd");
    let strict = livekt(&["ingest", "--data", p(&csv), "--out", p(&out)]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(stderr(&strict).contains('3'), "{}", stderr(&strict));
    let lenient = livekt(&["ingest", "--data", p(&csv), "--out", p(&out), "--lenient"]);
    assert!(lenient.status.success(), "{}", stderr(&lenient));
    assert!(stdout(&lenient).contains("interactions=2"));
}

#[test]
fn eval_single_model_table_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 80);
    let out = dir.path().join("results");
    let o = livekt(&["eval", "--data", p(&csv), "--models", "majority", "--T", "5,10", "--out", p(&out), "--emit", "json,csv,svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("majority")).count(), 1, "{text}");
    for f in ["results.json", "results.csv", "results.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv_text = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv_text.lines().count(), 3);
}

#[test]
fn eval_two_models_prints_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 80);
    let o = livekt(&["eval", "--data", p(&csv), "--models", "majority,lr", "--T", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("time ratio = "), "{}", stdout(&o));
}

#[test]
fn eval_unknown_model_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 20);
    let o = livekt(&["eval", "--data", p(&csv), "--models", "dkt"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for name in ["majority", "lr", "gbdt", "minipfn"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn eval_reads_config_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 60);
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, format!("data = {:?}\nmodels = [\"gbdt\"]\nT = [5]\n[gbdt]\nn_trees = 5\n", p(&csv))).unwrap();
    let o = livekt(&["eval", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("gbdt")));
    std::fs::write(&cfg, "colour = 3\n").unwrap();
    assert_eq!(livekt(&["eval", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn eval_minipfn_with_weights() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synth_csv(dir.path(), 60);
    let w = tiny_weights(dir.path());
    let o = livekt(&["eval", "--data", p(&csv), "--models", "minipfn,majority", "--T", "5", "--weights", p(&w)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("minipfn")));
    let missing = livekt(&["eval", "--data", p(&csv), "--models", "minipfn", "--T", "5"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let w = dir.path().join(name);
        let o = livekt(&[
            "pretrain", "--out", p(&w), "--episodes", "200", "--batch", "4", "--d-model", "8", "--heads", "2", "--blocks", "1",
            "--d-ff", "16", "--max-students", "30", "--max-horizon", "5", "--seed", "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        w
    };
    let a = run("a.lktw");
    let b = run("b.lktw");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let curve = std::fs::read_to_string(dir.path().join("a.lktw.loss.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("episode,smoothed_loss"));
    assert_eq!(curve.lines().count(), 1 + 2);
}

#[test]
fn explain_prints_ranked_weights() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("two.csv");
    std::fs::write(&csv, "student_id,question_id,skill_id,correct,timestamp\na,q1,k1,1,1\na,q2,k1,0,2\nb,q2,k1,0,1\nb,q1,k1,1,2\n").unwrap();
    let w = tiny_weights(dir.path());
    let mut test_student = None;
    for s in ["a", "b"] {
        let o = livekt(&["explain", "--weights", p(&w), "--data", p(&csv), "--student", s, "--T", "2", "--k", "1", "--split-ratio", "0.5"]);
        if o.status.success() {
            let lines: Vec<String> = stdout(&o).lines().filter(|l| !l.starts_with('#')).map(String::from).collect();
            let other = if s == "a" { "b" } else { "a" };
            assert_eq!(lines, vec![format!("1, {other}, 1.000")]);
            test_student = Some(s);
        } else {
            assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
        }
    }
    assert!(test_student.is_some());
    let unknown = livekt(&["explain", "--weights", p(&w), "--data", p(&csv), "--student", "zzz", "--T", "2"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn bench_reports_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let w = tiny_weights(dir.path());
    let out = dir.path().join("bench");
    let o = livekt(&["bench", "--weights", p(&w), "--sizes", "32,64", "--T", "3,5", "--repeats", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("slope_N="));
    assert!(out.join("bench.csv").exists());
    let single = livekt(&["bench", "--weights", p(&w), "--sizes", "32", "--T", "3", "--repeats", "1"]);
    assert!(stdout(&single).contains("slope_N=NA"), "{}", stdout(&single));
}

#[test]
fn bad_thread_env_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_livekt"))
        .args(["synth", "--out", "/dev/null", "--students", "2"])
        .env("LIVEKT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
