mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::data;

fn sqlguard(dir: &Path, args: &[&str]) -> Output {
    let db = dir.join("ehr_mini.sqlite");
    if !db.exists() {
        fs::copy(data("ehr_mini.sqlite"), &db).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_sqlguard"))
        .arg("--config")
        .arg(data("pipeline.toml"))
        .arg("--output-dir")
        .arg(dir.join("out"))
        .arg("--database")
        .arg(&db)
        .args(args)
        .env_remove("SQLGUARD_TEST_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqlguard(dir.path(), &["run"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("20 predictions, 3 filter abstentions"));
    assert!(text.contains("added 9 pseudo-null samples"));
    let row = text.lines().find(|l| l.starts_with("dev")).unwrap();
    let values: Vec<&str> = row.split_whitespace().skip(1).collect();
    assert_eq!(values, ["75.00", "25.00", "-25.00", "-125.00"]);
}

#[test]
fn stagewise_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sqlguard(dir.path(), &["generate"]).status.code(), Some(0));
    let o = sqlguard(dir.path(), &["filter", "--order", "execution_then_entropy"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("population 11"));
    let o = sqlguard(dir.path(), &["augment", "--k", "3"]);
    assert!(stdout(&o).contains("added 3 pseudo-null samples"));
    let lines = fs::read_to_string(dir.path().join("out/augmented_train.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 11);
    let o = sqlguard(dir.path(), &["score", "--format", "json", "--label", "exec-first"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report[0]["label"], "exec-first");
    assert_eq!(report[0]["rs"]["5"], 50.0);
}

#[test]
fn schema_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqlguard(dir.path(), &["schema"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sqlguard(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(sqlguard(dir.path(), &["filter", "--rho", "1.5"]).status.code(), Some(1));
    assert_eq!(sqlguard(dir.path(), &["filter", "--order", "sideways"]).status.code(), Some(1));
    assert_eq!(sqlguard(dir.path(), &["--set", "filter.bogus=1", "schema"]).status.code(), Some(1));
    assert_eq!(sqlguard(dir.path(), &["augment", "--k", "0"]).status.code(), Some(1));
    assert_eq!(sqlguard(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_database_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.sqlite");
    let o = Command::new(env!("CARGO_BIN_EXE_sqlguard"))
        .arg("--config")
        .arg(data("pipeline.toml"))
        .arg("--output-dir")
        .arg(dir.path().join("out"))
        .arg("--database")
        .arg(&missing)
        .arg("generate")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("paths.database"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let partial = dir.path().join("labels.json");
    fs::write(&partial, r#"{"dev-01": "null"}"#).unwrap();
    assert_eq!(sqlguard(dir.path(), &["generate"]).status.code(), Some(0));
    let o = sqlguard(dir.path(), &["score", "--predictions", dir.path().join("out/predictions.generated.json").to_str().unwrap(), "--labels", partial.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dev-02"));
}

#[test]
fn backend_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = sqlguard(
        dir.path(),
        &["--set", "backend.kind=\"http\"", "--set", "backend.api_key_env=\"SQLGUARD_TEST_KEY\"", "generate"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("SQLGUARD_TEST_KEY"));
}
