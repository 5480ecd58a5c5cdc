#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sqlguard::config::PipelineConfig;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn data(name: &str) -> PathBuf {
    data_dir().join(name)
}

/// Fixture config with its database copied into `dir` and outputs under `dir/out`.
pub fn fixture_config(dir: &Path, extra: &[&str]) -> PipelineConfig {
    let db = dir.join("ehr_mini.sqlite");
    if !db.exists() {
        fs::copy(data("ehr_mini.sqlite"), &db).unwrap();
    }
    let mut overrides = vec![
        format!("paths.database={}", toml_path(&db)),
        format!("paths.output_dir={}", toml_path(&dir.join("out"))),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::load(Some(&data("pipeline.toml")), &overrides).unwrap()
}

pub fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap());
        }
    }
    out
}
