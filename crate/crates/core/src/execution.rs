//! Read-only execution of candidate SQL, validity classification, the
//! execution filter and result-set comparison.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use rusqlite::limits::Limit;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, ErrorCode, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{DecidedBy, Prediction};
use crate::sqltext;

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("cannot open database {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("{path} is not a readable SQLite database: {source}")]
    NotSqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("result comparison needs two successful executions")]
    NotOk,
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum CellValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl CellValue {
    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => CellValue::Null,
            ValueRef::Integer(i) => CellValue::Integer(i),
            ValueRef::Real(r) => CellValue::Real(r),
            ValueRef::Text(t) => CellValue::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => CellValue::Blob(b.to_vec()),
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, CellValue::Null)
    }

    fn numeric(&self) -> Option<f64> {
        match *self {
            CellValue::Integer(i) => Some(i as f64),
            CellValue::Real(r) => Some(r),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            CellValue::Null => 0,
            CellValue::Integer(_) | CellValue::Real(_) => 1,
            CellValue::Text(_) => 2,
            CellValue::Blob(_) => 3,
        }
    }

    /// Total order used to canonicalise row multisets. Numbers are ordered
    /// by their value snapped to the tolerance grid.
    fn canonical_cmp(&self, other: &Self, tol: f64) -> Ordering {
        match (self, other) {
            (CellValue::Text(a), CellValue::Text(b)) => a.cmp(b),
            (CellValue::Blob(a), CellValue::Blob(b)) => a.cmp(b),
            _ => match (self.numeric(), other.numeric()) {
                (Some(a), Some(b)) => snap(a, tol).total_cmp(&snap(b, tol)),
                _ => self.rank().cmp(&other.rank()),
            },
        }
    }

    fn matches(&self, other: &Self, tol: f64) -> bool {
        match (self, other) {
            (CellValue::Integer(a), CellValue::Integer(b)) => a == b,
            _ => match (self.numeric(), other.numeric()) {
                (Some(a), Some(b)) => a == b || (a - b).abs() <= tol || snap(a, tol) == snap(b, tol),
                (None, None) => self == other,
                _ => false,
            },
        }
    }
}

fn snap(x: f64, tol: f64) -> f64 {
    if tol > 0.0 {
        (x / tol).round() * tol
    } else {
        x
    }
}

pub type Row = Vec<CellValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ExecutionStatus {
    Ok { columns: Vec<String>, rows: Vec<Row> },
    Error { message: String },
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    Empty,
    AllNull,
    Failed,
}

impl Validity {
    pub fn is_valid(self) -> bool {
        self == Validity::Valid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    #[serde(flatten)]
    pub status: ExecutionStatus,
    pub validity: Validity,
}

impl ExecutionOutcome {
    pub fn new(status: ExecutionStatus) -> Self {
        let validity = classify_validity(&status);
        Self { status, validity }
    }
}

pub fn classify_validity(status: &ExecutionStatus) -> Validity {
    match status {
        ExecutionStatus::Error { .. } | ExecutionStatus::Timeout => Validity::Failed,
        ExecutionStatus::Ok { rows, .. } if rows.is_empty() => Validity::Empty,
        ExecutionStatus::Ok { rows, .. } if rows.iter().all(|r| r.iter().all(CellValue::is_null)) => {
            Validity::AllNull
        }
        ExecutionStatus::Ok { .. } => Validity::Valid,
    }
}

/// A read-only SQLite connection with a per-statement time budget.
pub struct ReadOnlyDb {
    conn: Connection,
    path: PathBuf,
}

impl ReadOnlyDb {
    pub fn open(path: &Path) -> Result<Self, ExecutionError> {
        if !path.is_file() {
            return Err(ExecutionError::Open {
                path: path.to_path_buf(),
                source: rusqlite::Error::InvalidPath(path.to_path_buf()),
            });
        }
        let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
        let conn = Connection::open_with_flags(path, flags).map_err(|source| ExecutionError::Open {
            path: path.to_path_buf(),
            source,
        })?;
        // Touch the catalog so a non-database file fails here, not at first query.
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
            .map_err(|source| ExecutionError::NotSqlite {
                path: path.to_path_buf(),
                source,
            })?;
        conn.pragma_update(None, "query_only", true)
            .map_err(|source| ExecutionError::Open {
                path: path.to_path_buf(),
                source,
            })?;
        let _ = conn.set_limit(Limit::SQLITE_LIMIT_ATTACHED, 0);
        Ok(Self {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    /// Runs the first statement of `sql`. Failures are folded into the outcome.
    pub fn execute(&self, sql: &str, timeout_ms: u64) -> ExecutionOutcome {
        let Some(stmt_text) = sqltext::first_statement(sql) else {
            return ExecutionOutcome::new(ExecutionStatus::Error {
                message: "empty statement".into(),
            });
        };
        let deadline = Instant::now() + Duration::from_millis(timeout_ms);
        self.conn
            .progress_handler(1_000, Some(move || Instant::now() >= deadline));
        let status = match self.run(stmt_text) {
            Ok((columns, rows)) => ExecutionStatus::Ok { columns, rows },
            Err(rusqlite::Error::SqliteFailure(e, _)) if e.code == ErrorCode::OperationInterrupted => {
                ExecutionStatus::Timeout
            }
            Err(e) => ExecutionStatus::Error {
                message: e.to_string(),
            },
        };
        self.conn.progress_handler(0, None::<fn() -> bool>);
        ExecutionOutcome::new(status)
    }

    fn run(&self, sql: &str) -> rusqlite::Result<(Vec<String>, Vec<Row>)> {
        let mut stmt = self.conn.prepare(sql)?;
        if !stmt.readonly() {
            return Err(rusqlite::Error::SqliteFailure(
                rusqlite::ffi::Error::new(rusqlite::ffi::SQLITE_READONLY),
                Some("statement would modify the database".into()),
            ));
        }
        let columns: Vec<String> = stmt.column_names().iter().map(|c| c.to_string()).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut cursor = stmt.query([])?;
        while let Some(row) = cursor.next()? {
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(CellValue::from_ref(row.get_ref(i)?));
            }
            rows.push(cells);
        }
        Ok((columns, rows))
    }
}

/// Abstains on every generated query whose execution is not `Valid`.
/// Each worker holds its own read-only connection; output order matches input.
pub fn apply_execution_filter(
    predictions: &[Prediction],
    db_path: &Path,
    timeout_ms: u64,
    parallelism: usize,
) -> Result<Vec<(Prediction, Option<ExecutionOutcome>)>, ExecutionError> {
    // Fail fast on an unopenable database before spawning workers.
    ReadOnlyDb::open(db_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| ExecutionError::Pool(e.to_string()))?;
    pool.install(|| {
        predictions
            .par_iter()
            .map_init(
                || ReadOnlyDb::open(db_path),
                |db, p| {
                    let db = db.as_ref().map_err(|e| ExecutionError::Pool(e.to_string()))?;
                    let mut p = p.clone();
                    let outcome = p.decision.sql().map(|sql| db.execute(sql, timeout_ms));
                    if let Some(o) = &outcome {
                        if !o.validity.is_valid() {
                            p.abstain(DecidedBy::ExecutionFilter);
                        }
                    }
                    Ok((p, outcome))
                },
            )
            .collect()
    })
}

/// Unordered multiset equality of rows; column names are ignored.
pub fn results_match(a: &ExecutionOutcome, b: &ExecutionOutcome, tol: f64) -> Result<bool, ExecutionError> {
    let (ExecutionStatus::Ok { rows: ra, .. }, ExecutionStatus::Ok { rows: rb, .. }) = (&a.status, &b.status)
    else {
        return Err(ExecutionError::NotOk);
    };
    Ok(rows_match(ra, rb, tol))
}

fn row_cmp(a: &Row, b: &Row, tol: f64) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.canonical_cmp(y, tol))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

pub fn rows_match(a: &[Row], b: &[Row], tol: f64) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut a: Vec<&Row> = a.iter().collect();
    let mut b: Vec<&Row> = b.iter().collect();
    a.sort_by(|x, y| row_cmp(x, y, tol));
    b.sort_by(|x, y| row_cmp(x, y, tol));
    a.iter().zip(&b).all(|(x, y)| {
        x.len() == y.len() && x.iter().zip(y.iter()).all(|(p, q)| p.matches(q, tol))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::Decision;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn fixture() -> (TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE t(a INTEGER PRIMARY KEY, b TEXT);
             INSERT INTO t VALUES (1, 'x'), (2, NULL);",
        )
        .unwrap();
        (dir, path)
    }

    fn ok(rows: Vec<Row>) -> ExecutionOutcome {
        ExecutionOutcome::new(ExecutionStatus::Ok { columns: vec![], rows })
    }

    #[test]
    fn execute_examples() {
        let (_d, path) = fixture();
        let db = ReadOnlyDb::open(&path).unwrap();
        let o = db.execute("SELECT 1", 1000);
        assert_eq!(o.validity, Validity::Valid);
        assert_eq!(
            o.status,
            ExecutionStatus::Ok { columns: vec!["1".into()], rows: vec![vec![CellValue::Integer(1)]] }
        );
        assert_eq!(db.execute("SELECT * FROM no_such_table", 1000).validity, Validity::Failed);
        assert_eq!(db.execute("SELECT NULL", 1000).validity, Validity::AllNull);
        assert_eq!(db.execute("SELECT b FROM t WHERE a = 2", 1000).validity, Validity::AllNull);
        assert_eq!(db.execute("SELECT * FROM t WHERE a > 9", 1000).validity, Validity::Empty);
        assert_eq!(db.execute("", 1000).validity, Validity::Failed);
    }

    #[test]
    fn writes_are_rejected() {
        let (_d, path) = fixture();
        let db = ReadOnlyDb::open(&path).unwrap();
        for sql in [
            "INSERT INTO t VALUES (3, 'z')",
            "DELETE FROM t",
            "DROP TABLE t",
            "CREATE TABLE u(x)",
            "ATTACH DATABASE ':memory:' AS m",
        ] {
            assert_eq!(db.execute(sql, 1000).validity, Validity::Failed, "{sql}");
        }
        assert_eq!(db.execute("SELECT count(*) FROM t", 1000).validity, Validity::Valid);
    }

    #[test]
    fn only_first_statement_runs() {
        let (_d, path) = fixture();
        let db = ReadOnlyDb::open(&path).unwrap();
        let o = db.execute("SELECT 1; SELECT 2, 3", 1000);
        assert_eq!(
            o.status,
            ExecutionStatus::Ok { columns: vec!["1".into()], rows: vec![vec![CellValue::Integer(1)]] }
        );
    }

    #[test]
    fn runaway_query_times_out() {
        let (_d, path) = fixture();
        let db = ReadOnlyDb::open(&path).unwrap();
        let o = db.execute(
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c",
            100,
        );
        assert_eq!(o.status, ExecutionStatus::Timeout);
        assert_eq!(o.validity, Validity::Failed);
        // The handler is cleared afterwards.
        assert_eq!(db.execute("SELECT 1", 100).validity, Validity::Valid);
    }

    #[test]
    fn open_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ReadOnlyDb::open(&dir.path().join("missing.db")), Err(ExecutionError::Open { .. })));
        let junk = dir.path().join("junk.db");
        std::fs::write(&junk, b"definitely not sqlite, just some bytes padded out to look bigger..").unwrap();
        assert!(matches!(ReadOnlyDb::open(&junk), Err(ExecutionError::NotSqlite { .. })));
    }

    #[test]
    fn classification_table() {
        use CellValue::*;
        assert_eq!(classify_validity(&ExecutionStatus::Ok { columns: vec![], rows: vec![vec![Integer(1)], vec![Integer(2)]] }), Validity::Valid);
        assert_eq!(classify_validity(&ExecutionStatus::Ok { columns: vec![], rows: vec![] }), Validity::Empty);
        assert_eq!(classify_validity(&ExecutionStatus::Ok { columns: vec![], rows: vec![vec![Null, Null]] }), Validity::AllNull);
        assert_eq!(classify_validity(&ExecutionStatus::Ok { columns: vec![], rows: vec![vec![Null, Integer(0)]] }), Validity::Valid);
        assert_eq!(classify_validity(&ExecutionStatus::Timeout), Validity::Failed);
        assert_eq!(classify_validity(&ExecutionStatus::Error { message: "x".into() }), Validity::Failed);
    }

    #[test]
    fn execution_filter_examples() {
        let (_d, path) = fixture();
        let preds = vec![
            Prediction::new("a", Decision::Generate("SELECT 1".into()), DecidedBy::Postprocess, Some(0.1)),
            Prediction::new("b", Decision::Generate("SELECT * FROM nope".into()), DecidedBy::Postprocess, Some(0.1)),
            Prediction::new("c", Decision::Abstain, DecidedBy::Model, None),
        ];
        let out = apply_execution_filter(&preds, &path, 1000, 2).unwrap();
        assert_eq!(out[0].0, preds[0]);
        assert_eq!(out[1].0.decision, Decision::Abstain);
        assert_eq!(out[1].0.decided_by, DecidedBy::ExecutionFilter);
        assert_eq!(out[1].1.as_ref().unwrap().validity, Validity::Failed);
        assert_eq!(out[2].0, preds[2]);
        assert!(out[2].1.is_none());

        let again: Vec<Prediction> = apply_execution_filter(
            &out.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>(),
            &path,
            1000,
            1,
        )
        .unwrap()
        .into_iter()
        .map(|(p, _)| p)
        .collect();
        assert_eq!(again, out.into_iter().map(|(p, _)| p).collect::<Vec<_>>());
    }

    #[test]
    fn match_examples() {
        use CellValue::*;
        assert!(results_match(&ok(vec![vec![Integer(1)], vec![Integer(2)]]), &ok(vec![vec![Integer(2)], vec![Integer(1)]]), 1e-6).unwrap());
        assert!(!results_match(&ok(vec![vec![Integer(1)]]), &ok(vec![vec![Integer(1)], vec![Integer(1)]]), 1e-6).unwrap());
        assert!(results_match(&ok(vec![vec![Real(0.3333333)]]), &ok(vec![vec![Real(1.0 / 3.0)]]), 1e-6).unwrap());
        assert!(!results_match(&ok(vec![vec![Real(0.3333333)]]), &ok(vec![vec![Real(1.0 / 3.0)]]), 0.0).unwrap());
        assert!(results_match(&ok(vec![vec![Integer(2)]]), &ok(vec![vec![Real(2.0)]]), 0.0).unwrap());
        assert!(!results_match(&ok(vec![vec![Text("1".into())]]), &ok(vec![vec![Integer(1)]]), 0.0).unwrap());
        assert!(results_match(&ok(vec![vec![Null, Text("a".into())]]), &ok(vec![vec![Null, Text("a".into())]]), 0.0).unwrap());
        assert!(matches!(
            results_match(&ExecutionOutcome::new(ExecutionStatus::Timeout), &ok(vec![]), 0.0),
            Err(ExecutionError::NotOk)
        ));
    }

    fn cell() -> impl Strategy<Value = CellValue> {
        prop_oneof![
            Just(CellValue::Null),
            (-3i64..3).prop_map(CellValue::Integer),
            (-3i64..3).prop_map(|x| CellValue::Real(x as f64 * 0.5)),
            "[ab]{0,2}".prop_map(CellValue::Text),
        ]
    }

    fn rows() -> impl Strategy<Value = Vec<Row>> {
        prop::collection::vec(prop::collection::vec(cell(), 2), 0..6)
    }

    proptest! {
        #[test]
        fn match_is_symmetric_and_reflexive(a in rows(), b in rows(), tol in 0.0f64..1e-3) {
            prop_assert!(rows_match(&a, &a, tol));
            prop_assert_eq!(rows_match(&a, &b, tol), rows_match(&b, &a, tol));
        }

        #[test]
        fn match_ignores_order(a in rows(), seed in any::<u64>()) {
            let mut b = a.clone();
            if !b.is_empty() {
                let k = (seed as usize) % b.len();
                b.rotate_left(k);
                b.reverse();
            }
            prop_assert!(rows_match(&a, &b, 0.0));
        }

        #[test]
        fn exact_match_is_transitive(a in rows(), b in rows(), c in rows()) {
            if rows_match(&a, &b, 0.0) && rows_match(&b, &c, 0.0) {
                prop_assert!(rows_match(&a, &c, 0.0));
            }
        }
    }
}
