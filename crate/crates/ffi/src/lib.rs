//! C ABI over the sqlguard core.
//!
//! Every fallible function returns an [`SgStatus`]. On failure a message is
//! stored per thread and can be read with [`sg_last_error_message`].
//! Handles are opaque and must be released with their matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sqlguard::confidence::{calibrate_threshold, token_entropy};
use sqlguard::execution::ReadOnlyDb;
use sqlguard::generation::{postprocess, Postprocessed};
use sqlguard::reliability::{score, GoldKind, InstanceOutcome, Penalty};
use sqlguard::Validity;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    Database = 4,
    Empty = 5,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgValidity {
    Valid = 0,
    Empty = 1,
    AllNull = 2,
    Failed = 3,
}

impl From<Validity> for SgValidity {
    fn from(v: Validity) -> Self {
        match v {
            Validity::Valid => SgValidity::Valid,
            Validity::Empty => SgValidity::Empty,
            Validity::AllNull => SgValidity::AllNull,
            Validity::Failed => SgValidity::Failed,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SgOutcomeCounts {
    pub ans_correct: usize,
    pub ans_wrong: usize,
    pub ans_abstain: usize,
    pub una_attempt: usize,
    pub una_abstain: usize,
}

/// Accumulates per-question outcomes and reports reliability scores.
pub struct SgScorer {
    outcomes: Vec<InstanceOutcome>,
}

/// Read-only connection to a SQLite database.
pub struct SgDatabase {
    db: ReadOnlyDb,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: SgStatus, msg: impl Into<String>) -> SgStatus {
    set_error(msg);
    status
}

/// Clears the stored error, then runs `f`, converting panics into [`SgStatus::Panic`].
fn guard(f: impl FnOnce() -> SgStatus) -> SgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(SgStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SgStatus> {
    if p.is_null() {
        return Err(fail(SgStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SgStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], SgStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SgStatus::NullPointer, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! out_ptr {
    ($p:expr) => {
        if $p.is_null() {
            return fail(SgStatus::NullPointer, concat!(stringify!($p), " is null"));
        }
    };
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next sqlguard call on the same thread.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Entropy in nats of one token position given its top alternatives as log-probabilities.
///
/// # Safety
/// `logprobs` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_token_entropy(logprobs: *const f64, len: usize, out: *mut f64) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        let lps = tri!(slice_arg(logprobs, len, "logprobs"));
        match token_entropy(lps) {
            Ok(h) => {
                *out = h;
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Nearest-rank entropy threshold covering share `rho` of the population.
///
/// # Safety
/// `entropies` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_calibrate_threshold(entropies: *const f64, len: usize, rho: f64, out: *mut f64) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        let values = tri!(slice_arg(entropies, len, "entropies"));
        match calibrate_threshold(values, rho) {
            Ok(t) => {
                *out = t.value;
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Extracts the SQL statement from raw model text. `*out_sql` receives a
/// newly allocated string, or null when the text is an abstention. Release
/// it with [`sg_string_free`].
///
/// # Safety
/// `raw` must be a nul-terminated string; `out_sql` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_postprocess(raw: *const c_char, out_sql: *mut *mut c_char) -> SgStatus {
    guard(|| {
        out_ptr!(out_sql);
        *out_sql = ptr::null_mut();
        let text = tri!(str_arg(raw, "raw"));
        if let Postprocessed::Generate(sql) = postprocess(text) {
            // Statements come from a nul-free &str, so this cannot fail.
            *out_sql = CString::new(sql).expect("no interior nul").into_raw();
        }
        SgStatus::Ok
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[no_mangle]
pub extern "C" fn sg_scorer_new() -> *mut SgScorer {
    Box::into_raw(Box::new(SgScorer { outcomes: Vec::new() }))
}

/// Records one question. `correct` is ignored unless the question is
/// answerable and a query was generated.
///
/// # Safety
/// `scorer` must be a live handle from [`sg_scorer_new`].
#[no_mangle]
pub unsafe extern "C" fn sg_scorer_push(scorer: *mut SgScorer, answerable: c_int, generated: c_int, correct: c_int) -> SgStatus {
    guard(|| {
        let Some(s) = scorer.as_mut() else {
            return fail(SgStatus::NullPointer, "scorer is null");
        };
        let kind = if answerable != 0 { GoldKind::Answerable } else { GoldKind::Unanswerable };
        let id = s.outcomes.len().to_string();
        s.outcomes.push(InstanceOutcome::new(id, kind, generated != 0, correct != 0));
        SgStatus::Ok
    })
}

unsafe fn scorer_rs(scorer: *const SgScorer, penalty: Penalty, out: *mut f64) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        let Some(s) = scorer.as_ref() else {
            return fail(SgStatus::NullPointer, "scorer is null");
        };
        if s.outcomes.is_empty() {
            return fail(SgStatus::Empty, "no outcomes recorded");
        }
        match score(&s.outcomes, &[penalty]) {
            Ok(r) => {
                *out = r.rs[0].1;
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Reliability score (percent) with a fixed penalty.
///
/// # Safety
/// `scorer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_scorer_rs(scorer: *const SgScorer, penalty: f64, out: *mut f64) -> SgStatus {
    if !(penalty.is_finite() && penalty >= 0.0) {
        return fail(SgStatus::InvalidArgument, format!("penalty must be finite and non-negative, got {penalty}"));
    }
    scorer_rs(scorer, Penalty::Fixed(penalty), out)
}

/// Reliability score (percent) with the penalty set to the number of recorded outcomes.
///
/// # Safety
/// `scorer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_scorer_rs_population(scorer: *const SgScorer, out: *mut f64) -> SgStatus {
    scorer_rs(scorer, Penalty::PopulationSize, out)
}

/// # Safety
/// `scorer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_scorer_counts(scorer: *const SgScorer, out: *mut SgOutcomeCounts) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        let Some(s) = scorer.as_ref() else {
            return fail(SgStatus::NullPointer, "scorer is null");
        };
        let mut c = SgOutcomeCounts::default();
        for o in &s.outcomes {
            match (o.gold_kind, o.generated, o.correct) {
                (GoldKind::Answerable, true, Some(true)) => c.ans_correct += 1,
                (GoldKind::Answerable, true, _) => c.ans_wrong += 1,
                (GoldKind::Answerable, false, _) => c.ans_abstain += 1,
                (GoldKind::Unanswerable, true, _) => c.una_attempt += 1,
                (GoldKind::Unanswerable, false, _) => c.una_abstain += 1,
            }
        }
        *out = c;
        SgStatus::Ok
    })
}

/// # Safety
/// `scorer` must come from [`sg_scorer_new`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_scorer_free(scorer: *mut SgScorer) {
    if !scorer.is_null() {
        drop(Box::from_raw(scorer));
    }
}

/// Opens a database read-only.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sg_db_open(path: *const c_char, out: *mut *mut SgDatabase) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        *out = ptr::null_mut();
        let path = tri!(str_arg(path, "path"));
        match ReadOnlyDb::open(Path::new(path)) {
            Ok(db) => {
                *out = Box::into_raw(Box::new(SgDatabase { db }));
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::Database, e.to_string()),
        }
    })
}

/// Executes the first statement of `sql` and classifies the result. Query
/// errors and timeouts are reported as [`SgValidity::Failed`], not as a
/// non-OK status; the error text is still available from
/// [`sg_last_error_message`].
///
/// # Safety
/// `db` must be a live handle; `sql` a nul-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sg_db_classify(db: *const SgDatabase, sql: *const c_char, timeout_ms: u64, out: *mut SgValidity) -> SgStatus {
    guard(|| {
        out_ptr!(out);
        let Some(handle) = db.as_ref() else {
            return fail(SgStatus::NullPointer, "db is null");
        };
        let sql = tri!(str_arg(sql, "sql"));
        let outcome = handle.db.execute(sql, timeout_ms);
        *out = outcome.validity.into();
        match outcome.status {
            sqlguard::execution::ExecutionStatus::Error { message } => set_error(message),
            sqlguard::execution::ExecutionStatus::Timeout => set_error("timeout"),
            _ => {}
        }
        SgStatus::Ok
    })
}

/// # Safety
/// `db` must come from [`sg_db_open`] and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sg_db_free(db: *mut SgDatabase) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}
