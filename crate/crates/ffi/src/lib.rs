//! C ABI over the flakemine library.
//!
//! Every fallible function returns a [`FlakemineStatus`]; on failure the
//! message is available from [`flakemine_last_error`] on the same thread.
//! Objects are handed out as opaque pointers and must be released with the
//! matching `*_free` function. Strings returned by accessors are owned by
//! their object and stay valid until it is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use flakemine::classifier::{self, FlakinessVerdict};
use flakemine::execution::derive_run_seed;
use flakemine::input::{parse_input_csv, InputRow};
use flakemine::junit::Verdict;
use flakemine::overview::{build_tests_overview, write_overview_csv, OverviewRow};
use flakemine::store::discover_results;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlakemineStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Outcome of one test in one run.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlakemineVerdict {
    Passed = 0,
    Failed = 1,
    Error = 2,
    Skipped = 3,
}

impl From<FlakemineVerdict> for Verdict {
    fn from(v: FlakemineVerdict) -> Self {
        match v {
            FlakemineVerdict::Passed => Verdict::Passed,
            FlakemineVerdict::Failed => Verdict::Failed,
            FlakemineVerdict::Error => Verdict::Error,
            FlakemineVerdict::Skipped => Verdict::Skipped,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlakemineFlakiness {
    NotFlaky = 0,
    NonOrderDependent = 1,
    OrderDependent = 2,
    Infrastructure = 3,
}

impl From<FlakinessVerdict> for FlakemineFlakiness {
    fn from(v: FlakinessVerdict) -> Self {
        match v {
            FlakinessVerdict::NotFlaky => FlakemineFlakiness::NotFlaky,
            FlakinessVerdict::NonOrderDependent => FlakemineFlakiness::NonOrderDependent,
            FlakinessVerdict::OrderDependent => FlakemineFlakiness::OrderDependent,
            FlakinessVerdict::Infrastructure => FlakemineFlakiness::Infrastructure,
        }
    }
}

/// Verdict counts of one overview row.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlakemineCounts {
    pub passed_same: u64,
    pub failed_same: u64,
    pub error_same: u64,
    pub skipped_same: u64,
    pub passed_random: u64,
    pub failed_random: u64,
    pub error_random: u64,
    pub skipped_random: u64,
}

/// Parsed input-csv.
pub struct FlakemineInput {
    rows: Vec<InputRow>,
    names: Vec<CString>,
    urls: Vec<CString>,
}

/// Tests-overview built from a results tree.
pub struct FlakemineOverview {
    rows: Vec<OverviewRow>,
    projects: Vec<CString>,
    tests: Vec<CString>,
}

struct Failure(FlakemineStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FlakemineStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            FlakemineStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            FlakemineStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(Failure(FlakemineStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(FlakemineStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn c_string(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).unwrap_or_default()
}

fn null_out(what: &str) -> Failure {
    Failure(FlakemineStatus::NullArgument, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn flakemine_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn flakemine_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Seed of random-order run `run` in iteration `iteration`. Without a base
/// seed (`has_base_seed` false) the run index is the seed.
#[no_mangle]
pub extern "C" fn flakemine_derive_run_seed(has_base_seed: bool, base_seed: u64, iteration: u64, run: u64) -> u64 {
    derive_run_seed(has_base_seed.then_some(base_seed), iteration, run)
}

/// Whether a sequence of verdicts contains a pass and a failure or error.
///
/// # Safety
/// `verdicts` must point to `len` valid values (or be null with `len` 0);
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn flakemine_is_flaky(verdicts: *const FlakemineVerdict, len: usize, out: *mut bool) -> FlakemineStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let slice = if len == 0 {
            &[][..]
        } else if verdicts.is_null() {
            return Err(null_out("verdicts"));
        } else {
            std::slice::from_raw_parts(verdicts, len)
        };
        let verdicts: Vec<Verdict> = slice.iter().map(|v| Verdict::from(*v)).collect();
        *out = classifier::is_flaky(&verdicts);
        Ok(())
    })
}

/// Parses an input-csv file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_parse(path: *const c_char, out: *mut *mut FlakemineInput) -> FlakemineStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let path = path_arg(path, "path")?;
        let rows = parse_input_csv(&path).map_err(|e| {
            let status = match e {
                flakemine::input::InputError::Io { .. } => FlakemineStatus::Io,
                _ => FlakemineStatus::Parse,
            };
            Failure(status, e.to_string())
        })?;
        let input = FlakemineInput {
            names: rows.iter().map(|r| c_string(&r.project_name)).collect(),
            urls: rows.iter().map(|r| c_string(&r.project_url)).collect(),
            rows,
        };
        *out = Box::into_raw(Box::new(input));
        Ok(())
    })
}

/// Number of rows; 0 for null.
///
/// # Safety
/// `input` must be null or come from [`flakemine_input_parse`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_len(input: *const FlakemineInput) -> usize {
    input.as_ref().map_or(0, |i| i.rows.len())
}

/// Project name of row `index`, or null if out of range.
///
/// # Safety
/// `input` must be null or come from [`flakemine_input_parse`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_project_name(input: *const FlakemineInput, index: usize) -> *const c_char {
    input
        .as_ref()
        .and_then(|i| i.names.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Project URL of row `index`, or null if out of range.
///
/// # Safety
/// `input` must be null or come from [`flakemine_input_parse`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_project_url(input: *const FlakemineInput, index: usize) -> *const c_char {
    input
        .as_ref()
        .and_then(|i| i.urls.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Input-csv line on which row `index` starts, or 0 if out of range.
///
/// # Safety
/// `input` must be null or come from [`flakemine_input_parse`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_line_number(input: *const FlakemineInput, index: usize) -> u64 {
    input
        .as_ref()
        .and_then(|i| i.rows.get(index))
        .map_or(0, |r| r.line_number)
}

/// # Safety
/// `input` must be null or come from [`flakemine_input_parse`], and is
/// invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn flakemine_input_free(input: *mut FlakemineInput) {
    if !input.is_null() {
        drop(Box::from_raw(input));
    }
}

/// Discovers all results-directories below `path` and builds the
/// tests-overview over them.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_build(path: *const c_char, out: *mut *mut FlakemineOverview) -> FlakemineStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_out("out"));
        }
        let path = path_arg(path, "path")?;
        if !path.is_dir() {
            return Err(Failure(FlakemineStatus::Io, format!("{}: not a directory", path.display())));
        }
        let overview = build_tests_overview(&discover_results(&path).results);
        let handle = FlakemineOverview {
            projects: overview.rows.iter().map(|r| c_string(&r.project.name)).collect(),
            tests: overview.rows.iter().map(|r| c_string(&r.test.name)).collect(),
            rows: overview.rows,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Number of rows, flaky or not; 0 for null.
///
/// # Safety
/// `overview` must be null or come from [`flakemine_overview_build`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_len(overview: *const FlakemineOverview) -> usize {
    overview.as_ref().map_or(0, |o| o.rows.len())
}

/// # Safety
/// `overview` must be null or come from [`flakemine_overview_build`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_project_name(overview: *const FlakemineOverview, index: usize) -> *const c_char {
    overview
        .as_ref()
        .and_then(|o| o.projects.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `overview` must be null or come from [`flakemine_overview_build`].
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_test_name(overview: *const FlakemineOverview, index: usize) -> *const c_char {
    overview
        .as_ref()
        .and_then(|o| o.tests.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Verdict and counts of row `index`.
///
/// # Safety
/// `overview` must come from [`flakemine_overview_build`]; `verdict` and
/// `counts` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_row(
    overview: *const FlakemineOverview,
    index: usize,
    verdict: *mut FlakemineFlakiness,
    counts: *mut FlakemineCounts,
) -> FlakemineStatus {
    guard(|| {
        let overview = overview.as_ref().ok_or_else(|| null_out("overview"))?;
        let row = overview
            .rows
            .get(index)
            .ok_or_else(|| Failure(FlakemineStatus::OutOfRange, format!("row {index} of {}", overview.rows.len())))?;
        if !verdict.is_null() {
            *verdict = row.verdict.into();
        }
        if !counts.is_null() {
            let (s, r) = (&row.counts.same, &row.counts.random);
            *counts = FlakemineCounts {
                passed_same: s.passed,
                failed_same: s.failed,
                error_same: s.error,
                skipped_same: s.skipped,
                passed_random: r.passed,
                failed_random: r.failed,
                error_random: r.error,
                skipped_random: r.skipped,
            };
        }
        Ok(())
    })
}

/// Writes the tests-overview CSV to `path`.
///
/// # Safety
/// `overview` must come from [`flakemine_overview_build`] and `path` be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_write_csv(
    overview: *const FlakemineOverview,
    path: *const c_char,
    include_not_flaky: bool,
) -> FlakemineStatus {
    guard(|| {
        let overview = overview.as_ref().ok_or_else(|| null_out("overview"))?;
        let path = path_arg(path, "path")?;
        write_overview_csv(&overview.rows, &path, include_not_flaky)
            .map_err(|e| Failure(FlakemineStatus::Io, e.to_string()))
    })
}

/// # Safety
/// `overview` must be null or come from [`flakemine_overview_build`], and
/// is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn flakemine_overview_free(overview: *mut FlakemineOverview) {
    if !overview.is_null() {
        drop(Box::from_raw(overview));
    }
}
