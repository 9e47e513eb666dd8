//! On-disk layout of a campaign:
//!
//! ```text
//! OUT_DIR/
//! └── flapy-results_20221123_161945/          results-directory
//!     ├── !flapy.run/{flapy_run.yaml,input.csv}
//!     └── avwx-engine_20221123_161945_2/      iteration-directory
//!         ├── flapy-iteration-result.yaml
//!         ├── loc.csv
//!         └── results.tar.xz                  <iteration-dir>/<project>_output<i>.xml
//! ```

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::{DateTime, FixedOffset, Local, NaiveDateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{LocReport, RunOrder};
use crate::input::InputRow;

pub const RUN_META_DIR: &str = "!flapy.run";
pub const RUN_META_FILE: &str = "flapy_run.yaml";
pub const INPUT_COPY_FILE: &str = "input.csv";
pub const ITERATION_RESULT_FILE: &str = "flapy-iteration-result.yaml";
pub const LOC_FILE: &str = "loc.csv";
pub const ARCHIVE_FILE: &str = "results.tar.xz";
pub const RESULTS_DIR_PREFIX: &str = "flapy-results_";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Yaml {
        path: PathBuf,
        #[source]
        source: serde_yaml::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// `DATE_TIME` part shared by a results-directory and its iteration-directories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Stamp(pub NaiveDateTime);

impl Stamp {
    pub fn now() -> Self {
        Stamp(Local::now().naive_local())
    }

    pub fn date(&self) -> String {
        self.0.format("%Y%m%d").to_string()
    }

    pub fn time(&self) -> String {
        self.0.format("%H%M%S").to_string()
    }

    pub fn parse(date: &str, time: &str) -> Option<Self> {
        NaiveDateTime::parse_from_str(&format!("{date}{time}"), "%Y%m%d%H%M%S")
            .ok()
            .map(Stamp)
    }
}

impl std::fmt::Display for Stamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}", self.date(), self.time())
    }
}

fn results_dir_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^flapy-results_(\d{8})_(\d{6})(?:_(\d+))?$").expect("valid regex"))
}

fn iteration_dir_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+)_(\d{8})_(\d{6})_(\d+)$").expect("valid regex"))
}

pub fn results_dir_name(stamp: Stamp, collision: u32) -> String {
    match collision {
        0 => format!("{RESULTS_DIR_PREFIX}{stamp}"),
        n => format!("{RESULTS_DIR_PREFIX}{stamp}_{n}"),
    }
}

/// `<ProjectName>_<DATE>_<TIME>_<RowNum>` where RowNum is the csv line.
pub fn iteration_dir_name(project_name: &str, stamp: Stamp, line_number: u64) -> String {
    format!("{project_name}_{stamp}_{line_number}")
}

/// Parses a results-directory name into its stamp and collision suffix.
pub fn parse_results_dir_name(name: &str) -> Option<(Stamp, u32)> {
    let caps = results_dir_re().captures(name)?;
    let stamp = Stamp::parse(&caps[1], &caps[2])?;
    let suffix = caps.get(3).map_or(Some(0), |m| m.as_str().parse().ok())?;
    Some((stamp, suffix))
}

/// Parses an iteration-directory name from the right, so project names may
/// themselves contain underscores.
pub fn parse_iteration_dir_name(name: &str) -> Option<(String, Stamp, u64)> {
    let caps = iteration_dir_re().captures(name)?;
    let stamp = Stamp::parse(&caps[2], &caps[3])?;
    let line = caps[4].parse().ok()?;
    Some((caps[1].to_owned(), stamp, line))
}

/// Content of `!flapy.run/flapy_run.yaml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub command_line: Vec<String>,
    pub start_time: DateTime<FixedOffset>,
    pub host: String,
    pub tool_version: String,
    #[serde(default)]
    pub num_runs: Option<u32>,
    #[serde(default)]
    pub plus_random_runs: Option<bool>,
    #[serde(default)]
    pub random_order_seed: Option<u64>,
    #[serde(default)]
    pub run_on: Option<String>,
}

impl CampaignMeta {
    pub fn new(command_line: Vec<String>, start_time: DateTime<FixedOffset>) -> Self {
        Self {
            command_line,
            start_time,
            host: gethostname::gethostname().to_string_lossy().into_owned(),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            num_runs: None,
            plus_random_runs: None,
            random_order_seed: None,
            run_on: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResultsDirectory {
    pub path: PathBuf,
    pub stamp: Stamp,
    pub meta: Option<CampaignMeta>,
    pub iterations: Vec<IterationDirectory>,
}

impl ResultsDirectory {
    pub fn name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn iteration_path(&self, row: &InputRow) -> PathBuf {
        self.path
            .join(iteration_dir_name(&row.project_name, self.stamp, row.line_number))
    }
}

/// Creates a new results-directory below `out_dir`, named after `started`.
/// A directory with the same second gets a `_1`, `_2`, ... suffix.
pub fn create_results_directory(
    out_dir: &Path,
    input_csv: &Path,
    meta: &CampaignMeta,
) -> Result<ResultsDirectory, StoreError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let stamp = Stamp(meta.start_time.naive_local());
    let mut collision = 0;
    let path = loop {
        let candidate = out_dir.join(results_dir_name(stamp, collision));
        match fs::create_dir(&candidate) {
            Ok(()) => break candidate,
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => collision += 1,
            Err(e) => return Err(io_err(&candidate)(e)),
        }
    };
    let meta_dir = path.join(RUN_META_DIR);
    fs::create_dir(&meta_dir).map_err(io_err(&meta_dir))?;
    let copy = meta_dir.join(INPUT_COPY_FILE);
    fs::copy(input_csv, &copy).map_err(io_err(input_csv))?;
    write_yaml(&meta_dir.join(RUN_META_FILE), meta)?;
    Ok(ResultsDirectory {
        path,
        stamp,
        meta: Some(meta.clone()),
        iterations: Vec::new(),
    })
}

fn write_yaml<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let text = serde_yaml::to_string(value).map_err(|source| StoreError::Yaml {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_yaml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_yaml::from_str(&text).map_err(|source| StoreError::Yaml {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterationStatus {
    Ok,
    CloneFailed,
    CopyFailed,
    RevisionNotFound,
    /// Interrupted before or during its runs.
    Cancelled,
    /// The container or job running the iteration failed before writing a result.
    BackendFailed,
}

impl IterationStatus {
    /// True when the project's tests were attempted at all.
    pub fn executed(self) -> bool {
        matches!(self, IterationStatus::Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    EnvFailed,
    InstallFailed,
    Crashed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    /// Global index `i` of `<project>_output<i>.xml`.
    pub index: u32,
    pub order: RunOrder,
    pub run_index: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub status: RunStatus,
    #[serde(default)]
    pub exit_code: Option<i32>,
    pub duration_secs: f64,
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub coverage: Option<String>,
    #[serde(default)]
    pub install_log: Vec<String>,
    #[serde(default)]
    pub diagnostic: Option<String>,
}

/// Content of `flapy-iteration-result.yaml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResultFile {
    pub schema_version: u32,
    pub project_name: String,
    pub project_url: String,
    pub project_hash: Option<String>,
    pub pypi_tag: Option<String>,
    pub funcs_to_trace: Option<String>,
    pub tests_to_run: Option<String>,
    pub row_number: u64,
    pub line_number: u64,
    pub num_runs: u32,
    pub plus_random_runs: bool,
    pub base_seed: Option<u64>,
    pub collect_coverage: bool,
    pub status: IterationStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub resolved_revision: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    #[serde(default)]
    pub disk_usage_bytes: Option<u64>,
    #[serde(default)]
    pub loc_skipped_files: u64,
    pub random_seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
}

impl IterationResultFile {
    pub fn new(row: &InputRow, num_runs: u32, plus_random_runs: bool, base_seed: Option<u64>) -> Self {
        let now = Utc::now();
        Self {
            schema_version: SCHEMA_VERSION,
            project_name: row.project_name.clone(),
            project_url: row.project_url.clone(),
            project_hash: row.project_hash.clone(),
            pypi_tag: row.pypi_tag.clone(),
            funcs_to_trace: row.funcs_to_trace.clone(),
            tests_to_run: row.tests_to_run.clone(),
            row_number: row.row_number,
            line_number: row.line_number,
            num_runs,
            plus_random_runs,
            base_seed,
            collect_coverage: false,
            status: IterationStatus::Ok,
            error: None,
            resolved_revision: None,
            started_at: now,
            finished_at: now,
            disk_usage_bytes: None,
            loc_skipped_files: 0,
            random_seeds: Vec::new(),
            runs: Vec::new(),
        }
    }

    pub fn input_row(&self) -> InputRow {
        InputRow {
            project_name: self.project_name.clone(),
            project_url: self.project_url.clone(),
            project_hash: self.project_hash.clone(),
            pypi_tag: self.pypi_tag.clone(),
            funcs_to_trace: self.funcs_to_trace.clone(),
            tests_to_run: self.tests_to_run.clone(),
            row_number: self.row_number,
            line_number: self.line_number,
        }
    }
}

pub fn write_iteration_result(dir: &Path, result: &IterationResultFile) -> Result<(), StoreError> {
    write_yaml(&dir.join(ITERATION_RESULT_FILE), result)
}

pub fn read_iteration_result(dir: &Path) -> Result<IterationResultFile, StoreError> {
    read_yaml(&dir.join(ITERATION_RESULT_FILE))
}

pub fn read_campaign_meta(results_dir: &Path) -> Result<CampaignMeta, StoreError> {
    read_yaml(&results_dir.join(RUN_META_DIR).join(RUN_META_FILE))
}

/// `language,files,code,blank,tool`, one line per language.
pub fn write_loc_csv(dir: &Path, report: &LocReport) -> Result<(), StoreError> {
    let path = dir.join(LOC_FILE);
    let csv_err = |source| StoreError::Csv {
        path: path.clone(),
        source,
    };
    let mut writer = csv::Writer::from_path(&path).map_err(csv_err)?;
    writer
        .write_record(["language", "files", "code", "blank", "tool"])
        .map_err(csv_err)?;
    for (language, counts) in &report.languages {
        writer
            .write_record([
                language.as_str(),
                &counts.files.to_string(),
                &counts.code_lines.to_string(),
                &counts.blank_lines.to_string(),
                &report.tool,
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(io_err(&path))
}

/// Packs `files` into `<dir>/results.tar.xz` as `<prefix>/<file name>` and
/// removes the originals.
pub fn archive_results(dir: &Path, prefix: &str, files: &[PathBuf]) -> Result<PathBuf, StoreError> {
    let archive = dir.join(ARCHIVE_FILE);
    let file = File::create(&archive).map_err(io_err(&archive))?;
    let encoder = xz2::write::XzEncoder::new(file, 6);
    let mut builder = tar::Builder::new(encoder);
    builder.mode(tar::HeaderMode::Deterministic);
    for path in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        builder
            .append_path_with_name(path, format!("{prefix}/{name}"))
            .map_err(io_err(path))?;
    }
    let encoder = builder.into_inner().map_err(io_err(&archive))?;
    encoder.finish().map_err(io_err(&archive))?;
    for path in files {
        fs::remove_file(path).map_err(io_err(path))?;
    }
    Ok(archive)
}

/// All regular members of an archive as `(member name, bytes)`, in archive order.
pub fn read_archive(path: &Path) -> Result<Vec<(String, Vec<u8>)>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut archive = tar::Archive::new(xz2::read::XzDecoder::new(file));
    let mut members = Vec::new();
    for entry in archive.entries().map_err(io_err(path))? {
        let mut entry = entry.map_err(io_err(path))?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let name = entry.path().map_err(io_err(path))?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes).map_err(io_err(path))?;
        members.push((name, bytes));
    }
    Ok(members)
}

#[derive(Debug, Clone)]
pub struct IterationDirectory {
    pub path: PathBuf,
    pub project_name: String,
    pub stamp: Stamp,
    /// `RowNum` of the directory name.
    pub line_number: u64,
}

impl IterationDirectory {
    pub fn name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn result_file(&self) -> PathBuf {
        self.path.join(ITERATION_RESULT_FILE)
    }

    pub fn loc_file(&self) -> PathBuf {
        self.path.join(LOC_FILE)
    }

    pub fn archive(&self) -> PathBuf {
        self.path.join(ARCHIVE_FILE)
    }

    pub fn read_result(&self) -> Result<IterationResultFile, StoreError> {
        read_iteration_result(&self.path)
    }
}

/// Results-directories found below a path, plus the directories that were
/// skipped for not following the naming scheme.
#[derive(Debug, Default)]
pub struct Discovery {
    pub results: Vec<ResultsDirectory>,
    pub warnings: Vec<String>,
}

fn sorted_subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs
}

fn load_results_dir(path: &Path, stamp: Stamp, warnings: &mut Vec<String>) -> ResultsDirectory {
    let mut iterations = Vec::new();
    for sub in sorted_subdirs(path) {
        let name = sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name == RUN_META_DIR {
            continue;
        }
        match parse_iteration_dir_name(&name) {
            Some((project_name, stamp, line_number)) => iterations.push(IterationDirectory {
                path: sub,
                project_name,
                stamp,
                line_number,
            }),
            None => warnings.push(format!("ignoring non-iteration directory {}", sub.display())),
        }
    }
    iterations.sort_by(|a, b| (a.line_number, &a.project_name).cmp(&(b.line_number, &b.project_name)));
    ResultsDirectory {
        meta: read_campaign_meta(path).ok(),
        path: path.to_owned(),
        stamp,
        iterations,
    }
}

fn visit(dir: &Path, is_root: bool, found: &mut Discovery) -> bool {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some((stamp, _)) = parse_results_dir_name(&name) {
        let results = load_results_dir(dir, stamp, &mut found.warnings);
        found.results.push(results);
        return true;
    }
    let mut any = false;
    for sub in sorted_subdirs(dir) {
        any |= visit(&sub, false, found);
    }
    if !any && !is_root {
        found.warnings.push(format!("ignoring {} (no results-directory)", dir.display()));
    }
    any
}

/// Recursively finds results-directories and their iteration-directories.
pub fn discover_results(path: &Path) -> Discovery {
    let mut found = Discovery::default();
    visit(path, true, &mut found);
    for warning in &found.warnings {
        log::warn!("{warning}");
    }
    found
}
