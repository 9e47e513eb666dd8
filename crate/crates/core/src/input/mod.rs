//! The input-csv: one row per iteration of the mining campaign.
//!
//! A project is usually listed several times in a row. Every repetition is one
//! iteration (one container or one cluster job), which keeps individual jobs
//! short and lets infrastructure problems show up as differences between
//! iterations.

mod index;
mod sample;

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{IndexError, PackageIndex, PackageMetadata, SnapshotIndex};
#[cfg(feature = "live-index")]
pub use index::LiveIndex;
pub use sample::{match_git_tag, normalize_source_url, sample_projects, Sample, SampleCandidate};

/// Column names of the input-csv header, in their canonical order.
pub const INPUT_COLUMNS: [&str; 6] = [
    "PROJECT_NAME",
    "PROJECT_URL",
    "PROJECT_HASH",
    "PYPI_TAG",
    "FUNCS_TO_TRACE",
    "TESTS_TO_RUN",
];

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: header lacks required column {column}")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: invalid project name {name:?} (allowed: A-Z a-z 0-9 . _ -)")]
    InvalidProjectName { path: PathBuf, line: u64, name: String },
    #[error("{path}:{line}: empty PROJECT_URL")]
    EmptyProjectUrl { path: PathBuf, line: u64 },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// One iteration request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRow {
    pub project_name: String,
    pub project_url: String,
    pub project_hash: Option<String>,
    pub pypi_tag: Option<String>,
    /// Recorded verbatim, never interpreted.
    pub funcs_to_trace: Option<String>,
    pub tests_to_run: Option<String>,
    /// 1-based position among the data rows.
    pub row_number: u64,
    /// Line of the input-csv on which this row starts (the header is line 1).
    /// This is the `RowNum` component of iteration directory names.
    pub line_number: u64,
}

impl InputRow {
    /// A row with only the mandatory fields set, placed at `row_number`
    /// of a file without multi-line cells.
    pub fn new(project_name: impl Into<String>, project_url: impl Into<String>, row_number: u64) -> Self {
        Self {
            project_name: project_name.into(),
            project_url: project_url.into(),
            project_hash: None,
            pypi_tag: None,
            funcs_to_trace: None,
            tests_to_run: None,
            row_number,
            line_number: row_number + 1,
        }
    }

    pub fn with_hash(mut self, hash: impl Into<String>) -> Self {
        self.project_hash = Some(hash.into());
        self
    }

    pub fn with_pypi_tag(mut self, tag: impl Into<String>) -> Self {
        self.pypi_tag = Some(tag.into());
        self
    }

    pub fn with_tests_to_run(mut self, tests: impl Into<String>) -> Self {
        self.tests_to_run = Some(tests.into());
        self
    }
}

/// `[A-Za-z0-9._-]+`
pub fn is_valid_project_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// The six cells a record contributes to an input-csv line.
pub trait InputRecord {
    fn project_name(&self) -> &str;
    fn project_url(&self) -> &str;
    fn project_hash(&self) -> Option<&str>;
    fn pypi_tag(&self) -> Option<&str>;
    fn funcs_to_trace(&self) -> Option<&str> {
        None
    }
    fn tests_to_run(&self) -> Option<&str> {
        None
    }
}

impl InputRecord for InputRow {
    fn project_name(&self) -> &str {
        &self.project_name
    }
    fn project_url(&self) -> &str {
        &self.project_url
    }
    fn project_hash(&self) -> Option<&str> {
        self.project_hash.as_deref()
    }
    fn pypi_tag(&self) -> Option<&str> {
        self.pypi_tag.as_deref()
    }
    fn funcs_to_trace(&self) -> Option<&str> {
        self.funcs_to_trace.as_deref()
    }
    fn tests_to_run(&self) -> Option<&str> {
        self.tests_to_run.as_deref()
    }
}

fn non_empty(cell: Option<&str>) -> Option<String> {
    cell.filter(|c| !c.is_empty()).map(str::to_owned)
}

pub fn parse_input_csv(path: impl AsRef<Path>) -> Result<Vec<InputRow>, InputError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| InputError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_input_reader(file, path)
}

/// Parses input-csv content; `origin` is only used in error messages.
pub fn parse_input_reader<R: Read>(reader: R, origin: &Path) -> Result<Vec<InputRow>, InputError> {
    let csv_err = |source| InputError::Csv {
        path: origin.to_owned(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let headers = reader.headers().map_err(csv_err)?.clone();
    let mut positions = [0usize; 6];
    for (slot, column) in positions.iter_mut().zip(INPUT_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == column)
            .ok_or(InputError::MissingColumn {
                path: origin.to_owned(),
                column,
            })?;
    }
    for extra in headers.iter().filter(|h| !INPUT_COLUMNS.contains(&h.trim())) {
        log::warn!("{}: ignoring unknown column {extra:?}", origin.display());
    }

    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(index as u64 + 2, |p| p.line());
        if record.len() != headers.len() {
            return Err(InputError::MalformedRow {
                path: origin.to_owned(),
                line,
                expected: headers.len(),
                found: record.len(),
            });
        }
        let cell = |i: usize| record.get(positions[i]);
        let project_name = cell(0).unwrap_or_default().to_owned();
        if !is_valid_project_name(&project_name) {
            return Err(InputError::InvalidProjectName {
                path: origin.to_owned(),
                line,
                name: project_name,
            });
        }
        let project_url = cell(1).unwrap_or_default().to_owned();
        if project_url.is_empty() {
            return Err(InputError::EmptyProjectUrl {
                path: origin.to_owned(),
                line,
            });
        }
        rows.push(InputRow {
            project_name,
            project_url,
            project_hash: non_empty(cell(2)),
            pypi_tag: non_empty(cell(3)),
            funcs_to_trace: non_empty(cell(4)),
            tests_to_run: non_empty(cell(5)),
            row_number: index as u64 + 1,
            line_number: line,
        });
    }
    Ok(rows)
}

/// Writes the input-csv, repeating each record `iterations_per_project` times.
pub fn write_input_csv<R: InputRecord>(
    rows: &[R],
    path: impl AsRef<Path>,
    iterations_per_project: usize,
) -> Result<(), InputError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| InputError::Io {
        path: path.to_owned(),
        source,
    })?;
    write_input_writer(rows, file, iterations_per_project).map_err(|source| InputError::Csv {
        path: path.to_owned(),
        source,
    })
}

pub fn write_input_writer<R: InputRecord, W: Write>(
    rows: &[R],
    writer: W,
    iterations_per_project: usize,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(writer);
    writer.write_record(INPUT_COLUMNS)?;
    for row in rows {
        let cells = [
            row.project_name(),
            row.project_url(),
            row.project_hash().unwrap_or(""),
            row.pypi_tag().unwrap_or(""),
            row.funcs_to_trace().unwrap_or(""),
            row.tests_to_run().unwrap_or(""),
        ];
        for _ in 0..iterations_per_project {
            writer.write_record(cells)?;
        }
    }
    writer.flush()?;
    Ok(())
}
