//! The tests-overview table: one row per test and project, with its
//! flakiness verdict and verdict counts per order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{count_verdicts, decide_verdict, FlakinessVerdict, OutcomeMatrix, VerdictCounts};
use crate::junit::{classify_run_order, parse_junit_xml, IterationKey, JunitError, RunRecord, TestId};
use crate::store::{read_archive, ResultsDirectory};

pub const OVERVIEW_COLUMNS: [&str; 16] = [
    "Project_Name",
    "Project_URL",
    "Project_Hash",
    "Test_filename",
    "Test_classname",
    "Test_parametrization",
    "Test_name",
    "flaky?",
    "Passed_sameOrder",
    "Failed_sameOrder",
    "Error_sameOrder",
    "Skipped_sameOrder",
    "Passed_randomOrder",
    "Failed_randomOrder",
    "Error_randomOrder",
    "Skipped_randomOrder",
];

#[derive(Debug, Error)]
pub enum OverviewError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Project identity rows are aggregated under.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProjectKey {
    pub name: String,
    pub url: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverviewRow {
    pub project: ProjectKey,
    pub test: TestId,
    pub verdict: FlakinessVerdict,
    pub counts: VerdictCounts,
    /// Runs in which the test appeared.
    pub appearances: usize,
}

impl OverviewRow {
    pub fn cells(&self) -> [String; 16] {
        let c = &self.counts;
        [
            self.project.name.clone(),
            self.project.url.clone(),
            self.project.hash.clone(),
            self.test.file.clone(),
            self.test.classname.clone(),
            self.test.parametrization.clone(),
            self.test.name.clone(),
            self.verdict.label().to_owned(),
            c.same.passed.to_string(),
            c.same.failed.to_string(),
            c.same.error.to_string(),
            c.same.skipped.to_string(),
            c.random.passed.to_string(),
            c.random.failed.to_string(),
            c.random.error.to_string(),
            c.random.skipped.to_string(),
        ]
    }
}

#[derive(Debug, Default)]
pub struct Overview {
    pub rows: Vec<OverviewRow>,
    /// Iterations or reports that could not be read.
    pub problems: Vec<String>,
    /// Number of testcase records that went into the counts.
    pub parsed_records: u64,
}

/// Reads every iteration of `results` into run records keyed by project.
pub fn collect_records(results: &[ResultsDirectory], problems: &mut Vec<String>) -> BTreeMap<ProjectKey, Vec<RunRecord>> {
    let mut by_project: BTreeMap<ProjectKey, Vec<RunRecord>> = BTreeMap::new();
    for results_dir in results {
        let results_name = results_dir.name();
        for iteration in &results_dir.iterations {
            let meta = match iteration.read_result() {
                Ok(meta) => meta,
                Err(e) => {
                    problems.push(format!("{}: {e}", iteration.path.display()));
                    continue;
                }
            };
            let members = match read_archive(&iteration.archive()) {
                Ok(members) => members,
                Err(e) => {
                    problems.push(format!("{}: {e}", iteration.path.display()));
                    continue;
                }
            };
            let project = ProjectKey {
                name: meta.project_name.clone(),
                url: meta.project_url.clone(),
                hash: meta.project_hash.clone().unwrap_or_default(),
            };
            let key = IterationKey {
                results_dir: results_name.clone(),
                project_name: meta.project_name.clone(),
                row_number: meta.row_number,
            };
            let records = by_project.entry(project).or_default();
            for (name, bytes) in members {
                let (order, run_index) = match classify_run_order(&name, meta.num_runs) {
                    Ok(pos) => pos,
                    Err(JunitError::NameMismatch(_)) => continue,
                    Err(e) => unreachable!("{e}"),
                };
                match parse_junit_xml(&bytes) {
                    Ok(report) => records.extend(report.records.into_iter().map(|(test, verdict)| RunRecord {
                        test,
                        verdict,
                        iteration: key.clone(),
                        order,
                        run_index,
                    })),
                    Err(e) => problems.push(format!("{}/{name}: {e}", iteration.path.display())),
                }
            }
        }
    }
    by_project
}

/// Builds the overview over all given results-directories as one campaign.
pub fn build_tests_overview(results: &[ResultsDirectory]) -> Overview {
    let mut overview = Overview::default();
    let by_project = collect_records(results, &mut overview.problems);
    for (project, records) in by_project {
        overview.parsed_records += records.len() as u64;
        for matrix in OutcomeMatrix::from_records(&records) {
            let Ok(verdict) = decide_verdict(&matrix) else {
                continue;
            };
            overview.rows.push(OverviewRow {
                project: project.clone(),
                counts: count_verdicts(&matrix),
                appearances: matrix.appearances(),
                test: matrix.test,
                verdict,
            });
        }
    }
    overview.rows.sort_by(|a, b| {
        let key = |r: &OverviewRow| {
            (
                r.project.name.clone(),
                r.test.file.clone(),
                r.test.name.clone(),
                r.test.parametrization.clone(),
                r.test.classname.clone(),
                r.project.url.clone(),
                r.project.hash.clone(),
            )
        };
        key(a).cmp(&key(b))
    });
    for problem in &overview.problems {
        log::warn!("{problem}");
    }
    overview
}

pub fn write_overview<W: Write>(rows: &[OverviewRow], writer: W, include_not_flaky: bool) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(writer);
    writer.write_record(OVERVIEW_COLUMNS)?;
    for row in rows.iter().filter(|r| include_not_flaky || r.verdict.is_flaky()) {
        writer.write_record(row.cells())?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_overview_csv(rows: &[OverviewRow], path: &Path, include_not_flaky: bool) -> Result<(), OverviewError> {
    let file = File::create(path).map_err(|source| OverviewError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_overview(rows, file, include_not_flaky)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::OrderCounts;

    fn row(name: &str, verdict: FlakinessVerdict) -> OverviewRow {
        OverviewRow {
            project: ProjectKey { name: "p".into(), url: "u".into(), hash: String::new() },
            test: TestId::new("t.py", "t", name, ""),
            verdict,
            counts: VerdictCounts {
                same: OrderCounts { passed: 1, failed: 2, error: 3, skipped: 4 },
                random: OrderCounts::default(),
            },
            appearances: 10,
        }
    }

    #[test]
    fn header_only_for_no_rows() {
        let mut out = Vec::new();
        write_overview(&[], &mut out, false).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().trim_end(), OVERVIEW_COLUMNS.join(","));
    }

    #[test]
    fn filters_not_flaky() {
        let rows = [
            row("a", FlakinessVerdict::NotFlaky),
            row("b", FlakinessVerdict::OrderDependent),
        ];
        let mut out = Vec::new();
        write_overview(&rows, &mut out, false).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap(), "p,u,,t.py,t,,b,order-dependent,1,2,3,4,0,0,0,0");
        let mut all = Vec::new();
        write_overview(&rows, &mut all, true).unwrap();
        assert_eq!(String::from_utf8(all).unwrap().lines().count(), 3);
    }

    #[test]
    fn empty_results() {
        let overview = build_tests_overview(&[]);
        assert!(overview.rows.is_empty());
        assert_eq!(overview.parsed_records, 0);
    }
}
