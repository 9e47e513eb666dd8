//! One iteration: acquire the sources once, measure them, then execute the
//! test suite `num_runs` times in declaration order and optionally
//! `num_runs` more times in shuffled order. Every run gets its own copy of
//! the sources and its own virtual environment.

mod install;
mod loc;
mod process;
mod runner;
mod seed;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use install::{install_dependencies, pipfile_packages, plan_installation, InstallError, InstallStep};
pub use loc::{language_of, measure_loc, LanguageCounts, LocReport, INTERNAL_LOC_TOOL};
pub use runner::{
    coverage_file_name, report_file_name, run_once, OrderPlugin, RunOutcome, RunSpec, RunnerSettings,
    ENV_ITERATION, ENV_RUN_INDEX, ENV_RUN_ORDER, SHUFFLE_PLUGIN_MODULE,
};
pub use seed::derive_run_seed;

use crate::input::InputRow;
use crate::sandbox::{self, acquire_sources, fresh_run_workspace, BackendConfig, SandboxError};
use crate::store::{
    self, IterationResultFile, IterationStatus, RunEntry, RunStatus, StoreError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunOrder {
    Same,
    Random,
}

impl RunOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOrder::Same => "same",
            RunOrder::Random => "random",
        }
    }
}

/// Shared flag asking iterations to stop after their current run.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationPlan {
    pub row: InputRow,
    pub num_runs: u32,
    pub plus_random_runs: bool,
    pub base_seed: Option<u64>,
}

impl IterationPlan {
    pub fn new(row: InputRow, num_runs: u32) -> Self {
        Self {
            row,
            num_runs: num_runs.max(1),
            plus_random_runs: false,
            base_seed: None,
        }
    }

    /// Same-order runs first (indices `0..num_runs`), then random-order runs
    /// continuing the global numbering.
    pub fn run_specs(&self) -> Vec<RunSpec> {
        let same = (0..self.num_runs).map(|i| RunSpec {
            order: RunOrder::Same,
            run_index: i,
            seed: 0,
            global_index: i,
        });
        let random = (0..self.num_runs)
            .filter(|_| self.plus_random_runs)
            .map(|i| RunSpec {
                order: RunOrder::Random,
                run_index: i,
                seed: derive_run_seed(self.base_seed, self.row.row_number, u64::from(i)),
                global_index: self.num_runs + i,
            });
        same.chain(random).collect()
    }
}

#[derive(Debug, Error)]
pub enum ExecutionError {
    #[error("output directory unwritable: {0}")]
    OutputDirUnwritable(#[source] StoreError),
}

fn unwritable(path: &Path) -> impl FnOnce(std::io::Error) -> ExecutionError + '_ {
    move |e| ExecutionError::OutputDirUnwritable(store::io_err(path)(e))
}

fn acquisition_status(err: &SandboxError) -> IterationStatus {
    match err {
        SandboxError::CloneFailed { .. } => IterationStatus::CloneFailed,
        SandboxError::RevisionNotFound { .. } => IterationStatus::RevisionNotFound,
        _ => IterationStatus::CopyFailed,
    }
}

/// Runs one iteration into `iteration_dir`, leaving exactly the iteration
/// result, `loc.csv` and `results.tar.xz` behind. Failures of individual
/// runs, and failure to obtain the sources, are recorded in the result
/// rather than returned.
pub fn run_iteration(
    plan: &IterationPlan,
    backend: &BackendConfig,
    settings: &RunnerSettings,
    iteration_dir: &Path,
    cancel: &CancelToken,
) -> Result<IterationResultFile, ExecutionError> {
    fs::create_dir_all(iteration_dir).map_err(unwritable(iteration_dir))?;
    let staging = iteration_dir.join(".reports");
    fs::create_dir_all(&staging).map_err(unwritable(&staging))?;
    let prefix = iteration_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();

    let specs = plan.run_specs();
    let mut result = IterationResultFile::new(&plan.row, plan.num_runs, plan.plus_random_runs, plan.base_seed);
    result.collect_coverage = settings.collect_coverage;
    result.random_seeds = specs
        .iter()
        .filter(|s| s.order == RunOrder::Random)
        .map(|s| s.seed)
        .collect();

    let mut loc = LocReport::default();
    let mut artifacts: Vec<PathBuf> = Vec::new();
    match acquire_sources(&plan.row.project_url, plan.row.project_hash.as_deref(), &backend.scratch()) {
        Err(err) => {
            log::warn!("{}: {err}", prefix);
            result.status = acquisition_status(&err);
            result.error = Some(err.to_string());
        }
        Ok(sources) => {
            result.resolved_revision = sources.resolved_revision.clone();
            result.disk_usage_bytes = Some(sandbox::disk_usage(&sources.dir));
            loc = measure_loc(&sources.dir);
            result.loc_skipped_files = loc.skipped_files;

            for spec in &specs {
                if cancel.is_cancelled() {
                    result.status = IterationStatus::Cancelled;
                    break;
                }
                let entry = match fresh_run_workspace(&sources.dir, backend) {
                    Ok(workspace) => {
                        let outcome = run_once(spec, &plan.row, workspace, settings, &staging);
                        artifacts.extend(outcome.report);
                        artifacts.extend(outcome.coverage);
                        outcome.entry
                    }
                    Err(err) => RunEntry {
                        index: spec.global_index,
                        order: spec.order,
                        run_index: spec.run_index,
                        seed: (spec.order == RunOrder::Random).then_some(spec.seed),
                        status: RunStatus::EnvFailed,
                        exit_code: None,
                        duration_secs: 0.0,
                        report: None,
                        coverage: None,
                        install_log: Vec::new(),
                        diagnostic: Some(err.to_string()),
                    },
                };
                if entry.status != RunStatus::Ok {
                    log::warn!("{prefix} run {}: {:?}", entry.index, entry.status);
                }
                result.runs.push(entry);
            }
        }
    }

    store::archive_results(iteration_dir, &prefix, &artifacts).map_err(ExecutionError::OutputDirUnwritable)?;
    fs::remove_dir_all(&staging).map_err(unwritable(&staging))?;
    store::write_loc_csv(iteration_dir, &loc).map_err(ExecutionError::OutputDirUnwritable)?;
    result.finished_at = Utc::now();
    store::write_iteration_result(iteration_dir, &result).map_err(ExecutionError::OutputDirUnwritable)?;
    Ok(result)
}

/// Writes the result of an iteration that never started: no runs, an empty
/// `loc.csv` and an archive without members.
pub fn record_unexecuted_iteration(
    plan: &IterationPlan,
    iteration_dir: &Path,
    status: IterationStatus,
    error: Option<String>,
) -> Result<IterationResultFile, ExecutionError> {
    fs::create_dir_all(iteration_dir).map_err(unwritable(iteration_dir))?;
    let mut result = IterationResultFile::new(&plan.row, plan.num_runs, plan.plus_random_runs, plan.base_seed);
    result.status = status;
    result.error = error;
    let prefix = iteration_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    store::archive_results(iteration_dir, &prefix, &[]).map_err(ExecutionError::OutputDirUnwritable)?;
    store::write_loc_csv(iteration_dir, &LocReport::default()).map_err(ExecutionError::OutputDirUnwritable)?;
    store::write_iteration_result(iteration_dir, &result).map_err(ExecutionError::OutputDirUnwritable)?;
    Ok(result)
}
