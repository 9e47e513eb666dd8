//! Runs the iterations of a campaign, either on this machine with a bounded
//! number of concurrent iterations, or as one batch job per input row.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::{
    record_unexecuted_iteration, run_iteration, CancelToken, ExecutionError, IterationPlan, OrderPlugin,
    RunnerSettings,
};
use crate::input::InputRow;
use crate::sandbox::{build_container_invocation, BackendConfig, BackendKind, IterationInvocation, SandboxError};
use crate::store::{self, IterationStatus, ResultsDirectory, StoreError, RUN_META_DIR};

/// Directory below `!flapy.run` receiving generated batch scripts.
pub const JOBS_DIR: &str = "jobs";
/// Sub-command of the binary that executes exactly one iteration.
pub const ITERATION_SUBCOMMAND: &str = "iteration";
/// Program name of the entry point inside a container image.
pub const IN_CONTAINER_ENTRY: &str = "flakemine";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RunOn {
    Local,
    Cluster,
}

impl RunOn {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOn::Local => "local",
            RunOn::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub mode: RunOn,
    pub max_parallel: usize,
    /// Node constraint of cluster jobs.
    pub constraint: Option<String>,
    /// Extra `#SBATCH` directives, emitted verbatim after the fixed ones.
    pub batch_directives: Vec<String>,
    pub out_dir: PathBuf,
    pub num_runs: u32,
    pub plus_random_runs: bool,
    pub base_seed: Option<u64>,
    pub backend: BackendConfig,
    pub runner: RunnerSettings,
    /// Command prefix invoking this binary outside a container.
    pub entry_point: Vec<String>,
}

impl CampaignConfig {
    pub fn new(out_dir: impl Into<PathBuf>, num_runs: u32) -> Self {
        Self {
            mode: RunOn::Local,
            max_parallel: default_parallelism(),
            constraint: None,
            batch_directives: Vec::new(),
            out_dir: out_dir.into(),
            num_runs: num_runs.max(1),
            plus_random_runs: false,
            base_seed: None,
            backend: BackendConfig::process(),
            runner: RunnerSettings::default(),
            entry_point: vec![IN_CONTAINER_ENTRY.to_owned()],
        }
    }

    pub fn plan(&self, row: &InputRow) -> IterationPlan {
        IterationPlan {
            row: row.clone(),
            num_runs: self.num_runs,
            plus_random_runs: self.plus_random_runs,
            base_seed: self.base_seed,
        }
    }
}

pub fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error(transparent)]
    Template(#[from] SandboxError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("failed to submit {script}: {message}")]
    Submit { script: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationOutcome {
    pub project_name: String,
    pub line_number: u64,
    pub dir: PathBuf,
    pub status: IterationStatus,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct CampaignSummary {
    pub results_dir: PathBuf,
    pub iterations: Vec<IterationOutcome>,
}

impl CampaignSummary {
    pub fn succeeded(&self) -> usize {
        self.iterations.iter().filter(|i| i.status.executed()).count()
    }

    pub fn failed(&self) -> usize {
        self.iterations.len() - self.succeeded()
    }

    pub fn all_executed(&self) -> bool {
        self.failed() == 0
    }
}

/// Arguments of the single-iteration entry point for `row`, without the
/// program name.
pub fn iteration_entry_args(row: &InputRow, iteration_dir: &Path, config: &CampaignConfig) -> Vec<String> {
    let mut args = vec![
        ITERATION_SUBCOMMAND.to_owned(),
        "--iteration-dir".to_owned(),
        iteration_dir.display().to_string(),
        "--project-name".to_owned(),
        row.project_name.clone(),
        "--project-url".to_owned(),
        row.project_url.clone(),
    ];
    let optional = [
        ("--project-hash", &row.project_hash),
        ("--pypi-tag", &row.pypi_tag),
        ("--funcs-to-trace", &row.funcs_to_trace),
        ("--tests-to-run", &row.tests_to_run),
    ];
    for (flag, value) in optional {
        if let Some(value) = value {
            args.extend([flag.to_owned(), value.clone()]);
        }
    }
    args.extend([
        "--row-number".to_owned(),
        row.row_number.to_string(),
        "--line-number".to_owned(),
        row.line_number.to_string(),
        "--num-runs".to_owned(),
        config.num_runs.to_string(),
    ]);
    if config.plus_random_runs {
        args.push("--plus-random-runs".to_owned());
    }
    if let Some(seed) = config.base_seed {
        args.extend(["--random-order-seed".to_owned(), seed.to_string()]);
    }
    let runner = &config.runner;
    if runner.collect_coverage {
        args.push("--collect-coverage".to_owned());
    }
    if runner.order_plugin != OrderPlugin::Builtin {
        args.extend(["--order-plugin".to_owned(), "pytest-random-order".to_owned()]);
    }
    if runner.disable_plugin_autoload {
        args.push("--no-plugin-autoload".to_owned());
    }
    if let Some(timeout) = runner.timeout {
        args.extend(["--run-timeout".to_owned(), timeout.as_secs().to_string()]);
    }
    if let Some(installer) = &runner.installer {
        args.extend(["--installer".to_owned(), shell_words::join(installer)]);
    }
    if config.backend.python != BackendConfig::process().python {
        args.extend(["--python".to_owned(), config.backend.python.clone()]);
    }
    if config.backend.system_site_packages {
        args.push("--system-site-packages".to_owned());
    }
    args
}

fn local_sources(row: &InputRow) -> Option<PathBuf> {
    let path = Path::new(&row.project_url);
    path.is_dir().then(|| path.canonicalize().unwrap_or_else(|_| path.to_owned()))
}

/// The complete command executing `row`: a container invocation for the
/// container backend, the entry point otherwise.
pub fn iteration_command(
    row: &InputRow,
    iteration_dir: &Path,
    results_dir: &Path,
    config: &CampaignConfig,
) -> Result<Vec<String>, SandboxError> {
    let args = iteration_entry_args(row, iteration_dir, config);
    match config.backend.kind {
        BackendKind::Process => Ok(config.entry_point.iter().cloned().chain(args).collect()),
        BackendKind::Container => {
            let invocation = IterationInvocation {
                out_dir: results_dir.to_owned(),
                sources: local_sources(row),
                entry_args: std::iter::once(IN_CONTAINER_ENTRY.to_owned()).chain(args).collect(),
            };
            build_container_invocation(&config.backend, &invocation)
        }
    }
}

fn run_in_container(
    plan: &IterationPlan,
    dir: &Path,
    results: &ResultsDirectory,
    config: &CampaignConfig,
) -> Result<IterationOutcome, ExecutionError> {
    let failure = |message: String| record_unexecuted_iteration(plan, dir, IterationStatus::BackendFailed, Some(message));
    let argv = match iteration_command(&plan.row, dir, &results.path, config) {
        Ok(argv) => argv,
        Err(e) => return failure(e.to_string()).map(|r| outcome(&plan.row, dir, r.status, r.error)),
    };
    log::debug!("starting {}", shell_words::join(&argv));
    let status = Command::new(&argv[0]).args(&argv[1..]).status();
    let result = match store::read_iteration_result(dir) {
        Ok(result) => result,
        Err(_) => {
            let message = match status {
                Ok(s) => format!("container exited with {s} without a result"),
                Err(e) => format!("failed to start {}: {e}", argv[0]),
            };
            failure(message)?
        }
    };
    Ok(outcome(&plan.row, dir, result.status, result.error))
}

fn outcome(row: &InputRow, dir: &Path, status: IterationStatus, error: Option<String>) -> IterationOutcome {
    IterationOutcome {
        project_name: row.project_name.clone(),
        line_number: row.line_number,
        dir: dir.to_owned(),
        status,
        error,
    }
}

fn execute_row(
    row: &InputRow,
    results: &ResultsDirectory,
    config: &CampaignConfig,
    cancel: &CancelToken,
) -> Result<IterationOutcome, ExecutionError> {
    let plan = config.plan(row);
    let dir = results.iteration_path(row);
    if cancel.is_cancelled() {
        let result = record_unexecuted_iteration(&plan, &dir, IterationStatus::Cancelled, None)?;
        return Ok(outcome(row, &dir, result.status, result.error));
    }
    log::info!("starting iteration {}", dir.display());
    match config.backend.kind {
        BackendKind::Process => {
            let result = run_iteration(&plan, &config.backend, &config.runner, &dir, cancel)?;
            Ok(outcome(row, &dir, result.status, result.error))
        }
        BackendKind::Container => run_in_container(&plan, &dir, results, config),
    }
}

/// Executes every row as one iteration below `results`, at most
/// `max_parallel` at a time. One iteration failing never stops the others;
/// only an unwritable output directory is fatal, and is reported after all
/// workers have stopped.
pub fn execute_local(
    rows: &[InputRow],
    results: &ResultsDirectory,
    config: &CampaignConfig,
    cancel: &CancelToken,
) -> Result<CampaignSummary, SchedulerError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<IterationOutcome>>> = Mutex::new(vec![None; rows.len()]);
    let fatal: Mutex<Option<ExecutionError>> = Mutex::new(None);
    let workers = config.max_parallel.clamp(1, rows.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(row) = rows.get(i) else { break };
                match execute_row(row, results, config, cancel) {
                    Ok(outcome) => {
                        if !outcome.status.executed() {
                            log::warn!("{}: {:?}", outcome.dir.display(), outcome.status);
                        }
                        slots.lock().expect("no poisoned lock")[i] = Some(outcome);
                    }
                    Err(e) => {
                        log::error!("{e}");
                        cancel.cancel();
                        fatal.lock().expect("no poisoned lock").get_or_insert(e);
                    }
                }
            });
        }
    });

    if let Some(e) = fatal.into_inner().expect("no poisoned lock") {
        return Err(e.into());
    }
    Ok(CampaignSummary {
        results_dir: results.path.clone(),
        iterations: slots.into_inner().expect("no poisoned lock").into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobScript {
    /// `<iteration dir name>.sh`
    pub file_name: String,
    pub content: String,
}

/// One POSIX shell batch script per row. A pure function of its inputs.
pub fn generate_cluster_jobs(
    rows: &[InputRow],
    config: &CampaignConfig,
    results: &ResultsDirectory,
) -> Result<Vec<JobScript>, SchedulerError> {
    rows.iter()
        .map(|row| {
            let dir = results.iteration_path(row);
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut content = String::from("#!/bin/sh\n");
            content.push_str(&format!("#SBATCH --job-name={}\n", shell_words::quote(&name)));
            if let Some(constraint) = &config.constraint {
                content.push_str(&format!("#SBATCH --constraint={}\n", shell_words::quote(constraint)));
            }
            for directive in &config.batch_directives {
                content.push_str(&format!("#SBATCH {directive}\n"));
            }
            let command = iteration_command(row, &dir, &results.path, config)?;
            content.push_str(&format!("exec {}\n", shell_words::join(&command)));
            Ok(JobScript { file_name: format!("{name}.sh"), content })
        })
        .collect()
}

pub fn jobs_dir(results: &ResultsDirectory) -> PathBuf {
    results.path.join(RUN_META_DIR).join(JOBS_DIR)
}

pub fn write_job_scripts(scripts: &[JobScript], dir: &Path) -> Result<Vec<PathBuf>, SchedulerError> {
    fs::create_dir_all(dir).map_err(store::io_err(dir))?;
    scripts
        .iter()
        .map(|script| {
            let path = dir.join(&script.file_name);
            fs::write(&path, &script.content).map_err(store::io_err(&path))?;
            Ok(path)
        })
        .collect()
}

/// Invokes `submit_command <script>` once per script.
pub fn submit_jobs(scripts: &[PathBuf], submit_command: &[String]) -> Result<(), SchedulerError> {
    let (program, base) = submit_command.split_first().ok_or_else(|| SchedulerError::Submit {
        script: PathBuf::new(),
        message: "empty submit command".into(),
    })?;
    for script in scripts {
        let output = Command::new(program)
            .args(base)
            .arg(script)
            .output()
            .map_err(|e| SchedulerError::Submit { script: script.clone(), message: e.to_string() })?;
        if !output.status.success() {
            return Err(SchedulerError::Submit {
                script: script.clone(),
                message: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
            });
        }
        log::info!("{}", String::from_utf8_lossy(&output.stdout).trim());
    }
    Ok(())
}

/// Cluster jobs write straight into `out_dir`, which every node must see.
pub fn warn_unless_shared(out_dir: &Path) {
    let tmp = std::env::temp_dir();
    let out = out_dir.canonicalize().unwrap_or_else(|_| out_dir.to_owned());
    if out.starts_with(&tmp) || out.starts_with("/tmp") {
        log::warn!("{} looks node-local; cluster jobs need OUT_DIR on shared storage", out_dir.display());
    } else {
        log::info!("make sure {} is on storage shared by all nodes", out_dir.display());
    }
}
