use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::install::{install_dependencies, InstallError};
use super::process::{remaining, run_logged};
use super::RunOrder;
use crate::input::InputRow;
use crate::sandbox::Workspace;
use crate::store::{RunEntry, RunStatus};

pub const SHUFFLE_PLUGIN_MODULE: &str = "flakemine_shuffle";
const SHUFFLE_PLUGIN_SOURCE: &str = include_str!("flakemine_shuffle.py");

/// Environment variables exported to every test process.
pub const ENV_RUN_INDEX: &str = "FLAKEMINE_RUN_INDEX";
pub const ENV_RUN_ORDER: &str = "FLAKEMINE_RUN_ORDER";
pub const ENV_ITERATION: &str = "FLAKEMINE_ITERATION";

/// How random-order runs are shuffled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OrderPlugin {
    /// A bundled plugin shuffling all collected tests with `random.Random(seed)`.
    #[default]
    Builtin,
    /// The `pytest-random-order` package with a global bucket.
    PytestRandomOrder,
}

/// One run to execute: its order, its index within that order and its
/// position in the iteration's report numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub order: RunOrder,
    pub run_index: u32,
    /// Only meaningful for random-order runs.
    pub seed: u64,
    pub global_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerSettings {
    pub timeout: Option<Duration>,
    pub order_plugin: OrderPlugin,
    pub disable_plugin_autoload: bool,
    /// Installer argument prefix; `<venv python> -m pip install` if unset.
    pub installer: Option<Vec<String>>,
    pub collect_coverage: bool,
}

impl Default for RunnerSettings {
    fn default() -> Self {
        Self {
            timeout: Some(Duration::from_secs(3600)),
            order_plugin: OrderPlugin::Builtin,
            disable_plugin_autoload: false,
            installer: None,
            collect_coverage: false,
        }
    }
}

impl RunnerSettings {
    fn tools(&self) -> Vec<(&'static str, &'static str)> {
        let mut tools = vec![("pytest", "pytest")];
        if self.order_plugin == OrderPlugin::PytestRandomOrder {
            tools.push(("random_order", "pytest-random-order"));
        }
        if self.collect_coverage {
            tools.push(("pytest_cov", "pytest-cov"));
        }
        tools
    }
}

pub fn report_file_name(project: &str, global_index: u32) -> String {
    format!("{project}_output{global_index}.xml")
}

pub fn coverage_file_name(project: &str, global_index: u32) -> String {
    format!("{project}_coverage{global_index}.xml")
}

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct RunOutcome {
    pub entry: RunEntry,
    pub report: Option<PathBuf>,
    pub coverage: Option<PathBuf>,
}

fn test_command(
    spec: &RunSpec,
    row: &InputRow,
    workspace: &Workspace,
    settings: &RunnerSettings,
    report: &Path,
    coverage: &Path,
    plugin_dir: &Path,
) -> Command {
    let mut cmd = Command::new(workspace.python());
    cmd.args(["-m", "pytest", "-p", "no:cacheprovider", "-o", "junit_family=xunit1"])
        .arg(format!("--junitxml={}", report.display()));
    match settings.order_plugin {
        OrderPlugin::Builtin => {
            cmd.args(["-p", SHUFFLE_PLUGIN_MODULE]);
            if spec.order == RunOrder::Random {
                cmd.arg(format!("--flakemine-seed={}", spec.seed));
            }
        }
        OrderPlugin::PytestRandomOrder => {
            if settings.disable_plugin_autoload {
                cmd.args(["-p", "random_order.plugin"]);
            }
            if spec.order == RunOrder::Random {
                cmd.args(["--random-order-bucket=global"])
                    .arg(format!("--random-order-seed={}", spec.seed));
            }
        }
    }
    if settings.collect_coverage {
        cmd.arg(format!("--cov={}", workspace.sources_dir.display()))
            .arg(format!("--cov-report=xml:{}", coverage.display()));
        if settings.disable_plugin_autoload {
            cmd.args(["-p", "pytest_cov"]);
        }
    }
    if let Some(selection) = &row.tests_to_run {
        match shell_words::split(selection) {
            Ok(words) => cmd.args(words),
            Err(_) => cmd.arg(selection),
        };
    }

    let path = std::env::var_os("PATH").unwrap_or_default();
    let mut paths = vec![workspace.venv_dir.join("bin")];
    paths.extend(std::env::split_paths(&path));
    cmd.current_dir(&workspace.sources_dir)
        .env("PATH", std::env::join_paths(paths).unwrap_or(path))
        .env("VIRTUAL_ENV", &workspace.venv_dir)
        .env("PYTHONPATH", plugin_dir)
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env(ENV_RUN_INDEX, spec.global_index.to_string())
        .env(ENV_RUN_ORDER, spec.order.as_str())
        .env(ENV_ITERATION, row.row_number.to_string())
        .env_remove("PYTHONHOME");
    if settings.disable_plugin_autoload {
        cmd.env("PYTEST_DISABLE_PLUGIN_AUTOLOAD", "1");
    }
    cmd
}

#[allow(clippy::too_many_arguments)]
fn execute(
    spec: &RunSpec,
    row: &InputRow,
    workspace: &Workspace,
    settings: &RunnerSettings,
    deadline: Option<Instant>,
    report: &Path,
    coverage: &Path,
    entry: &mut RunEntry,
) {
    let tools = settings.tools();
    match install_dependencies(row, workspace, &tools, settings.installer.as_deref(), deadline) {
        Ok(log) => entry.install_log = log,
        Err(err) => {
            entry.install_log = err.log().to_vec();
            entry.status = match err {
                InstallError::TimedOut { .. } => RunStatus::Timeout,
                InstallError::Failed { .. } => RunStatus::InstallFailed,
            };
            entry.diagnostic = Some(err.to_string());
            return;
        }
    }

    let plugin_dir = workspace.root().join("plugins");
    let plugin = plugin_dir.join(format!("{SHUFFLE_PLUGIN_MODULE}.py"));
    if let Err(e) = fs::create_dir_all(&plugin_dir).and_then(|()| fs::write(&plugin, SHUFFLE_PLUGIN_SOURCE)) {
        entry.status = RunStatus::EnvFailed;
        entry.diagnostic = Some(format!("writing order plugin: {e}"));
        return;
    }
    let _ = fs::remove_file(report);
    let mut cmd = test_command(spec, row, workspace, settings, report, coverage, &plugin_dir);
    match run_logged(&mut cmd, &workspace.root().join("test.log"), remaining(deadline)) {
        Ok(finished) => {
            entry.exit_code = finished.status.and_then(|s| s.code());
            if finished.timed_out() {
                entry.status = RunStatus::Timeout;
                entry.diagnostic = Some(finished.tail);
            } else if !report.is_file() {
                entry.status = RunStatus::Crashed;
                entry.diagnostic = Some(finished.tail);
            }
        }
        Err(e) => {
            entry.status = RunStatus::Crashed;
            entry.diagnostic = Some(format!("starting test framework: {e}"));
        }
    }
}

/// Installs dependencies into `workspace` and runs the test framework once.
/// The junit report is written to `staging/<project>_output<i>.xml`.
/// The workspace is released before returning, whatever the outcome.
pub fn run_once(
    spec: &RunSpec,
    row: &InputRow,
    workspace: Workspace,
    settings: &RunnerSettings,
    staging: &Path,
) -> RunOutcome {
    let started = Instant::now();
    let deadline = settings.timeout.map(|t| started + t);
    let report = staging.join(report_file_name(&row.project_name, spec.global_index));
    let coverage = staging.join(coverage_file_name(&row.project_name, spec.global_index));
    let mut entry = RunEntry {
        index: spec.global_index,
        order: spec.order,
        run_index: spec.run_index,
        seed: (spec.order == RunOrder::Random).then_some(spec.seed),
        status: RunStatus::Ok,
        exit_code: None,
        duration_secs: 0.0,
        report: None,
        coverage: None,
        install_log: Vec::new(),
        diagnostic: None,
    };

    execute(spec, row, &workspace, settings, deadline, &report, &coverage, &mut entry);

    if let Err(e) = workspace.release() {
        log::warn!("releasing workspace: {e}");
    }
    entry.duration_secs = started.elapsed().as_secs_f64();
    let report = (entry.status == RunStatus::Ok && report.is_file()).then_some(report);
    let coverage = (report.is_some() && coverage.is_file()).then_some(coverage);
    entry.report = report.as_ref().map(|_| report_file_name(&row.project_name, spec.global_index));
    entry.coverage = coverage.as_ref().map(|_| coverage_file_name(&row.project_name, spec.global_index));
    RunOutcome { entry, report, coverage }
}
