//! Command-line interface: `run`, `parse`, `sample` and the internal
//! `iteration` entry point used by containers and cluster jobs.
//!
//! Exit codes: 0 on success, 1 when the campaign or its output failed,
//! 2 for usage errors.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::Local;
use clap::{Args, Parser, Subcommand};

use crate::execution::{run_iteration, CancelToken, IterationPlan, OrderPlugin, RunnerSettings};
use crate::input::{parse_input_csv, sample_projects, write_input_writer, InputRow, PackageIndex, SnapshotIndex};
use crate::overview::{build_tests_overview, write_overview, write_overview_csv};
use crate::sandbox::{BackendConfig, BackendKind};
use crate::scheduler::{
    execute_local, generate_cluster_jobs, jobs_dir, submit_jobs, warn_unless_shared, write_job_scripts,
    CampaignConfig, RunOn,
};
use crate::store::{create_results_directory, discover_results, CampaignMeta};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "flakemine", version, about = "Detect flaky tests by rerunning Python test suites")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute every row of INPUT_CSV as one iteration of NUM_RUNS runs.
    Run(RunArgs),
    /// Build the tests-overview CSV from results-directories.
    Parse(ParseArgs),
    /// Draw projects from a package index and print an input-csv.
    Sample(SampleArgs),
    /// Execute a single iteration (used inside containers and batch jobs).
    #[command(hide = true)]
    Iteration(IterationArgs),
}

/// Options shared by `run` and `iteration` that shape individual runs.
#[derive(Debug, Clone, Args)]
pub struct RunnerArgs {
    /// Interpreter used to create per-run virtual environments.
    #[arg(long, default_value = "python3")]
    pub python: String,
    /// Let per-run environments see the interpreter's site-packages.
    #[arg(long)]
    pub system_site_packages: bool,
    /// Time limit of a single run in seconds; 0 disables it.
    #[arg(long, default_value_t = 3600)]
    pub run_timeout: u64,
    /// How random-order runs are shuffled.
    #[arg(long, value_enum, default_value_t = OrderPlugin::Builtin)]
    pub order_plugin: OrderPlugin,
    /// Do not load third-party pytest plugins installed in the environment.
    #[arg(long)]
    pub no_plugin_autoload: bool,
    /// Installer command replacing `python -m pip install`.
    #[arg(long)]
    pub installer: Option<String>,
    /// Parent directory of temporary workspaces.
    #[arg(long)]
    pub scratch_dir: Option<PathBuf>,
}

impl RunnerArgs {
    fn settings(&self, collect_coverage: bool) -> Result<RunnerSettings, String> {
        let installer = match &self.installer {
            Some(text) => Some(shell_words::split(text).map_err(|e| format!("--installer: {e}"))?),
            None => None,
        };
        Ok(RunnerSettings {
            timeout: (self.run_timeout > 0).then(|| Duration::from_secs(self.run_timeout)),
            order_plugin: self.order_plugin,
            disable_plugin_autoload: self.no_plugin_autoload,
            installer,
            collect_coverage,
        })
    }

    fn apply(&self, backend: &mut BackendConfig) {
        backend.python = self.python.clone();
        backend.system_site_packages = self.system_site_packages;
        backend.scratch_dir = self.scratch_dir.clone();
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory receiving the results-directory.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Additionally execute NUM_RUNS runs in random order.
    #[arg(long)]
    pub plus_random_runs: bool,
    #[arg(long, value_enum, default_value_t = RunOn::Local)]
    pub run_on: RunOn,
    /// Nodes cluster jobs may be scheduled on.
    #[arg(long)]
    pub constraint: Option<String>,
    /// Extra `#SBATCH` directive for every cluster job; repeatable.
    #[arg(long = "batch-directive")]
    pub batch_directives: Vec<String>,
    /// Generate cluster jobs without submitting them.
    #[arg(long)]
    pub no_submit: bool,
    #[arg(long, default_value = "sbatch")]
    pub submit_command: String,
    /// Arguments for the core execution, e.g. "--random-order-seed 42".
    #[arg(long, allow_hyphen_values = true)]
    pub core_args: Option<String>,
    /// Iterations executed concurrently in local mode.
    #[arg(long)]
    pub max_parallel: Option<usize>,
    #[arg(long, value_enum, default_value_t = BackendKind::Process)]
    pub backend: BackendKind,
    /// Container command template with {mounts}, {image}, {out_dir}, {sources}.
    #[arg(long)]
    pub container_command: Option<String>,
    #[command(flatten)]
    pub runner: RunnerArgs,
    pub input_csv: PathBuf,
    #[arg(value_parser = clap::value_parser!(u32).range(1..))]
    pub num_runs: u32,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    /// Directory containing one or more results-directories.
    #[arg(long)]
    pub path: PathBuf,
    /// Output CSV; standard output if omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also list tests that are not flaky.
    #[arg(long)]
    pub include_not_flaky: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub sample_size: usize,
    /// Read the index from a JSON snapshot instead of the network.
    #[arg(long)]
    pub index_snapshot: Option<PathBuf>,
    #[arg(long, default_value = "https://pypi.org")]
    pub index_url: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rows written per sampled project.
    #[arg(long, default_value_t = 1)]
    pub iterations_per_project: usize,
}

#[derive(Debug, Args)]
pub struct IterationArgs {
    #[arg(long)]
    pub iteration_dir: PathBuf,
    #[arg(long)]
    pub project_name: String,
    #[arg(long)]
    pub project_url: String,
    #[arg(long)]
    pub project_hash: Option<String>,
    #[arg(long)]
    pub pypi_tag: Option<String>,
    #[arg(long)]
    pub funcs_to_trace: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub tests_to_run: Option<String>,
    #[arg(long)]
    pub row_number: u64,
    #[arg(long)]
    pub line_number: u64,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub num_runs: u32,
    #[arg(long)]
    pub plus_random_runs: bool,
    #[arg(long)]
    pub random_order_seed: Option<u64>,
    #[arg(long)]
    pub collect_coverage: bool,
    #[command(flatten)]
    pub runner: RunnerArgs,
}

/// Options accepted inside `--core-args`.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct CoreArgs {
    pub random_order_seed: Option<u64>,
    pub collect_coverage: bool,
}

/// Splits and interprets the `--core-args` string. Unknown tokens are
/// ignored with a warning.
pub fn parse_core_args(text: &str) -> Result<CoreArgs, String> {
    let tokens = shell_words::split(text).map_err(|e| format!("--core-args: {e}"))?;
    let mut core = CoreArgs::default();
    let mut tokens = tokens.into_iter();
    while let Some(token) = tokens.next() {
        let (flag, inline) = match token.split_once('=') {
            Some((flag, value)) => (flag.to_owned(), Some(value.to_owned())),
            None => (token.clone(), None),
        };
        match flag.as_str() {
            "--random-order-seed" => {
                let value = inline
                    .or_else(|| tokens.next())
                    .ok_or("--random-order-seed needs a value")?;
                let seed = value
                    .parse()
                    .map_err(|_| format!("--random-order-seed: not an unsigned integer: {value:?}"))?;
                core.random_order_seed = Some(seed);
            }
            "--collect-coverage" => core.collect_coverage = true,
            _ => log::warn!("ignoring unknown core argument {token:?}"),
        }
    }
    Ok(core)
}

/// Parses `args` (program name first) and executes the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_default_env()
        .try_init();
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match cli.command {
        Command::Run(args) => cmd_run(args, command_line),
        Command::Parse(args) => cmd_parse(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Iteration(args) => cmd_iteration(args),
    }
}

fn usage(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_USAGE
}

fn failure(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_FAILURE
}

pub fn cmd_run(args: RunArgs, command_line: Vec<String>) -> i32 {
    let core = match args.core_args.as_deref().map(parse_core_args).transpose() {
        Ok(core) => core.unwrap_or_default(),
        Err(e) => return usage(e),
    };
    let rows = match parse_input_csv(&args.input_csv) {
        Ok(rows) => rows,
        Err(e) => return usage(e),
    };
    let runner = match args.runner.settings(core.collect_coverage) {
        Ok(runner) => runner,
        Err(e) => return usage(e),
    };
    let mut backend = match args.backend {
        BackendKind::Process => BackendConfig::process(),
        BackendKind::Container => BackendConfig::container(),
    }
    .with_process_env();
    if let Some(template) = &args.container_command {
        backend.container_command = template.clone();
    }
    args.runner.apply(&mut backend);
    if let Err(e) = backend.validate() {
        return usage(e);
    }

    let mut config = CampaignConfig::new(&args.out_dir, args.num_runs);
    config.mode = args.run_on;
    config.constraint = args.constraint.clone();
    config.batch_directives = args.batch_directives.clone();
    config.plus_random_runs = args.plus_random_runs;
    config.base_seed = core.random_order_seed;
    config.backend = backend;
    config.runner = runner;
    if let Some(n) = args.max_parallel {
        config.max_parallel = n.max(1);
    }
    match std::env::current_exe() {
        Ok(exe) => config.entry_point = vec![exe.display().to_string()],
        Err(e) => log::warn!("cannot locate own executable, jobs will call flakemine from PATH: {e}"),
    }

    let mut meta = CampaignMeta::new(command_line, Local::now().fixed_offset());
    meta.num_runs = Some(config.num_runs);
    meta.plus_random_runs = Some(config.plus_random_runs);
    meta.random_order_seed = config.base_seed;
    meta.run_on = Some(config.mode.as_str().to_owned());
    let results = match create_results_directory(&args.out_dir, &args.input_csv, &meta) {
        Ok(results) => results,
        Err(e) => return failure(e),
    };
    println!("{}", results.path.display());

    match config.mode {
        RunOn::Local => {
            let cancel = CancelToken::new();
            let handler_token = cancel.clone();
            if let Err(e) = ctrlc::set_handler(move || {
                eprintln!("interrupted, finishing current runs");
                handler_token.cancel();
            }) {
                log::debug!("no interrupt handler: {e}");
            }
            match execute_local(&rows, &results, &config, &cancel) {
                Ok(summary) => {
                    log::info!(
                        "{} iterations, {} executed, {} failed",
                        summary.iterations.len(),
                        summary.succeeded(),
                        summary.failed()
                    );
                    if summary.all_executed() {
                        EXIT_OK
                    } else {
                        EXIT_FAILURE
                    }
                }
                Err(e) => failure(e),
            }
        }
        RunOn::Cluster => {
            warn_unless_shared(&args.out_dir);
            let scripts = match generate_cluster_jobs(&rows, &config, &results) {
                Ok(scripts) => scripts,
                Err(e) => return failure(e),
            };
            let paths = match write_job_scripts(&scripts, &jobs_dir(&results)) {
                Ok(paths) => paths,
                Err(e) => return failure(e),
            };
            log::info!("{} job scripts in {}", paths.len(), jobs_dir(&results).display());
            if args.no_submit {
                return EXIT_OK;
            }
            let submit = match shell_words::split(&args.submit_command) {
                Ok(submit) => submit,
                Err(e) => return usage(format!("--submit-command: {e}")),
            };
            match submit_jobs(&paths, &submit) {
                Ok(()) => EXIT_OK,
                Err(e) => failure(e),
            }
        }
    }
}

pub fn cmd_parse(args: ParseArgs) -> i32 {
    if !args.path.exists() {
        return usage(format!("{}: no such directory", args.path.display()));
    }
    let discovery = discover_results(&args.path);
    for warning in &discovery.warnings {
        log::warn!("{warning}");
    }
    if discovery.results.is_empty() {
        log::warn!("no results-directories below {}", args.path.display());
    }
    let overview = build_tests_overview(&discovery.results);
    let written = match &args.output {
        Some(path) => write_overview_csv(&overview.rows, path, args.include_not_flaky).map_err(|e| e.to_string()),
        None => write_overview(&overview.rows, io::stdout().lock(), args.include_not_flaky).map_err(|e| e.to_string()),
    };
    match written {
        Ok(()) => EXIT_OK,
        Err(e) => failure(e),
    }
}

fn open_index(args: &SampleArgs) -> Result<Box<dyn PackageIndex>, String> {
    if let Some(path) = &args.index_snapshot {
        return SnapshotIndex::open(path).map(|i| Box::new(i) as Box<dyn PackageIndex>).map_err(|e| e.to_string());
    }
    #[cfg(feature = "live-index")]
    {
        Ok(Box::new(crate::input::LiveIndex::new(&args.index_url)))
    }
    #[cfg(not(feature = "live-index"))]
    {
        Err(format!("no index snapshot given and live access to {} is not built in", args.index_url))
    }
}

pub fn cmd_sample(args: SampleArgs) -> i32 {
    let index = match open_index(&args) {
        Ok(index) => index,
        Err(e) => return failure(e),
    };
    let sample = match sample_projects(index.as_ref(), args.sample_size, args.seed) {
        Ok(sample) => sample,
        Err(e) => return failure(e),
    };
    log::info!(
        "{} projects, {} without source repository, {} duplicate repositories, {} skipped",
        sample.candidates.len(),
        sample.without_source,
        sample.duplicates,
        sample.skipped.len()
    );
    let mut stdout = io::stdout().lock();
    match write_input_writer(&sample.candidates, &mut stdout, args.iterations_per_project.max(1)) {
        Ok(()) => stdout.flush().map_or(EXIT_FAILURE, |()| EXIT_OK),
        Err(e) => failure(e),
    }
}

pub fn cmd_iteration(args: IterationArgs) -> i32 {
    let runner = match args.runner.settings(args.collect_coverage) {
        Ok(runner) => runner,
        Err(e) => return usage(e),
    };
    let mut backend = BackendConfig::process();
    args.runner.apply(&mut backend);
    let row = InputRow {
        project_name: args.project_name,
        project_url: args.project_url,
        project_hash: args.project_hash,
        pypi_tag: args.pypi_tag,
        funcs_to_trace: args.funcs_to_trace,
        tests_to_run: args.tests_to_run,
        row_number: args.row_number,
        line_number: args.line_number,
    };
    let plan = IterationPlan {
        row,
        num_runs: args.num_runs,
        plus_random_runs: args.plus_random_runs,
        base_seed: args.random_order_seed,
    };
    let cancel = CancelToken::new();
    let handler_token = cancel.clone();
    let _ = ctrlc::set_handler(move || handler_token.cancel());
    match run_iteration(&plan, &backend, &runner, Path::new(&args.iteration_dir), &cancel) {
        Ok(result) if result.status.executed() => EXIT_OK,
        Ok(result) => failure(format!("{:?}: {}", result.status, result.error.unwrap_or_default())),
        Err(e) => failure(e),
    }
}
