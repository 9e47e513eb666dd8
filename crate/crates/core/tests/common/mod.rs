#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::NaiveDate;
use regex::Regex;
use serde::Deserialize;

use flakemine::execution::{report_file_name, LocReport, RunOrder};
use flakemine::input::{parse_input_csv, InputRow};
use flakemine::junit::Verdict;
use flakemine::store::{
    self, archive_results, create_results_directory, read_archive, CampaignMeta, IterationResultFile,
    ResultsDirectory, Stamp, ITERATION_RESULT_FILE, RUN_META_DIR,
};

pub const INPUT_HEADER: &str = "PROJECT_NAME,PROJECT_URL,PROJECT_HASH,PYPI_TAG,FUNCS_TO_TRACE,TESTS_TO_RUN";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn project(name: &str) -> PathBuf {
    fixtures().join("projects").join(name)
}

pub fn example_input() -> PathBuf {
    fixtures().join("example_input.csv")
}

pub fn flakemine() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flakemine"))
}

pub fn write_input(path: &Path, rows: &[(&str, &Path)]) {
    let mut text = format!("{INPUT_HEADER}\n");
    for (name, url) in rows {
        text.push_str(&format!("{name},{},,,,\n", url.display()));
    }
    fs::write(path, text).unwrap();
}

/// Runs `flakemine run` with the fast-run options the fixture projects
/// allow: no per-run downloads and no third-party pytest plugins.
pub fn run_campaign(out_dir: &Path, input: &Path, num_runs: u32, seed: Option<u64>, env: &[(&str, &str)]) -> Output {
    let mut cmd = flakemine();
    cmd.arg("--log-level=warn")
        .arg("run")
        .arg("--out-dir")
        .arg(out_dir)
        .arg("--plus-random-runs")
        .args(["--system-site-packages", "--no-plugin-autoload"]);
    if let Some(seed) = seed {
        cmd.arg("--core-args").arg(format!("--random-order-seed {seed}"));
    }
    cmd.arg(input).arg(num_runs.to_string());
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn parse_overview(path: &Path, include_not_flaky: bool) -> (Output, String) {
    let csv = path.join("overview.csv");
    let mut cmd = flakemine();
    cmd.args(["--log-level=warn", "parse", "--path"]).arg(path).arg("--output").arg(&csv);
    if include_not_flaky {
        cmd.arg("--include-not-flaky");
    }
    let output = cmd.output().unwrap();
    let text = fs::read_to_string(&csv).unwrap_or_default();
    (output, text)
}

/// Overview CSV rows as header-keyed maps.
pub fn csv_records(text: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().map(str::to_owned).zip(r.iter().map(str::to_owned)).collect()
        })
        .collect()
}

/// One row of the reference tests-overview of the example campaign.
pub struct TableRow {
    pub project: &'static str,
    pub test: &'static str,
    pub verdict: &'static str,
    pub passed_same: u32,
    pub failed_same: u32,
    pub passed_random: u32,
    pub failed_random: u32,
}

const fn row(
    project: &'static str,
    test: &'static str,
    verdict: &'static str,
    counts: [u32; 4],
) -> TableRow {
    TableRow {
        project,
        test,
        verdict,
        passed_same: counts[0],
        failed_same: counts[1],
        passed_random: counts[2],
        failed_random: counts[3],
    }
}

pub const TESTS_OVERVIEW: [TableRow; 9] = [
    row("avwx-engine", "test_fetch", "non-order-dependent", [9, 11, 11, 9]),
    row("flapy_example", "test_network_remote_connection_failure", "order-dependent", [20, 0, 18, 2]),
    row("flapy_example", "test_numpy_random", "non-order-dependent", [10, 10, 13, 7]),
    row("flapy_example", "test_random", "non-order-dependent", [15, 5, 8, 12]),
    row("flapy_example", "test_time", "non-order-dependent", [12, 8, 9, 11]),
    row("flapy_example", "test_unordered_collections", "non-order-dependent", [9, 11, 11, 9]),
    row("flapy_example", "test_victim", "order-dependent", [20, 0, 14, 6]),
    row("jgutils", "test_numeric_intermixed", "non-order-dependent", [11, 9, 8, 12]),
    row("jgutils", "test_file_creation2", "order-dependent", [20, 0, 11, 9]),
];

pub fn table_stamp() -> Stamp {
    Stamp(NaiveDate::from_ymd_opt(2022, 11, 23).unwrap().and_hms_opt(16, 19, 45).unwrap())
}

pub fn testcase_xml(classname: &str, file: &str, name: &str, verdict: Verdict) -> String {
    let body = match verdict {
        Verdict::Passed => "",
        Verdict::Failed => "<failure message=\"assert False\">AssertionError</failure>",
        Verdict::Error => "<error message=\"fixture failed\">RuntimeError</error>",
        Verdict::Skipped => "<skipped message=\"skip\"/>",
    };
    format!("<testcase classname=\"{classname}\" file=\"{file}\" line=\"1\" name=\"{name}\" time=\"0.001\">{body}</testcase>")
}

pub fn report_xml(cases: &[String]) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"utf-8\"?><testsuites><testsuite name=\"pytest\" tests=\"{}\">{}</testsuite></testsuites>",
        cases.len(),
        cases.concat()
    )
}

fn test_file(project: &str) -> &'static str {
    match project {
        "flapy_example" => "test_flaky.py",
        "avwx-engine" => "tests/test_service.py",
        _ => "tests/test_utils.py",
    }
}

/// Verdict of run `run` (of 5) in iteration `iteration` (of 4) for a total
/// of `passed` passes over 20 runs. Runs are filled run-major, so every
/// iteration sees both verdicts whenever the total is mixed.
fn spread(passed: u32, iteration: u32, run: u32) -> Verdict {
    if run * 4 + iteration < passed {
        Verdict::Passed
    } else {
        Verdict::Failed
    }
}

/// Writes a results-directory realizing the tests-overview table on the
/// example input: 4 iterations x 5 runs per order and project, plus one
/// stable test per project.
pub fn build_table_results(out_dir: &Path) -> ResultsDirectory {
    let input = example_input();
    let rows = parse_input_csv(&input).unwrap();
    let start = table_stamp().0.and_utc().fixed_offset();
    let mut meta = CampaignMeta::new(vec!["flakemine".into(), "run".into()], start);
    meta.num_runs = Some(5);
    meta.plus_random_runs = Some(true);
    let mut results = create_results_directory(out_dir, &input, &meta).unwrap();

    let mut seen: std::collections::HashMap<String, u32> = Default::default();
    for row in &rows {
        let iteration = {
            let n = seen.entry(row.project_name.clone()).or_default();
            *n += 1;
            *n - 1
        };
        let dir = results.iteration_path(row);
        write_table_iteration(row, iteration, &dir);
        results.iterations.push(store::IterationDirectory {
            path: dir.clone(),
            project_name: row.project_name.clone(),
            stamp: results.stamp,
            line_number: row.line_number,
        });
    }
    results
}

fn write_table_iteration(row: &InputRow, iteration: u32, dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let staging = tempfile::tempdir().unwrap();
    let file = test_file(&row.project_name);
    let classname = file.trim_end_matches(".py").replace('/', ".");
    let mut files = Vec::new();
    for (order, offset) in [(RunOrder::Same, 0), (RunOrder::Random, 5)] {
        for run in 0..5 {
            let mut cases = Vec::new();
            for t in TESTS_OVERVIEW.iter().filter(|t| t.project == row.project_name) {
                let passed = match order {
                    RunOrder::Same => t.passed_same,
                    RunOrder::Random => t.passed_random,
                };
                cases.push(testcase_xml(&classname, file, t.test, spread(passed, iteration, run)));
            }
            cases.push(testcase_xml(&classname, file, "test_stable", Verdict::Passed));
            let path = staging.path().join(report_file_name(&row.project_name, offset + run));
            fs::write(&path, report_xml(&cases)).unwrap();
            files.push(path);
        }
    }
    let prefix = dir.file_name().unwrap().to_string_lossy().into_owned();
    archive_results(dir, &prefix, &files).unwrap();
    store::write_loc_csv(dir, &LocReport::default()).unwrap();
    store::write_iteration_result(dir, &IterationResultFile::new(row, 5, true, None)).unwrap();
}

/// Checks a tree of results-directories against the documented layout.
/// Returns the number of iteration directories seen.
pub fn check_layout(root: &Path) -> Result<usize, String> {
    let results_re = Regex::new(r"^flapy-results_\d{8}_\d{6}(_\d+)?$").unwrap();
    let iteration_re = Regex::new(r"^(.+)_\d{8}_\d{6}_\d+$").unwrap();
    let member_re = Regex::new(r"^(.+)_(output|coverage)\d+\.xml$").unwrap();
    let mut iterations = 0;
    let mut results_dirs = 0;
    for entry in sorted_entries(root) {
        let name = file_name(&entry);
        if !entry.is_dir() {
            continue;
        }
        if !results_re.is_match(&name) {
            return Err(format!("{name}: not a results-directory name"));
        }
        results_dirs += 1;
        for child in sorted_entries(&entry) {
            let child_name = file_name(&child);
            if child_name == RUN_META_DIR {
                continue;
            }
            let caps = iteration_re
                .captures(&child_name)
                .ok_or_else(|| format!("{child_name}: not an iteration directory name"))?;
            let project = caps[1].to_owned();
            let mut files: Vec<String> = sorted_entries(&child).iter().map(|p| file_name(p)).collect();
            files.sort();
            if files != ["flapy-iteration-result.yaml", "loc.csv", "results.tar.xz"] {
                return Err(format!("{child_name}: unexpected contents {files:?}"));
            }
            let members = read_archive(&child.join("results.tar.xz")).map_err(|e| e.to_string())?;
            for (member, _) in members {
                let base = member.rsplit('/').next().unwrap_or(&member);
                let caps = member_re
                    .captures(base)
                    .ok_or_else(|| format!("{child_name}: archive member {member}"))?;
                if caps[1] != project {
                    return Err(format!("{child_name}: member {member} of another project"));
                }
            }
            if !child.join(ITERATION_RESULT_FILE).is_file() {
                return Err(format!("{child_name}: missing result"));
            }
            iterations += 1;
        }
    }
    if results_dirs == 0 {
        return Err("no results-directory".into());
    }
    Ok(iterations)
}

fn sorted_entries(dir: &Path) -> Vec<PathBuf> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(Result::ok).map(|e| e.path()).collect())
        .unwrap_or_default();
    entries.sort();
    entries
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
pub struct Manifest {
    pub campaign: ManifestCampaign,
    pub tests: Vec<ManifestTest>,
}

#[derive(Debug, Deserialize)]
pub struct ManifestCampaign {
    pub num_runs: u32,
    pub random_order_seed: u64,
    pub iterations_per_project: u32,
}

#[derive(Debug, Deserialize)]
pub struct ManifestTest {
    pub project: String,
    pub file: String,
    pub name: String,
    pub verdict: String,
    pub designed: String,
    pub same: ManifestCounts,
    pub random: ManifestCounts,
}

#[derive(Debug, Deserialize, PartialEq, Eq)]
pub struct ManifestCounts {
    pub passed: u64,
    pub failed: u64,
    pub error: u64,
    pub skipped: u64,
}

pub fn manifest() -> Manifest {
    serde_json::from_str(&fs::read_to_string(fixtures().join("manifest.json")).unwrap()).unwrap()
}

/// Runs the documented fixture campaign into `out_dir`: four iterations of
/// the flaky corpus and three healthy outage-corpus iterations, then one
/// outage-corpus iteration with `FIXTURE_OUTAGE=1` as a second campaign.
pub fn run_fixture_campaign(out_dir: &Path) -> Result<(), String> {
    let m = manifest();
    let corpus = project("flaky_corpus");
    let outage = project("outage_corpus");
    let input_a = out_dir.join("campaign.csv");
    let mut rows: Vec<(&str, &Path)> = vec![("flaky_corpus", corpus.as_path()); m.campaign.iterations_per_project as usize];
    rows.extend(vec![("outage_corpus", outage.as_path()); m.campaign.iterations_per_project as usize - 1]);
    write_input(&input_a, &rows);
    let input_b = out_dir.join("outage.csv");
    write_input(&input_b, &[("outage_corpus", outage.as_path())]);
    let results = out_dir.join("results");
    let seed = Some(m.campaign.random_order_seed);
    for (input, env) in [(&input_a, vec![]), (&input_b, vec![("FIXTURE_OUTAGE", "1")])] {
        let out = run_campaign(&results, input, m.campaign.num_runs, seed, &env);
        if !out.status.success() {
            return Err(format!(
                "campaign {} exited with {}: {}",
                input.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
    }
    Ok(())
}

pub fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn results_dirs(root: &Path) -> Vec<PathBuf> {
    sorted_entries(root).into_iter().filter(|p| p.is_dir()).collect()
}
