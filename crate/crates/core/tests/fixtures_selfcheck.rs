//! The fixture projects behave as designed when pytest runs them directly.

mod common;

use std::path::Path;
use std::process::Command;

use flakemine::junit::{parse_junit_xml, Verdict};

use common::project;

/// Shuffle seed placing `test_polluter` before `test_victim`, found by
/// enumerating seeds 0..99 with `random.Random(seed).shuffle`.
const ADVERSARIAL_SEED: u64 = 0;

fn pytest(dir: &Path, args: &[String], env: &[(&str, &str)]) -> Vec<(String, Verdict)> {
    let scratch = tempfile::tempdir().unwrap();
    let report = scratch.path().join("report.xml");
    let plugin_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("src/execution");
    let mut cmd = Command::new("python3");
    cmd.args(["-m", "pytest", "-q", "-p", "no:cacheprovider", "-p", "flakemine_shuffle"])
        .arg(format!("--junitxml={}", report.display()))
        .args(args)
        .current_dir(dir)
        .env("PYTHONPATH", plugin_dir)
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTEST_DISABLE_PLUGIN_AUTOLOAD", "1")
        .env_remove("FIXTURE_OUTAGE")
        .env_remove("FLAKEMINE_RUN_INDEX");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap();
    let parsed = parse_junit_xml(&std::fs::read(&report).unwrap()).unwrap();
    parsed.records.into_iter().map(|(id, v)| (id.name, v)).collect()
}

fn verdict_of(results: &[(String, Verdict)], name: &str) -> Verdict {
    results.iter().find(|(n, _)| n == name).map(|(_, v)| *v).unwrap()
}

#[test]
fn victim_passes_in_declaration_order() {
    let results = pytest(&project("flaky_corpus"), &[], &[]);
    assert_eq!(results.len(), 5);
    assert_eq!(verdict_of(&results, "test_victim"), Verdict::Passed);
    assert!(results.iter().all(|(_, v)| *v == Verdict::Passed));
}

#[test]
fn victim_fails_under_adversarial_seed() {
    let args = [format!("--flakemine-seed={ADVERSARIAL_SEED}")];
    let results = pytest(&project("flaky_corpus"), &args, &[]);
    assert_eq!(verdict_of(&results, "test_victim"), Verdict::Failed);
    assert_eq!(verdict_of(&results, "test_polluter"), Verdict::Passed);
}

#[test]
fn counter_parity_follows_run_index() {
    let corpus = project("flaky_corpus");
    assert_eq!(verdict_of(&pytest(&corpus, &[], &[("FLAKEMINE_RUN_INDEX", "4")]), "test_counter_parity"), Verdict::Passed);
    assert_eq!(verdict_of(&pytest(&corpus, &[], &[("FLAKEMINE_RUN_INDEX", "7")]), "test_counter_parity"), Verdict::Failed);
}

#[test]
fn outage_project_fails_iff_outage_is_set() {
    let outage = project("outage_corpus");
    let healthy = pytest(&outage, &[], &[]);
    assert_eq!(healthy.len(), 3);
    assert!(healthy.iter().all(|(_, v)| *v == Verdict::Passed));
    let down = pytest(&outage, &[], &[("FIXTURE_OUTAGE", "1")]);
    assert_eq!(down.len(), 3);
    assert!(down.iter().all(|(_, v)| matches!(v, Verdict::Failed | Verdict::Error)));
}
