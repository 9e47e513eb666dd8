//! Whole campaigns through the binary, on fixture projects.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use flakemine::store::{discover_results, read_iteration_result, IterationStatus};

use common::*;

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .args(["-c", "user.name=fixture", "-c", "user.email=fixture@example.org", "-c", "init.defaultBranch=main"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).trim().to_owned()
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let target = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A git repository holding `fixture`, with a second commit on top so that
/// a pinned hash checks out something other than the tip.
fn fixture_repo(root: &Path, name: &str, fixture: &str) -> (PathBuf, String) {
    let repo = root.join(name);
    copy_dir(&project(fixture), &repo);
    git(&repo, &["init", "-q"]);
    git(&repo, &["add", "."]);
    git(&repo, &["commit", "-q", "-m", "initial"]);
    let pinned = git(&repo, &["rev-parse", "HEAD"]);
    fs::write(repo.join("NOTES.txt"), "later change\n").unwrap();
    git(&repo, &["add", "."]);
    git(&repo, &["commit", "-q", "-m", "later"]);
    (repo, pinned)
}

#[test]
fn smoke_campaign_over_local_git_repositories() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = format!("{INPUT_HEADER}\n");
    let mut pins = Vec::new();
    for i in 0..10 {
        let fixture = ["flaky_corpus", "outage_corpus", "ordering_corpus"][i % 3];
        let (repo, pinned) = fixture_repo(dir.path(), &format!("repo{i}"), fixture);
        let hash = if i % 2 == 0 { pinned.clone() } else { String::new() };
        text.push_str(&format!("repo{i},file://{},{hash},,,\n", repo.display()));
        pins.push((i % 2 == 0).then_some(pinned));
    }
    let input = dir.path().join("input.csv");
    fs::write(&input, text).unwrap();
    let out = flakemine()
        .args(["--log-level=warn", "run", "--out-dir"])
        .arg(dir.path().join("out"))
        .args(["--system-site-packages", "--no-plugin-autoload"])
        .arg(&input)
        .arg("1")
        .output()
        .unwrap();
    let discovery = discover_results(&dir.path().join("out"));
    let iterations = &discovery.results[0].iterations;
    assert_eq!(iterations.len(), 10);
    let mut ok = 0;
    for iteration in iterations {
        let result = read_iteration_result(&iteration.path).unwrap();
        if result.status == IterationStatus::Ok && result.runs.iter().all(|r| r.report.is_some()) {
            ok += 1;
        }
        let pin = &pins[result.row_number as usize - 1];
        if let Some(pin) = pin {
            assert_eq!(result.resolved_revision.as_ref(), Some(pin));
        }
    }
    assert!(ok >= 9, "{ok} of 10 iterations succeeded");
    assert!(out.status.success());
}

#[test]
fn bad_row_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input.csv");
    let corpus = project("ordering_corpus");
    let missing = dir.path().join("missing");
    write_input(
        &input,
        &[("good", corpus.as_path()), ("bad", missing.as_path()), ("good", corpus.as_path())],
    );
    let out = flakemine()
        .args(["--log-level=error", "run", "--max-parallel", "2", "--out-dir"])
        .arg(dir.path().join("out"))
        .args(["--system-site-packages", "--no-plugin-autoload"])
        .arg(&input)
        .arg("1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let discovery = discover_results(&dir.path().join("out"));
    let statuses: Vec<IterationStatus> = discovery.results[0]
        .iterations
        .iter()
        .map(|i| read_iteration_result(&i.path).unwrap().status)
        .collect();
    assert_eq!(statuses.iter().filter(|s| **s == IterationStatus::Ok).count(), 2);
    assert_eq!(statuses.iter().filter(|s| **s == IterationStatus::CopyFailed).count(), 1);
}

#[test]
fn twelve_rows_in_parallel_give_twelve_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input.csv");
    let corpus = project("ordering_corpus");
    let rows: Vec<(&str, &Path)> = ["avwx-engine", "jgutils", "flapy_example"]
        .iter()
        .flat_map(|name| std::iter::repeat_n((*name, corpus.as_path()), 4))
        .collect();
    write_input(&input, &rows);
    let out = flakemine()
        .args(["--log-level=error", "run", "--max-parallel", "4", "--out-dir"])
        .arg(dir.path().join("out"))
        .args(["--system-site-packages", "--no-plugin-autoload"])
        .arg(&input)
        .arg("1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(check_layout(&dir.path().join("out")).unwrap(), 12);
    let discovery = discover_results(&dir.path().join("out"));
    let mut lines: Vec<u64> = discovery.results[0].iterations.iter().map(|i| i.line_number).collect();
    lines.sort();
    assert_eq!(lines, (2..=13).collect::<Vec<_>>());
}

/// Iteration directory names and archive member names with the campaign
/// stamp removed.
fn layout(results: &Path) -> Vec<String> {
    let discovery = discover_results(results);
    let stamp = discovery.results[0].stamp.to_string();
    let mut entries = Vec::new();
    for iteration in &discovery.results[0].iterations {
        let name = iteration.name().replace(&stamp, "STAMP");
        for file in fs::read_dir(&iteration.path).unwrap() {
            entries.push(format!("{name}/{}", file.unwrap().file_name().to_string_lossy()));
        }
        for (member, _) in flakemine::store::read_archive(&iteration.archive()).unwrap() {
            entries.push(format!("{name}:{}", member.replace(&stamp, "STAMP")));
        }
    }
    entries.sort();
    entries
}

#[test]
fn cluster_jobs_reproduce_the_local_layout() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input.csv");
    let corpus = project("flaky_corpus");
    let outage = project("outage_corpus");
    write_input(&input, &[("flaky_corpus", corpus.as_path()), ("outage_corpus", outage.as_path())]);
    let common_args = |cmd: &mut Command| {
        cmd.args(["--plus-random-runs", "--core-args", "--random-order-seed 3"])
            .args(["--system-site-packages", "--no-plugin-autoload"])
            .arg(&input)
            .arg("2");
    };

    let local = dir.path().join("local");
    let mut cmd = flakemine();
    cmd.args(["--log-level=error", "run", "--max-parallel", "1", "--out-dir"]).arg(&local);
    common_args(&mut cmd);
    assert!(cmd.output().unwrap().status.success());

    let cluster = dir.path().join("cluster");
    let mut cmd = flakemine();
    cmd.args(["--log-level=error", "run", "--run-on", "cluster", "--no-submit", "--out-dir"]).arg(&cluster);
    common_args(&mut cmd);
    assert!(cmd.output().unwrap().status.success());
    let results = results_dirs(&cluster);
    let jobs = results[0].join("!flapy.run/jobs");
    let mut scripts: Vec<PathBuf> = fs::read_dir(&jobs).unwrap().map(|e| e.unwrap().path()).collect();
    scripts.sort();
    assert_eq!(scripts.len(), 2);
    for script in &scripts {
        let status = Command::new("sh").arg(script).env("RUST_LOG", "error").status().unwrap();
        assert!(status.success(), "{}", script.display());
    }

    assert_eq!(layout(&local), layout(&cluster));
    let (_, local_csv) = parse_overview(&local, true);
    let (_, cluster_csv) = parse_overview(&cluster, true);
    assert_eq!(local_csv, cluster_csv);
}
