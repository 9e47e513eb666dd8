//! junit-XML reports to per-test verdicts.

use std::collections::HashMap;
use std::sync::OnceLock;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execution::RunOrder;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JunitError {
    #[error("malformed junit xml: {0}")]
    MalformedXml(String),
    #[error("{0:?} is not a report file name")]
    NameMismatch(String),
}

/// Identity of a test across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TestId {
    pub file: String,
    pub classname: String,
    /// Without the parametrization suffix.
    pub name: String,
    /// Content of the trailing `[...]`, empty when not parametrized.
    pub parametrization: String,
}

impl TestId {
    pub fn new(
        file: impl Into<String>,
        classname: impl Into<String>,
        name: impl Into<String>,
        parametrization: impl Into<String>,
    ) -> Self {
        Self {
            file: file.into(),
            classname: classname.into(),
            name: name.into(),
            parametrization: parametrization.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Passed,
    Failed,
    Error,
    Skipped,
}

/// Which iteration a run belongs to. The results-directory name is part of the
/// key so that merged campaigns with the same row numbers stay apart.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IterationKey {
    pub results_dir: String,
    pub project_name: String,
    pub row_number: u64,
}

/// A test's verdict in one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub test: TestId,
    pub verdict: Verdict,
    pub iteration: IterationKey,
    pub order: RunOrder,
    pub run_index: u32,
}

/// `name[params]` into `(name, params)`.
pub fn split_parametrization(name: &str) -> (&str, &str) {
    if name.ends_with(']') {
        if let Some(open) = name.find('[') {
            return (&name[..open], &name[open + 1..name.len() - 1]);
        }
    }
    (name, "")
}

/// `pkg.test_mod.TestClass` -> `pkg/test_mod.py`: trailing components that
/// start with an upper-case letter are taken to be classes.
pub fn file_from_classname(classname: &str) -> String {
    let parts: Vec<&str> = classname.split('.').collect();
    let module_len = parts
        .iter()
        .rposition(|p| !p.starts_with(|c: char| c.is_ascii_uppercase()))
        .map_or(0, |i| i + 1);
    if module_len == 0 {
        return String::new();
    }
    format!("{}.py", parts[..module_len].join("/"))
}

#[derive(Debug, Default)]
struct Case {
    file: Option<String>,
    classname: String,
    name: String,
    failure: bool,
    error: bool,
    skipped: bool,
}

impl Case {
    fn from_start(e: &BytesStart<'_>) -> Result<Self, JunitError> {
        let mut case = Case::default();
        for attr in e.attributes() {
            let attr = attr.map_err(|err| JunitError::MalformedXml(err.to_string()))?;
            let value = attr
                .normalized_value(XmlVersion::Implicit1_0)
                .map_err(|err| JunitError::MalformedXml(err.to_string()))?
                .into_owned();
            match attr.key.as_ref() {
                "file" => case.file = Some(value),
                "classname" => case.classname = value,
                "name" => case.name = value,
                _ => {}
            }
        }
        Ok(case)
    }

    fn finish(self) -> (TestId, Verdict) {
        let verdict = if self.error {
            Verdict::Error
        } else if self.failure {
            Verdict::Failed
        } else if self.skipped {
            Verdict::Skipped
        } else {
            Verdict::Passed
        };
        let (name, params) = split_parametrization(&self.name);
        let file = self
            .file
            .filter(|f| !f.is_empty())
            .unwrap_or_else(|| file_from_classname(&self.classname));
        (TestId::new(file, self.classname.clone(), name, params), verdict)
    }
}

/// All testcases of a report.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedReport {
    /// One entry per distinct test, in first-appearance order; for repeated
    /// identities the last verdict wins.
    pub records: Vec<(TestId, Verdict)>,
    /// Every testcase element in document order, repeats included.
    pub sequence: Vec<TestId>,
    pub duplicates: Vec<TestId>,
}

/// Parses a report, flattening testcases at any nesting depth. A testcase
/// with both `failure` and `error` children is an error.
pub fn parse_junit_xml(bytes: &[u8]) -> Result<ParsedReport, JunitError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().check_end_names = true;
    let mut buf = Vec::new();
    let mut depth = 0usize;
    let mut case_depth = None;
    let mut current: Option<Case> = None;
    let mut saw_root = false;
    let mut report = ParsedReport::default();
    let mut positions: HashMap<TestId, usize> = HashMap::new();

    let mut push = |report: &mut ParsedReport, case: Case| {
        let (id, verdict) = case.finish();
        report.sequence.push(id.clone());
        match positions.get(&id) {
            Some(&i) => {
                log::warn!("duplicate test id {id:?} in report, last occurrence wins");
                report.duplicates.push(id);
                report.records[i].1 = verdict;
            }
            None => {
                positions.insert(id.clone(), report.records.len());
                report.records.push((id, verdict));
            }
        }
    };

    loop {
        let event = reader
            .read_event_into(&mut buf)
            .map_err(|e| JunitError::MalformedXml(format!("at byte {}: {e}", reader.error_position())))?;
        match event {
            Event::Start(e) => {
                if depth == 0 && saw_root {
                    return Err(JunitError::MalformedXml("multiple root elements".into()));
                }
                saw_root = true;
                depth += 1;
                match e.local_name().as_ref() {
                    "testcase" if current.is_none() => {
                        current = Some(Case::from_start(&e)?);
                        case_depth = Some(depth);
                    }
                    name if case_depth == Some(depth - 1) => mark(current.as_mut(), name),
                    _ => {}
                }
            }
            Event::Empty(e) => {
                if depth == 0 && saw_root {
                    return Err(JunitError::MalformedXml("multiple root elements".into()));
                }
                saw_root = true;
                match e.local_name().as_ref() {
                    "testcase" if current.is_none() => push(&mut report, Case::from_start(&e)?),
                    name if case_depth == Some(depth) => mark(current.as_mut(), name),
                    _ => {}
                }
            }
            Event::End(_) => {
                if case_depth == Some(depth) {
                    if let Some(case) = current.take() {
                        push(&mut report, case);
                    }
                    case_depth = None;
                }
                depth -= 1;
            }
            Event::Text(t) if depth == 0 && !t.trim().is_empty() => {
                return Err(JunitError::MalformedXml("text outside the root element".into()));
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }
    if !saw_root {
        return Err(JunitError::MalformedXml("no root element".into()));
    }
    if depth != 0 {
        return Err(JunitError::MalformedXml("unexpected end of document".into()));
    }
    Ok(report)
}

fn mark(case: Option<&mut Case>, child: &str) {
    if let Some(case) = case {
        match child {
            "failure" => case.failure = true,
            "error" => case.error = true,
            "skipped" => case.skipped = true,
            _ => {}
        }
    }
}

fn report_name_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(.+)_output(\d+)\.xml$").expect("valid regex"))
}

/// Inverse of the report numbering: `<project>_output<i>.xml` is the
/// same-order run `i` if `i < num_runs`, else random-order run `i - num_runs`.
pub fn classify_run_order(file_name: &str, num_runs: u32) -> Result<(RunOrder, u32), JunitError> {
    let base = file_name.rsplit('/').next().unwrap_or(file_name);
    let index: u32 = report_name_re()
        .captures(base)
        .and_then(|c| c[2].parse().ok())
        .ok_or_else(|| JunitError::NameMismatch(file_name.to_owned()))?;
    Ok(if index < num_runs {
        (RunOrder::Same, index)
    } else {
        (RunOrder::Random, index - num_runs)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PYTEST_REPORT: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<testsuites name="pytest tests"><testsuite name="pytest" errors="1" failures="1" skipped="1" tests="5">
<testcase classname="test_flaky" name="test_ok" file="test_flaky.py" line="1" time="0.001" />
<testcase classname="test_flaky" name="test_roll[3-seed7]" file="test_flaky.py" line="4" time="0.001"><failure message="assert 0">trace &amp; more</failure><system-out>out</system-out></testcase>
<testcase classname="test_flaky.TestGroup" name="test_err" file="test_flaky.py" time="0.001"><failure message="x"/><error message="teardown"/></testcase>
<testcase classname="pkg.test_mod" name="test_skip" time="0"><skipped type="pytest.skip" message="no"/></testcase>
<testcase classname="pkg.test_mod.TestA.TestB" name="test_nested" time="0"><error message="fixture"/></testcase>
</testsuite></testsuites>"#;

    #[test]
    fn verdict_mapping_and_identity() {
        let report = parse_junit_xml(PYTEST_REPORT.as_bytes()).unwrap();
        let got: Vec<(TestId, Verdict)> = report.records;
        assert_eq!(
            got,
            [
                (TestId::new("test_flaky.py", "test_flaky", "test_ok", ""), Verdict::Passed),
                (TestId::new("test_flaky.py", "test_flaky", "test_roll", "3-seed7"), Verdict::Failed),
                (TestId::new("test_flaky.py", "test_flaky.TestGroup", "test_err", ""), Verdict::Error),
                (TestId::new("pkg/test_mod.py", "pkg.test_mod", "test_skip", ""), Verdict::Skipped),
                (TestId::new("pkg/test_mod.py", "pkg.test_mod.TestA.TestB", "test_nested", ""), Verdict::Error),
            ]
        );
    }

    #[test]
    fn parametrization_split() {
        assert_eq!(split_parametrization("test_roll[3-seed7]"), ("test_roll", "3-seed7"));
        assert_eq!(split_parametrization("test_x[a[1]]"), ("test_x", "a[1]"));
        assert_eq!(split_parametrization("test_plain"), ("test_plain", ""));
        assert_eq!(split_parametrization("test_odd]"), ("test_odd]", ""));
    }

    #[test]
    fn nested_suites_are_flattened() {
        let xml = r#"<testsuites><testsuite name="a"><testsuite name="b">
            <testcase classname="m" name="t1"/></testsuite>
            <testcase classname="m" name="t2"><skipped/></testcase></testsuite></testsuites>"#;
        let report = parse_junit_xml(xml.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[1].1, Verdict::Skipped);
    }

    #[test]
    fn duplicates_last_wins() {
        let xml = r#"<testsuite><testcase classname="m" name="t"/><testcase classname="m" name="u"/>
            <testcase classname="m" name="t"><failure/></testcase></testsuite>"#;
        let report = parse_junit_xml(xml.as_bytes()).unwrap();
        assert_eq!(report.records.len(), 2);
        assert_eq!(report.records[0].1, Verdict::Failed);
        assert_eq!(report.duplicates.len(), 1);
        assert_eq!(report.sequence.len(), 3);
    }

    #[test]
    fn malformed_reports_rejected() {
        for bad in [
            "",
            "<testsuite><testcase name='a'></testsuite>",
            "<testsuite>",
            "garbage",
            "<a/><b/>",
        ] {
            assert!(
                matches!(parse_junit_xml(bad.as_bytes()), Err(JunitError::MalformedXml(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn deterministic() {
        let a = parse_junit_xml(PYTEST_REPORT.as_bytes()).unwrap();
        let b = parse_junit_xml(PYTEST_REPORT.as_bytes()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_order_from_name() {
        assert_eq!(classify_run_order("avwx-engine_output0.xml", 5), Ok((RunOrder::Same, 0)));
        assert_eq!(classify_run_order("avwx-engine_output5.xml", 5), Ok((RunOrder::Random, 0)));
        assert_eq!(
            classify_run_order("avwx-engine_20221123_161945_2/avwx-engine_output9.xml", 5),
            Ok((RunOrder::Random, 4))
        );
        assert_eq!(
            classify_run_order("avwx-engine_coverage0.xml", 5),
            Err(JunitError::NameMismatch("avwx-engine_coverage0.xml".into()))
        );
    }

    #[test]
    fn file_derivation() {
        assert_eq!(file_from_classname("test_x"), "test_x.py");
        assert_eq!(file_from_classname("tests.unit.test_x.TestC"), "tests/unit/test_x.py");
        assert_eq!(file_from_classname("TestOnly"), "");
    }
}
