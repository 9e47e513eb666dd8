use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

/// Name written to the `tool` column for this counter.
pub const INTERNAL_LOC_TOOL: &str = "internal";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub files: u64,
    pub code_lines: u64,
    pub blank_lines: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocReport {
    pub languages: BTreeMap<String, LanguageCounts>,
    pub skipped_files: u64,
    pub tool: String,
}

impl Default for LocReport {
    fn default() -> Self {
        Self {
            languages: BTreeMap::new(),
            skipped_files: 0,
            tool: INTERNAL_LOC_TOOL.into(),
        }
    }
}

pub fn language_of(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some(match ext.as_str() {
        "py" | "pyi" | "pyx" => "Python",
        "c" | "h" => "C",
        "cc" | "cpp" | "cxx" | "hh" | "hpp" | "hxx" => "C++",
        "js" | "mjs" | "cjs" => "JavaScript",
        "ts" => "TypeScript",
        "sh" | "bash" => "Shell",
        "yml" | "yaml" => "YAML",
        "md" | "markdown" => "Markdown",
        "toml" => "TOML",
        "json" => "JSON",
        "rst" => "reStructuredText",
        _ => return None,
    })
}

fn is_vcs_dir(name: &std::ffi::OsStr) -> bool {
    matches!(name.to_str(), Some(".git" | ".hg" | ".svn"))
}

/// Counts lines per language. A line is blank if it holds only whitespace,
/// otherwise it is code; comments are not recognised.
pub fn measure_loc(sources_dir: &Path) -> LocReport {
    let mut report = LocReport::default();
    let walker = WalkDir::new(sources_dir)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| !(e.file_type().is_dir() && is_vcs_dir(e.file_name())));
    for entry in walker {
        let Ok(entry) = entry else {
            report.skipped_files += 1;
            continue;
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let Some(language) = language_of(entry.path()) else {
            continue;
        };
        let Ok(bytes) = fs::read(entry.path()) else {
            report.skipped_files += 1;
            continue;
        };
        let counts = report.languages.entry(language.to_owned()).or_default();
        counts.files += 1;
        if bytes.is_empty() {
            continue;
        }
        let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
        for line in body.split(|&b| b == b'\n') {
            if line.iter().all(u8::is_ascii_whitespace) {
                counts.blank_lines += 1;
            } else {
                counts.code_lines += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::process::Command;

    #[test]
    fn ten_line_python_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("m.py"),
            "import os\n\ndef f():\n    return 1\n\nx = 1\ny = 2\nz = 3\nw = 4\nv = 5\n",
        )
        .unwrap();
        let report = measure_loc(dir.path());
        assert_eq!(
            report.languages["Python"],
            LanguageCounts { files: 1, code_lines: 8, blank_lines: 2 }
        );
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let report = measure_loc(dir.path());
        assert!(report.languages.is_empty());
        assert_eq!(report.tool, "internal");
    }

    fn awk_oracle(dir: &Path, pattern: &str) -> (u64, u64) {
        let script = format!(
            "find . -path ./.git -prune -o -type f -name '{pattern}' -print0 | \
             xargs -0 -r awk 'NF==0{{b++}} NF>0{{c++}} END{{print c+0, b+0}}'"
        );
        let out = Command::new("sh").arg("-c").arg(script).current_dir(dir).output().unwrap();
        let text = String::from_utf8(out.stdout).unwrap();
        let mut it = text.split_whitespace().map(|n| n.parse::<u64>().unwrap());
        (it.next().unwrap(), it.next().unwrap())
    }

    #[test]
    fn matches_awk_oracle_on_mixed_tree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("pkg/sub")).unwrap();
        fs::create_dir_all(root.join(".git")).unwrap();
        fs::write(root.join(".git/hook.py"), "ignored\n").unwrap();
        fs::write(root.join("pkg/a.py"), "a = 1\n\n   \nb = 2\n").unwrap();
        fs::write(root.join("pkg/sub/b.py"), "def g():\n\tpass\n\n# c\n").unwrap();
        fs::write(root.join("pkg/c.sh"), "#!/bin/sh\necho hi\n\n").unwrap();
        fs::write(root.join("README.md"), "# T\n\ntext\nmore\n\n\n").unwrap();
        fs::write(root.join("ci.yml"), "a: 1\nb:\n  - 2\n").unwrap();
        fs::write(root.join("no_newline.py"), "x = 1\n\ny = 2").unwrap();
        let report = measure_loc(root);
        for (language, pattern) in [("Python", "*.py"), ("Shell", "*.sh"), ("Markdown", "*.md"), ("YAML", "*.yml")] {
            let (code, blank) = awk_oracle(root, pattern);
            let got = report.languages[language];
            assert_eq!((got.code_lines, got.blank_lines), (code, blank), "{language}");
        }
        assert_eq!(report.languages["Python"].files, 3);
    }
}
