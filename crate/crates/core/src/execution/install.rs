use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use thiserror::Error;
use walkdir::WalkDir;

use super::process::{remaining, run_logged};
use crate::input::InputRow;
use crate::sandbox::Workspace;

#[derive(Debug, Error)]
pub enum InstallError {
    #[error("{step} failed: {output}")]
    Failed { step: String, output: String, log: Vec<String> },
    #[error("{step} timed out")]
    TimedOut { step: String, log: Vec<String> },
}

impl InstallError {
    pub fn log(&self) -> &[String] {
        match self {
            InstallError::Failed { log, .. } | InstallError::TimedOut { log, .. } => log,
        }
    }
}

/// One installer invocation, in the order they are applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstallStep {
    /// `name==version` from the package index, pulling its dependencies.
    Release(String),
    Requirements(PathBuf),
    /// Install the project directory itself, found through this manifest.
    ProjectMetadata(PathBuf),
    /// Packages listed in a Pipfile.
    Pipenv { manifest: PathBuf, packages: Vec<String> },
    /// Installed only if `module` is not importable yet.
    Tool { module: String, package: String },
}

impl InstallStep {
    pub fn describe(&self) -> String {
        match self {
            InstallStep::Release(spec) => format!("release {spec}"),
            InstallStep::Requirements(p) => format!("requirements {}", p.display()),
            InstallStep::ProjectMetadata(p) => format!("project via {}", p.display()),
            InstallStep::Pipenv { manifest, .. } => format!("pipenv {}", manifest.display()),
            InstallStep::Tool { package, .. } => format!("tool {package}"),
        }
    }

    pub fn is_dependency(&self) -> bool {
        !matches!(self, InstallStep::Tool { .. })
    }
}

fn skip_dir(name: &str) -> bool {
    name.starts_with('.') || matches!(name, "node_modules" | "venv" | "env" | "__pycache__" | "site-packages")
}

fn requirement_files(sources: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = WalkDir::new(sources)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !(e.file_type().is_dir() && skip_dir(&e.file_name().to_string_lossy())))
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().to_ascii_lowercase();
            name.starts_with("requirements") && name.ends_with(".txt")
        })
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

fn declares_build(pyproject: &Path) -> bool {
    let Ok(text) = fs::read_to_string(pyproject) else {
        return false;
    };
    let Ok(doc) = text.parse::<toml::Table>() else {
        return false;
    };
    doc.contains_key("project")
        || doc.contains_key("build-system")
        || doc.get("tool").and_then(|t| t.get("poetry")).is_some()
}

fn project_manifest(sources: &Path) -> Option<PathBuf> {
    let pyproject = sources.join("pyproject.toml");
    if pyproject.is_file() && declares_build(&pyproject) {
        return Some(pyproject);
    }
    ["setup.py", "setup.cfg"]
        .into_iter()
        .map(|name| sources.join(name))
        .find(|p| p.is_file())
}

/// Requirement specifiers from the `[packages]` and `[dev-packages]` tables.
pub fn pipfile_packages(text: &str) -> Vec<String> {
    let Ok(doc) = text.parse::<toml::Table>() else {
        return Vec::new();
    };
    let mut specs = Vec::new();
    for table in ["packages", "dev-packages"] {
        let Some(packages) = doc.get(table).and_then(|t| t.as_table()) else {
            continue;
        };
        for (name, value) in packages {
            let spec = match value {
                toml::Value::String(v) if v == "*" || v.is_empty() => name.clone(),
                toml::Value::String(v) => format!("{name}{v}"),
                toml::Value::Table(t) => {
                    if t.contains_key("git") || t.contains_key("path") || t.contains_key("file") {
                        log::warn!("Pipfile entry {name}: VCS/path sources are not supported, skipped");
                        continue;
                    }
                    let extras = t
                        .get("extras")
                        .and_then(|e| e.as_array())
                        .map(|a| a.iter().filter_map(|x| x.as_str()).collect::<Vec<_>>().join(","))
                        .filter(|e| !e.is_empty())
                        .map(|e| format!("[{e}]"))
                        .unwrap_or_default();
                    let version = t
                        .get("version")
                        .and_then(|v| v.as_str())
                        .filter(|v| *v != "*")
                        .unwrap_or("");
                    format!("{name}{extras}{version}")
                }
                _ => continue,
            };
            specs.push(spec);
        }
    }
    specs
}

/// Dependency steps for a row: the release itself when a package-index tag is
/// given, otherwise every requirements file, then the project metadata, then
/// the Pipfile. `tools` are appended as [`InstallStep::Tool`] steps.
pub fn plan_installation(row: &InputRow, sources: &Path, tools: &[(&str, &str)]) -> Vec<InstallStep> {
    let mut steps = Vec::new();
    if let Some(tag) = &row.pypi_tag {
        steps.push(InstallStep::Release(format!("{}=={tag}", row.project_name)));
    } else {
        steps.extend(requirement_files(sources).into_iter().map(InstallStep::Requirements));
        steps.extend(project_manifest(sources).map(InstallStep::ProjectMetadata));
        let pipfile = sources.join("Pipfile");
        if let Ok(text) = fs::read_to_string(&pipfile) {
            let packages = pipfile_packages(&text);
            if !packages.is_empty() {
                steps.push(InstallStep::Pipenv { manifest: pipfile, packages });
            }
        }
    }
    steps.extend(tools.iter().map(|(module, package)| InstallStep::Tool {
        module: (*module).into(),
        package: (*package).into(),
    }));
    steps
}

/// Runs the installer for every planned step inside `workspace`.
///
/// `installer` is the argument prefix that installs packages (default:
/// `<venv python> -m pip install`). The returned log has one line per step.
pub fn install_dependencies(
    row: &InputRow,
    workspace: &Workspace,
    tools: &[(&str, &str)],
    installer: Option<&[String]>,
    deadline: Option<Instant>,
) -> Result<Vec<String>, InstallError> {
    let python = workspace.python();
    let default_installer = [
        python.display().to_string(),
        "-m".into(),
        "pip".into(),
        "install".into(),
        "--disable-pip-version-check".into(),
        "--no-input".into(),
    ];
    let installer = installer.unwrap_or(&default_installer);
    let log_file = workspace.root().join("install.log");
    let steps = plan_installation(row, &workspace.sources_dir, tools);
    let mut log = Vec::new();
    if !steps.iter().any(InstallStep::is_dependency) {
        log.push("no dependencies found".to_owned());
    }

    for step in steps {
        let args: Vec<String> = match &step {
            InstallStep::Release(spec) => vec![spec.clone()],
            InstallStep::Requirements(path) => vec!["-r".into(), path.display().to_string()],
            InstallStep::ProjectMetadata(_) => vec![workspace.sources_dir.display().to_string()],
            InstallStep::Pipenv { packages, .. } => packages.clone(),
            InstallStep::Tool { module, package } => {
                let present = Command::new(&python)
                    .args(["-c", &format!("import {module}")])
                    .output()
                    .is_ok_and(|o| o.status.success());
                if present {
                    log.push(format!("{}: already present", step.describe()));
                    continue;
                }
                vec![package.clone()]
            }
        };
        let mut cmd = Command::new(&installer[0]);
        cmd.args(&installer[1..])
            .args(&args)
            .current_dir(&workspace.sources_dir)
            .env("VIRTUAL_ENV", &workspace.venv_dir)
            .env("PIP_REQUIRE_VIRTUALENV", "0");
        let finished = run_logged(&mut cmd, &log_file, remaining(deadline)).map_err(|e| InstallError::Failed {
            step: step.describe(),
            output: e.to_string(),
            log: log.clone(),
        })?;
        if finished.timed_out() {
            log.push(format!("{}: timed out", step.describe()));
            return Err(InstallError::TimedOut { step: step.describe(), log });
        }
        if !finished.success() {
            log.push(format!("{}: failed", step.describe()));
            return Err(InstallError::Failed {
                step: step.describe(),
                output: finished.tail,
                log,
            });
        }
        log.push(format!("{}: ok", step.describe()));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> InputRow {
        InputRow::new("proj", "./proj", 1)
    }

    #[test]
    fn release_install_when_tag_given() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("requirements.txt"), "ignored\n").unwrap();
        let steps = plan_installation(&row().with_pypi_tag("1.0.0"), dir.path(), &[]);
        assert_eq!(steps, [InstallStep::Release("proj==1.0.0".into())]);
    }

    #[test]
    fn precedence_requirements_metadata_pipenv() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("docs")).unwrap();
        fs::create_dir_all(root.join(".tox")).unwrap();
        fs::write(root.join("requirements.txt"), "a==1\n").unwrap();
        fs::write(root.join("requirements-dev.txt"), "b==1\n").unwrap();
        fs::write(root.join("docs/requirements.txt"), "c==1\n").unwrap();
        fs::write(root.join(".tox/requirements.txt"), "d==1\n").unwrap();
        fs::write(root.join("pyproject.toml"), "[project]\nname = 'proj'\n").unwrap();
        fs::write(root.join("setup.py"), "").unwrap();
        fs::write(root.join("Pipfile"), "[packages]\nrequests = '*'\n[dev-packages]\npytest = '>=7'\n").unwrap();
        let steps = plan_installation(&row(), root, &[("pytest", "pytest")]);
        assert_eq!(
            steps,
            [
                InstallStep::Requirements(root.join("docs/requirements.txt")),
                InstallStep::Requirements(root.join("requirements-dev.txt")),
                InstallStep::Requirements(root.join("requirements.txt")),
                InstallStep::ProjectMetadata(root.join("pyproject.toml")),
                InstallStep::Pipenv {
                    manifest: root.join("Pipfile"),
                    packages: vec!["requests".into(), "pytest>=7".into()],
                },
                InstallStep::Tool { module: "pytest".into(), package: "pytest".into() },
            ]
        );
    }

    #[test]
    fn tool_only_pyproject_falls_back_to_setup_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("pyproject.toml"), "[tool.black]\nline-length = 88\n").unwrap();
        assert!(plan_installation(&row(), dir.path(), &[]).is_empty());
        fs::write(dir.path().join("setup.cfg"), "[metadata]\nname = proj\n").unwrap();
        assert_eq!(
            plan_installation(&row(), dir.path(), &[]),
            [InstallStep::ProjectMetadata(dir.path().join("setup.cfg"))]
        );
    }

    #[test]
    fn pipfile_tables() {
        let specs = pipfile_packages(
            "[packages]\nnumpy = {version = '==1.24', extras = ['dev']}\nlocal = {path = '.'}\nsix = ''\n",
        );
        assert_eq!(specs, ["numpy[dev]==1.24", "six"]);
    }
}
