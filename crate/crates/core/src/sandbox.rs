//! Disposable execution contexts.
//!
//! Two backends exist. The container backend starts one container per
//! iteration and is the only mode that protects the host from what the tests
//! of an unknown project do. The process backend gives every run a fresh
//! temporary directory and a fresh virtual environment, which is enough for
//! trusted subjects and for testing this tool itself, but it does **not**
//! sandbox syscalls, file access outside the workspace, or the network.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use thiserror::Error;
use walkdir::WalkDir;

/// Sourced before the container runtime is invoked.
pub const ENV_SETUP_SCRIPT: &str = "FLAPY_DOCKER_COMMAND_SETUP_SCRIPT";
/// Overrides the container image.
pub const ENV_IMAGE: &str = "FLAPY_DOCKER_IMAGE";

pub const DEFAULT_CONTAINER_COMMAND: &str = "docker run --rm --init {mounts} {image}";
pub const DEFAULT_IMAGE: &str = "localhost/flakemine";

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("cloning {url} failed: {message}")]
    CloneFailed { url: String, message: String },
    #[error("revision {revision} not found: {message}")]
    RevisionNotFound { revision: String, message: String },
    #[error("copying {path} failed: {message}")]
    CopyFailed { path: String, message: String },
    #[error("creating the virtual environment failed: {0}")]
    EnvCreationFailed(String),
    #[error("container command template: {0}")]
    Template(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Container,
    Process,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Whitespace/quote separated template; placeholders `{mounts}`,
    /// `{image}`, `{out_dir}` and `{sources}`.
    pub container_command: String,
    pub image_ref: String,
    pub setup_script: Option<PathBuf>,
    /// Interpreter used to create per-run environments (process backend).
    pub python: String,
    /// Let per-run environments see the interpreter's site-packages, so the
    /// test framework need not be downloaded into every run.
    pub system_site_packages: bool,
    /// Parent of all temporary workspaces; the system temp dir if unset.
    pub scratch_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::process()
    }
}

impl BackendConfig {
    pub fn process() -> Self {
        Self {
            kind: BackendKind::Process,
            container_command: DEFAULT_CONTAINER_COMMAND.into(),
            image_ref: DEFAULT_IMAGE.into(),
            setup_script: None,
            python: "python3".into(),
            system_site_packages: false,
            scratch_dir: None,
        }
    }

    pub fn container() -> Self {
        Self {
            kind: BackendKind::Container,
            ..Self::process()
        }
    }

    /// Applies [`ENV_SETUP_SCRIPT`] and [`ENV_IMAGE`] as read through `lookup`.
    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(script) = lookup(ENV_SETUP_SCRIPT).filter(|s| !s.is_empty()) {
            self.setup_script = Some(PathBuf::from(script));
        }
        if let Some(image) = lookup(ENV_IMAGE).filter(|s| !s.is_empty()) {
            self.image_ref = image;
        }
        self
    }

    pub fn with_process_env(self) -> Self {
        self.with_env(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), SandboxError> {
        if self.kind == BackendKind::Container {
            if self.container_command.trim().is_empty() {
                return Err(SandboxError::Template("empty container command".into()));
            }
            if self.image_ref.is_empty() {
                return Err(SandboxError::Template("empty image reference".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn scratch(&self) -> PathBuf {
        self.scratch_dir.clone().unwrap_or_else(std::env::temp_dir)
    }
}

/// Is `url` something `git clone` understands (as opposed to a plain path)?
pub fn is_git_url(url: &str) -> bool {
    url.contains("://") || url.starts_with("git@")
}

/// Sources of one iteration, deleted when dropped.
#[derive(Debug)]
pub struct Sources {
    root: TempDir,
    pub dir: PathBuf,
    /// Commit checked out, when the sources are a Git work tree.
    pub resolved_revision: Option<String>,
}

impl Sources {
    pub fn root(&self) -> &Path {
        self.root.path()
    }
}

fn git(args: &[&str], cwd: Option<&Path>) -> Result<String, String> {
    let mut cmd = Command::new("git");
    if let Some(cwd) = cwd {
        cmd.arg("-C").arg(cwd);
    }
    let out = cmd
        .args(args)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).trim().to_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_owned())
    }
}

fn checkout(dir: &Path, revision: &str) -> Result<(), SandboxError> {
    git(&["checkout", "--quiet", "--detach", revision], Some(dir)).map_err(|message| {
        SandboxError::RevisionNotFound {
            revision: revision.to_owned(),
            message,
        }
    })?;
    Ok(())
}

/// Clones or copies the project into a fresh directory below `scratch` and
/// checks out `project_hash` when given. Without a hash the clone is
/// shallow and the latest commit is used.
pub fn acquire_sources(
    project_url: &str,
    project_hash: Option<&str>,
    scratch: &Path,
) -> Result<Sources, SandboxError> {
    fs::create_dir_all(scratch)?;
    let root = tempfile::Builder::new().prefix("flakemine-src-").tempdir_in(scratch)?;
    let dir = root.path().join("sources");
    let local = Path::new(project_url);

    if local.is_dir() {
        copy_tree(local, &dir).map_err(|e| SandboxError::CopyFailed {
            path: project_url.to_owned(),
            message: e.to_string(),
        })?;
        if let Some(rev) = project_hash {
            checkout(&dir, rev)?;
        }
    } else if is_git_url(project_url) {
        let dest = dir.to_string_lossy().into_owned();
        let mut args = vec!["clone", "--quiet"];
        if project_hash.is_none() {
            args.extend(["--depth", "1"]);
        }
        args.extend([project_url, dest.as_str()]);
        git(&args, None).map_err(|message| SandboxError::CloneFailed {
            url: project_url.to_owned(),
            message,
        })?;
        if let Some(rev) = project_hash {
            checkout(&dir, rev)?;
        }
    } else {
        return Err(SandboxError::CopyFailed {
            path: project_url.to_owned(),
            message: "no such directory".into(),
        });
    }

    let resolved_revision = git(&["rev-parse", "HEAD"], Some(&dir)).ok().filter(|r| !r.is_empty());
    Ok(Sources {
        root,
        dir,
        resolved_revision,
    })
}

/// Copies a directory tree, recreating symlinks instead of following them.
pub fn copy_tree(src: &Path, dst: &Path) -> io::Result<u64> {
    let mut files = 0;
    fs::create_dir_all(dst)?;
    for entry in WalkDir::new(src).min_depth(1).follow_links(false) {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays below root");
        let target = dst.join(rel);
        let ty = entry.file_type();
        if ty.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ty.is_symlink() {
            let link = fs::read_link(entry.path())?;
            #[cfg(unix)]
            std::os::unix::fs::symlink(link, &target)?;
            #[cfg(not(unix))]
            fs::copy(entry.path().parent().unwrap_or(src).join(link), &target)?;
            files += 1;
        } else {
            fs::copy(entry.path(), &target)?;
            files += 1;
        }
    }
    Ok(files)
}

/// Total size in bytes of the regular files below `dir`.
pub fn disk_usage(dir: &Path) -> u64 {
    WalkDir::new(dir)
        .follow_links(false)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok())
        .map(|m| m.len())
        .sum()
}

/// A private copy of the sources plus a virtual environment, used by exactly
/// one run. Dropping the workspace deletes it.
#[derive(Debug)]
pub struct Workspace {
    root: TempDir,
    pub sources_dir: PathBuf,
    pub venv_dir: PathBuf,
    pub created_at: DateTime<Utc>,
}

impl Workspace {
    /// Copies `sources_dir` into a new root below `scratch`, without creating
    /// the environment yet.
    pub fn create(sources_dir: &Path, scratch: &Path) -> Result<Self, SandboxError> {
        fs::create_dir_all(scratch)?;
        let root = tempfile::Builder::new().prefix("flakemine-run-").tempdir_in(scratch)?;
        let sources = root.path().join("sources");
        copy_tree(sources_dir, &sources).map_err(|e| SandboxError::CopyFailed {
            path: sources_dir.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            venv_dir: root.path().join("venv"),
            sources_dir: sources,
            root,
            created_at: Utc::now(),
        })
    }

    pub fn root(&self) -> &Path {
        self.root.path()
    }

    /// Interpreter inside the workspace's environment.
    pub fn python(&self) -> PathBuf {
        if cfg!(windows) {
            self.venv_dir.join("Scripts").join("python.exe")
        } else {
            self.venv_dir.join("bin").join("python")
        }
    }

    pub fn create_environment(&self, config: &BackendConfig) -> Result<(), SandboxError> {
        let mut cmd = Command::new(&config.python);
        cmd.args(["-m", "venv"]);
        if config.system_site_packages {
            // pip is reachable through the system site-packages.
            cmd.args(["--system-site-packages", "--without-pip"]);
        }
        let out = cmd
            .arg(&self.venv_dir)
            .output()
            .map_err(|e| SandboxError::EnvCreationFailed(format!("{}: {e}", config.python)))?;
        if !out.status.success() {
            return Err(SandboxError::EnvCreationFailed(
                String::from_utf8_lossy(&out.stderr).trim().to_owned(),
            ));
        }
        Ok(())
    }

    /// Deletes the workspace, reporting failures that `Drop` would swallow.
    pub fn release(self) -> io::Result<()> {
        self.root.close()
    }
}

/// Copy of the sources plus a fresh environment in a new unique root.
pub fn fresh_run_workspace(sources_dir: &Path, config: &BackendConfig) -> Result<Workspace, SandboxError> {
    let workspace = Workspace::create(sources_dir, &config.scratch())?;
    workspace.create_environment(config)?;
    Ok(workspace)
}

/// What a container invocation must carry besides the template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationInvocation {
    /// Mounted read-write at the same path inside the container.
    pub out_dir: PathBuf,
    /// Local project sources, mounted read-only at the same path.
    pub sources: Option<PathBuf>,
    /// Arguments of the in-container entry point.
    pub entry_args: Vec<String>,
}

fn expand_token(token: &str, config: &BackendConfig, inv: &IterationInvocation) -> Result<String, SandboxError> {
    let mut out = String::with_capacity(token.len());
    let mut rest = token;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| SandboxError::Template(format!("unterminated placeholder in {token:?}")))?
            + start;
        let value = match &rest[start + 1..end] {
            "image" if config.image_ref.is_empty() => {
                return Err(SandboxError::Template("{image} with empty image reference".into()))
            }
            "image" => config.image_ref.clone(),
            "out_dir" => inv.out_dir.display().to_string(),
            "sources" => match &inv.sources {
                Some(s) => s.display().to_string(),
                None => return Err(SandboxError::Template("{sources} without local sources".into())),
            },
            other => return Err(SandboxError::Template(format!("unresolved placeholder {{{other}}}"))),
        };
        out.push_str(&value);
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Expands the container command template into a complete argument vector.
/// Nothing is executed.
pub fn build_container_invocation(
    config: &BackendConfig,
    invocation: &IterationInvocation,
) -> Result<Vec<String>, SandboxError> {
    if config.kind != BackendKind::Container {
        return Err(SandboxError::Template("backend is not a container backend".into()));
    }
    let tokens = shell_words::split(&config.container_command)
        .map_err(|e| SandboxError::Template(e.to_string()))?;
    if tokens.is_empty() {
        return Err(SandboxError::Template("empty container command".into()));
    }
    if !tokens.iter().any(|t| t.contains("{image}")) {
        return Err(SandboxError::Template("template lacks {image}".into()));
    }

    let mut argv = Vec::new();
    if let Some(script) = &config.setup_script {
        argv.extend([
            "sh".to_owned(),
            "-c".to_owned(),
            ". \"$0\" && exec \"$@\"".to_owned(),
            script.display().to_string(),
        ]);
    }
    for token in &tokens {
        if token == "{mounts}" {
            let out = invocation.out_dir.display();
            argv.extend(["-v".to_owned(), format!("{out}:{out}")]);
            if let Some(src) = &invocation.sources {
                let src = src.display();
                argv.extend(["-v".to_owned(), format!("{src}:{src}:ro")]);
            }
        } else {
            argv.push(expand_token(token, config, invocation)?);
        }
    }
    argv.extend(invocation.entry_args.iter().cloned());
    Ok(argv)
}
