use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("package index unavailable: {0}")]
    Unavailable(String),
    #[error("metadata for {name} unavailable: {message}")]
    Metadata { name: String, message: String },
}

/// Metadata of a single package, restricted to what sampling needs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct PackageMetadata {
    /// Released versions, oldest first. The last entry is the current release.
    #[serde(default)]
    pub versions: Vec<String>,
    #[serde(default)]
    pub homepage: Option<String>,
    #[serde(default)]
    pub repository: Option<String>,
    /// Tags of the source repository, if known.
    #[serde(default)]
    pub git_tags: Vec<String>,
}

impl PackageMetadata {
    pub fn latest_version(&self) -> Option<&str> {
        self.versions.last().map(String::as_str)
    }
}

/// The two queries sampling issues against a package index.
pub trait PackageIndex {
    fn list_package_names(&self) -> Result<Vec<String>, IndexError>;
    fn metadata(&self, name: &str) -> Result<PackageMetadata, IndexError>;
}

#[derive(Debug, Deserialize)]
struct SnapshotEntry {
    name: String,
    #[serde(default)]
    unavailable: bool,
    #[serde(flatten)]
    metadata: PackageMetadata,
}

#[derive(Debug, Deserialize)]
struct SnapshotFile {
    packages: Vec<SnapshotEntry>,
}

/// File-backed index read from a single JSON snapshot:
///
/// ```json
/// {"packages": [{"name": "pkg", "versions": ["1.0"], "homepage": null,
///                "repository": "https://github.com/o/pkg", "git_tags": ["v1.0"]}]}
/// ```
///
/// An entry with `"unavailable": true` answers metadata queries with an error.
#[derive(Debug, Default)]
pub struct SnapshotIndex {
    names: Vec<String>,
    packages: BTreeMap<String, Option<PackageMetadata>>,
}

impl SnapshotIndex {
    pub fn from_json(text: &str) -> Result<Self, IndexError> {
        let file: SnapshotFile =
            serde_json::from_str(text).map_err(|e| IndexError::Unavailable(e.to_string()))?;
        let mut index = SnapshotIndex::default();
        for entry in file.packages {
            index.names.push(entry.name.clone());
            index
                .packages
                .insert(entry.name, (!entry.unavailable).then_some(entry.metadata));
        }
        Ok(index)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| IndexError::Unavailable(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl PackageIndex for SnapshotIndex {
    fn list_package_names(&self) -> Result<Vec<String>, IndexError> {
        Ok(self.names.clone())
    }

    fn metadata(&self, name: &str) -> Result<PackageMetadata, IndexError> {
        match self.packages.get(name) {
            Some(Some(meta)) => Ok(meta.clone()),
            Some(None) => Err(IndexError::Metadata {
                name: name.to_owned(),
                message: "marked unavailable in snapshot".into(),
            }),
            None => Err(IndexError::Metadata {
                name: name.to_owned(),
                message: "not in snapshot".into(),
            }),
        }
    }
}

/// PyPI over HTTP. Git tags are read with `git ls-remote`, without cloning.
#[cfg(feature = "live-index")]
pub struct LiveIndex {
    base_url: String,
}

#[cfg(feature = "live-index")]
impl Default for LiveIndex {
    fn default() -> Self {
        Self::new("https://pypi.org")
    }
}

#[cfg(feature = "live-index")]
impl LiveIndex {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
        }
    }

    fn remote_tags(repo: &str) -> Vec<String> {
        let output = std::process::Command::new("git")
            .args(["ls-remote", "--tags", "--refs", repo])
            .env("GIT_TERMINAL_PROMPT", "0")
            .output();
        match output {
            Ok(out) if out.status.success() => String::from_utf8_lossy(&out.stdout)
                .lines()
                .filter_map(|l| l.split_once("refs/tags/").map(|(_, t)| t.to_owned()))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[cfg(feature = "live-index")]
impl PackageIndex for LiveIndex {
    fn list_package_names(&self) -> Result<Vec<String>, IndexError> {
        #[derive(Deserialize)]
        struct Project {
            name: String,
        }
        #[derive(Deserialize)]
        struct Listing {
            projects: Vec<Project>,
        }
        let listing: Listing = ureq::get(&format!("{}/simple/", self.base_url))
            .header("Accept", "application/vnd.pypi.simple.v1+json")
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| IndexError::Unavailable(e.to_string()))?;
        Ok(listing.projects.into_iter().map(|p| p.name).collect())
    }

    fn metadata(&self, name: &str) -> Result<PackageMetadata, IndexError> {
        #[derive(Deserialize)]
        struct Info {
            version: Option<String>,
            home_page: Option<String>,
            project_urls: Option<BTreeMap<String, String>>,
        }
        #[derive(Deserialize)]
        struct Response {
            info: Info,
            #[serde(default)]
            releases: BTreeMap<String, serde_json::Value>,
        }
        let resp: Response = ureq::get(&format!("{}/pypi/{name}/json", self.base_url))
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| IndexError::Metadata {
                name: name.to_owned(),
                message: e.to_string(),
            })?;

        let mut versions: Vec<String> = resp
            .releases
            .into_keys()
            .filter(|v| Some(v) != resp.info.version.as_ref())
            .collect();
        versions.extend(resp.info.version);

        let repository = resp.info.project_urls.and_then(|urls| {
            urls.into_iter()
                .find(|(k, _)| {
                    matches!(
                        k.to_ascii_lowercase().as_str(),
                        "source" | "source code" | "repository" | "code" | "github"
                    )
                })
                .map(|(_, v)| v)
        });
        let mut meta = PackageMetadata {
            versions,
            homepage: resp.info.home_page.filter(|h| !h.is_empty()),
            repository,
            git_tags: Vec::new(),
        };
        if let Some(url) = super::sample::resolve_source_url(&meta) {
            meta.git_tags = Self::remote_tags(&url);
        }
        Ok(meta)
    }
}
