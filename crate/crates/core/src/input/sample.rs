use std::collections::HashSet;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::index::{IndexError, PackageIndex, PackageMetadata};
use super::{is_valid_project_name, InputRecord};

/// A sampled package that resolved to a source repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCandidate {
    pub package_name: String,
    pub source_url: Option<String>,
    pub pypi_tag: Option<String>,
    /// Only set together with `pypi_tag`.
    pub matched_git_tag: Option<String>,
}

impl InputRecord for SampleCandidate {
    fn project_name(&self) -> &str {
        &self.package_name
    }
    fn project_url(&self) -> &str {
        self.source_url.as_deref().unwrap_or("")
    }
    fn project_hash(&self) -> Option<&str> {
        self.matched_git_tag.as_deref()
    }
    fn pypi_tag(&self) -> Option<&str> {
        self.pypi_tag.as_deref()
    }
}

/// Result of [`sample_projects`]: the candidates plus every package that was
/// sampled but not turned into a candidate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sample {
    pub candidates: Vec<SampleCandidate>,
    /// `(package, reason)` for metadata failures and unusable names.
    pub skipped: Vec<(String, String)>,
    pub without_source: usize,
    pub duplicates: usize,
}

fn github_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:git\+)?(?:(?:https?|git|ssh)://(?:[^@/]+@)?(?:www\.)?github\.com/|git@github\.com:)([A-Za-z0-9_.-]+)/([A-Za-z0-9_.-]+?)(?:\.git)?(?:[/#?].*)?$",
        )
        .expect("valid regex")
    })
}

/// Canonical `https://github.com/<owner>/<repo>` form of a GitHub URL, or
/// `None` if the URL does not point at a GitHub repository.
pub fn normalize_source_url(url: &str) -> Option<String> {
    let caps = github_re().captures(url.trim())?;
    let owner = caps[1].to_ascii_lowercase();
    let repo = caps[2].to_ascii_lowercase();
    if repo.is_empty() {
        return None;
    }
    Some(format!("https://github.com/{owner}/{repo}"))
}

/// Repository field first, homepage second.
pub(crate) fn resolve_source_url(meta: &PackageMetadata) -> Option<String> {
    [meta.repository.as_deref(), meta.homepage.as_deref()]
        .into_iter()
        .flatten()
        .find_map(normalize_source_url)
}

/// The Git tag naming `version`, comparing after dropping one leading `v`.
pub fn match_git_tag<'a>(version: &str, tags: &'a [String]) -> Option<&'a str> {
    tags.iter()
        .map(String::as_str)
        .find(|tag| tag.strip_prefix('v').unwrap_or(tag) == version)
}

/// Draws `sample_size` packages without replacement, resolves their source
/// repositories and drops packages without one as well as repeated
/// repositories. Deterministic for a fixed index content and seed.
pub fn sample_projects(
    index: &dyn PackageIndex,
    sample_size: usize,
    seed: u64,
) -> Result<Sample, IndexError> {
    let mut sample = Sample::default();
    if sample_size == 0 {
        return Ok(sample);
    }
    let mut names = index.list_package_names()?;
    names.sort();
    names.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);
    names.truncate(sample_size);

    let mut seen = HashSet::new();
    for name in names {
        if !is_valid_project_name(&name) {
            sample.skipped.push((name, "name not usable as directory component".into()));
            continue;
        }
        let meta = match index.metadata(&name) {
            Ok(meta) => meta,
            Err(err) => {
                log::warn!("skipping {name}: {err}");
                sample.skipped.push((name, err.to_string()));
                continue;
            }
        };
        let Some(url) = resolve_source_url(&meta) else {
            sample.without_source += 1;
            continue;
        };
        if !seen.insert(url.clone()) {
            sample.duplicates += 1;
            continue;
        }
        let pypi_tag = meta.latest_version().map(str::to_owned);
        let matched_git_tag = pypi_tag
            .as_deref()
            .and_then(|v| match_git_tag(v, &meta.git_tags))
            .map(str::to_owned);
        sample.candidates.push(SampleCandidate {
            package_name: name,
            source_url: Some(url),
            pypi_tag,
            matched_git_tag,
        });
    }
    Ok(sample)
}
