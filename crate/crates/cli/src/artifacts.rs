//! Versioned artifact directories: `<root>/<kind>/v<N>`, never overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use fastshap_core::eval::RunManifest;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Model,
    Surrogate,
    EvalModel,
    Explainer,
    Explanations,
    Benchmark,
    Auc,
}

impl Kind {
    pub fn dir_name(self) -> &'static str {
        match self {
            Kind::Model => "model",
            Kind::Surrogate => "surrogate",
            Kind::EvalModel => "eval-model",
            Kind::Explainer => "explainer",
            Kind::Explanations => "explanations",
            Kind::Benchmark => "benchmark",
            Kind::Auc => "auc",
        }
    }

    /// Subcommand producing this artifact.
    pub fn command(self) -> &'static str {
        match self {
            Kind::Model => "train-model",
            Kind::Surrogate => "train-surrogate",
            Kind::EvalModel => "train-eval-model",
            Kind::Explainer => "train-fastshap",
            Kind::Explanations => "explain",
            Kind::Benchmark => "benchmark",
            Kind::Auc => "auc",
        }
    }

    fn description(self) -> &'static str {
        match self {
            Kind::Model => "trained model",
            Kind::Surrogate => "trained surrogate",
            Kind::EvalModel => "trained evaluation model",
            Kind::Explainer => "trained explainer",
            Kind::Explanations => "explanations",
            Kind::Benchmark => "benchmark results",
            Kind::Auc => "removal curves",
        }
    }
}

fn version_of(path: &Path) -> Option<u64> {
    path.file_name()?.to_str()?.strip_prefix('v')?.parse().ok()
}

fn versions(root: &Path, kind: Kind) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let dir = root.join(kind.dir_name());
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(CliError::io(format!("cannot list {}", dir.display())))? {
        let path = entry
            .map_err(CliError::io(format!("cannot list {}", dir.display())))?
            .path();
        if let Some(v) = version_of(&path) {
            if path.join(MANIFEST).is_file() {
                out.push((v, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Newest complete version of `kind`, or an error naming the command that makes one.
pub fn latest(root: &Path, kind: Kind) -> Result<PathBuf, CliError> {
    versions(root, kind)?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| CliError::MissingPrerequisite {
            what: kind.description(),
            command: kind.command(),
            dir: root.join(kind.dir_name()),
        })
}

/// Creates the next free version directory. `create_dir` fails if another
/// process claimed the same name, in which case the next number is tried.
pub fn create_version(root: &Path, kind: Kind) -> Result<PathBuf, CliError> {
    let parent = root.join(kind.dir_name());
    fs::create_dir_all(&parent).map_err(CliError::io(format!("cannot create {}", parent.display())))?;
    let mut next = 1;
    for entry in fs::read_dir(&parent).map_err(CliError::io(format!("cannot list {}", parent.display())))? {
        let path = entry
            .map_err(CliError::io(format!("cannot list {}", parent.display())))?
            .path();
        if let Some(v) = version_of(&path) {
            next = next.max(v + 1);
        }
    }
    loop {
        let dir = parent.join(format!("v{next}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
            Err(e) => return Err(CliError::io(format!("cannot create {}", dir.display()))(e)),
        }
    }
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(CliError::io(format!("cannot write {}", path.display())))
}

/// Writes the manifest last so a directory without one is never picked up as complete.
pub fn finish<T: Serialize>(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    settings: &T,
    fingerprint: &str,
) -> Result<RunManifest, CliError> {
    let snapshot = toml::to_string(config).map_err(|e| CliError::Validation(format!("cannot encode config: {e}")))?;
    write(dir, CONFIG_SNAPSHOT, &snapshot)?;
    let manifest = RunManifest::new(command, config.seed, settings, Some(fingerprint.to_string()))?;
    write(dir, MANIFEST, &manifest.to_json()?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(CliError::io(format!("cannot read {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("corrupt manifest {}: {e}", path.display())))
}

/// Rejects an artifact built from different data than the current dataset.
pub fn check_fingerprint(dir: &Path, kind: Kind, fingerprint: &str) -> Result<RunManifest, CliError> {
    let manifest = read_manifest(dir)?;
    match &manifest.dataset_fingerprint {
        Some(fp) if fp == fingerprint => Ok(manifest),
        _ => Err(CliError::Validation(format!(
            "{} in {} was built from a different dataset; rerun `fastshap {}`",
            kind.description(),
            dir.display(),
            kind.command()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versions_increase_and_incomplete_dirs_are_skipped() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        assert!(matches!(
            latest(root, Kind::Model),
            Err(CliError::MissingPrerequisite {
                command: "train-model",
                ..
            })
        ));
        let v1 = create_version(root, Kind::Model).unwrap();
        assert!(v1.ends_with("model/v1"));
        assert!(latest(root, Kind::Model).is_err());
        write(&v1, MANIFEST, "{}").unwrap();
        let v2 = create_version(root, Kind::Model).unwrap();
        assert!(v2.ends_with("model/v2"));
        assert_eq!(latest(root, Kind::Model).unwrap(), v1);
    }
}
