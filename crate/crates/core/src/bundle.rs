//! Artifact directory layout and the run manifest listing every produced
//! file with its SHA-256.
//!
//! ```text
//! <root>/manifest.json                    run manifest
//! <root>/model/{config.json,weights.zip}
//! <root>/traces/{config.json,prompts.json,layer_<k>.zip}
//! <root>/blocks/<k>/{weights.zip,metrics.json,certificate.json}
//! <root>/model_certificate.json
//! <root>/edits/{corpus.json,markers.json}
//! <root>/edits/alpha_<a>/certificate.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_encode, decode};
use crate::digest::{digest_file, is_sha256_hex};
use crate::error::{Error, Result};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const RUN_MANIFEST_SCHEMA: &str = "residcert.run-manifest/1";
pub const MODEL_DIR: &str = "model";
pub const TRACES_DIR: &str = "traces";
pub const MODEL_CERTIFICATE: &str = "model_certificate.json";
pub const EDITS_DIR: &str = "edits";
pub const CORPUS_FILE: &str = "edits/corpus.json";
pub const MARKERS_FILE: &str = "edits/markers.json";

pub fn model_config() -> String {
    format!("{MODEL_DIR}/{}", crate::model::CONFIG_FILE)
}

pub fn model_weights() -> String {
    format!("{MODEL_DIR}/{}", crate::model::WEIGHTS_FILE)
}

pub fn trace_config() -> String {
    format!("{TRACES_DIR}/{}", crate::trace::CONFIG_FILE)
}

pub fn trace_prompts() -> String {
    format!("{TRACES_DIR}/{}", crate::trace::PROMPTS_FILE)
}

pub fn trace_layer(layer: usize) -> String {
    format!("{TRACES_DIR}/{}", crate::trace::layer_file(layer))
}

pub fn block_dir(layer: usize) -> String {
    format!("blocks/{layer}")
}

pub fn block_weights(layer: usize) -> String {
    format!("blocks/{layer}/weights.zip")
}

pub fn block_metrics(layer: usize) -> String {
    format!("blocks/{layer}/metrics.json")
}

pub fn block_certificate(layer: usize) -> String {
    format!("blocks/{layer}/certificate.json")
}

/// Directory name for an edit with scale `alpha`, e.g. `alpha_0.33`.
pub fn edit_certificate(alpha: f64) -> String {
    format!("{EDITS_DIR}/alpha_{alpha}/certificate.json")
}

/// Resolves a `/`-separated relative artifact path under `root`, refusing
/// absolute paths and `..` components.
pub fn resolve(root: &Path, rel: &str) -> Result<PathBuf> {
    let mut out = root.to_path_buf();
    for part in rel.split('/') {
        if part.is_empty() || part == "." || part == ".." || part.contains('\\') || part.contains(':') {
            return Err(Error::Input(format!("artifact path `{rel}` is not a plain relative path")));
        }
        out.push(part);
    }
    Ok(out)
}

/// Digests of the given relative paths.
pub fn digest_paths(root: &Path, rels: &[String]) -> Result<BTreeMap<String, String>> {
    rels.iter()
        .map(|r| Ok((r.clone(), digest_file(resolve(root, r)?)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: String,
    /// Relative path → SHA-256 of the file bytes, for every file under the
    /// root except the manifest itself.
    pub files: BTreeMap<String, String>,
}

/// All regular files under `root` (relative, `/`-separated, sorted),
/// excluding the run manifest.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io {
            path: root.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields paths under its root")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if rel != RUN_MANIFEST {
            out.push(rel);
        }
    }
    out.sort();
    Ok(out)
}

/// (Re)writes `<root>/manifest.json` covering every file currently present.
pub fn write_run_manifest(root: &Path) -> Result<RunManifest> {
    let files = digest_paths(root, &list_files(root)?)?;
    let m = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA.to_string(),
        files,
    };
    let path = root.join(RUN_MANIFEST);
    std::fs::write(&path, canonical_encode(&m)?).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

pub fn read_run_manifest(root: &Path) -> Result<Option<RunManifest>> {
    let path = root.join(RUN_MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: RunManifest = decode(&bytes)?;
    if m.schema_version != RUN_MANIFEST_SCHEMA {
        return Err(Error::Format(format!("unknown run manifest schema `{}`", m.schema_version)));
    }
    if canonical_encode(&m)? != bytes {
        return Err(Error::Format("run manifest is not canonically encoded".into()));
    }
    Ok(Some(m))
}

/// Differences between the run manifest and the files on disk: changed,
/// missing, and unlisted files. `Ok(None)` when no manifest exists.
pub fn check_run_manifest(root: &Path) -> Result<Option<Vec<String>>> {
    let Some(m) = read_run_manifest(root)? else {
        return Ok(None);
    };
    let mut problems = Vec::new();
    for (rel, want) in &m.files {
        if !is_sha256_hex(want) {
            problems.push(format!("{rel}: malformed digest"));
            continue;
        }
        match resolve(root, rel).and_then(digest_file) {
            Ok(found) if &found == want => {}
            Ok(found) => problems.push(format!("{rel}: digest {found} differs from recorded {want}")),
            Err(e) => problems.push(format!("{rel}: {e}")),
        }
    }
    for rel in list_files(root)? {
        if !m.files.contains_key(&rel) {
            problems.push(format!("{rel}: not listed in the run manifest"));
        }
    }
    Ok(Some(problems))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_tracks_changes() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("a/b")).unwrap();
        std::fs::write(root.join("a/b/x.txt"), b"x").unwrap();
        std::fs::write(root.join("y.txt"), b"y").unwrap();
        assert_eq!(check_run_manifest(root).unwrap(), None);
        let m = write_run_manifest(root).unwrap();
        assert_eq!(m.files.keys().cloned().collect::<Vec<_>>(), vec!["a/b/x.txt", "y.txt"]);
        assert_eq!(check_run_manifest(root).unwrap(), Some(vec![]));
        std::fs::write(root.join("y.txt"), b"z").unwrap();
        std::fs::write(root.join("new.txt"), b"n").unwrap();
        let problems = check_run_manifest(root).unwrap().unwrap();
        assert_eq!(problems.len(), 2);
    }

    #[test]
    fn resolve_rejects_escapes() {
        let root = Path::new("/r");
        assert!(resolve(root, "../x").is_err());
        assert!(resolve(root, "/x").is_err());
        assert_eq!(resolve(root, "a/b").unwrap(), Path::new("/r/a/b"));
    }
}
