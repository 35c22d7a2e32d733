//! Deterministic tensor archives: a stored (uncompressed) ZIP whose entries are
//! NPY payloads named `<tensor>.npy`, plus an optional `manifest.json`.
//!
//! Entries are written in sorted name order with the fixed DOS epoch
//! timestamp, so identical tensors always produce identical archive bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::digest::{sha256_hex, ArtifactDigest};
use crate::error::{Error, Result};
use crate::npy;
use crate::tensor::{is_masked, Tensor, MASK_SENTINEL};

pub const MANIFEST_ENTRY: &str = "manifest.json";
const NPY_SUFFIX: &str = ".npy";

/// Decoded contents of a tensor archive.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub manifest: Option<Vec<u8>>,
    /// Per-entry digests over the stored entry bytes.
    pub digests: ArtifactDigest,
}

pub fn entry_name(tensor: &str) -> String {
    format!("{tensor}{NPY_SUFFIX}")
}

/// Writes `tensors` (and `manifest`, if given) and returns per-entry digests.
pub fn write_tensor_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    manifest: Option<&[u8]>,
) -> Result<ArtifactDigest> {
    let mut entries: BTreeMap<String, Vec<u8>> = tensors
        .iter()
        .map(|(name, t)| (entry_name(name), npy::encode(t)))
        .collect();
    if let Some(m) = manifest {
        entries.insert(MANIFEST_ENTRY.to_string(), m.to_vec());
    }
    let bytes = zip_bytes(&entries)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(ArtifactDigest(
        entries
            .iter()
            .map(|(k, v)| (k.clone(), sha256_hex(v)))
            .collect(),
    ))
}

fn zip_bytes(entries: &BTreeMap<String, Vec<u8>>) -> Result<Vec<u8>> {
    let options = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut zw = ZipWriter::new(std::io::Cursor::new(Vec::new()));
    for (name, bytes) in entries {
        zw.start_file(name.as_str(), options)?;
        zw.write_all(bytes)
            .map_err(|e| Error::Format(format!("writing {name}: {e}")))?;
    }
    Ok(zw.finish()?.into_inner())
}

/// Reads every entry of an archive.
pub fn read_tensor_archive(path: &Path) -> Result<TensorArchive> {
    let raw = read_entries(path, false)?;
    decode_entries(path, raw)
}

/// Reads an archive and checks its entries against `expected`: a missing or
/// extra entry, or any digest difference, is an error naming the entry.
pub fn read_tensor_archive_verified(path: &Path, expected: &ArtifactDigest) -> Result<TensorArchive> {
    let raw = read_entries(path, true)?;
    for (name, want) in expected.entries() {
        let bytes = raw.get(name).ok_or_else(|| Error::MissingEntry {
            path: path.to_path_buf(),
            entry: name.to_string(),
        })?;
        let found = sha256_hex(bytes);
        if found != want {
            return Err(Error::DigestMismatch {
                name: name.to_string(),
                expected: want.to_string(),
                found,
            });
        }
    }
    if let Some(extra) = raw.keys().find(|k| expected.get(k).is_none()) {
        return Err(Error::Format(format!(
            "{}: unexpected entry `{extra}`",
            path.display()
        )));
    }
    decode_entries(path, raw)
}

fn decode_entries(path: &Path, raw: BTreeMap<String, Vec<u8>>) -> Result<TensorArchive> {
    let digests = ArtifactDigest(raw.iter().map(|(k, v)| (k.clone(), sha256_hex(v))).collect());
    let mut tensors = BTreeMap::new();
    let mut manifest = None;
    for (name, bytes) in raw {
        if name == MANIFEST_ENTRY {
            manifest = Some(bytes);
        } else if let Some(stem) = name.strip_suffix(NPY_SUFFIX) {
            let is_mask = stem.starts_with("mask");
            let mut t = npy::decode(&bytes, is_mask).map_err(|e| {
                Error::Format(format!("{}: entry `{name}`: {e}", path.display()))
            })?;
            if is_mask {
                // −∞ (as numpy writers produce) and the sentinel both mean
                // "masked"; keep one canonical in-memory encoding.
                t = t.map(|v| if is_masked(v) { MASK_SENTINEL } else { v });
            }
            tensors.insert(stem.to_string(), t);
        } else {
            return Err(Error::Format(format!(
                "{}: unexpected entry `{name}`",
                path.display()
            )));
        }
    }
    Ok(TensorArchive {
        tensors,
        manifest,
        digests,
    })
}

/// Raw entry bytes by name. With `keep_corrupt`, an entry whose CRC check
/// fails is still returned (so the caller's digest comparison names it).
fn read_entries(path: &Path, keep_corrupt: bool) -> Result<BTreeMap<String, Vec<u8>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut za = ZipArchive::new(file)?;
    let mut out = BTreeMap::new();
    for i in 0..za.len() {
        let mut f = za.by_index(i)?;
        let name = f.name().to_string();
        let size = f.size() as usize;
        let mut buf = Vec::with_capacity(size);
        if let Err(e) = f.read_to_end(&mut buf) {
            if !(keep_corrupt && buf.len() == size) {
                return Err(Error::Format(format!(
                    "{}: entry `{name}` unreadable: {e}",
                    path.display()
                )));
            }
        }
        if out.insert(name.clone(), buf).is_some() {
            return Err(Error::Format(format!(
                "{}: duplicate entry `{name}`",
                path.display()
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("b".into(), Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        m.insert("a".into(), Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
        m
    }

    #[test]
    fn round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.zip");
        let p2 = dir.path().join("two.zip");
        let d1 = write_tensor_archive(&p1, &sample(), Some(b"{}")).unwrap();
        let d2 = write_tensor_archive(&p2, &sample(), Some(b"{}")).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = read_tensor_archive(&p1).unwrap();
        assert_eq!(back.tensors, sample());
        assert_eq!(back.manifest.as_deref(), Some(&b"{}"[..]));
        assert_eq!(back.digests, d1);
        let names: Vec<_> = d1.entries().map(|(k, _)| k.to_string()).collect();
        assert_eq!(names, ["a.npy", "b.npy", "manifest.json"]);
    }

    #[test]
    fn verified_read_names_corrupted_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.zip");
        let digests = write_tensor_archive(&p, &sample(), None).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        // Last payload byte of `b.npy` (the second float of the last entry).
        let needle = 2.0f32.to_le_bytes();
        let pos = bytes.windows(4).rposition(|w| w == needle).unwrap();
        bytes[pos + 3] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        match read_tensor_archive_verified(&p, &digests) {
            Err(Error::DigestMismatch { name, .. }) => assert_eq!(name, "b.npy"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_tensor_archive(&p).is_err());
    }

    #[test]
    fn verified_read_reports_missing_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.zip");
        let mut digests = write_tensor_archive(&p, &sample(), None).unwrap();
        digests.0.insert("c.npy".into(), sha256_hex(b""));
        assert!(matches!(
            read_tensor_archive_verified(&p, &digests),
            Err(Error::MissingEntry { entry, .. }) if entry == "c.npy"
        ));
    }
}
