//! Run directory writer and manifest.
//!
//! All files of a run go through one [`OutputDir`], which records a SHA-256
//! for each; the manifest listing them is written last.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stochmatch_core::io::fmt_num;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub software: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Config as run: resolved input paths, effective root seed.
    pub config: RunConfig,
    /// SHA-256 of each input file, by path.
    pub inputs: Vec<FileEntry>,
    pub diagnostics: serde_json::Map<String, serde_json::Value>,
    pub files: Vec<FileEntry>,
    /// True when the run stopped with an error; `error` says why and the
    /// listed files are whatever was written before it.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<FileEntry> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileEntry {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let bytes = bytes.as_ref();
        let path = self.root.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(self, manifest: &Manifest) -> Result<()> {
        let path = self.root.join(MANIFEST);
        std::fs::write(&path, manifest.to_json()).with_context(|| format!("writing {}", path.display()))
    }
}

/// A CSV cell: integers print as-is, reals with 17 significant digits.
#[derive(Debug, Clone, Copy)]
pub enum Cell {
    Int(usize),
    Real(f64),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

pub fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<Cell>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        for (n, c) in row.iter().enumerate() {
            if n > 0 {
                out.push(',');
            }
            match c {
                Cell::Int(v) => {
                    let _ = write!(out, "{v}");
                }
                Cell::Real(v) => out.push_str(&fmt_num(*v)),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_formats_cells() {
        let t = table(&["k", "v"], [vec![Cell::Int(3), Cell::Real(0.1)]]);
        assert_eq!(t, "k,v\n3,1.0000000000000001e-1\n");
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn rewriting_a_file_keeps_one_entry() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a.csv", "x\n").unwrap();
        out.write("a.csv", "y\n").unwrap();
        assert_eq!(out.files().len(), 1);
        assert_eq!(out.files()[0].sha256, sha256_hex(b"y\n"));
    }
}
