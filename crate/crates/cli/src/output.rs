//! All-or-nothing output files.
//!
//! Contents are rendered in memory first, then each file is written to a
//! temporary sibling and renamed into place. If any rename fails the files
//! already placed by this batch are removed again.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;

use crate::failure::Failure;

#[derive(Debug, Default)]
pub struct Outputs {
    pending: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: &Path, bytes: Vec<u8>) {
        self.pending.push((path.to_path_buf(), bytes));
    }

    pub fn commit(self) -> Result<(), Failure> {
        let mut staged = Vec::with_capacity(self.pending.len());
        for (path, bytes) in &self.pending {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir)
                .with_context(|| {
                    format!("cannot create a temporary file next to {}", path.display())
                })
                .map_err(Failure::data)?;
            tmp.write_all(bytes)
                .and_then(|_| tmp.flush())
                .with_context(|| format!("cannot write {}", path.display()))
                .map_err(Failure::data)?;
            staged.push((path, tmp));
        }
        let mut placed: Vec<&Path> = Vec::new();
        for (path, tmp) in staged {
            if let Err(e) = tmp.persist(path) {
                for p in placed {
                    let _ = std::fs::remove_file(p);
                }
                return Err(Failure::data(
                    anyhow::Error::new(e.error).context(format!("cannot place {}", path.display())),
                ));
            }
            placed.push(path);
        }
        Ok(())
    }
}

pub fn csv_bytes<F>(fill: F) -> Result<Vec<u8>, Failure>
where
    F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    fill(&mut buf).map_err(Failure::internal)?;
    Ok(buf)
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(Failure::internal)?;
    bytes.push(b'\n');
    Ok(bytes)
}
