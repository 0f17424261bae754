// SPDX-License-Identifier: MIT OR Apache-2.0

//! Atomic CSV / JSON / JSONL writers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use saesteer::io::{to_jsonl, write_atomic};

use crate::error::{CliError, CliResult};

/// Collects the files a command wrote, relative to the output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_vec_pretty(value).map_err(saesteer::Error::from)?;
        text.push(b'\n');
        self.bytes(name, &text)
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let bytes = to_jsonl(rows)?;
        self.bytes(name, &bytes)
    }

    /// Header comes from the row type's field names, even with no rows.
    pub fn csv<T: Serialize + Default>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let bytes = csv_bytes(rows)?;
        self.bytes(name, &bytes)
    }

    /// Records that a path was produced by something other than these
    /// helpers (e.g. a container save).
    pub fn note(&mut self, path: PathBuf) {
        self.written.push(path);
    }
}

pub fn csv_bytes<T: Serialize + Default>(rows: &[T]) -> CliResult<Vec<u8>> {
    let csv_err = |e: csv::Error| CliError::Runtime(format!("csv: {e}"));
    if rows.is_empty() {
        // serialise a default row only to learn the header
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(T::default()).map_err(csv_err)?;
        let full = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
        let end = full.iter().position(|&b| b == b'\n').map_or(full.len(), |i| i + 1);
        return Ok(full[..end].to_vec());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}
