//! Output directory: deterministic data files, timing files and a metadata record.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use crate::error::{CliError, Failure, ResultExt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Byte-identical across reruns with the same config and seeds.
    Data,
    /// Wall-clock measurements.
    Timing,
}

#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    data: Vec<String>,
    timing: Vec<String>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    finished_unix_ms: u128,
    data_files: &'a [String],
    timing_files: &'a [String],
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))
            .or_fail(Failure::Io)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            data: Vec::new(),
            timing: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn record(&mut self, name: &str, kind: Kind) {
        let list = match kind {
            Kind::Data => &mut self.data,
            Kind::Timing => &mut self.timing,
        };
        list.push(name.to_string());
    }

    fn write_bytes(&mut self, name: &str, kind: Kind, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, bytes)
            .with_context(|| format!("cannot write {}", path.display()))
            .or_fail(Failure::Io)?;
        self.record(name, kind);
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, kind: Kind, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).or_fail(Failure::Invariant)?;
        text.push('\n');
        self.write_bytes(name, kind, text.as_bytes())
    }

    /// Rows of strings under `header`.
    pub fn csv(&mut self, name: &str, kind: Kind, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).or_fail(Failure::Invariant)?;
        for row in rows {
            w.write_record(row).or_fail(Failure::Invariant)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::invariant(e.to_string()))?;
        self.write_bytes(name, kind, &bytes)
    }

    /// Writes `metadata.json`, the only file holding a timestamp.
    pub fn finish(self, command: &str) -> Result<(), CliError> {
        let finished = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let meta = Metadata {
            command,
            finished_unix_ms: finished,
            data_files: &self.data,
            timing_files: &self.timing,
        };
        let mut text = serde_json::to_string_pretty(&meta).or_fail(Failure::Invariant)?;
        text.push('\n');
        let path = self.path("metadata.json");
        fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .or_fail(Failure::Io)?;
        log::info!(
            "wrote {} data and {} timing files to {}",
            self.data.len(),
            self.timing.len(),
            self.dir.display()
        );
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v}")
}
