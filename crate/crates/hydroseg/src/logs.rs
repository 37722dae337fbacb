//! Line-delimited JSON metric logs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hydroseg_core::trainer::{EpochRecord, LogRecord};

use crate::error::{format_err, io_err, Error, Result};

pub struct MetricLog {
    path: PathBuf,
    out: BufWriter<File>,
    failed: Option<Error>,
}

impl MetricLog {
    /// Creates (or truncates) the log file.
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = File::create(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(file), failed: None })
    }

    /// Appends one record. After the first failure further records are
    /// dropped and the error is reported by [`MetricLog::finish`].
    pub fn append(&mut self, record: &LogRecord) {
        if self.failed.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, record)
            .map_err(Error::from)
            .and_then(|_| self.out.write_all(b"\n").map_err(io_err(&self.path)));
        if let Err(e) = res {
            self.failed = Some(e);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(e);
        }
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn epochs(records: &[LogRecord]) -> Vec<&EpochRecord> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
        .collect()
}
