use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::ObjectError;
use crate::pipeline::{BatchSink, OperatorError, RecordBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileSinkMode {
    /// Chunks carry their byte offset as an 8-byte big-endian key.
    Raw,
    /// Record values are written one per line in batch-id order.
    Lines,
}

/// Writes a transfer into a local file.
pub struct FileSink {
    path: PathBuf,
    mode: FileSinkMode,
    raw: Option<File>,
    lines: Option<BufWriter<File>>,
    next_batch: u64,
    held: BTreeMap<u64, Vec<Vec<u8>>>,
    bytes_written: u64,
}

impl FileSink {
    pub fn create(path: impl AsRef<Path>, mode: FileSinkMode) -> Result<Self, ObjectError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        let (raw, lines) = match mode {
            FileSinkMode::Raw => (Some(file), None),
            FileSinkMode::Lines => (None, Some(BufWriter::new(file))),
        };
        Ok(Self {
            path,
            mode,
            raw,
            lines,
            next_batch: 0,
            held: BTreeMap::new(),
            bytes_written: 0,
        })
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    fn write_lines(&mut self, values: Vec<Vec<u8>>) -> Result<(), OperatorError> {
        let w = self.lines.as_mut().expect("lines mode");
        for v in values {
            w.write_all(&v)?;
            w.write_all(b"\n")?;
            self.bytes_written += v.len() as u64 + 1;
        }
        Ok(())
    }
}

impl BatchSink for FileSink {
    fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError> {
        match self.mode {
            FileSinkMode::Raw => {
                let f = self.raw.as_ref().expect("raw mode");
                for r in &batch.records {
                    let key: [u8; 8] = r.key.as_deref().and_then(|k| k.try_into().ok()).ok_or_else(|| {
                        ObjectError::Config(format!(
                            "batch {} has no 8-byte offset key; raw files need raw-mode chunks",
                            batch.batch_id
                        ))
                    })?;
                    f.write_all_at(&r.value, u64::from_be_bytes(key))?;
                    self.bytes_written += r.value.len() as u64;
                }
            }
            FileSinkMode::Lines => {
                let values: Vec<Vec<u8>> = batch.records.iter().map(|r| r.value.clone()).collect();
                if batch.batch_id == self.next_batch {
                    self.write_lines(values)?;
                    self.next_batch += 1;
                    while let Some(v) = self.held.remove(&self.next_batch) {
                        self.write_lines(v)?;
                        self.next_batch += 1;
                    }
                } else if batch.batch_id > self.next_batch {
                    self.held.insert(batch.batch_id, values);
                }
                // ids below next_batch are retransmitted duplicates
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), OperatorError> {
        if let Some(first) = self.held.keys().next() {
            return Err(ObjectError::Config(format!(
                "{}: batch {} never arrived (holding {} later batches from {first})",
                self.path.display(),
                self.next_batch,
                self.held.len()
            ))
            .into());
        }
        if let Some(w) = self.lines.as_mut() {
            w.flush()?;
            w.get_ref().sync_data()?;
        }
        if let Some(f) = &self.raw {
            f.sync_data()?;
        }
        Ok(())
    }
}
