//! Receiver-side staging of batches between network receipt and sink acknowledgment.
//!
//! In memory mode only the staged ids and sizes are tracked (the batch itself sits in
//! the sink queue). With a staging directory the received payload is also written to
//! `<dir>/batch-<id>.chunk` before the batch is handed to the sink, and removed when the
//! sink acknowledges it.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::pipeline::ByteGauge;

#[derive(Debug)]
struct Staged {
    bytes: u64,
    path: Option<PathBuf>,
}

#[derive(Debug)]
pub struct ChunkStore {
    dir: Option<PathBuf>,
    staged: Mutex<HashMap<u64, Staged>>,
    gauge: ByteGauge,
}

impl ChunkStore {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            staged: Mutex::new(HashMap::new()),
            gauge: ByteGauge::new(),
        }
    }

    pub fn on_disk(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
            ..Self::in_memory()
        })
    }

    fn path_for(&self, batch_id: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("batch-{batch_id}.chunk")))
    }

    /// Stage a received payload. Returns `false` if `batch_id` was already staged.
    pub fn stage(&self, batch_id: u64, payload: &[u8]) -> io::Result<bool> {
        let mut staged = self.staged.lock().unwrap_or_else(|e| e.into_inner());
        if staged.contains_key(&batch_id) {
            return Ok(false);
        }
        let path = self.path_for(batch_id);
        if let Some(p) = &path {
            let mut f = File::create(p)?;
            f.write_all(payload)?;
            f.sync_data()?;
        }
        self.gauge.add(payload.len() as u64);
        staged.insert(
            batch_id,
            Staged {
                bytes: payload.len() as u64,
                path,
            },
        );
        Ok(true)
    }

    /// Drop a staged batch after it was acknowledged. Returns whether it was staged.
    pub fn release(&self, batch_id: u64) -> bool {
        let entry = self.staged.lock().unwrap_or_else(|e| e.into_inner()).remove(&batch_id);
        match entry {
            Some(s) => {
                self.gauge.sub(s.bytes);
                if let Some(p) = s.path {
                    if let Err(e) = fs::remove_file(&p) {
                        log::warn!("failed to remove staged chunk {}: {e}", p.display());
                    }
                }
                true
            }
            None => false,
        }
    }

    /// The staged payload, when staging to disk.
    pub fn read(&self, batch_id: u64) -> io::Result<Option<Vec<u8>>> {
        let path = {
            let staged = self.staged.lock().unwrap_or_else(|e| e.into_inner());
            match staged.get(&batch_id).and_then(|s| s.path.clone()) {
                Some(p) => p,
                None => return Ok(None),
            }
        };
        fs::read(path).map(Some)
    }

    pub fn contains(&self, batch_id: u64) -> bool {
        self.staged
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .contains_key(&batch_id)
    }

    pub fn len(&self) -> usize {
        self.staged.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resident_bytes(&self) -> u64 {
        self.gauge.current()
    }

    pub fn peak_bytes(&self) -> u64 {
        self.gauge.peak()
    }
}
