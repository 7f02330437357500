use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

/// One unit of data moving through a pipeline: a stream message, a parsed CSV/NDJSON
/// line, or a raw byte slice of an object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub partition: u32,
    pub offset: u64,
    pub key: Option<Vec<u8>>,
    pub value: Vec<u8>,
    /// `(start, length)` within the source object, for raw-mode chunks.
    pub source_byte_range: Option<(u64, u64)>,
}

impl Record {
    pub fn new(partition: u32, offset: u64, key: Option<Vec<u8>>, value: Vec<u8>) -> Self {
        Self {
            partition,
            offset,
            key,
            value,
            source_byte_range: None,
        }
    }

    /// Bytes counted against the size trigger: key plus value.
    pub fn size_bytes(&self) -> u64 {
        (self.key.as_ref().map_or(0, Vec::len) + self.value.len()) as u64
    }
}

/// Why a batch left the batcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitCause {
    Size,
    Count,
    Time,
    /// End of input drained a partially filled batch.
    Flush,
}

/// Emitted batches tallied by cause.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CauseCounts {
    pub size: u64,
    pub count: u64,
    pub time: u64,
    pub flush: u64,
}

impl CauseCounts {
    pub fn record(&mut self, cause: Option<EmitCause>) {
        match cause {
            Some(EmitCause::Size) => self.size += 1,
            Some(EmitCause::Count) => self.count += 1,
            Some(EmitCause::Time) => self.time += 1,
            Some(EmitCause::Flush) => self.flush += 1,
            None => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.size + self.count + self.time + self.flush
    }
}

/// The unit of transport between gateways.
#[derive(Debug, Clone)]
pub struct RecordBatch {
    pub batch_id: u64,
    pub records: Vec<Record>,
    pub partition_hint: Option<u32>,
    pub total_bytes: u64,
    pub created_at: Instant,
    pub cause: Option<EmitCause>,
}

impl RecordBatch {
    pub fn new(batch_id: u64, records: Vec<Record>, partition_hint: Option<u32>) -> Self {
        let total_bytes = records.iter().map(Record::size_bytes).sum();
        Self {
            batch_id,
            records,
            partition_hint,
            total_bytes,
            created_at: Instant::now(),
            cause: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Recompute `total_bytes` from the records; used to check the stored value.
    pub fn recomputed_bytes(&self) -> u64 {
        self.records.iter().map(Record::size_bytes).sum()
    }

    /// Highest record offset per partition contained in this batch.
    pub fn max_offsets(&self) -> Vec<(u32, u64)> {
        let mut out: Vec<(u32, u64)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(p, _)| *p == r.partition) {
                Some((_, o)) => *o = (*o).max(r.offset),
                None => out.push((r.partition, r.offset)),
            }
        }
        out
    }
}

/// Per-transfer batch id counter, shared by every batcher of one transfer.
#[derive(Debug, Clone, Default)]
pub struct BatchIds(Arc<AtomicU64>);

impl BatchIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }

    pub fn peek(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}
