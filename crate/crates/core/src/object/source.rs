use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Instant;

use serde::Serialize;

use super::records::{RecordReader, RecordsFormat};
use super::{plan_chunks, ObjectError, ObjectHandle};
use crate::pipeline::{
    Batcher, BoundedQueue, CauseCounts, DataFormat, Offer, OperatorError, PipelinePlan, Record, RecordBatch, SourceKind,
};

#[derive(Debug, Clone, Default, Serialize)]
pub struct ObjectSourceStats {
    pub object_bytes: u64,
    pub bytes_read: u64,
    pub chunks: u64,
    pub records: u64,
    pub batches: u64,
    pub causes: CauseCounts,
    pub wall_secs: f64,
}

/// Read `object` and push batches to `out`, closing it when done.
///
/// Raw mode sends one single-record batch per chunk; the record's key is the chunk's
/// byte offset (8 bytes, big-endian) and its offset is the chunk index, which is also
/// the batch id. Record mode parses lines and batches them under the plan's triggers,
/// assigning partitions round-robin over `dest_partitions`.
pub fn object_source_run(
    plan: &PipelinePlan,
    object: &ObjectHandle,
    dest_partitions: u32,
    out: &BoundedQueue<RecordBatch>,
) -> Result<ObjectSourceStats, OperatorError> {
    let start = Instant::now();
    let mut stats = ObjectSourceStats {
        object_bytes: object.size(),
        ..Default::default()
    };
    let r = match plan.source_kind {
        SourceKind::ObjectRaw => run_raw(plan, object, out, &mut stats),
        SourceKind::ObjectRecords => run_records(plan, object, dest_partitions, out, &mut stats),
        SourceKind::Stream => Err(OperatorError::Object(ObjectError::Config(
            "object source given a stream plan".into(),
        ))),
    };
    stats.wall_secs = start.elapsed().as_secs_f64();
    match r {
        Ok(()) => {
            out.close();
            Ok(stats)
        }
        Err(e) => {
            out.abort();
            Err(e)
        }
    }
}

fn chunk_batch(index: u64, start: u64, bytes: Vec<u8>) -> RecordBatch {
    let mut rec = Record::new(0, index, Some(start.to_be_bytes().to_vec()), bytes);
    rec.source_byte_range = Some((start, rec.value.len() as u64));
    RecordBatch::new(index, vec![rec], None)
}

/// Admits chunk indices to the ordered emitter no further than `window` ahead of the
/// next index it must push, bounding the reorder buffer.
struct Reorder {
    state: Mutex<(u64, BTreeMap<u64, RecordBatch>)>,
    advanced: Condvar,
    window: u64,
}

fn run_raw(
    plan: &PipelinePlan,
    object: &ObjectHandle,
    out: &BoundedQueue<RecordBatch>,
    stats: &mut ObjectSourceStats,
) -> Result<(), OperatorError> {
    let ranges = plan_chunks(object.size(), plan.chunk_bytes_sc);
    let readers = plan.parallel_connections.max(1).min(ranges.len().max(1));
    let cursor = AtomicU64::new(0);
    let failed = AtomicBool::new(false);
    let bytes_read = AtomicU64::new(0);
    let reorder = plan.ordered.then(|| Reorder {
        state: Mutex::new((0, BTreeMap::new())),
        advanced: Condvar::new(),
        window: readers as u64,
    });

    let results: Vec<Result<(), OperatorError>> = thread::scope(|s| {
        let workers: Vec<_> = (0..readers)
            .map(|_| {
                s.spawn(|| -> Result<(), OperatorError> {
                    loop {
                        if failed.load(Ordering::SeqCst) {
                            return Ok(());
                        }
                        let i = cursor.fetch_add(1, Ordering::SeqCst);
                        let Some(&(start, len)) = ranges.get(i as usize) else {
                            return Ok(());
                        };
                        if let Some(ro) = &reorder {
                            let mut st = ro.state.lock().unwrap_or_else(|e| e.into_inner());
                            while i >= st.0 + ro.window && !failed.load(Ordering::SeqCst) {
                                st = ro.advanced.wait(st).unwrap_or_else(|e| e.into_inner());
                            }
                        }
                        let bytes = object.read_range(start, len).map_err(|e| {
                            failed.store(true, Ordering::SeqCst);
                            if let Some(ro) = &reorder {
                                ro.advanced.notify_all();
                            }
                            log::error!("chunk {i} [{start}, +{len}) failed: {e}");
                            ObjectError::ReadFailed {
                                start,
                                len,
                                source: Box::new(e),
                            }
                        })?;
                        bytes_read.fetch_add(len, Ordering::Relaxed);
                        let batch = chunk_batch(i, start, bytes);
                        let pushed = match &reorder {
                            None => out.push(batch).is_ok(),
                            Some(ro) => {
                                let mut st = ro.state.lock().unwrap_or_else(|e| e.into_inner());
                                st.1.insert(i, batch);
                                let mut ok = true;
                                // whoever completes the next expected chunk drains the run
                                while let Some(b) = {
                                    let next = st.0;
                                    st.1.remove(&next)
                                } {
                                    if out.push(b).is_err() {
                                        ok = false;
                                        break;
                                    }
                                    st.0 += 1;
                                }
                                ro.advanced.notify_all();
                                ok
                            }
                        };
                        if !pushed {
                            failed.store(true, Ordering::SeqCst);
                            if let Some(ro) = &reorder {
                                ro.advanced.notify_all();
                            }
                            return Err(OperatorError::Aborted);
                        }
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or(Err(OperatorError::Aborted)))
            .collect()
    });

    stats.bytes_read = bytes_read.load(Ordering::Relaxed);
    // prefer the read error over the Aborted it causes elsewhere
    let mut aborted = None;
    for r in results {
        match r {
            Ok(()) => {}
            Err(OperatorError::Aborted) => aborted = Some(OperatorError::Aborted),
            Err(e) => return Err(e),
        }
    }
    if let Some(e) = aborted {
        return Err(e);
    }
    stats.chunks = ranges.len() as u64;
    stats.records = stats.chunks;
    stats.batches = stats.chunks;
    Ok(())
}

fn run_records(
    plan: &PipelinePlan,
    object: &ObjectHandle,
    dest_partitions: u32,
    out: &BoundedQueue<RecordBatch>,
    stats: &mut ObjectSourceStats,
) -> Result<(), OperatorError> {
    let format = match plan.format {
        DataFormat::Csv => RecordsFormat::Csv,
        DataFormat::Ndjson => RecordsFormat::Ndjson,
        DataFormat::Raw => unreachable!("record plan with raw format"),
    };
    let mut reader = RecordReader::new(
        object,
        format,
        plan.csv_header,
        plan.trigger.size_threshold(),
        dest_partitions,
    );
    let mut batcher = Batcher::new(plan.trigger);
    let emit = |batch: RecordBatch, stats: &mut ObjectSourceStats| {
        stats.batches += 1;
        stats.causes.record(batch.cause);
        out.push(batch).map_err(|_| OperatorError::Aborted)
    };
    for rec in reader.by_ref() {
        let rec = rec?;
        stats.records += 1;
        let now = Instant::now();
        if let Some(b) = batcher.poll_time(now) {
            emit(b, stats)?;
        }
        if batcher.pending() == 0 {
            // the batch about to start takes its queue slot now
            out.wait_for_room().map_err(|_| OperatorError::Aborted)?;
        }
        if let Offer::Emit(b) = batcher.offer(rec, Instant::now()) {
            emit(b, stats)?;
        }
    }
    if let Some(b) = batcher.flush() {
        emit(b, stats)?;
    }
    stats.bytes_read = reader.bytes_read();
    Ok(())
}
