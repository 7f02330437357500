use std::io;
use std::sync::mpsc::Sender as ChanSender;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use super::{BoundedQueue, RecordBatch};
use crate::object::ObjectError;
use crate::stream::BrokerError;

/// Failure of a source or sink operator.
#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Object(#[from] ObjectError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(
        "record for partition {partition} but destination has {partitions} partitions; \
         partition preservation needs equal partition counts"
    )]
    PartitionMismatch { partition: u32, partitions: u32 },
    #[error("pipeline aborted")]
    Aborted,
}

/// Destination side of a pipeline. `write_batch` returns once the batch is durable.
pub trait BatchSink: Send {
    fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError>;

    fn finish(&mut self) -> Result<(), OperatorError> {
        Ok(())
    }
}

impl<S: BatchSink + ?Sized> BatchSink for Box<S> {
    fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError> {
        (**self).write_batch(batch)
    }

    fn finish(&mut self) -> Result<(), OperatorError> {
        (**self).finish()
    }
}

/// Wraps a sink so that it never writes faster than `bytes_per_sec` on average.
pub struct RateLimited<S> {
    inner: S,
    bytes_per_sec: f64,
    started: Option<Instant>,
    written: u64,
}

impl<S: BatchSink> RateLimited<S> {
    pub fn new(inner: S, bytes_per_sec: f64) -> Self {
        Self {
            inner,
            bytes_per_sec,
            started: None,
            written: 0,
        }
    }
}

impl<S: BatchSink> BatchSink for RateLimited<S> {
    fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError> {
        let start = *self.started.get_or_insert_with(Instant::now);
        self.written += batch.total_bytes;
        let due = start + std::time::Duration::from_secs_f64(self.written as f64 / self.bytes_per_sec);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        self.inner.write_batch(batch)
    }

    fn finish(&mut self) -> Result<(), OperatorError> {
        self.inner.finish()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SinkStats {
    pub batches: u64,
    pub records: u64,
    pub bytes: u64,
    pub wall_secs: f64,
}

/// Drain `input` into `sink`, acknowledging each batch id on `acks` only after the sink
/// has made it durable. A sink failure aborts `input` so upstream stages stop.
pub fn run_sink(
    input: &BoundedQueue<RecordBatch>,
    sink: &mut dyn BatchSink,
    acks: &ChanSender<u64>,
) -> Result<SinkStats, OperatorError> {
    let start = Instant::now();
    let mut stats = SinkStats::default();
    let result = (|| {
        while let Ok(batch) = input.pop() {
            sink.write_batch(&batch)?;
            stats.batches += 1;
            stats.records += batch.records.len() as u64;
            stats.bytes += batch.total_bytes;
            let _ = acks.send(batch.batch_id);
        }
        sink.finish()
    })();
    stats.wall_secs = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => Ok(stats),
        Err(e) => {
            input.abort();
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc;

    use super::*;
    use crate::pipeline::{batch_queue, Record};

    struct Collect(Vec<u64>, Option<u64>);

    impl BatchSink for Collect {
        fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError> {
            if Some(batch.batch_id) == self.1 {
                return Err(OperatorError::Aborted);
            }
            self.0.push(batch.batch_id);
            Ok(())
        }
    }

    fn batch(id: u64) -> RecordBatch {
        RecordBatch::new(id, vec![Record::new(0, id, None, vec![1, 2])], None)
    }

    #[test]
    fn acks_follow_writes() {
        let q = batch_queue(8);
        for i in 0..3 {
            q.push(batch(i)).unwrap();
        }
        q.close();
        let (tx, rx) = mpsc::channel();
        let mut sink = Collect(Vec::new(), None);
        let stats = run_sink(&q, &mut sink, &tx).unwrap();
        assert_eq!(stats.batches, 3);
        assert_eq!(stats.bytes, 6);
        assert_eq!(rx.try_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn failure_aborts_input_and_skips_ack() {
        let q = batch_queue(8);
        for i in 0..3 {
            q.push(batch(i)).unwrap();
        }
        let (tx, rx) = mpsc::channel();
        let mut sink = Collect(Vec::new(), Some(1));
        assert!(run_sink(&q, &mut sink, &tx).is_err());
        assert_eq!(rx.try_iter().collect::<Vec<_>>(), vec![0]);
        assert!(q.push(batch(9)).is_err());
    }
}
