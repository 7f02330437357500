//! Trigger-driven micro-batching.
//!
//! A batch is closed by whichever trigger fires first: accumulated bytes reach `S_b`,
//! record count reaches `C_max`, or the batch has been open for `T_max`. Size and count
//! are checked on every [`Batcher::offer`]; age is checked by the driver calling
//! [`Batcher::poll_time`] periodically (see [`poll_interval`]).

use std::time::{Duration, Instant};

use thiserror::Error;

use super::record::{BatchIds, EmitCause, Record, RecordBatch};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TriggerConfigError {
    #[error("at least one batch trigger must be enabled")]
    AllDisabled,
    #[error("batch trigger `{0}` must be > 0")]
    NonPositive(&'static str),
}

/// Size, time and count thresholds. `None` disables a trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchTriggerConfig {
    size_threshold: Option<u64>,
    time_limit: Option<Duration>,
    count_limit: Option<u64>,
}

impl BatchTriggerConfig {
    pub fn new(
        size_threshold: Option<u64>,
        time_limit: Option<Duration>,
        count_limit: Option<u64>,
    ) -> Result<Self, TriggerConfigError> {
        if size_threshold.is_none() && time_limit.is_none() && count_limit.is_none() {
            return Err(TriggerConfigError::AllDisabled);
        }
        if size_threshold == Some(0) {
            return Err(TriggerConfigError::NonPositive("size"));
        }
        if time_limit == Some(Duration::ZERO) {
            return Err(TriggerConfigError::NonPositive("time"));
        }
        if count_limit == Some(0) {
            return Err(TriggerConfigError::NonPositive("count"));
        }
        Ok(Self {
            size_threshold,
            time_limit,
            count_limit,
        })
    }

    pub fn size_threshold(&self) -> Option<u64> {
        self.size_threshold
    }

    pub fn time_limit(&self) -> Option<Duration> {
        self.time_limit
    }

    pub fn count_limit(&self) -> Option<u64> {
        self.count_limit
    }
}

impl Default for BatchTriggerConfig {
    /// 32 MB, 10 s, 100,000 messages.
    fn default() -> Self {
        Self {
            size_threshold: Some(32_000_000),
            time_limit: Some(Duration::from_secs(10)),
            count_limit: Some(100_000),
        }
    }
}

/// How often a driver should call [`Batcher::poll_time`]: a tenth of `T_max`, kept
/// within 1..=100 ms.
pub fn poll_interval(config: &BatchTriggerConfig) -> Duration {
    let tenth = config.time_limit.map_or(Duration::from_millis(100), |t| t / 10);
    tenth.clamp(Duration::from_millis(1), Duration::from_millis(100))
}

#[derive(Debug)]
pub enum Offer {
    Accepted,
    Emit(RecordBatch),
}

#[derive(Debug)]
struct OpenBatch {
    records: Vec<Record>,
    bytes: u64,
    created_at: Instant,
}

/// Holds at most one open batch. Owned by a single pipeline stage.
#[derive(Debug)]
pub struct Batcher {
    config: BatchTriggerConfig,
    partition_hint: Option<u32>,
    ids: BatchIds,
    open: Option<OpenBatch>,
}

impl Batcher {
    pub fn new(config: BatchTriggerConfig) -> Self {
        Self::with_ids(config, BatchIds::new())
    }

    /// A batcher drawing ids from a counter shared with other batchers.
    pub fn with_ids(config: BatchTriggerConfig, ids: BatchIds) -> Self {
        Self {
            config,
            partition_hint: None,
            ids,
            open: None,
        }
    }

    /// Stamp every emitted batch with `partition` (partition-preserving mode).
    pub fn for_partition(mut self, partition: u32) -> Self {
        self.partition_hint = Some(partition);
        self
    }

    pub fn config(&self) -> &BatchTriggerConfig {
        &self.config
    }

    /// Number of records in the open batch.
    pub fn pending(&self) -> usize {
        self.open.as_ref().map_or(0, |b| b.records.len())
    }

    /// When the open batch will hit the time trigger, if any.
    pub fn deadline(&self) -> Option<Instant> {
        let open = self.open.as_ref()?;
        self.config.time_limit.map(|t| open.created_at + t)
    }

    /// Append `record`, emitting the batch if this record makes it reach the size or
    /// count threshold. The emitted batch includes `record`. A record larger than `S_b`
    /// offered to an empty batcher is emitted alone.
    pub fn offer(&mut self, record: Record, now: Instant) -> Offer {
        let open = self.open.get_or_insert_with(|| OpenBatch {
            records: Vec::new(),
            bytes: 0,
            created_at: now,
        });
        open.bytes += record.size_bytes();
        open.records.push(record);

        let size_hit = self.config.size_threshold.is_some_and(|s| open.bytes >= s);
        let count_hit = self.config.count_limit.is_some_and(|c| open.records.len() as u64 >= c);
        // size wins ties
        let cause = if size_hit {
            EmitCause::Size
        } else if count_hit {
            EmitCause::Count
        } else {
            return Offer::Accepted;
        };
        Offer::Emit(self.close(cause).expect("open batch"))
    }

    /// Emit the open batch if it is non-empty and at least `T_max` old.
    pub fn poll_time(&mut self, now: Instant) -> Option<RecordBatch> {
        let limit = self.config.time_limit?;
        let open = self.open.as_ref()?;
        if now.saturating_duration_since(open.created_at) >= limit {
            self.close(EmitCause::Time)
        } else {
            None
        }
    }

    /// Emit whatever is open regardless of triggers (end of input).
    pub fn flush(&mut self) -> Option<RecordBatch> {
        self.close(EmitCause::Flush)
    }

    fn close(&mut self, cause: EmitCause) -> Option<RecordBatch> {
        let open = self.open.take()?;
        if open.records.is_empty() {
            return None;
        }
        Some(RecordBatch {
            batch_id: self.ids.next_id(),
            records: open.records,
            partition_hint: self.partition_hint,
            total_bytes: open.bytes,
            created_at: open.created_at,
            cause: Some(cause),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(offset: u64, len: usize) -> Record {
        Record::new(0, offset, None, vec![0u8; len])
    }

    fn cfg(size: Option<u64>, time_ms: Option<u64>, count: Option<u64>) -> BatchTriggerConfig {
        BatchTriggerConfig::new(size, time_ms.map(Duration::from_millis), count).unwrap()
    }

    #[test]
    fn size_trigger_boundary() {
        let mut b = Batcher::new(cfg(Some(3), None, None));
        let t = Instant::now();
        assert!(matches!(b.offer(rec(0, 1), t), Offer::Accepted));
        assert!(matches!(b.offer(rec(1, 1), t), Offer::Accepted));
        match b.offer(rec(2, 1), t) {
            Offer::Emit(batch) => {
                assert_eq!(batch.len(), 3);
                assert_eq!(batch.cause, Some(EmitCause::Size));
                assert_eq!(batch.batch_id, 0);
                assert_eq!(batch.records[2].offset, 2);
            }
            Offer::Accepted => panic!("expected emit"),
        }
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn count_trigger_boundary() {
        let mut b = Batcher::new(cfg(Some(u64::MAX), None, Some(2)));
        let t = Instant::now();
        assert!(matches!(b.offer(rec(0, 10), t), Offer::Accepted));
        match b.offer(rec(1, 10), t) {
            Offer::Emit(batch) => {
                assert_eq!(batch.len(), 2);
                assert_eq!(batch.cause, Some(EmitCause::Count));
            }
            Offer::Accepted => panic!("expected emit"),
        }
    }

    #[test]
    fn size_wins_simultaneous_trigger() {
        let mut b = Batcher::new(cfg(Some(2), None, Some(2)));
        let t = Instant::now();
        b.offer(rec(0, 1), t);
        match b.offer(rec(1, 1), t) {
            Offer::Emit(batch) => assert_eq!(batch.cause, Some(EmitCause::Size)),
            Offer::Accepted => panic!("expected emit"),
        }
    }

    #[test]
    fn uniform_100kb_messages_emit_every_320() {
        let mut b = Batcher::new(BatchTriggerConfig::default());
        let t = Instant::now();
        let mut emitted_at = Vec::new();
        for i in 0..1000u64 {
            if let Offer::Emit(batch) = b.offer(rec(i, 100_000), t) {
                assert_eq!(batch.total_bytes, 32_000_000);
                emitted_at.push(i + 1);
            }
        }
        assert_eq!(emitted_at, vec![320, 640, 960]);
    }

    #[test]
    fn oversized_record_emits_alone() {
        let mut b = Batcher::new(cfg(Some(10), None, None));
        match b.offer(rec(0, 50), Instant::now()) {
            Offer::Emit(batch) => {
                assert_eq!(batch.len(), 1);
                assert_eq!(batch.total_bytes, 50);
            }
            Offer::Accepted => panic!("expected emit"),
        }
    }

    #[test]
    fn time_trigger() {
        let mut b = Batcher::new(cfg(None, Some(100), None));
        let t0 = Instant::now();
        assert!(b.poll_time(t0 + Duration::from_secs(60)).is_none(), "nothing open");
        b.offer(rec(0, 1), t0);
        assert!(b.poll_time(t0 + Duration::from_millis(99)).is_none());
        let batch = b.poll_time(t0 + Duration::from_millis(100)).unwrap();
        assert_eq!(batch.cause, Some(EmitCause::Time));
        assert_eq!(batch.len(), 1);
        assert!(b.poll_time(t0 + Duration::from_secs(60)).is_none());
    }

    #[test]
    fn created_at_is_first_offer() {
        let mut b = Batcher::new(cfg(None, Some(100), None));
        let t0 = Instant::now();
        b.offer(rec(0, 1), t0);
        b.offer(rec(1, 1), t0 + Duration::from_millis(90));
        assert_eq!(b.deadline(), Some(t0 + Duration::from_millis(100)));
        assert!(b.poll_time(t0 + Duration::from_millis(100)).is_some());
    }

    #[test]
    fn flush_and_ids() {
        let ids = BatchIds::new();
        let mut a = Batcher::with_ids(cfg(Some(100), None, None), ids.clone()).for_partition(3);
        let mut b = Batcher::with_ids(cfg(Some(100), None, None), ids.clone());
        assert!(a.flush().is_none());
        a.offer(rec(0, 1), Instant::now());
        b.offer(rec(0, 1), Instant::now());
        let x = a.flush().unwrap();
        let y = b.flush().unwrap();
        assert_eq!((x.batch_id, y.batch_id), (0, 1));
        assert_eq!(x.partition_hint, Some(3));
        assert_eq!(y.partition_hint, None);
        assert_eq!(x.cause, Some(EmitCause::Flush));
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            BatchTriggerConfig::new(None, None, None),
            Err(TriggerConfigError::AllDisabled)
        );
        assert!(BatchTriggerConfig::new(Some(0), None, None).is_err());
        assert!(BatchTriggerConfig::new(None, Some(Duration::ZERO), Some(1)).is_err());
        assert!(BatchTriggerConfig::new(None, None, Some(0)).is_err());
        assert!(BatchTriggerConfig::new(None, Some(Duration::from_secs(1)), None).is_ok());
    }

    #[test]
    fn poll_interval_is_clamped() {
        assert_eq!(
            poll_interval(&BatchTriggerConfig::default()),
            Duration::from_millis(100)
        );
        let fast = cfg(None, Some(5), None);
        assert_eq!(poll_interval(&fast), Duration::from_millis(1));
        let mid = cfg(None, Some(300), None);
        assert_eq!(poll_interval(&mid), Duration::from_millis(30));
    }
}
