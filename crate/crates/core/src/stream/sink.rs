use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use super::{BrokerError, StreamClient};
use crate::pipeline::{BatchSink, OperatorError, RecordBatch};
use crate::retry::Backoff;

type KeyValue<'a> = (Option<&'a [u8]>, &'a [u8]);

/// Upper bound on value bytes per produce request.
const PRODUCE_REQUEST_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, Default, Serialize)]
pub struct StreamSinkStats {
    pub records_per_partition: Vec<u64>,
    pub produce_requests: u64,
    pub produce_retries: u64,
}

/// Writes batches to a destination topic.
///
/// With partition preservation each record goes to `record.partition` (the batch's
/// partition hint when present); otherwise records are spread round-robin.
pub struct StreamSink {
    client: Arc<dyn StreamClient>,
    topic: String,
    partitions: u32,
    preserve: bool,
    next_partition: u64,
    retry_deadline: Duration,
    stats: StreamSinkStats,
}

impl StreamSink {
    pub fn new(client: Arc<dyn StreamClient>, topic: &str, preserve_partitions: bool) -> Result<Self, BrokerError> {
        let partitions = client.partitions(topic)?;
        Ok(Self {
            client,
            topic: topic.to_string(),
            partitions,
            preserve: preserve_partitions,
            next_partition: 0,
            retry_deadline: Duration::from_secs(60),
            stats: StreamSinkStats {
                records_per_partition: vec![0; partitions as usize],
                ..Default::default()
            },
        })
    }

    pub fn with_retry_deadline(mut self, deadline: Duration) -> Self {
        self.retry_deadline = deadline;
        self
    }

    pub fn partitions(&self) -> u32 {
        self.partitions
    }

    pub fn stats(&self) -> &StreamSinkStats {
        &self.stats
    }

    fn produce(&mut self, partition: u32, records: &[(Option<&[u8]>, &[u8])]) -> Result<(), BrokerError> {
        let mut backoff = Backoff::new(self.retry_deadline);
        loop {
            self.stats.produce_requests += 1;
            match self.client.produce_batch(&self.topic, partition, records) {
                Ok(_) => return Ok(()),
                Err(e) if e.is_transient() => {
                    log::warn!("produce to {}[{partition}] failed: {e}; retrying", self.topic);
                    self.stats.produce_retries += 1;
                    if !backoff.wait() {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl BatchSink for StreamSink {
    fn write_batch(&mut self, batch: &RecordBatch) -> Result<(), OperatorError> {
        let n = self.partitions as usize;
        let mut groups: Vec<Vec<KeyValue>> = vec![Vec::new(); n];
        for r in &batch.records {
            let p = if self.preserve {
                let p = batch.partition_hint.unwrap_or(r.partition);
                if p >= self.partitions {
                    return Err(OperatorError::PartitionMismatch {
                        partition: p,
                        partitions: self.partitions,
                    });
                }
                p
            } else {
                let p = (self.next_partition % n as u64) as u32;
                self.next_partition += 1;
                p
            };
            groups[p as usize].push((r.key.as_deref(), r.value.as_slice()));
        }
        for (p, recs) in groups.iter().enumerate() {
            let mut start = 0;
            while start < recs.len() {
                let mut end = start;
                let mut bytes = 0;
                while end < recs.len() && (end == start || bytes + recs[end].1.len() <= PRODUCE_REQUEST_BYTES) {
                    bytes += recs[end].1.len();
                    end += 1;
                }
                if let Err(e) = self.produce(p as u32, &recs[start..end]) {
                    if let BrokerError::MessageTooLarge { size, max } = e {
                        log::error!(
                            "a {size}-byte record exceeds the destination broker's {max}-byte limit; \
                             use a smaller --chunk-bytes or raise the broker limit"
                        );
                    }
                    return Err(e.into());
                }
                self.stats.records_per_partition[p] += (end - start) as u64;
                start = end;
            }
        }
        Ok(())
    }
}
