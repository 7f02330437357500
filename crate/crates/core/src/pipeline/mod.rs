//! The shared data-plane skeleton: records and batches, the micro-batcher, bounded
//! queues, and route planning.

mod batcher;
mod operator;
mod plan;
mod queue;
mod record;

pub use batcher::{poll_interval, BatchTriggerConfig, Batcher, Offer, TriggerConfigError};
pub use operator::{run_sink, BatchSink, OperatorError, RateLimited, SinkStats};
pub use plan::{
    build_plan, DataFormat, PipelinePlan, PlanError, SinkKind, SourceKind, TransferOptions, DEFAULT_QUEUE_CAPACITY,
};
pub use queue::{BoundedQueue, ByteGauge, PushError, QueueClosed};
pub use record::{BatchIds, CauseCounts, EmitCause, Record, RecordBatch};

/// Queue of batches whose resident bytes are tracked by total record bytes.
pub fn batch_queue(capacity: usize) -> BoundedQueue<RecordBatch> {
    BoundedQueue::with_weigher(capacity, |b: &RecordBatch| b.total_bytes)
}
