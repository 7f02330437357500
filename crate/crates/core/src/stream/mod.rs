//! Stream endpoints: an embedded partitioned-log broker, its TCP protocol, and the
//! source/sink operators that move batches between topics and the data plane.

mod broker;
mod protocol;
mod sink;
mod source;

use std::io;
use std::sync::Arc;

use thiserror::Error;

use crate::uri::{EndpointUri, Scheme};

pub use broker::{Broker, BrokerConfig, DEFAULT_MAX_MESSAGE_BYTES};
pub use protocol::{BrokerServer, RemoteBroker, ServerHandle};
pub use sink::{StreamSink, StreamSinkStats};
pub use source::{stream_source_run, StopCondition, StreamSourceConfig, StreamSourceStats};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub offset: u64,
    pub key: Option<Vec<u8>>,
    pub value: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("topic {topic:?} already exists with {partitions} partitions")]
    TopicExists { topic: String, partitions: u32 },
    #[error("partition {partition} out of range for {topic:?} ({partitions} partitions)")]
    PartitionOutOfRange {
        topic: String,
        partition: u32,
        partitions: u32,
    },
    #[error("message of {size} bytes exceeds broker limit of {max} bytes")]
    MessageTooLarge { size: usize, max: usize },
    #[error("offset {requested} beyond end of log ({end})")]
    OffsetOutOfRange { requested: u64, end: u64 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corrupt broker state: {0}")]
    Corrupt(String),
    #[error("broker i/o: {0}")]
    Io(#[from] io::Error),
    #[error("broker protocol: {0}")]
    Protocol(String),
}

impl BrokerError {
    /// Failures a retry against the same broker may cure.
    pub fn is_transient(&self) -> bool {
        matches!(self, BrokerError::Io(_) | BrokerError::Protocol(_))
    }
}

/// Operations on a partitioned log, local or remote.
pub trait StreamClient: Send + Sync {
    fn create_topic(&self, topic: &str, partitions: u32) -> Result<(), BrokerError>;
    fn partitions(&self, topic: &str) -> Result<u32, BrokerError>;
    /// Next offset to be assigned, per partition.
    fn end_offsets(&self, topic: &str) -> Result<Vec<u64>, BrokerError>;
    /// Append records to one partition atomically; returns the offset of the first.
    fn produce_batch(
        &self,
        topic: &str,
        partition: u32,
        records: &[(Option<&[u8]>, &[u8])],
    ) -> Result<u64, BrokerError>;
    /// Records from `from_offset` on, stopping before `max_bytes` of values unless
    /// that would return nothing.
    fn fetch(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_bytes: usize,
    ) -> Result<Vec<StoredRecord>, BrokerError>;
    /// Record `offset` as the next offset `group` should read.
    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<(), BrokerError>;
    fn committed(&self, group: &str, topic: &str) -> Result<Vec<Option<u64>>, BrokerError>;

    fn produce(&self, topic: &str, partition: u32, key: Option<&[u8]>, value: &[u8]) -> Result<u64, BrokerError> {
        self.produce_batch(topic, partition, &[(key, value)])
    }

    /// Create the topic unless it exists with the same partition count.
    fn create_topic_if_absent(&self, topic: &str, partitions: u32) -> Result<(), BrokerError> {
        match self.create_topic(topic, partitions) {
            Err(BrokerError::TopicExists { partitions: p, .. }) if p == partitions => Ok(()),
            other => other,
        }
    }
}

/// Connect to the broker named by a `stream://host:port/topic` URI.
pub fn connect(uri: &EndpointUri) -> Result<Arc<dyn StreamClient>, BrokerError> {
    if uri.scheme != Scheme::Stream {
        return Err(BrokerError::InvalidRequest(format!("{uri} is not a stream endpoint")));
    }
    Ok(Arc::new(RemoteBroker::new(uri.authority.clone())))
}
