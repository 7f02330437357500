//! Route selection: which source and sink operators a transfer needs, chosen from the
//! two endpoint schemes and the declared data format.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::batcher::BatchTriggerConfig;
use crate::uri::{EndpointUri, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SourceKind {
    ObjectRaw,
    ObjectRecords,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SinkKind {
    Object,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Raw,
    Csv,
    Ndjson,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "raw" => Ok(Self::Raw),
            "csv" => Ok(Self::Csv),
            "ndjson" | "jsonl" | "json" => Ok(Self::Ndjson),
            other => Err(format!("unknown format {other:?} (raw, csv, ndjson)")),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Raw => "raw",
            DataFormat::Csv => "csv",
            DataFormat::Ndjson => "ndjson",
        })
    }
}

/// User-facing knobs of a transfer. Defaults: 32 MB / 10 s / 100,000 triggers, 16 MB
/// chunks, one connection, raw format.
#[derive(Debug, Clone)]
pub struct TransferOptions {
    pub format: DataFormat,
    pub trigger: BatchTriggerConfig,
    pub chunk_bytes: u64,
    pub parallel: usize,
    pub compression: bool,
    pub preserve_partitions: bool,
    pub csv_header: bool,
    pub ordered: bool,
    pub queue_capacity: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            format: DataFormat::Raw,
            trigger: BatchTriggerConfig::default(),
            chunk_bytes: 16_000_000,
            parallel: 1,
            compression: false,
            preserve_partitions: false,
            csv_header: false,
            ordered: false,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

/// Batches per inter-operator queue.
pub const DEFAULT_QUEUE_CAPACITY: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("unsupported route {from} -> {to}: stream-to-object transfers are not supported")]
    UnsupportedRoute { from: String, to: String },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelinePlan {
    pub source_kind: SourceKind,
    pub sink_kind: SinkKind,
    pub format: DataFormat,
    #[serde(skip)]
    pub trigger: BatchTriggerConfig,
    pub chunk_bytes_sc: u64,
    pub parallel_connections: usize,
    pub compression: bool,
    pub preserve_partitions: bool,
    pub csv_header: bool,
    pub ordered: bool,
    pub queue_capacity: usize,
}

/// Pick source/sink operators for `source -> sink`.
pub fn build_plan(
    source: &EndpointUri,
    sink: &EndpointUri,
    options: &TransferOptions,
) -> Result<PipelinePlan, PlanError> {
    if options.chunk_bytes == 0 {
        return Err(PlanError::InvalidOption("chunk size must be >= 1 byte".into()));
    }
    if options.parallel == 0 {
        return Err(PlanError::InvalidOption("parallel connections must be >= 1".into()));
    }
    if options.queue_capacity == 0 {
        return Err(PlanError::InvalidOption("queue capacity must be >= 1".into()));
    }
    let source_kind = match (source.scheme, options.format) {
        (Scheme::Stream, _) => SourceKind::Stream,
        (_, DataFormat::Raw) => SourceKind::ObjectRaw,
        (_, DataFormat::Csv | DataFormat::Ndjson) => SourceKind::ObjectRecords,
    };
    let sink_kind = if sink.is_stream() {
        SinkKind::Stream
    } else {
        SinkKind::Object
    };
    if source_kind == SourceKind::Stream && sink_kind == SinkKind::Object {
        return Err(PlanError::UnsupportedRoute {
            from: source.canonical(),
            to: sink.canonical(),
        });
    }
    Ok(PipelinePlan {
        source_kind,
        sink_kind,
        format: options.format,
        trigger: options.trigger,
        chunk_bytes_sc: options.chunk_bytes,
        parallel_connections: options.parallel,
        compression: options.compression,
        preserve_partitions: options.preserve_partitions,
        csv_header: options.csv_header,
        ordered: options.ordered,
        queue_capacity: options.queue_capacity,
    })
}
