//! Unified data movement between object stores and partitioned streams.
//!
//! A transfer is a small pipeline of operators connected by bounded queues: a source
//! operator (object chunks, object records, or a stream consumer) feeds a micro-batcher,
//! the source gateway ships batches over TCP to the destination gateway, and a sink
//! operator writes them out (to a stream topic or an object directory). [`model`] holds
//! the analytical throughput models used to reason about those pipelines.

pub mod bench;
pub mod model;
pub mod object;
pub mod pipeline;
pub mod retry;
pub mod stream;
pub mod transfer;
pub mod transport;
pub mod units;
pub mod uri;
