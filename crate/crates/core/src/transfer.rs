//! Wiring of a complete transfer: source operator → source queue → sender ⇒ TCP ⇒
//! receiver → sink queue → sink operator, with acknowledgments flowing back.
//!
//! Both gateways normally run in this process over loopback TCP. With
//! `remote_receiver` set only the source side runs here and batches go to a
//! `skyhost receive` process.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::object::{FileSink, FileSinkMode, ObjectError, ObjectHandle, ObjectSourceStats};
use crate::pipeline::{
    batch_queue, build_plan, run_sink, BatchSink, BoundedQueue, CauseCounts, DataFormat, OperatorError, PipelinePlan,
    PlanError, RateLimited, RecordBatch, SinkKind, SinkStats, SourceKind, TransferOptions,
};
use crate::stream::{
    stream_source_run, BrokerError, RemoteBroker, StopCondition, StreamClient, StreamSink, StreamSinkStats,
    StreamSourceConfig, StreamSourceStats,
};
use crate::transport::{
    Receiver, ReceiverConfig, ReceiverHandle, ReceiverStats, Sender, SenderConfig, SenderHandle, SenderStats,
    TransportError,
};
use crate::uri::{EndpointUri, Scheme, UriError};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Uri(#[from] UriError),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{stage}: {error}")]
    Operator { stage: &'static str, error: OperatorError },
}

/// Coarse failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCategory {
    Usage,
    Transfer,
    Connectivity,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Usage => 2,
            ErrorCategory::Transfer => 3,
            ErrorCategory::Connectivity => 4,
        }
    }
}

impl TransferError {
    fn op(stage: &'static str, source: impl Into<OperatorError>) -> Self {
        TransferError::Operator {
            stage,
            error: source.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            TransferError::Plan(_) | TransferError::Uri(_) | TransferError::Config(_) => ErrorCategory::Usage,
            TransferError::Transport(e) if e.is_connectivity() => ErrorCategory::Connectivity,
            TransferError::Transport(_) => ErrorCategory::Transfer,
            TransferError::Operator { error, .. } => match error {
                OperatorError::Broker(BrokerError::Io(_)) => ErrorCategory::Connectivity,
                OperatorError::Object(
                    ObjectError::UnsupportedBackend(_) | ObjectError::Config(_) | ObjectError::NotFound(_),
                ) => ErrorCategory::Usage,
                OperatorError::Object(ObjectError::Io(e)) if e.kind() == std::io::ErrorKind::ConnectionRefused => {
                    ErrorCategory::Connectivity
                }
                OperatorError::PartitionMismatch { .. } => ErrorCategory::Usage,
                _ => ErrorCategory::Transfer,
            },
        }
    }
}

/// Resolves stream endpoints to clients. Authorities without an override get a TCP
/// client.
#[derive(Default, Clone)]
pub struct Endpoints {
    overrides: HashMap<String, Arc<dyn StreamClient>>,
}

impl Endpoints {
    pub fn new() -> Self {
        Self::default()
    }

    /// Serve stream URIs whose authority is `authority` with `client`.
    pub fn with_stream(mut self, authority: impl Into<String>, client: Arc<dyn StreamClient>) -> Self {
        self.overrides.insert(authority.into(), client);
        self
    }

    pub fn stream_client(&self, uri: &EndpointUri) -> Arc<dyn StreamClient> {
        self.overrides
            .get(&uri.authority)
            .cloned()
            .unwrap_or_else(|| Arc::new(RemoteBroker::new(uri.authority.clone())))
    }
}

#[derive(Debug, Clone)]
pub struct TransferSpec {
    pub source: EndpointUri,
    pub destination: EndpointUri,
    pub options: TransferOptions,
    /// Loopback receiver port; 0 picks an ephemeral port.
    pub transport_port: u16,
    /// `host:port` of a separately running receiver.
    pub remote_receiver: Option<String>,
    pub stage_dir: Option<PathBuf>,
    /// Consumer group for stream sources; defaults to one derived from the destination.
    pub group: Option<String>,
    pub stop: StopCondition,
    /// Raised to stop a stream source gracefully.
    pub stop_flag: Arc<AtomicBool>,
    pub reconnect_deadline: Duration,
}

impl TransferSpec {
    pub fn new(source: EndpointUri, destination: EndpointUri, options: TransferOptions) -> Self {
        Self {
            source,
            destination,
            options,
            transport_port: 0,
            remote_receiver: None,
            stage_dir: None,
            group: None,
            stop: StopCondition::EndOffsetsAtStart,
            stop_flag: Arc::new(AtomicBool::new(false)),
            reconnect_deadline: Duration::from_secs(30),
        }
    }

    pub fn group(&self) -> String {
        self.group
            .clone()
            .unwrap_or_else(|| format!("skyhost->{}", self.destination.canonical()))
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct QueuePeaks {
    pub source_queue_bytes: u64,
    pub source_queue_batches: usize,
    pub sink_queue_bytes: u64,
    pub sink_queue_batches: usize,
    pub sender_in_flight_bytes: u64,
    pub receiver_staged_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub source: String,
    pub destination: String,
    pub plan: PipelinePlan,
    pub records_moved: u64,
    /// Record bytes (keys + values) delivered.
    pub bytes_moved: u64,
    pub batches: u64,
    pub wall_seconds: f64,
    pub throughput_bytes_per_sec: f64,
    pub msgs_per_sec: f64,
    pub retransmits: u64,
    pub emission_causes: CauseCounts,
    pub compression_ratio: f64,
    pub peaks: QueuePeaks,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_source: Option<ObjectSourceStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_source: Option<StreamSourceStats>,
    pub sender: SenderStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub receiver: Option<ReceiverStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink: Option<SinkStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_sink: Option<StreamSinkStats>,
}

impl TransferReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} -> {}\n  {} records, {} bytes in {} batches, {:.3} s, {}, {:.0} msgs/s\n",
            self.source,
            self.destination,
            self.records_moved,
            self.bytes_moved,
            self.batches,
            self.wall_seconds,
            crate::units::mb_per_sec(self.throughput_bytes_per_sec),
            self.msgs_per_sec,
        );
        let c = &self.emission_causes;
        if c.total() > 0 {
            s += &format!(
                "  batches by trigger: size {} count {} time {} flush {}\n",
                c.size, c.count, c.time, c.flush
            );
        }
        s += &format!(
            "  retransmits {} reconnects {} compression {:.2}x\n",
            self.sender.retransmits, self.sender.reconnects, self.compression_ratio
        );
        s += &format!(
            "  peak bytes: source queue {} sink queue {} in flight {}\n",
            self.peaks.source_queue_bytes, self.peaks.sink_queue_bytes, self.peaks.sender_in_flight_bytes
        );
        if let Some(st) = &self.stream_source {
            s += &format!("  committed offsets {:?}\n", st.committed);
            if st.unacknowledged_batches > 0 {
                s += &format!(
                    "  {} batches unacknowledged; their records will be re-read\n",
                    st.unacknowledged_batches
                );
            }
        }
        s
    }
}

enum SourceEndpoint {
    Object(ObjectHandle),
    Stream {
        client: Arc<dyn StreamClient>,
        topic: String,
    },
}

/// Open the sink for `destination`.
pub fn build_sink(
    destination: &EndpointUri,
    format: DataFormat,
    preserve_partitions: bool,
    env: &Endpoints,
) -> Result<Box<dyn BatchSink>, TransferError> {
    match destination.scheme {
        Scheme::Stream => {
            let client = env.stream_client(destination);
            let topic = destination.topic().expect("stream uri");
            let sink = StreamSink::new(client, topic, preserve_partitions).map_err(|e| match e {
                BrokerError::UnknownTopic(t) => TransferError::Config(format!(
                    "destination topic {t:?} does not exist; create it with `skyhost broker topic create`"
                )),
                e => TransferError::op("sink", e),
            })?;
            Ok(Box::new(sink))
        }
        Scheme::File => {
            let mode = match format {
                DataFormat::Raw => FileSinkMode::Raw,
                DataFormat::Csv | DataFormat::Ndjson => FileSinkMode::Lines,
            };
            let sink = FileSink::create(&destination.path, mode).map_err(|e| TransferError::op("sink", e))?;
            Ok(Box::new(sink))
        }
        s => Err(TransferError::op(
            "sink",
            ObjectError::UnsupportedBackend(format!("{} (as a destination)", s.as_str())),
        )),
    }
}

fn open_source(spec: &TransferSpec, env: &Endpoints) -> Result<SourceEndpoint, TransferError> {
    if spec.source.is_stream() {
        let client = env.stream_client(&spec.source);
        let topic = spec.source.topic().expect("stream uri").to_string();
        client.partitions(&topic).map_err(|e| TransferError::op("source", e))?;
        Ok(SourceEndpoint::Stream { client, topic })
    } else {
        let h = ObjectHandle::open(&spec.source).map_err(|e| TransferError::op("source", e))?;
        Ok(SourceEndpoint::Object(h))
    }
}

/// Stops every stage of a transfer once any of them fails.
struct Abort {
    fired: AtomicBool,
    source_queue: Arc<BoundedQueue<RecordBatch>>,
    sink_queue: Option<Arc<BoundedQueue<RecordBatch>>>,
    sender: SenderHandle,
    receiver: Option<ReceiverHandle>,
    stop_flag: Arc<AtomicBool>,
}

impl Abort {
    fn fire(&self, stage: &str) {
        if self.fired.swap(true, Ordering::SeqCst) {
            return;
        }
        log::debug!("{stage} failed; aborting transfer");
        self.stop_flag.store(true, Ordering::SeqCst);
        self.source_queue.abort();
        if let Some(q) = &self.sink_queue {
            q.abort();
        }
        self.sender.abort();
        if let Some(r) = &self.receiver {
            r.shutdown();
        }
    }
}

/// Run a transfer to completion with the sink implied by the destination URI.
pub fn run_transfer(spec: &TransferSpec, env: &Endpoints) -> Result<TransferReport, TransferError> {
    let plan = build_plan(&spec.source, &spec.destination, &spec.options)?;
    let sink = if spec.remote_receiver.is_none() {
        Some(build_sink(
            &spec.destination,
            plan.format,
            plan.preserve_partitions,
            env,
        )?)
    } else {
        None
    };
    run_transfer_inner(spec, env, plan, sink)
}

/// Run a transfer delivering into `sink` instead of the destination's own sink.
pub fn run_transfer_with_sink(
    spec: &TransferSpec,
    env: &Endpoints,
    sink: Box<dyn BatchSink>,
) -> Result<TransferReport, TransferError> {
    let plan = build_plan(&spec.source, &spec.destination, &spec.options)?;
    run_transfer_inner(spec, env, plan, Some(sink))
}

fn destination_partitions(spec: &TransferSpec, env: &Endpoints) -> Result<Option<u32>, TransferError> {
    if !spec.destination.is_stream() {
        return Ok(None);
    }
    let client = env.stream_client(&spec.destination);
    match client.partitions(spec.destination.topic().expect("stream uri")) {
        Ok(n) => Ok(Some(n)),
        // a remote receiver resolves its own destination
        Err(_) if spec.remote_receiver.is_some() => Ok(None),
        Err(e) => Err(TransferError::op("sink", e)),
    }
}

fn run_transfer_inner(
    spec: &TransferSpec,
    env: &Endpoints,
    plan: PipelinePlan,
    mut sink: Option<Box<dyn BatchSink>>,
) -> Result<TransferReport, TransferError> {
    let source = open_source(spec, env)?;
    let dest_partitions = destination_partitions(spec, env)?;
    if let (SourceEndpoint::Stream { client, topic }, true) = (&source, plan.preserve_partitions) {
        let src_n = client.partitions(topic).map_err(|e| TransferError::op("source", e))?;
        if let Some(dst_n) = dest_partitions {
            if src_n != dst_n {
                return Err(TransferError::Config(format!(
                    "--preserve-partitions needs equal partition counts (source {src_n}, destination {dst_n})"
                )));
            }
        }
    }

    let source_queue = Arc::new(batch_queue(plan.queue_capacity));
    let (sink_queue, receiver, dest) = match &spec.remote_receiver {
        Some(addr) => (None, None, addr.clone()),
        None => {
            let q = Arc::new(batch_queue(plan.queue_capacity));
            let mut cfg = ReceiverConfig::new(
                SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), spec.transport_port),
                plan.parallel_connections,
            );
            cfg.stage_dir = spec.stage_dir.clone();
            let r = Receiver::bind(&cfg, q.clone())?;
            let addr = r.local_addr().to_string();
            (Some(q), Some(r), addr)
        }
    };

    let mut sender_cfg = SenderConfig::new(dest, plan.parallel_connections);
    sender_cfg.compression = plan.compression;
    sender_cfg.reconnect_deadline = spec.reconnect_deadline;
    sender_cfg.partition_affinity = plan.preserve_partitions;
    let sender = Sender::new(sender_cfg);
    let in_flight = sender.in_flight();

    let abort = Abort {
        fired: AtomicBool::new(false),
        source_queue: source_queue.clone(),
        sink_queue: sink_queue.clone(),
        sender: sender.handle(),
        receiver: receiver.as_ref().map(Receiver::handle),
        stop_flag: spec.stop_flag.clone(),
    };

    let start = Instant::now();
    let (src_ack_tx, src_ack_rx) = mpsc::channel::<u64>();
    let sink_ack_tx = receiver.as_ref().map(Receiver::ack_sender);
    let sink_result: Mutex<Option<Result<SinkStats, OperatorError>>> = Mutex::new(None);

    let (source_result, sender_result, receiver_result) = thread::scope(|s| {
        let abort = &abort;
        let receiver_thread = receiver.map(|r| {
            s.spawn(move || {
                let res = r.run();
                if res.is_err() {
                    abort.fire("receiver");
                }
                res
            })
        });
        if let (Some(q), Some(tx), Some(sink)) = (&sink_queue, sink_ack_tx, sink.as_mut()) {
            let sink_result = &sink_result;
            s.spawn(move || {
                let res = run_sink(q, sink.as_mut(), &tx);
                if res.is_err() {
                    abort.fire("sink");
                }
                *sink_result.lock().unwrap_or_else(|e| e.into_inner()) = Some(res);
            });
        }
        let sender_thread = {
            let sq = &source_queue;
            let sender = &sender;
            s.spawn(move || {
                let res = sender.run(sq, &src_ack_tx);
                drop(src_ack_tx);
                if res.is_err() {
                    abort.fire("sender");
                }
                res
            })
        };

        let source_result = match &source {
            SourceEndpoint::Object(h) => {
                crate::object::object_source_run(&plan, h, dest_partitions.unwrap_or(1), &source_queue)
                    .map(SourceStats::Object)
            }
            SourceEndpoint::Stream { client, topic } => {
                let mut cfg = StreamSourceConfig::new(topic.clone(), spec.group(), spec.stop.clone());
                cfg.stop_flag = spec.stop_flag.clone();
                stream_source_run(client.as_ref(), &plan, &cfg, &source_queue, &src_ack_rx).map(SourceStats::Stream)
            }
        };
        if source_result.is_err() {
            abort.fire("source");
        }
        let sender_result = sender_thread.join().unwrap_or(Err(TransportError::Aborted));
        let receiver_result = receiver_thread.map(|t| t.join().unwrap_or(Err(TransportError::Aborted)));
        (source_result, sender_result, receiver_result)
    });
    let wall = start.elapsed().as_secs_f64();
    let sink_result = sink_result.into_inner().unwrap_or_else(|e| e.into_inner());

    // Report the root cause: operator errors first, then transport, skipping the
    // Aborted errors that the abort itself produces.
    let source_stats = match source_result {
        Ok(s) => s,
        Err(OperatorError::Aborted) => SourceStats::Aborted,
        Err(e) => return Err(TransferError::op("source", e)),
    };
    let sink_stats = match sink_result {
        Some(Err(OperatorError::Aborted)) | None => None,
        Some(Err(e)) => return Err(TransferError::op("sink", e)),
        Some(Ok(s)) => Some(s),
    };
    let sender_stats = match sender_result {
        Err(TransportError::Aborted) => None,
        Err(e) => return Err(e.into()),
        Ok(s) => Some(s),
    };
    let receiver_stats = match receiver_result {
        Some(Err(TransportError::Aborted)) | None => None,
        Some(Err(e)) => return Err(e.into()),
        Some(Ok(s)) => Some(s),
    };
    if abort.fired.load(Ordering::SeqCst) || matches!(source_stats, SourceStats::Aborted) {
        return Err(TransferError::Transport(TransportError::Aborted));
    }
    let sender_stats = sender_stats.unwrap_or_default();

    let (object_source, stream_source, causes) = match source_stats {
        SourceStats::Object(o) => {
            let c = o.causes;
            (Some(o), None, c)
        }
        SourceStats::Stream(st) => {
            let c = st.causes;
            (None, Some(st), c)
        }
        SourceStats::Aborted => unreachable!(),
    };
    let (records, bytes, batches) = match &sink_stats {
        Some(s) => (s.records, s.bytes, s.batches),
        None => (sender_stats.records, sender_stats.payload_bytes, sender_stats.batches),
    };
    let compressed = sender_stats
        .bytes_on_wire
        .saturating_sub((sender_stats.batches + sender_stats.retransmits) * crate::transport::HEADER_LEN as u64);
    Ok(TransferReport {
        source: spec.source.canonical(),
        destination: spec.destination.canonical(),
        plan,
        records_moved: records,
        bytes_moved: bytes,
        batches,
        wall_seconds: wall,
        throughput_bytes_per_sec: if wall > 0.0 { bytes as f64 / wall } else { 0.0 },
        msgs_per_sec: if wall > 0.0 { records as f64 / wall } else { 0.0 },
        retransmits: sender_stats.retransmits,
        emission_causes: causes,
        compression_ratio: if sender_stats.retransmits == 0 {
            sender_stats.compression_ratio(compressed)
        } else {
            1.0
        },
        peaks: QueuePeaks {
            source_queue_bytes: source_queue.peak_bytes(),
            source_queue_batches: source_queue.peak_len(),
            sink_queue_bytes: sink_queue.as_ref().map_or(0, |q| q.peak_bytes()),
            sink_queue_batches: sink_queue.as_ref().map_or(0, |q| q.peak_len()),
            sender_in_flight_bytes: in_flight.peak(),
            receiver_staged_bytes: receiver_stats.as_ref().map_or(0, |r| r.peak_staged_bytes),
        },
        object_source,
        stream_source,
        sender: sender_stats,
        receiver: receiver_stats,
        sink: sink_stats,
        stream_sink: None,
    })
}

enum SourceStats {
    Object(ObjectSourceStats),
    Stream(StreamSourceStats),
    Aborted,
}

#[derive(Debug, Clone)]
pub struct ReceiveSpec {
    pub listen: SocketAddr,
    pub destination: EndpointUri,
    pub format: DataFormat,
    pub preserve_partitions: bool,
    pub stage_dir: Option<PathBuf>,
    /// 0 takes the count the sender announces.
    pub expected_connections: usize,
    pub queue_capacity: usize,
    /// Cap on the sink's write rate, bytes/second.
    pub max_write_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReceiveReport {
    pub destination: String,
    pub receiver: ReceiverStats,
    pub sink: SinkStats,
    pub peak_sink_queue_bytes: u64,
}

/// Destination gateway as a standalone process: receive until every sender
/// connection has finished. `on_bound` sees the listening address.
pub fn run_receive(
    spec: &ReceiveSpec,
    env: &Endpoints,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<ReceiveReport, TransferError> {
    if spec.destination.scheme == Scheme::Stream || spec.destination.scheme == Scheme::File {
        // routes into object sinks from streams are rejected on the sending side
    } else {
        return Err(TransferError::op(
            "sink",
            ObjectError::UnsupportedBackend(spec.destination.scheme.as_str().into()),
        ));
    }
    let mut sink = build_sink(&spec.destination, spec.format, spec.preserve_partitions, env)?;
    if let Some(rate) = spec.max_write_rate {
        sink = Box::new(RateLimited::new(sink, rate));
    }
    let q = Arc::new(batch_queue(spec.queue_capacity));
    let mut cfg = ReceiverConfig::new(spec.listen, spec.expected_connections);
    cfg.stage_dir = spec.stage_dir.clone();
    let receiver = Receiver::bind(&cfg, q.clone())?;
    on_bound(receiver.local_addr());
    let handle = receiver.handle();
    let tx = receiver.ack_sender();
    let (rres, sres) = thread::scope(|s| {
        let rt = s.spawn(move || receiver.run());
        let sres = run_sink(&q, sink.as_mut(), &tx);
        drop(tx);
        if sres.is_err() {
            handle.shutdown();
        }
        (rt.join().unwrap_or(Err(TransportError::Aborted)), sres)
    });
    let sink_stats = sres.map_err(|e| TransferError::op("sink", e))?;
    let receiver_stats = rres?;
    Ok(ReceiveReport {
        destination: spec.destination.canonical(),
        receiver: receiver_stats,
        sink: sink_stats,
        peak_sink_queue_bytes: q.peak_bytes(),
    })
}

/// Whether `plan` routes into a stream topic.
pub fn is_stream_sink(plan: &PipelinePlan) -> bool {
    plan.sink_kind == SinkKind::Stream
}

/// Whether `plan` reads a stream topic.
pub fn is_stream_source(plan: &PipelinePlan) -> bool {
    plan.source_kind == SourceKind::Stream
}
