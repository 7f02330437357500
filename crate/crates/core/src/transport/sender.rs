//! Source gateway transport: `P` workers, one TCP connection each.
//!
//! A worker takes the next batch from the shared input queue when its connection is
//! idle, sends it as one BATCH frame, and holds the encoded frame until the matching ACK
//! arrives. On connection loss it reconnects and retransmits the held frame, so a batch
//! never moves between connections and at most one batch per connection is unacknowledged.
//!
//! With partition affinity a dispatcher hands every batch carrying a partition hint to
//! connection `partition % P`, which keeps each partition's batches in order end to end.

use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Sender as ChanSender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::Serialize;

use super::codec::batch_into_frame;
use super::frame::{read_frame, Frame, FrameError, MsgType};
use super::TransportError;
use crate::pipeline::{BoundedQueue, ByteGauge, RecordBatch};
use crate::retry::Backoff;

#[derive(Debug, Clone)]
pub struct SenderConfig {
    /// `host:port` of the receiver.
    pub dest: String,
    pub connections: usize,
    pub compression: bool,
    /// How long reconnect attempts may keep failing before the transfer is abandoned.
    pub reconnect_deadline: Duration,
    pub max_frame_payload: u64,
    /// Pin batches with a partition hint to one connection per partition.
    pub partition_affinity: bool,
}

impl SenderConfig {
    pub fn new(dest: impl Into<String>, connections: usize) -> Self {
        Self {
            dest: dest.into(),
            connections,
            compression: false,
            reconnect_deadline: Duration::from_secs(30),
            max_frame_payload: 1 << 20,
            partition_affinity: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SenderStats {
    pub batches: u64,
    pub records: u64,
    /// Record bytes (keys + values) sent.
    pub payload_bytes: u64,
    /// Encoded BATCH payload bytes before compression.
    pub uncompressed_bytes: u64,
    /// Frame bytes written, including retransmissions.
    pub bytes_on_wire: u64,
    pub retransmits: u64,
    pub reconnects: u64,
    pub batches_per_connection: Vec<u64>,
    pub peak_in_flight_bytes: u64,
}

impl SenderStats {
    /// uncompressed / compressed BATCH payload bytes; 1.0 without compression.
    pub fn compression_ratio(&self, compressed_payload: u64) -> f64 {
        if compressed_payload == 0 {
            1.0
        } else {
            self.uncompressed_bytes as f64 / compressed_payload as f64
        }
    }
}

pub struct Sender {
    config: SenderConfig,
    session: u64,
    in_flight: Arc<ByteGauge>,
    abort: Arc<AtomicBool>,
    sockets: Arc<Mutex<Vec<TcpStream>>>,
}

/// Stops a running [`Sender`] from another thread.
#[derive(Clone)]
pub struct SenderHandle {
    abort: Arc<AtomicBool>,
    sockets: Arc<Mutex<Vec<TcpStream>>>,
}

impl SenderHandle {
    pub fn abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
        for s in self.sockets.lock().unwrap_or_else(|e| e.into_inner()).iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Where a worker takes its batches from.
enum Input<'a> {
    Shared(&'a BoundedQueue<RecordBatch>),
    Own(mpsc::Receiver<RecordBatch>),
}

impl Input<'_> {
    fn next(&self) -> Option<RecordBatch> {
        match self {
            Input::Shared(q) => q.pop().ok(),
            Input::Own(rx) => rx.recv().ok(),
        }
    }
}

struct Conn {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

#[derive(Default)]
struct WorkerStats {
    batches: u64,
    records: u64,
    payload_bytes: u64,
    uncompressed_bytes: u64,
    bytes_on_wire: u64,
    retransmits: u64,
    reconnects: u64,
}

impl Sender {
    pub fn new(config: SenderConfig) -> Self {
        Self {
            config,
            session: rand::random(),
            in_flight: Arc::new(ByteGauge::new()),
            abort: Arc::new(AtomicBool::new(false)),
            sockets: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Bytes of batches taken from the queue but not yet acknowledged.
    pub fn in_flight(&self) -> Arc<ByteGauge> {
        self.in_flight.clone()
    }

    pub fn handle(&self) -> SenderHandle {
        SenderHandle {
            abort: self.abort.clone(),
            sockets: self.sockets.clone(),
        }
    }

    /// Send every batch from `input` until it is closed and drained, then FIN each
    /// connection. Acknowledged batch ids are forwarded to `acks`.
    ///
    /// A fatal error on any worker aborts `input` so the upstream stage stops too.
    pub fn run(
        &self,
        input: &BoundedQueue<RecordBatch>,
        acks: &ChanSender<u64>,
    ) -> Result<SenderStats, TransportError> {
        if self.config.connections == 0 {
            return Err(TransportError::Handshake("at least one connection required".into()));
        }
        let addr = resolve(&self.config.dest)?;
        let n = self.config.connections;
        let (inputs, dispatch): (Vec<Input>, Vec<_>) = if self.config.partition_affinity && n > 1 {
            let (txs, rxs): (Vec<_>, Vec<_>) = (0..n).map(|_| mpsc::sync_channel::<RecordBatch>(0)).unzip();
            (rxs.into_iter().map(Input::Own).collect(), txs)
        } else {
            ((0..n).map(|_| Input::Shared(input)).collect(), Vec::new())
        };
        let results: Vec<Result<WorkerStats, TransportError>> = thread::scope(|scope| {
            if !dispatch.is_empty() {
                scope.spawn(move || {
                    let mut rr = 0usize;
                    while let Ok(batch) = input.pop() {
                        let idx = match batch.partition_hint {
                            Some(p) => p as usize % n,
                            None => {
                                rr += 1;
                                rr % n
                            }
                        };
                        if dispatch[idx].send(batch).is_err() {
                            break;
                        }
                    }
                });
            }
            let handles: Vec<_> = inputs
                .into_iter()
                .enumerate()
                .map(|(idx, inp)| {
                    let acks = acks.clone();
                    scope.spawn(move || {
                        let r = self.worker(idx as u32, addr, inp, &acks);
                        if r.is_err() {
                            input.abort();
                        }
                        r
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(Err(TransportError::Aborted)))
                .collect()
        });

        let mut stats = SenderStats {
            peak_in_flight_bytes: self.in_flight.peak(),
            ..Default::default()
        };
        let mut first_err = None;
        for r in results {
            match r {
                Ok(w) => {
                    stats.batches += w.batches;
                    stats.records += w.records;
                    stats.payload_bytes += w.payload_bytes;
                    stats.uncompressed_bytes += w.uncompressed_bytes;
                    stats.bytes_on_wire += w.bytes_on_wire;
                    stats.retransmits += w.retransmits;
                    stats.reconnects += w.reconnects;
                    stats.batches_per_connection.push(w.batches);
                }
                Err(e) => {
                    stats.batches_per_connection.push(0);
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(stats),
        }
    }

    fn aborted(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }

    fn connect(&self, idx: u32, addr: SocketAddr) -> Result<Conn, TransportError> {
        let mut backoff = Backoff::new(self.config.reconnect_deadline);
        loop {
            if self.aborted() {
                return Err(TransportError::Aborted);
            }
            match self.try_connect(idx, addr) {
                Ok(c) => return Ok(c),
                Err(e) if e.is_retryable() => {
                    log::debug!("connection {idx} to {addr} failed: {e}");
                    if !backoff.wait() {
                        return Err(TransportError::Unreachable {
                            addr: addr.to_string(),
                            attempts: backoff.attempts() + 1,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn try_connect(&self, idx: u32, addr: SocketAddr) -> Result<Conn, TransportError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        self.sockets
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(stream.try_clone()?);
        let mut conn = Conn {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        };
        Frame::hello(self.session, idx, self.config.connections as u32).write_to(&mut conn.writer)?;
        conn.writer.flush()?;
        let reply = read_frame(&mut conn.reader, self.config.max_frame_payload)?;
        match reply.msg_type {
            MsgType::Hello => Ok(conn),
            MsgType::Err => Err(TransportError::Handshake(
                String::from_utf8_lossy(&reply.payload).into_owned(),
            )),
            other => Err(TransportError::Handshake(format!(
                "unexpected {other:?} during handshake"
            ))),
        }
    }

    fn worker(
        &self,
        idx: u32,
        addr: SocketAddr,
        input: Input,
        acks: &ChanSender<u64>,
    ) -> Result<WorkerStats, TransportError> {
        let mut stats = WorkerStats::default();
        let mut conn = self.connect(idx, addr)?;
        while let Some(batch) = input.next() {
            if self.aborted() {
                return Err(TransportError::Aborted);
            }
            let id = batch.batch_id;
            let logical = batch.total_bytes;
            self.in_flight.add(logical);
            stats.records += batch.records.len() as u64;
            let frame = batch_into_frame(batch, self.config.compression)?;
            stats.payload_bytes += logical;
            stats.uncompressed_bytes += u64::from(frame.uncompressed_len);

            let mut attempt = 0u32;
            loop {
                if attempt > 0 {
                    stats.retransmits += 1;
                }
                attempt += 1;
                match self.send_and_await_ack(&mut conn, &frame, id) {
                    Ok(()) => break,
                    Err(e) if e.is_retryable() && !self.aborted() => {
                        log::warn!("connection {idx}: {e}; reconnecting to retransmit batch {id}");
                        stats.reconnects += 1;
                        conn = self.connect(idx, addr)?;
                    }
                    Err(e) => {
                        self.in_flight.sub(logical);
                        return Err(e);
                    }
                }
            }
            stats.bytes_on_wire += frame.encoded_len() as u64 * u64::from(attempt);
            stats.batches += 1;
            self.in_flight.sub(logical);
            let _ = acks.send(id);
        }
        if self.aborted() {
            return Err(TransportError::Aborted);
        }
        self.finish(&mut conn);
        Ok(stats)
    }

    fn send_and_await_ack(&self, conn: &mut Conn, frame: &Frame, id: u64) -> Result<(), TransportError> {
        frame.write_to(&mut conn.writer)?;
        conn.writer.flush()?;
        loop {
            let f = read_frame(&mut conn.reader, self.config.max_frame_payload)?;
            match f.msg_type {
                MsgType::Ack if f.batch_id == id => return Ok(()),
                MsgType::Ack => log::debug!("stale ack {} while waiting for {id}", f.batch_id),
                MsgType::Err => return Err(TransportError::Remote(String::from_utf8_lossy(&f.payload).into_owned())),
                other => {
                    return Err(TransportError::Frame(FrameError::Malformed(
                        super::frame::MalformedFrame::BadType(other as u8),
                    )))
                }
            }
        }
    }

    fn finish(&self, conn: &mut Conn) {
        let sent = Frame::fin()
            .write_to(&mut conn.writer)
            .and_then(|_| conn.writer.flush());
        if sent.is_err() {
            return;
        }
        let _ = conn.reader.get_ref().set_read_timeout(Some(Duration::from_secs(10)));
        loop {
            match read_frame(&mut conn.reader, self.config.max_frame_payload) {
                Ok(f) if f.msg_type == MsgType::Fin => break,
                Ok(_) => continue,
                Err(_) => break,
            }
        }
        let _ = conn.writer.shutdown(Shutdown::Both);
    }
}

fn resolve(dest: &str) -> Result<SocketAddr, TransportError> {
    dest.to_socket_addrs()
        .map_err(|e| TransportError::Unreachable {
            addr: format!("{dest} ({e})"),
            attempts: 0,
        })?
        .next()
        .ok_or_else(|| TransportError::Unreachable {
            addr: dest.to_string(),
            attempts: 0,
        })
}
