//! Destination gateway: accepts sender connections, decodes BATCH frames, stages them in
//! the [`ChunkStore`], and pushes them to the sink queue. ACKs are written when the sink
//! reports a batch done through the channel from [`Receiver::ack_sender`], on the
//! connection the batch (or its latest retransmission) arrived on.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufReader, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver as ChanReceiver, Sender as ChanSender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::chunk_store::ChunkStore;
use super::codec::frame_to_batch;
use super::frame::{read_frame, Frame, FrameError, MalformedFrame, MsgType};
use super::TransportError;
use crate::pipeline::{BoundedQueue, RecordBatch};

/// Acknowledged batch ids remembered per sender session.
pub const DEDUP_WINDOW: usize = 1024;

#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    pub listen: SocketAddr,
    /// Number of distinct sender connections whose FIN ends the transfer; 0 takes the
    /// count announced in the first HELLO.
    pub expected_connections: usize,
    pub stage_dir: Option<PathBuf>,
    pub max_frame_payload: u64,
}

impl ReceiverConfig {
    pub fn new(listen: SocketAddr, expected_connections: usize) -> Self {
        Self {
            listen,
            expected_connections,
            stage_dir: None,
            max_frame_payload: 1 << 31,
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ReceiverStats {
    pub connections_accepted: u64,
    pub batches_received: u64,
    pub duplicates_dropped: u64,
    pub bytes_on_wire: u64,
    pub malformed_frames: u64,
    pub peak_staged_bytes: u64,
}

type Writer = Arc<Mutex<TcpStream>>;

struct DedupWindow {
    order: VecDeque<u64>,
    ids: HashSet<u64>,
}

impl DedupWindow {
    fn new() -> Self {
        Self {
            order: VecDeque::with_capacity(DEDUP_WINDOW),
            ids: HashSet::with_capacity(DEDUP_WINDOW),
        }
    }

    fn insert(&mut self, id: u64) {
        if !self.ids.insert(id) {
            return;
        }
        self.order.push_back(id);
        if self.order.len() > DEDUP_WINDOW {
            if let Some(old) = self.order.pop_front() {
                self.ids.remove(&old);
            }
        }
    }

    fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }
}

struct Pending {
    session: u64,
    writer: Writer,
}

struct Shared {
    out: Arc<BoundedQueue<RecordBatch>>,
    store: ChunkStore,
    pending: Mutex<HashMap<u64, Pending>>,
    acked: Mutex<HashMap<u64, DedupWindow>>,
    fins: Mutex<HashSet<(u64, u32)>>,
    fin_cv: Condvar,
    streams: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
    expected: AtomicU64,
    max_frame_payload: u64,
    connections: AtomicU64,
    batches: AtomicU64,
    duplicates: AtomicU64,
    wire_bytes: AtomicU64,
    malformed: AtomicU64,
}

impl Shared {
    fn all_finished(&self, fins: &HashSet<(u64, u32)>) -> bool {
        let expected = self.expected.load(Ordering::SeqCst);
        expected > 0 && fins.len() as u64 >= expected
    }

    fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
        m.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Cloneable handle to stop a running receiver from another thread.
#[derive(Clone)]
pub struct ReceiverHandle {
    shared: Arc<Shared>,
}

impl ReceiverHandle {
    /// Stop accepting, drop all connections and abort the sink queue.
    pub fn shutdown(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for s in Shared::lock(&self.shared.streams).iter() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.out.abort();
        self.shared.fin_cv.notify_all();
    }
}

pub struct Receiver {
    listener: TcpListener,
    shared: Arc<Shared>,
    ack_tx: Option<ChanSender<u64>>,
    ack_rx: ChanReceiver<u64>,
}

fn write_frame(writer: &Writer, frame: &Frame) -> std::io::Result<()> {
    let mut s = Shared::lock(writer);
    frame.write_to(&mut *s)?;
    s.flush()
}

impl Receiver {
    /// Bind the listener. Port 0 picks an ephemeral port; see [`local_addr`](Self::local_addr).
    pub fn bind(config: &ReceiverConfig, out: Arc<BoundedQueue<RecordBatch>>) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(config.listen).map_err(TransportError::Bind)?;
        let store = match &config.stage_dir {
            Some(d) => ChunkStore::on_disk(d).map_err(TransportError::Io)?,
            None => ChunkStore::in_memory(),
        };
        let (ack_tx, ack_rx) = mpsc::channel();
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                expected: AtomicU64::new(config.expected_connections as u64),
                out,
                store,
                pending: Mutex::new(HashMap::new()),
                acked: Mutex::new(HashMap::new()),
                fins: Mutex::new(HashSet::new()),
                fin_cv: Condvar::new(),
                streams: Mutex::new(Vec::new()),
                stop: AtomicBool::new(false),
                max_frame_payload: config.max_frame_payload,
                connections: AtomicU64::new(0),
                batches: AtomicU64::new(0),
                duplicates: AtomicU64::new(0),
                wire_bytes: AtomicU64::new(0),
                malformed: AtomicU64::new(0),
            }),
            ack_tx: Some(ack_tx),
            ack_rx,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Channel on which the sink reports batch ids it has durably written.
    pub fn ack_sender(&self) -> ChanSender<u64> {
        self.ack_tx.clone().expect("receiver not started")
    }

    pub fn handle(&self) -> ReceiverHandle {
        ReceiverHandle {
            shared: self.shared.clone(),
        }
    }

    /// Serve until FIN has arrived from `expected_connections` distinct sender
    /// connections, then close the sink queue. Returns early with an error if shut down.
    pub fn run(mut self) -> Result<ReceiverStats, TransportError> {
        drop(self.ack_tx.take());
        let shared = self.shared.clone();

        let ack_shared = shared.clone();
        let ack_rx = self.ack_rx;
        thread::Builder::new()
            .name("receiver-acks".into())
            .spawn(move || ack_loop(&ack_shared, ack_rx))
            .expect("spawn ack thread");

        let listener = self.listener.try_clone().map_err(TransportError::Io)?;
        listener.set_nonblocking(true).map_err(TransportError::Io)?;
        let accept_shared = shared.clone();
        let acceptor = thread::Builder::new()
            .name("receiver-accept".into())
            .spawn(move || accept_loop(&accept_shared, listener))
            .expect("spawn acceptor");

        {
            let mut fins = Shared::lock(&shared.fins);
            while !shared.all_finished(&fins) && !shared.stop.load(Ordering::SeqCst) {
                fins = shared
                    .fin_cv
                    .wait_timeout(fins, Duration::from_millis(200))
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        }
        let aborted = shared.stop.swap(true, Ordering::SeqCst);
        let _ = acceptor.join();
        shared.out.close();

        let stats = ReceiverStats {
            connections_accepted: shared.connections.load(Ordering::Relaxed),
            batches_received: shared.batches.load(Ordering::Relaxed),
            duplicates_dropped: shared.duplicates.load(Ordering::Relaxed),
            bytes_on_wire: shared.wire_bytes.load(Ordering::Relaxed),
            malformed_frames: shared.malformed.load(Ordering::Relaxed),
            peak_staged_bytes: shared.store.peak_bytes(),
        };
        if aborted && !shared.all_finished(&Shared::lock(&shared.fins)) {
            return Err(TransportError::Aborted);
        }
        Ok(stats)
    }
}

fn ack_loop(shared: &Shared, rx: ChanReceiver<u64>) {
    for id in rx {
        let pending = {
            let mut pending = Shared::lock(&shared.pending);
            // record in the dedup window before the id leaves `pending`, so a
            // retransmission racing this ack is never pushed twice
            if let Some(p) = pending.get(&id) {
                Shared::lock(&shared.acked)
                    .entry(p.session)
                    .or_insert_with(DedupWindow::new)
                    .insert(id);
            }
            pending.remove(&id)
        };
        shared.store.release(id);
        let Some(p) = pending else { continue };
        if let Err(e) = write_frame(&p.writer, &Frame::ack(id)) {
            log::debug!("ack {id} not delivered: {e}");
        }
    }
}

fn accept_loop(shared: &Arc<Shared>, listener: TcpListener) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                if let Ok(c) = stream.try_clone() {
                    Shared::lock(&shared.streams).push(c);
                }
                shared.connections.fetch_add(1, Ordering::Relaxed);
                let s = shared.clone();
                thread::Builder::new()
                    .name(format!("receiver-{peer}"))
                    .spawn(move || {
                        if let Err(e) = handle_connection(&s, stream) {
                            log::debug!("connection from {peer} ended: {e}");
                        }
                    })
                    .expect("spawn connection handler");
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handle_connection(shared: &Shared, stream: TcpStream) -> Result<(), TransportError> {
    let writer: Writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::with_capacity(256 * 1024, stream);

    let reject = |writer: &Writer, e: &FrameError| {
        shared.malformed.fetch_add(1, Ordering::Relaxed);
        let _ = write_frame(writer, &Frame::err(&e.to_string()));
        let _ = Shared::lock(writer).shutdown(Shutdown::Both);
    };

    let hello = match read_frame(&mut reader, shared.max_frame_payload) {
        Ok(f) => f,
        Err(e @ FrameError::Malformed(_)) => {
            reject(&writer, &e);
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    if hello.msg_type != MsgType::Hello {
        let _ = write_frame(&writer, &Frame::err("expected HELLO"));
        return Err(TransportError::Handshake(format!(
            "expected HELLO, got {:?}",
            hello.msg_type
        )));
    }
    let session = hello.batch_id;
    let conn_index = hello.partition as u32;
    if hello.record_count > 0 {
        let _ = shared
            .expected
            .compare_exchange(0, u64::from(hello.record_count), Ordering::SeqCst, Ordering::SeqCst);
    }
    write_frame(&writer, &Frame::hello(session, conn_index, hello.record_count))?;

    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        let frame = match read_frame(&mut reader, shared.max_frame_payload) {
            Ok(f) => f,
            Err(e @ FrameError::Malformed(_)) => {
                reject(&writer, &e);
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        shared
            .wire_bytes
            .fetch_add(frame.encoded_len() as u64, Ordering::Relaxed);
        match frame.msg_type {
            MsgType::Batch => {
                if !on_batch(shared, &writer, session, frame)? {
                    return Ok(());
                }
            }
            MsgType::Fin => {
                Shared::lock(&shared.fins).insert((session, conn_index));
                shared.fin_cv.notify_all();
                let _ = write_frame(&writer, &Frame::fin());
                return Ok(());
            }
            other => {
                let e = FrameError::Malformed(MalformedFrame::BadType(other as u8));
                reject(&writer, &e);
                return Err(e.into());
            }
        }
    }
}

/// Returns `false` when the sink queue has been shut down.
fn on_batch(shared: &Shared, writer: &Writer, session: u64, frame: Frame) -> Result<bool, TransportError> {
    let id = frame.batch_id;
    let already_acked = Shared::lock(&shared.acked)
        .get(&session)
        .is_some_and(|w| w.contains(id));
    if already_acked {
        shared.duplicates.fetch_add(1, Ordering::Relaxed);
        write_frame(writer, &Frame::ack(id))?;
        return Ok(true);
    }
    {
        let mut pending = Shared::lock(&shared.pending);
        if let Some(p) = pending.get_mut(&id) {
            // retransmission of a batch the sink has not finished: ack on the new connection
            shared.duplicates.fetch_add(1, Ordering::Relaxed);
            p.writer = writer.clone();
            return Ok(true);
        }
        pending.insert(
            id,
            Pending {
                session,
                writer: writer.clone(),
            },
        );
    }
    let batch = match frame_to_batch(&frame) {
        Ok(b) => b,
        Err(e) => {
            Shared::lock(&shared.pending).remove(&id);
            shared.malformed.fetch_add(1, Ordering::Relaxed);
            let _ = write_frame(writer, &Frame::err(&e.to_string()));
            return Err(TransportError::Codec(e));
        }
    };
    shared.store.stage(id, &frame.payload)?;
    drop(frame);
    shared.batches.fetch_add(1, Ordering::Relaxed);
    let started = Instant::now();
    if shared.out.push(batch).is_err() {
        Shared::lock(&shared.pending).remove(&id);
        shared.store.release(id);
        let _ = write_frame(writer, &Frame::err("destination gateway shutting down"));
        return Ok(false);
    }
    log::trace!("batch {id} handed to sink after {:?}", started.elapsed());
    Ok(true)
}
