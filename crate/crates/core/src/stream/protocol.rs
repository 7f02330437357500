//! Broker wire protocol.
//!
//! Every message is `len u32 | body`. Request bodies start with an opcode byte,
//! responses with a status byte (0 = ok, otherwise an error code followed by a
//! message). Integers are big-endian, strings are `u16 len | utf8`, byte fields are
//! `u32 len | bytes` with `0xFFFFFFFF` for an absent key.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{Broker, BrokerError, StoredRecord, StreamClient};

const OP_CREATE_TOPIC: u8 = 1;
const OP_METADATA: u8 = 2;
const OP_PRODUCE: u8 = 3;
const OP_FETCH: u8 = 4;
const OP_COMMIT: u8 = 5;
const OP_COMMITTED: u8 = 6;

const ST_OK: u8 = 0;
const ST_UNKNOWN_TOPIC: u8 = 1;
const ST_TOPIC_EXISTS: u8 = 2;
const ST_PARTITION: u8 = 3;
const ST_TOO_LARGE: u8 = 4;
const ST_OFFSET: u8 = 5;
const ST_INVALID: u8 = 6;
const ST_INTERNAL: u8 = 7;

const MAX_MESSAGE: u32 = 1 << 30;
const NULL_LEN: u32 = u32::MAX;

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn str(&mut self, s: &str) -> &mut Self {
        self.0.extend_from_slice(&(s.len() as u16).to_be_bytes());
        self.0.extend_from_slice(s.as_bytes());
        self
    }
    fn bytes(&mut self, b: Option<&[u8]>) -> &mut Self {
        match b {
            Some(b) => {
                self.u32(b.len() as u32);
                self.0.extend_from_slice(b);
            }
            None => {
                self.u32(NULL_LEN);
            }
        }
        self
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], BrokerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| BrokerError::Protocol("truncated message".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, BrokerError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, BrokerError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, BrokerError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, BrokerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<&'a str, BrokerError> {
        let n = self.u16()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| BrokerError::Protocol("string is not utf-8".into()))
    }
    fn bytes(&mut self) -> Result<Option<&'a [u8]>, BrokerError> {
        match self.u32()? {
            NULL_LEN => Ok(None),
            n => Ok(Some(self.take(n as usize)?)),
        }
    }
    fn finish(&self) -> Result<(), BrokerError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(BrokerError::Protocol("trailing bytes in message".into()))
        }
    }
}

fn write_msg(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(body)?;
    w.flush()
}

/// Read one message; `Ok(None)` on a clean EOF before the length prefix.
fn read_msg(r: &mut impl Read) -> Result<Option<Vec<u8>>, BrokerError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_MESSAGE {
        return Err(BrokerError::Protocol(format!("message of {len} bytes too large")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

fn encode_error(e: &BrokerError) -> Vec<u8> {
    let mut enc = Enc::default();
    match e {
        BrokerError::UnknownTopic(t) => {
            enc.u8(ST_UNKNOWN_TOPIC).str(t);
        }
        BrokerError::TopicExists { topic, partitions } => {
            enc.u8(ST_TOPIC_EXISTS).str(topic).u32(*partitions);
        }
        BrokerError::PartitionOutOfRange {
            topic,
            partition,
            partitions,
        } => {
            enc.u8(ST_PARTITION).str(topic).u32(*partition).u32(*partitions);
        }
        BrokerError::MessageTooLarge { size, max } => {
            enc.u8(ST_TOO_LARGE).u64(*size as u64).u64(*max as u64);
        }
        BrokerError::OffsetOutOfRange { requested, end } => {
            enc.u8(ST_OFFSET).u64(*requested).u64(*end);
        }
        BrokerError::InvalidRequest(m) | BrokerError::Protocol(m) => {
            enc.u8(ST_INVALID).str(m);
        }
        other => {
            enc.u8(ST_INTERNAL).str(&other.to_string());
        }
    }
    enc.0
}

fn decode_error(status: u8, d: &mut Dec<'_>) -> Result<BrokerError, BrokerError> {
    Ok(match status {
        ST_UNKNOWN_TOPIC => BrokerError::UnknownTopic(d.str()?.to_string()),
        ST_TOPIC_EXISTS => BrokerError::TopicExists {
            topic: d.str()?.to_string(),
            partitions: d.u32()?,
        },
        ST_PARTITION => BrokerError::PartitionOutOfRange {
            topic: d.str()?.to_string(),
            partition: d.u32()?,
            partitions: d.u32()?,
        },
        ST_TOO_LARGE => BrokerError::MessageTooLarge {
            size: d.u64()? as usize,
            max: d.u64()? as usize,
        },
        ST_OFFSET => BrokerError::OffsetOutOfRange {
            requested: d.u64()?,
            end: d.u64()?,
        },
        ST_INVALID => BrokerError::InvalidRequest(d.str()?.to_string()),
        ST_INTERNAL => BrokerError::Corrupt(d.str()?.to_string()),
        s => return Err(BrokerError::Protocol(format!("unknown status {s}"))),
    })
}

fn handle_request(broker: &Broker, body: &[u8]) -> Result<Vec<u8>, BrokerError> {
    let mut d = Dec::new(body);
    let mut out = Enc::default();
    out.u8(ST_OK);
    match d.u8()? {
        OP_CREATE_TOPIC => {
            let topic = d.str()?;
            let partitions = d.u32()?;
            d.finish()?;
            broker.create_topic(topic, partitions)?;
        }
        OP_METADATA => {
            let topic = d.str()?;
            d.finish()?;
            let ends = broker.end_offsets(topic)?;
            out.u32(ends.len() as u32);
            for e in ends {
                out.u64(e);
            }
        }
        OP_PRODUCE => {
            let topic = d.str()?;
            let partition = d.u32()?;
            let n = d.u32()?;
            let mut recs = Vec::with_capacity(n.min(1 << 16) as usize);
            for _ in 0..n {
                let k = d.bytes()?;
                let v = d.bytes()?.ok_or_else(|| BrokerError::Protocol("null value".into()))?;
                recs.push((k, v));
            }
            d.finish()?;
            out.u64(broker.produce_batch(topic, partition, &recs)?);
        }
        OP_FETCH => {
            let topic = d.str()?;
            let partition = d.u32()?;
            let from = d.u64()?;
            let max = d.u32()?;
            d.finish()?;
            let recs = broker.fetch(topic, partition, from, max as usize)?;
            out.u32(recs.len() as u32);
            for r in &recs {
                out.u64(r.offset).bytes(r.key.as_deref()).bytes(Some(&r.value));
            }
        }
        OP_COMMIT => {
            let group = d.str()?;
            let topic = d.str()?;
            let partition = d.u32()?;
            let offset = d.u64()?;
            d.finish()?;
            broker.commit(group, topic, partition, offset)?;
        }
        OP_COMMITTED => {
            let group = d.str()?;
            let topic = d.str()?;
            d.finish()?;
            let c = broker.committed(group, topic)?;
            out.u32(c.len() as u32);
            for o in c {
                match o {
                    Some(o) => out.u8(1).u64(o),
                    None => out.u8(0).u64(0),
                };
            }
        }
        op => return Err(BrokerError::InvalidRequest(format!("unknown opcode {op}"))),
    }
    Ok(out.0)
}

fn serve_connection(broker: &Broker, stream: TcpStream) -> Result<(), BrokerError> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(body) = read_msg(&mut reader)? {
        let resp = handle_request(broker, &body).unwrap_or_else(|e| encode_error(&e));
        write_msg(&mut writer, &resp)?;
    }
    Ok(())
}

/// Serves a [`Broker`] over TCP, one thread per connection.
pub struct BrokerServer {
    listener: TcpListener,
    broker: Arc<Broker>,
    stop: Arc<AtomicBool>,
}

/// Stops a spawned [`BrokerServer`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for c in self.conns.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

impl BrokerServer {
    pub fn bind(addr: &str, broker: Arc<Broker>) -> Result<Self, BrokerError> {
        let listener = TcpListener::bind(addr)?;
        Ok(Self {
            listener,
            broker,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    /// Accept connections until the process exits.
    pub fn serve(self) -> Result<(), BrokerError> {
        let conns = Arc::new(Mutex::new(Vec::new()));
        self.accept_loop(&conns)
    }

    fn accept_loop(&self, conns: &Arc<Mutex<Vec<TcpStream>>>) -> Result<(), BrokerError> {
        self.listener.set_nonblocking(true)?;
        while !self.stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    if let Ok(c) = stream.try_clone() {
                        let mut all = conns.lock().unwrap_or_else(|e| e.into_inner());
                        all.retain(|s| s.peer_addr().is_ok());
                        all.push(c);
                    }
                    let broker = self.broker.clone();
                    thread::spawn(move || {
                        if let Err(e) = serve_connection(&broker, stream) {
                            log::debug!("broker connection {peer}: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Serve on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr();
        let stop = self.stop.clone();
        let conns = Arc::new(Mutex::new(Vec::new()));
        let c2 = conns.clone();
        let thread = thread::spawn(move || {
            if let Err(e) = self.accept_loop(&c2) {
                log::error!("broker server stopped: {e}");
            }
        });
        ServerHandle {
            addr,
            stop,
            conns,
            thread: Some(thread),
        }
    }
}

/// Client for a broker reached over TCP. One connection, opened lazily and dropped
/// after any i/o failure so the next call reconnects.
pub struct RemoteBroker {
    addr: String,
    conn: Mutex<Option<(BufReader<TcpStream>, BufWriter<TcpStream>)>>,
    timeout: Duration,
}

impl RemoteBroker {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            conn: Mutex::new(None),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn call(&self, req: &[u8]) -> Result<Vec<u8>, BrokerError> {
        let mut guard = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            let s = TcpStream::connect(&self.addr)?;
            s.set_nodelay(true)?;
            s.set_read_timeout(Some(self.timeout))?;
            *guard = Some((BufReader::new(s.try_clone()?), BufWriter::new(s)));
        }
        let (r, w) = guard.as_mut().expect("connected");
        let result = write_msg(w, req)
            .map_err(BrokerError::from)
            .and_then(|_| read_msg(r))
            .and_then(|m| {
                m.ok_or_else(|| {
                    BrokerError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "broker closed connection"))
                })
            });
        if result.is_err() {
            *guard = None;
        }
        result
    }

    fn request<T>(
        &self,
        req: &Enc,
        parse: impl FnOnce(&mut Dec<'_>) -> Result<T, BrokerError>,
    ) -> Result<T, BrokerError> {
        let resp = self.call(&req.0)?;
        let mut d = Dec::new(&resp);
        match d.u8()? {
            ST_OK => {
                let v = parse(&mut d)?;
                d.finish()?;
                Ok(v)
            }
            status => Err(decode_error(status, &mut d)?),
        }
    }
}

impl StreamClient for RemoteBroker {
    fn create_topic(&self, topic: &str, partitions: u32) -> Result<(), BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_CREATE_TOPIC).str(topic).u32(partitions);
        self.request(&e, |_| Ok(()))
    }

    fn partitions(&self, topic: &str) -> Result<u32, BrokerError> {
        Ok(self.end_offsets(topic)?.len() as u32)
    }

    fn end_offsets(&self, topic: &str) -> Result<Vec<u64>, BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_METADATA).str(topic);
        self.request(&e, |d| {
            let n = d.u32()?;
            (0..n).map(|_| d.u64()).collect()
        })
    }

    fn produce_batch(
        &self,
        topic: &str,
        partition: u32,
        records: &[(Option<&[u8]>, &[u8])],
    ) -> Result<u64, BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_PRODUCE).str(topic).u32(partition).u32(records.len() as u32);
        for (k, v) in records {
            e.bytes(*k).bytes(Some(v));
        }
        self.request(&e, |d| d.u64())
    }

    fn fetch(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_bytes: usize,
    ) -> Result<Vec<StoredRecord>, BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_FETCH)
            .str(topic)
            .u32(partition)
            .u64(from_offset)
            .u32(max_bytes.min(u32::MAX as usize) as u32);
        self.request(&e, |d| {
            let n = d.u32()?;
            (0..n)
                .map(|_| {
                    let offset = d.u64()?;
                    let key = d.bytes()?.map(<[u8]>::to_vec);
                    let value = d
                        .bytes()?
                        .ok_or_else(|| BrokerError::Protocol("null value".into()))?
                        .to_vec();
                    Ok(StoredRecord { offset, key, value })
                })
                .collect()
        })
    }

    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<(), BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_COMMIT).str(group).str(topic).u32(partition).u64(offset);
        self.request(&e, |_| Ok(()))
    }

    fn committed(&self, group: &str, topic: &str) -> Result<Vec<Option<u64>>, BrokerError> {
        let mut e = Enc::default();
        e.u8(OP_COMMITTED).str(group).str(topic);
        self.request(&e, |d| {
            let n = d.u32()?;
            (0..n)
                .map(|_| {
                    let present = d.u8()? != 0;
                    let o = d.u64()?;
                    Ok(present.then_some(o))
                })
                .collect()
        })
    }
}
