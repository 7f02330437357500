//! Bounded blocking queues connecting pipeline stages.
//!
//! A full queue blocks the producer; nothing is dropped. Closing a queue wakes every
//! waiter: blocked producers get their item back in a [`PushError`], consumers drain
//! what is left and then see [`QueueClosed`].

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("queue closed")]
pub struct QueueClosed;

/// Returned by [`BoundedQueue::push`] when the queue is closed; carries the item back.
#[derive(Error, PartialEq, Eq)]
#[error("queue closed")]
pub struct PushError<T>(pub T);

impl<T> fmt::Debug for PushError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PushError(..)")
    }
}

/// Current and peak byte occupancy of some buffer.
#[derive(Debug, Default)]
pub struct ByteGauge {
    current: AtomicU64,
    peak: AtomicU64,
}

impl ByteGauge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.peak.fetch_max(now, Ordering::AcqRel);
    }

    pub fn sub(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::AcqRel);
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::Acquire)
    }
}

struct State<T> {
    items: VecDeque<T>,
    closed: bool,
}

type Weigher<T> = Box<dyn Fn(&T) -> u64 + Send + Sync>;

pub struct BoundedQueue<T> {
    state: Mutex<State<T>>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    weigher: Option<Weigher<T>>,
    bytes: ByteGauge,
    peak_len: AtomicU64,
}

impl<T> fmt::Debug for BoundedQueue<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BoundedQueue")
            .field("capacity", &self.capacity)
            .field("len", &self.len())
            .field("resident_bytes", &self.bytes.current())
            .finish()
    }
}

impl<T> BoundedQueue<T> {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be at least 1");
        Self {
            state: Mutex::new(State {
                items: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
            weigher: None,
            bytes: ByteGauge::new(),
            peak_len: AtomicU64::new(0),
        }
    }

    /// Track resident bytes using `weigher` for each item.
    pub fn with_weigher(capacity: usize, weigher: impl Fn(&T) -> u64 + Send + Sync + 'static) -> Self {
        let mut q = Self::new(capacity);
        q.weigher = Some(Box::new(weigher));
        q
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn weight(&self, item: &T) -> u64 {
        self.weigher.as_ref().map_or(0, |w| w(item))
    }

    /// Enqueue, blocking while the queue is full.
    pub fn push(&self, item: T) -> Result<(), PushError<T>> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return Err(PushError(item));
            }
            if st.items.len() < self.capacity {
                break;
            }
            st = self.not_full.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        self.bytes.add(self.weight(&item));
        st.items.push_back(item);
        self.peak_len.fetch_max(st.items.len() as u64, Ordering::AcqRel);
        drop(st);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Block until there is room for one more item. A sole producer can call this
    /// before it starts building an item, so the item under construction is covered
    /// by the capacity as well.
    pub fn wait_for_room(&self) -> Result<(), QueueClosed> {
        let mut st = self.lock();
        loop {
            if st.closed {
                return Err(QueueClosed);
            }
            if st.items.len() < self.capacity {
                return Ok(());
            }
            st = self.not_full.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Dequeue, blocking while empty. `Err(QueueClosed)` once closed and drained.
    pub fn pop(&self) -> Result<T, QueueClosed> {
        let mut st = self.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.bytes.sub(self.weight(&item));
                drop(st);
                self.not_full.notify_one();
                return Ok(item);
            }
            if st.closed {
                return Err(QueueClosed);
            }
            st = self.not_empty.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Like [`pop`](Self::pop) but gives up after `timeout`, returning `Ok(None)`.
    pub fn pop_timeout(&self, timeout: Duration) -> Result<Option<T>, QueueClosed> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                self.bytes.sub(self.weight(&item));
                drop(st);
                self.not_full.notify_one();
                return Ok(Some(item));
            }
            if st.closed {
                return Err(QueueClosed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            st = self
                .not_empty
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Close the queue. Items already queued can still be popped.
    pub fn close(&self) {
        self.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    /// Close and discard everything still queued.
    pub fn abort(&self) {
        let mut st = self.lock();
        st.closed = true;
        let drained: Vec<T> = st.items.drain(..).collect();
        for item in &drained {
            self.bytes.sub(self.weight(item));
        }
        drop(st);
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Bytes currently queued, per the weigher.
    pub fn resident_bytes(&self) -> u64 {
        self.bytes.current()
    }

    /// Highest resident byte count observed.
    pub fn peak_bytes(&self) -> u64 {
        self.bytes.peak()
    }

    /// Highest item count observed.
    pub fn peak_len(&self) -> usize {
        self.peak_len.load(Ordering::Acquire) as usize
    }
}
