use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver as ChanReceiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{BrokerError, StoredRecord, StreamClient};
use crate::pipeline::{
    poll_interval, BatchIds, Batcher, BoundedQueue, CauseCounts, Offer, OperatorError, PipelinePlan, Record,
    RecordBatch,
};
use crate::retry::Backoff;

#[derive(Debug, Clone)]
pub enum StopCondition {
    /// Stop once every partition reaches the end offset observed at start.
    EndOffsetsAtStart,
    /// Stop after this long.
    Duration(Duration),
    /// Run until the stop flag is raised.
    Flag,
}

#[derive(Debug, Clone)]
pub struct StreamSourceConfig {
    pub topic: String,
    pub group: String,
    pub stop: StopCondition,
    /// Graceful stop: flush open batches, wait for their acks, commit.
    pub stop_flag: Arc<AtomicBool>,
    pub fetch_max_bytes: usize,
    pub retry_deadline: Duration,
}

impl StreamSourceConfig {
    pub fn new(topic: impl Into<String>, group: impl Into<String>, stop: StopCondition) -> Self {
        Self {
            topic: topic.into(),
            group: group.into(),
            stop,
            stop_flag: Arc::new(AtomicBool::new(false)),
            fetch_max_bytes: 1 << 20,
            retry_deadline: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StreamSourceStats {
    pub records: u64,
    pub bytes: u64,
    pub batches: u64,
    pub causes: CauseCounts,
    pub start_offsets: Vec<u64>,
    /// Next offset committed per partition at exit.
    pub committed: Vec<Option<u64>>,
    pub commits: u64,
    pub fetch_retries: u64,
    /// Batches emitted but never acknowledged (their records will be re-read).
    pub unacknowledged_batches: u64,
    pub wall_secs: f64,
}

/// Commit bookkeeping: a partition's offset advances only past batches that are
/// acknowledged and preceded, in that partition, by acknowledged batches.
#[derive(Debug, Default)]
struct CommitTracker {
    pending: Vec<VecDeque<(u64, u64)>>,
    /// Partition queues each in-flight batch still appears in.
    refs: HashMap<u64, usize>,
    acked: HashMap<u64, bool>,
}

impl CommitTracker {
    fn new(partitions: usize) -> Self {
        Self {
            pending: vec![VecDeque::new(); partitions],
            ..Default::default()
        }
    }

    fn emitted(&mut self, batch: &RecordBatch) {
        let maxes = batch.max_offsets();
        self.refs.insert(batch.batch_id, maxes.len());
        self.acked.insert(batch.batch_id, false);
        for (p, o) in maxes {
            self.pending[p as usize].push_back((batch.batch_id, o));
        }
    }

    fn ack(&mut self, batch_id: u64) {
        if let Some(a) = self.acked.get_mut(&batch_id) {
            *a = true;
        }
    }

    fn outstanding(&self) -> usize {
        self.acked.values().filter(|a| !**a).count()
    }

    /// New next-offsets that may be committed.
    fn advance(&mut self) -> Vec<(u32, u64)> {
        let mut out = Vec::new();
        for (p, q) in self.pending.iter_mut().enumerate() {
            let mut next = None;
            while let Some(&(id, off)) = q.front() {
                if !self.acked.get(&id).copied().unwrap_or(false) {
                    break;
                }
                q.pop_front();
                next = Some(off + 1);
                let r = self.refs.get_mut(&id).expect("tracked batch");
                *r -= 1;
                if *r == 0 {
                    self.refs.remove(&id);
                    self.acked.remove(&id);
                }
            }
            if let Some(n) = next {
                out.push((p as u32, n));
            }
        }
        out
    }
}

struct Run<'a> {
    client: &'a dyn StreamClient,
    cfg: &'a StreamSourceConfig,
    out: &'a BoundedQueue<RecordBatch>,
    acks: &'a ChanReceiver<u64>,
    tracker: CommitTracker,
    stats: StreamSourceStats,
    acks_closed: bool,
}

impl Run<'_> {
    fn retry<T>(&mut self, mut f: impl FnMut() -> Result<T, BrokerError>) -> Result<T, BrokerError> {
        let mut backoff = Backoff::new(self.cfg.retry_deadline);
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => {
                    log::warn!("source broker call failed: {e}; retrying");
                    self.stats.fetch_retries += 1;
                    if !backoff.wait() {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn emit(&mut self, batch: RecordBatch) -> Result<(), OperatorError> {
        self.tracker.emitted(&batch);
        self.stats.batches += 1;
        self.stats.causes.record(batch.cause);
        self.out.push(batch).map_err(|_| OperatorError::Aborted)
    }

    fn apply_ack(&mut self, id: u64) -> Result<(), BrokerError> {
        self.tracker.ack(id);
        for (p, next) in self.tracker.advance() {
            let (client, cfg) = (self.client, self.cfg);
            self.retry(|| client.commit(&cfg.group, &cfg.topic, p, next))?;
            self.stats.committed[p as usize] = Some(next);
            self.stats.commits += 1;
        }
        Ok(())
    }

    fn drain_acks(&mut self) -> Result<(), BrokerError> {
        loop {
            match self.acks.try_recv() {
                Ok(id) => self.apply_ack(id)?,
                Err(std::sync::mpsc::TryRecvError::Empty) => return Ok(()),
                Err(std::sync::mpsc::TryRecvError::Disconnected) => {
                    self.acks_closed = true;
                    return Ok(());
                }
            }
        }
    }
}

/// Consume `cfg.topic` as group `cfg.group`, resuming at its committed offsets, and
/// push triggered batches to `out`. Offsets are committed only after the batch holding
/// them is acknowledged on `acks`. `out` is closed on a graceful stop.
pub fn stream_source_run(
    client: &dyn StreamClient,
    plan: &PipelinePlan,
    cfg: &StreamSourceConfig,
    out: &BoundedQueue<RecordBatch>,
    acks: &ChanReceiver<u64>,
) -> Result<StreamSourceStats, OperatorError> {
    let start = Instant::now();
    let mut run = Run {
        client,
        cfg,
        out,
        acks,
        tracker: CommitTracker::default(),
        stats: StreamSourceStats::default(),
        acks_closed: false,
    };
    let result = drive(&mut run, plan, start);
    run.stats.wall_secs = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => Ok(run.stats),
        Err(e) => {
            out.abort();
            Err(e)
        }
    }
}

fn drive(run: &mut Run<'_>, plan: &PipelinePlan, start: Instant) -> Result<(), OperatorError> {
    let (client, cfg) = (run.client, run.cfg);
    let n = run.retry(|| client.partitions(&cfg.topic))? as usize;
    let committed = run.retry(|| client.committed(&cfg.group, &cfg.topic))?;
    let mut positions: Vec<u64> = committed.iter().map(|c| c.unwrap_or(0)).collect();
    run.stats.start_offsets = positions.clone();
    run.stats.committed = committed;
    run.tracker = CommitTracker::new(n);
    let targets = match cfg.stop {
        StopCondition::EndOffsetsAtStart => Some(run.retry(|| client.end_offsets(&cfg.topic))?),
        _ => None,
    };

    let ids = BatchIds::new();
    let mut batchers: Vec<Batcher> = if plan.preserve_partitions {
        (0..n as u32)
            .map(|p| Batcher::with_ids(plan.trigger, ids.clone()).for_partition(p))
            .collect()
    } else {
        vec![Batcher::with_ids(plan.trigger, ids.clone())]
    };
    let poll = poll_interval(&plan.trigger);

    loop {
        run.drain_acks()?;
        let done = match (&cfg.stop, &targets) {
            (_, Some(t)) => positions.iter().zip(t).all(|(p, t)| p >= t),
            (StopCondition::Duration(d), _) => start.elapsed() >= *d,
            _ => false,
        };
        if done || cfg.stop_flag.load(Ordering::SeqCst) {
            break;
        }

        let mut fetched = 0usize;
        for p in 0..n {
            let limit = targets.as_ref().map(|t| t[p]);
            if limit.is_some_and(|l| positions[p] >= l) {
                continue;
            }
            let from = positions[p];
            let mut recs: Vec<StoredRecord> =
                run.retry(|| client.fetch(&cfg.topic, p as u32, from, cfg.fetch_max_bytes))?;
            if let Some(l) = limit {
                recs.retain(|r| r.offset < l);
            }
            fetched += recs.len();
            for r in recs {
                positions[p] = r.offset + 1;
                run.stats.records += 1;
                run.stats.bytes += (r.key.as_ref().map_or(0, Vec::len) + r.value.len()) as u64;
                let record = Record::new(p as u32, r.offset, r.key, r.value);
                let b = if batchers.len() == 1 { 0 } else { p };
                if let Offer::Emit(batch) = batchers[b].offer(record, Instant::now()) {
                    run.emit(batch)?;
                }
            }
        }
        let now = Instant::now();
        for b in &mut batchers {
            if let Some(batch) = b.poll_time(now) {
                run.emit(batch)?;
            }
        }
        if fetched == 0 {
            thread::sleep(poll);
        }
    }

    for b in &mut batchers {
        if let Some(batch) = b.flush() {
            run.emit(batch)?;
        }
    }
    run.out.close();

    while run.tracker.outstanding() > 0 && !run.acks_closed {
        match run.acks.recv_timeout(Duration::from_millis(100)) {
            Ok(id) => run.apply_ack(id)?,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => run.acks_closed = true,
        }
    }
    run.stats.unacknowledged_batches = run.tracker.outstanding() as u64;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::mpsc;
    use std::sync::Mutex;

    use proptest::prelude::*;

    use super::*;
    use crate::pipeline::{batch_queue, build_plan, BatchTriggerConfig, TransferOptions};
    use crate::stream::Broker;
    use crate::uri::EndpointUri;

    fn plan(preserve: bool, count: u64) -> PipelinePlan {
        let opts = TransferOptions {
            trigger: BatchTriggerConfig::new(None, Some(Duration::from_millis(50)), Some(count)).unwrap(),
            preserve_partitions: preserve,
            ..Default::default()
        };
        build_plan(
            &EndpointUri::parse("stream://h:1/src").unwrap(),
            &EndpointUri::parse("stream://h:1/dst").unwrap(),
            &opts,
        )
        .unwrap()
    }

    fn seeded(partitions: u32, per: u64) -> Arc<Broker> {
        let b = Arc::new(Broker::new());
        b.create_topic("src", partitions).unwrap();
        for p in 0..partitions {
            for i in 0..per {
                b.produce("src", p, None, format!("{p}-{i}").as_bytes()).unwrap();
            }
        }
        b
    }

    #[test]
    fn commit_tracker_needs_contiguous_acks() {
        let mut t = CommitTracker::new(2);
        let b0 = RecordBatch::new(
            0,
            vec![Record::new(0, 0, None, vec![]), Record::new(1, 0, None, vec![])],
            None,
        );
        let b1 = RecordBatch::new(1, vec![Record::new(0, 1, None, vec![])], None);
        t.emitted(&b0);
        t.emitted(&b1);
        t.ack(1);
        assert!(t.advance().is_empty());
        t.ack(0);
        assert_eq!(t.advance(), vec![(0, 2), (1, 1)]);
        assert_eq!(t.outstanding(), 0);
        assert!(t.refs.is_empty());
    }

    #[test]
    fn reads_to_end_and_commits_after_acks() {
        let b = seeded(3, 10);
        let q = Arc::new(batch_queue(64));
        let (tx, rx) = mpsc::channel();
        let cfg = StreamSourceConfig::new("src", "g", StopCondition::EndOffsetsAtStart);
        let plan = plan(true, 4);
        let q2 = q.clone();
        let consumer = thread::spawn(move || {
            let mut n = 0;
            while let Ok(batch) = q2.pop() {
                // every record in a preserved batch shares the hint
                assert!(batch.records.iter().all(|r| Some(r.partition) == batch.partition_hint));
                n += batch.len();
                tx.send(batch.batch_id).unwrap();
            }
            n
        });
        let stats = stream_source_run(b.as_ref(), &plan, &cfg, &q, &rx).unwrap();
        assert_eq!(consumer.join().unwrap(), 30);
        assert_eq!(stats.records, 30);
        assert_eq!(stats.unacknowledged_batches, 0);
        assert_eq!(b.committed("g", "src").unwrap(), vec![Some(10); 3]);
        assert_eq!(stats.causes.count, 6);
        assert_eq!(stats.causes.flush, 3);
    }

    #[test]
    fn no_commit_without_ack_and_resume_rereads() {
        let b = seeded(1, 5);
        let q = batch_queue(64);
        let (tx, rx) = mpsc::channel::<u64>();
        drop(tx);
        let cfg = StreamSourceConfig::new("src", "g", StopCondition::EndOffsetsAtStart);
        let stats = stream_source_run(b.as_ref(), &plan(false, 2), &cfg, &q, &rx).unwrap();
        assert_eq!(stats.unacknowledged_batches, 3);
        assert_eq!(b.committed("g", "src").unwrap(), vec![None]);

        b.commit("g", "src", 0, 3).unwrap();
        let q = batch_queue(64);
        let (tx, rx) = mpsc::channel::<u64>();
        let cfg = StreamSourceConfig::new("src", "g", StopCondition::EndOffsetsAtStart);
        let b2 = b.clone();
        let worker = thread::spawn(move || stream_source_run(b2.as_ref(), &plan(false, 2), &cfg, &q, &rx));
        thread::sleep(Duration::from_millis(200));
        drop(tx);
        let stats = worker.join().unwrap().unwrap();
        assert_eq!(stats.start_offsets, vec![3]);
        assert_eq!(stats.records, 2);
    }

    #[test]
    fn duration_stop_flushes_partial_batch() {
        let b = seeded(1, 3);
        let q = batch_queue(64);
        let (tx, rx) = mpsc::channel();
        let cfg = StreamSourceConfig::new("src", "g", StopCondition::Duration(Duration::from_millis(30)));
        let opts = plan(false, 1000);
        let stats = thread::scope(|s| {
            s.spawn(|| {
                while let Ok(batch) = q.pop() {
                    tx.send(batch.batch_id).unwrap();
                }
            });
            stream_source_run(b.as_ref(), &opts, &cfg, &q, &rx).unwrap()
        });
        assert_eq!(stats.records, 3);
        assert_eq!(stats.batches, 1);
        assert_eq!(b.committed("g", "src").unwrap(), vec![Some(3)]);
    }

    /// Records every commit together with the acknowledged batches at that moment.
    struct Audited {
        inner: Arc<Broker>,
        acked_max: Arc<Mutex<HashMap<u32, u64>>>,
        violations: Mutex<u32>,
    }

    impl StreamClient for Audited {
        fn create_topic(&self, t: &str, p: u32) -> Result<(), BrokerError> {
            self.inner.create_topic(t, p)
        }
        fn partitions(&self, t: &str) -> Result<u32, BrokerError> {
            self.inner.partitions(t)
        }
        fn end_offsets(&self, t: &str) -> Result<Vec<u64>, BrokerError> {
            self.inner.end_offsets(t)
        }
        fn produce_batch(&self, t: &str, p: u32, r: &[(Option<&[u8]>, &[u8])]) -> Result<u64, BrokerError> {
            self.inner.produce_batch(t, p, r)
        }
        fn fetch(&self, t: &str, p: u32, f: u64, m: usize) -> Result<Vec<StoredRecord>, BrokerError> {
            self.inner.fetch(t, p, f, m)
        }
        fn commit(&self, g: &str, t: &str, p: u32, o: u64) -> Result<(), BrokerError> {
            let highest = self.acked_max.lock().unwrap().get(&p).copied();
            if highest.is_none_or(|h| o > h + 1) {
                *self.violations.lock().unwrap() += 1;
            }
            self.inner.commit(g, t, p, o)
        }
        fn committed(&self, g: &str, t: &str) -> Result<Vec<Option<u64>>, BrokerError> {
            self.inner.committed(g, t)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn commits_never_pass_acknowledged_offsets(
            per in 1u64..60, parts in 1u32..4, count in 1u64..9, preserve: bool, seed: u64,
        ) {
            let inner = seeded(parts, per);
            let acked_max = Arc::new(Mutex::new(HashMap::new()));
            let client = Audited { inner: inner.clone(), acked_max: acked_max.clone(), violations: Mutex::new(0) };
            let q = Arc::new(batch_queue(8));
            let (tx, rx) = mpsc::channel();
            let cfg = StreamSourceConfig::new("src", "g", StopCondition::EndOffsetsAtStart);
            let q2 = q.clone();
            // acknowledge batches out of order
            let consumer = thread::spawn(move || {
                use rand::{Rng, SeedableRng};
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
                let mut held = Vec::new();
                let ack = |b: RecordBatch| {
                    let mut m = acked_max.lock().unwrap();
                    for (p, o) in b.max_offsets() {
                        let e = m.entry(p).or_insert(0);
                        *e = (*e).max(o);
                    }
                    tx.send(b.batch_id).unwrap();
                };
                while let Ok(b) = q2.pop() {
                    held.push(b);
                    if rng.random_bool(0.5) {
                        let i = rng.random_range(0..held.len());
                        ack(held.swap_remove(i));
                    }
                }
                for b in held {
                    ack(b);
                }
            });
            let stats = stream_source_run(&client, &plan(preserve, count), &cfg, &q, &rx).unwrap();
            consumer.join().unwrap();
            prop_assert_eq!(*client.violations.lock().unwrap(), 0);
            prop_assert_eq!(stats.records, per * parts as u64);
            prop_assert_eq!(inner.committed("g", "src").unwrap(), vec![Some(per); parts as usize]);
        }
    }
}
