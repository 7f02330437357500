//! Embedded partitioned append-only log.
//!
//! Topics have a fixed number of partitions; each partition is a dense log with offsets
//! `0..end`. Consumer groups commit the next offset to read per partition.
//!
//! With a data directory, each partition is persisted as `<dir>/<topic>/<p>.log`, one
//! record after another as `key_len u32 (0xFFFFFFFF = null) | key | value_len u32 |
//! value` (big-endian), and commits live in `<dir>/commits.json`, rewritten atomically.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{BrokerError, StoredRecord, StreamClient};

/// Default cap on a single message value.
pub const DEFAULT_MAX_MESSAGE_BYTES: usize = 8 * 1024 * 1024;

const NULL_KEY: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub data_dir: Option<PathBuf>,
    pub max_message_bytes: usize,
    /// fsync partition files after every produce.
    pub fsync: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            max_message_bytes: DEFAULT_MAX_MESSAGE_BYTES,
            fsync: false,
        }
    }
}

#[derive(Debug)]
struct PartitionLog {
    records: Vec<LogEntry>,
    file: Option<BufWriter<File>>,
}

#[derive(Debug)]
struct Topic {
    partitions: Vec<Mutex<PartitionLog>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Commits {
    /// group -> topic -> partition -> next offset
    groups: BTreeMap<String, BTreeMap<String, BTreeMap<u32, u64>>>,
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    commits: Mutex<Commits>,
}

#[derive(Serialize, Deserialize)]
struct TopicMeta {
    partitions: u32,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn valid_topic_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 249
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

impl Broker {
    /// An in-memory broker.
    pub fn new() -> Self {
        Self::with_config(BrokerConfig::default()).expect("in-memory broker")
    }

    /// Open a broker, loading any topics and commits persisted under `data_dir`.
    pub fn with_config(config: BrokerConfig) -> Result<Self, BrokerError> {
        let broker = Self {
            topics: RwLock::new(HashMap::new()),
            commits: Mutex::new(Commits::default()),
            config,
        };
        if let Some(dir) = broker.config.data_dir.clone() {
            fs::create_dir_all(&dir)?;
            broker.load(&dir)?;
        }
        Ok(broker)
    }

    pub fn max_message_bytes(&self) -> usize {
        self.config.max_message_bytes
    }

    fn load(&self, dir: &Path) -> Result<(), BrokerError> {
        let commits_path = dir.join("commits.json");
        if commits_path.exists() {
            let text = fs::read_to_string(&commits_path)?;
            *lock(&self.commits) = serde_json::from_str(&text)
                .map_err(|e| BrokerError::Corrupt(format!("{}: {e}", commits_path.display())))?;
        }
        let mut topics = self.topics.write().unwrap_or_else(|e| e.into_inner());
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let meta_path = entry.path().join("meta.json");
            if !meta_path.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let meta: TopicMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
                .map_err(|e| BrokerError::Corrupt(format!("{}: {e}", meta_path.display())))?;
            let mut partitions = Vec::with_capacity(meta.partitions as usize);
            for p in 0..meta.partitions {
                let path = entry.path().join(format!("{p}.log"));
                let records = read_log(&path)?;
                let file = OpenOptions::new().create(true).append(true).open(&path)?;
                partitions.push(Mutex::new(PartitionLog {
                    records,
                    file: Some(BufWriter::new(file)),
                }));
            }
            topics.insert(name, Arc::new(Topic { partitions }));
        }
        Ok(())
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BrokerError> {
        self.topics
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    fn partition<'a>(
        topic_name: &str,
        topic: &'a Topic,
        partition: u32,
    ) -> Result<&'a Mutex<PartitionLog>, BrokerError> {
        topic
            .partitions
            .get(partition as usize)
            .ok_or(BrokerError::PartitionOutOfRange {
                topic: topic_name.to_string(),
                partition,
                partitions: topic.partitions.len() as u32,
            })
    }

    /// Total bytes of keys and values stored in `topic`.
    pub fn topic_bytes(&self, topic: &str) -> Result<u64, BrokerError> {
        let t = self.topic(topic)?;
        Ok(t.partitions
            .iter()
            .map(|p| {
                lock(p)
                    .records
                    .iter()
                    .map(|(k, v)| (k.as_ref().map_or(0, Vec::len) + v.len()) as u64)
                    .sum::<u64>()
            })
            .sum())
    }

    /// Every record of one partition, in offset order.
    pub fn read_all(&self, topic: &str, partition: u32) -> Result<Vec<StoredRecord>, BrokerError> {
        let t = self.topic(topic)?;
        let log = lock(Self::partition(topic, &t, partition)?);
        Ok(log
            .records
            .iter()
            .enumerate()
            .map(|(i, (k, v))| StoredRecord {
                offset: i as u64,
                key: k.clone(),
                value: v.clone(),
            })
            .collect())
    }

    pub fn delete_topic(&self, topic: &str) -> Result<(), BrokerError> {
        let removed = self.topics.write().unwrap_or_else(|e| e.into_inner()).remove(topic);
        if removed.is_none() {
            return Err(BrokerError::UnknownTopic(topic.to_string()));
        }
        if let Some(dir) = &self.config.data_dir {
            let _ = fs::remove_dir_all(dir.join(topic));
        }
        Ok(())
    }

    fn persist_commits(&self, commits: &Commits) -> Result<(), BrokerError> {
        let Some(dir) = &self.config.data_dir else {
            return Ok(());
        };
        let tmp = dir.join("commits.json.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(commits).expect("serializable"))?;
            f.sync_data()?;
        }
        fs::rename(&tmp, dir.join("commits.json"))?;
        Ok(())
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

fn read_u32(buf: &[u8], pos: usize) -> Option<u32> {
    buf.get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Load a partition file. A torn record at the tail (crash mid-append) is cut off.
type LogEntry = (Option<Vec<u8>>, Vec<u8>);

fn read_log(path: &Path) -> Result<Vec<LogEntry>, BrokerError> {
    let mut buf = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut buf)?;
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    }
    let mut out = Vec::new();
    let mut pos = 0usize;
    let complete = loop {
        let Some(klen) = read_u32(&buf, pos) else { break pos };
        let mut p = pos + 4;
        let key = if klen == NULL_KEY {
            None
        } else {
            let Some(k) = buf.get(p..p + klen as usize) else {
                break pos;
            };
            p += klen as usize;
            Some(k.to_vec())
        };
        let Some(vlen) = read_u32(&buf, p) else { break pos };
        p += 4;
        let Some(v) = buf.get(p..p + vlen as usize) else {
            break pos;
        };
        out.push((key, v.to_vec()));
        pos = p + vlen as usize;
    };
    if complete != buf.len() {
        log::warn!(
            "{}: dropping {} bytes of torn tail",
            path.display(),
            buf.len() - complete
        );
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    Ok(out)
}

fn append_record(w: &mut impl Write, key: Option<&[u8]>, value: &[u8]) -> io::Result<()> {
    match key {
        Some(k) => {
            w.write_all(&(k.len() as u32).to_be_bytes())?;
            w.write_all(k)?;
        }
        None => w.write_all(&NULL_KEY.to_be_bytes())?,
    }
    w.write_all(&(value.len() as u32).to_be_bytes())?;
    w.write_all(value)
}

impl StreamClient for Broker {
    fn create_topic(&self, topic: &str, partitions: u32) -> Result<(), BrokerError> {
        if !valid_topic_name(topic) {
            return Err(BrokerError::InvalidRequest(format!("invalid topic name {topic:?}")));
        }
        if partitions == 0 {
            return Err(BrokerError::InvalidRequest(
                "a topic needs at least one partition".into(),
            ));
        }
        let mut topics = self.topics.write().unwrap_or_else(|e| e.into_inner());
        if let Some(t) = topics.get(topic) {
            return Err(BrokerError::TopicExists {
                topic: topic.to_string(),
                partitions: t.partitions.len() as u32,
            });
        }
        let mut logs = Vec::with_capacity(partitions as usize);
        if let Some(dir) = &self.config.data_dir {
            let tdir = dir.join(topic);
            fs::create_dir_all(&tdir)?;
            for p in 0..partitions {
                let f = OpenOptions::new()
                    .create(true)
                    .truncate(true)
                    .write(true)
                    .open(tdir.join(format!("{p}.log")))?;
                logs.push(Mutex::new(PartitionLog {
                    records: Vec::new(),
                    file: Some(BufWriter::new(f)),
                }));
            }
            fs::write(
                tdir.join("meta.json"),
                serde_json::to_vec(&TopicMeta { partitions }).expect("serializable"),
            )?;
        } else {
            for _ in 0..partitions {
                logs.push(Mutex::new(PartitionLog {
                    records: Vec::new(),
                    file: None,
                }));
            }
        }
        topics.insert(topic.to_string(), Arc::new(Topic { partitions: logs }));
        Ok(())
    }

    fn partitions(&self, topic: &str) -> Result<u32, BrokerError> {
        Ok(self.topic(topic)?.partitions.len() as u32)
    }

    fn end_offsets(&self, topic: &str) -> Result<Vec<u64>, BrokerError> {
        Ok(self
            .topic(topic)?
            .partitions
            .iter()
            .map(|p| lock(p).records.len() as u64)
            .collect())
    }

    fn produce_batch(
        &self,
        topic: &str,
        partition: u32,
        records: &[(Option<&[u8]>, &[u8])],
    ) -> Result<u64, BrokerError> {
        let t = self.topic(topic)?;
        let slot = Self::partition(topic, &t, partition)?;
        if let Some((_, v)) = records.iter().find(|(_, v)| v.len() > self.config.max_message_bytes) {
            return Err(BrokerError::MessageTooLarge {
                size: v.len(),
                max: self.config.max_message_bytes,
            });
        }
        let mut log = lock(slot);
        let base = log.records.len() as u64;
        if let Some(f) = log.file.as_mut() {
            for (k, v) in records {
                append_record(f, *k, v)?;
            }
            f.flush()?;
            if self.config.fsync {
                f.get_ref().sync_data()?;
            }
        }
        log.records
            .extend(records.iter().map(|(k, v)| (k.map(<[u8]>::to_vec), v.to_vec())));
        Ok(base)
    }

    fn fetch(
        &self,
        topic: &str,
        partition: u32,
        from_offset: u64,
        max_bytes: usize,
    ) -> Result<Vec<StoredRecord>, BrokerError> {
        let t = self.topic(topic)?;
        let log = lock(Self::partition(topic, &t, partition)?);
        let end = log.records.len() as u64;
        if from_offset > end {
            return Err(BrokerError::OffsetOutOfRange {
                requested: from_offset,
                end,
            });
        }
        let mut out = Vec::new();
        let mut bytes = 0usize;
        for (i, (k, v)) in log.records[from_offset as usize..].iter().enumerate() {
            if !out.is_empty() && bytes + v.len() > max_bytes {
                break;
            }
            bytes += v.len();
            out.push(StoredRecord {
                offset: from_offset + i as u64,
                key: k.clone(),
                value: v.clone(),
            });
        }
        Ok(out)
    }

    fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<(), BrokerError> {
        let t = self.topic(topic)?;
        let end = lock(Self::partition(topic, &t, partition)?).records.len() as u64;
        if offset > end {
            return Err(BrokerError::OffsetOutOfRange { requested: offset, end });
        }
        let mut commits = lock(&self.commits);
        commits
            .groups
            .entry(group.to_string())
            .or_default()
            .entry(topic.to_string())
            .or_default()
            .insert(partition, offset);
        self.persist_commits(&commits)
    }

    fn committed(&self, group: &str, topic: &str) -> Result<Vec<Option<u64>>, BrokerError> {
        let n = self.partitions(topic)?;
        let commits = lock(&self.commits);
        let per = commits.groups.get(group).and_then(|g| g.get(topic));
        Ok((0..n).map(|p| per.and_then(|m| m.get(&p).copied())).collect())
    }
}
