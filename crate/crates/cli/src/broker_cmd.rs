//! `broker serve`, `broker topic create`, `broker produce`, `broker consume`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use skyhost_core::stream::{connect, Broker, BrokerConfig, BrokerServer, StreamClient, DEFAULT_MAX_MESSAGE_BYTES};
use skyhost_core::units::parse_size;
use skyhost_core::uri::EndpointUri;

use crate::errors::usage;

#[derive(Subcommand)]
pub enum BrokerCmd {
    /// Run a broker in the foreground.
    Serve(ServeArgs),
    Topic {
        #[command(subcommand)]
        cmd: TopicCmd,
    },
    /// Append records read from a file or stdin.
    Produce(ProduceArgs),
    /// Print every record up to the end offsets seen at start.
    Consume(ConsumeArgs),
}

#[derive(Subcommand)]
pub enum TopicCmd {
    Create {
        uri: String,
        #[arg(long)]
        partitions: u32,
        /// Succeed if the topic already exists with this partition count.
        #[arg(long)]
        if_absent: bool,
    },
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 9092)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// Persist topics and commits here; in-memory without it.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    max_message_bytes: Option<String>,
    /// fsync partition files after every produce.
    #[arg(long)]
    fsync: bool,
}

#[derive(Args)]
pub struct ProduceArgs {
    uri: String,
    /// Target partition; records are spread round-robin without it.
    #[arg(long)]
    partition: Option<u32>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    key: Option<String>,
    /// Send the whole input as one record instead of one record per line.
    #[arg(long)]
    whole: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConsumeFormat {
    /// Each value followed by a newline, partition by partition.
    Lines,
    /// Values concatenated, partition by partition.
    Raw,
    /// Values ordered by their 8-byte offset key (raw chunk transfers).
    Reassemble,
    /// One JSON object per record.
    Json,
}

#[derive(Args)]
pub struct ConsumeArgs {
    uri: String,
    #[arg(long)]
    partition: Option<u32>,
    #[arg(long, value_enum, default_value = "lines")]
    format: ConsumeFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn stream_uri(text: &str) -> Result<(EndpointUri, Arc<dyn StreamClient>)> {
    let uri = EndpointUri::parse(text)?;
    if !uri.is_stream() {
        return Err(usage(format!("{text} is not a stream:// URI")));
    }
    let client = connect(&uri)?;
    Ok((uri, client))
}

pub fn run(cmd: BrokerCmd) -> Result<()> {
    match cmd {
        BrokerCmd::Serve(a) => serve(a),
        BrokerCmd::Topic {
            cmd:
                TopicCmd::Create {
                    uri,
                    partitions,
                    if_absent,
                },
        } => {
            let (uri, client) = stream_uri(&uri)?;
            let topic = uri.topic().unwrap_or_default();
            if if_absent {
                client.create_topic_if_absent(topic, partitions)?;
            } else {
                client.create_topic(topic, partitions)?;
            }
            eprintln!("topic {topic} has {partitions} partitions");
            Ok(())
        }
        BrokerCmd::Produce(a) => produce(a),
        BrokerCmd::Consume(a) => consume(a),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let max = match &a.max_message_bytes {
        Some(s) => parse_size(s).map_err(usage)? as usize,
        None => DEFAULT_MAX_MESSAGE_BYTES,
    };
    let broker = Broker::with_config(BrokerConfig {
        data_dir: a.data_dir,
        max_message_bytes: max,
        fsync: a.fsync,
    })?;
    let server = BrokerServer::bind(&format!("{}:{}", a.bind, a.port), Arc::new(broker))?;
    eprintln!("broker listening on {}", server.local_addr());
    server.serve()?;
    Ok(())
}

fn produce(a: ProduceArgs) -> Result<()> {
    let (uri, client) = stream_uri(&a.uri)?;
    let topic = uri.topic().unwrap_or_default();
    let partitions = client.partitions(topic)?;
    let mut input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(BufReader::new(
            File::open(p)
                .with_context(|| format!("opening {}", p.display()))
                .map_err(|e| usage(format!("{e:#}")))?,
        )),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let key = a.key.as_deref().map(str::as_bytes);
    if a.whole {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let off = client.produce(topic, a.partition.unwrap_or(0), key, &buf)?;
        eprintln!("produced 1 record at offset {off}");
        return Ok(());
    }
    let mut n = 0u64;
    let mut line = Vec::new();
    loop {
        line.clear();
        if input.read_until(b'\n', &mut line)? == 0 {
            break;
        }
        let v = line.strip_suffix(b"\n").unwrap_or(&line);
        let v = v.strip_suffix(b"\r").unwrap_or(v);
        let p = a.partition.unwrap_or((n % u64::from(partitions)) as u32);
        client.produce(topic, p, key, v)?;
        n += 1;
    }
    eprintln!("produced {n} records");
    Ok(())
}

fn consume(a: ConsumeArgs) -> Result<()> {
    let (uri, client) = stream_uri(&a.uri)?;
    let topic = uri.topic().unwrap_or_default();
    let ends = client.end_offsets(topic)?;
    let parts: Vec<u32> = match a.partition {
        Some(p) => vec![p],
        None => (0..ends.len() as u32).collect(),
    };
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut chunks = Vec::new();
    for p in parts {
        let end = *ends
            .get(p as usize)
            .ok_or_else(|| usage(format!("partition {p} out of range (topic has {})", ends.len())))?;
        let mut next = 0u64;
        while next < end {
            let recs = client.fetch(topic, p, next, 1 << 20)?;
            if recs.is_empty() {
                break;
            }
            for r in recs.into_iter().take_while(|r| r.offset < end) {
                next = r.offset + 1;
                match a.format {
                    ConsumeFormat::Lines => {
                        out.write_all(&r.value)?;
                        out.write_all(b"\n")?;
                    }
                    ConsumeFormat::Raw => out.write_all(&r.value)?,
                    ConsumeFormat::Reassemble => {
                        let key: [u8; 8] = r
                            .key
                            .as_deref()
                            .and_then(|k| k.try_into().ok())
                            .ok_or_else(|| usage(format!("record {p}/{} has no 8-byte offset key", r.offset)))?;
                        chunks.push((u64::from_be_bytes(key), r.value));
                    }
                    ConsumeFormat::Json => {
                        let mut v = serde_json::json!({
                            "partition": p,
                            "offset": r.offset,
                            "key": r.key.as_deref().map(hex::encode),
                        });
                        match std::str::from_utf8(&r.value) {
                            Ok(s) => v["value"] = s.into(),
                            Err(_) => v["value_hex"] = hex::encode(&r.value).into(),
                        }
                        writeln!(out, "{v}")?;
                    }
                }
            }
        }
    }
    if !chunks.is_empty() {
        chunks.sort_by_key(|c| c.0);
        // redelivered chunks carry the same offset
        chunks.dedup_by_key(|c| c.0);
        let mut expect = 0u64;
        for (off, v) in &chunks {
            if *off != expect {
                anyhow::bail!("chunks do not tile the object: expected offset {expect}, found {off}");
            }
            out.write_all(v)?;
            expect += v.len() as u64;
        }
    }
    out.flush()?;
    Ok(())
}
