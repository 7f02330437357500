//! `skyhost`: copy data between object stores and stream topics.

mod broker_cmd;
mod errors;
mod model_cmd;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use skyhost_core::bench::{run_bench, BenchConfig, BenchProfile};
use skyhost_core::pipeline::{BatchTriggerConfig, DataFormat, TransferOptions, DEFAULT_QUEUE_CAPACITY};
use skyhost_core::stream::StopCondition;
use skyhost_core::transfer::{run_receive, run_transfer, Endpoints, ReceiveSpec, TransferSpec};
use skyhost_core::units::{parse_quantity, parse_size};
use skyhost_core::uri::EndpointUri;

use errors::{usage, Failure};

#[derive(Parser)]
#[command(
    name = "skyhost",
    version,
    about = "Move data between object stores and partitioned streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Copy SRC to DST (file://, s3://, stream:// or kafka:// URIs).
    Cp(CpArgs),
    /// Run a destination gateway that accepts one transfer from `cp --remote-receiver`.
    Receive(ReceiveArgs),
    /// Evaluate the throughput models.
    Predict {
        #[command(subcommand)]
        which: model_cmd::PredictCmd,
    },
    /// Fit T_api and tau from a CSV of `chunk_bytes,throughput_bytes_per_sec`.
    Fit(model_cmd::FitArgs),
    /// Loopback benchmark sweeps, printed as CSV.
    Bench(BenchArgs),
    /// Local stream broker and helpers.
    Broker {
        #[command(subcommand)]
        cmd: broker_cmd::BrokerCmd,
    },
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Csv,
    Ndjson,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Raw => DataFormat::Raw,
            Format::Csv => DataFormat::Csv,
            Format::Ndjson => DataFormat::Ndjson,
        }
    }
}

#[derive(Args)]
struct CpArgs {
    src: String,
    dst: String,
    /// Size trigger S_b; 0 disables it.
    #[arg(long, default_value = "32M")]
    batch_bytes: String,
    /// Time trigger T_max in milliseconds; 0 disables it.
    #[arg(long, default_value_t = 10_000)]
    batch_max_ms: u64,
    /// Count trigger C_max; 0 disables it.
    #[arg(long, default_value_t = 100_000)]
    batch_max_count: u64,
    /// Chunk size S_c for raw object transfers.
    #[arg(long, default_value = "16M")]
    chunk_bytes: String,
    /// Parallel range readers and TCP connections.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, value_enum, default_value = "raw")]
    format: Format,
    /// Skip the first line of CSV objects.
    #[arg(long)]
    csv_header: bool,
    /// Compress batch payloads on the wire.
    #[arg(long)]
    compress: bool,
    /// Keep each record in its source partition (stream sources).
    #[arg(long)]
    preserve_partitions: bool,
    /// Emit raw chunks in chunk order.
    #[arg(long)]
    ordered: bool,
    /// Batches per inter-operator queue.
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    /// Port of the in-process destination gateway; 0 picks a free port.
    #[arg(long, default_value_t = 7331)]
    transport_port: u16,
    /// Send to a `skyhost receive` process at HOST:PORT instead.
    #[arg(long, value_name = "HOST:PORT")]
    remote_receiver: Option<String>,
    /// Stage received batches on disk before they are written.
    #[arg(long)]
    stage_dir: Option<PathBuf>,
    /// Stream sources: stop after this many seconds.
    #[arg(long, conflicts_with = "until_end_offset")]
    duration: Option<f64>,
    /// Stream sources: stop at the end offsets seen at start.
    #[arg(long)]
    until_end_offset: bool,
    /// Consumer group for stream sources.
    #[arg(long)]
    group: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    report: ReportFormat,
}

#[derive(Args)]
struct ReceiveArgs {
    #[arg(long, default_value = "0.0.0.0:7331")]
    listen: String,
    #[arg(long)]
    dst: String,
    #[arg(long, value_enum, default_value = "raw")]
    format: Format,
    #[arg(long)]
    preserve_partitions: bool,
    #[arg(long)]
    stage_dir: Option<PathBuf>,
    /// Connections to wait for; 0 takes the count announced by the sender.
    #[arg(long, default_value_t = 0)]
    connections: usize,
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    /// Write to the destination at no more than this many bytes/second (e.g. 1M).
    #[arg(long)]
    max_write_rate: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    report: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Object,
    Stream,
    All,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum, default_value = "all")]
    profile: Profile,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Size of the generated object corpus.
    #[arg(long, default_value = "256M")]
    corpus_bytes: String,
    /// Bytes replicated per message size in the stream sweep.
    #[arg(long, default_value = "64M")]
    stream_bytes: String,
    /// Comma-separated chunk sizes.
    #[arg(long, default_value = "1M,4M,16M,32M,64M,96M")]
    chunk_sizes: String,
    /// Comma-separated message sizes.
    #[arg(long, default_value = "1K,10K,100K,1000K")]
    message_sizes: String,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// B_w for the model predictions, bytes/second.
    #[arg(long, default_value = "1250M")]
    bandwidth: String,
    /// Where the corpus is written; a temporary directory by default.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn trigger(bytes: &str, ms: u64, count: u64) -> Result<BatchTriggerConfig> {
    let b = parse_size(bytes).map_err(usage)?;
    BatchTriggerConfig::new(
        (b > 0).then_some(b),
        (ms > 0).then(|| Duration::from_millis(ms)),
        (count > 0).then_some(count),
    )
    .map_err(usage)
}

fn uri(text: &str) -> Result<EndpointUri> {
    Ok(EndpointUri::parse(text)?)
}

fn cmd_cp(a: CpArgs) -> Result<()> {
    let opts = TransferOptions {
        format: a.format.into(),
        trigger: trigger(&a.batch_bytes, a.batch_max_ms, a.batch_max_count)?,
        chunk_bytes: parse_size(&a.chunk_bytes).map_err(usage)?,
        parallel: a.parallel,
        compression: a.compress,
        preserve_partitions: a.preserve_partitions,
        csv_header: a.csv_header,
        ordered: a.ordered,
        queue_capacity: a.queue_capacity,
    };
    let mut spec = TransferSpec::new(uri(&a.src)?, uri(&a.dst)?, opts);
    spec.transport_port = a.transport_port;
    spec.remote_receiver = a.remote_receiver;
    spec.stage_dir = a.stage_dir;
    spec.group = a.group;
    spec.stop = match (a.duration, a.until_end_offset) {
        (Some(s), _) if s.is_finite() && s >= 0.0 => StopCondition::Duration(Duration::from_secs_f64(s)),
        (Some(s), _) => return Err(usage(format!("--duration {s} must be a non-negative number"))),
        (None, true) => StopCondition::EndOffsetsAtStart,
        (None, false) => StopCondition::Flag,
    };
    if spec.source.is_stream() && matches!(spec.stop, StopCondition::Flag) {
        log::info!("replicating until interrupted; pass --duration or --until-end-offset to stop on its own");
    }
    let flag = spec.stop_flag.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;

    let report = run_transfer(&spec, &Endpoints::new())?;
    match a.report {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Text => print!("{}", report.to_text()),
    }
    Ok(())
}

fn cmd_receive(a: ReceiveArgs) -> Result<()> {
    let listen = a
        .listen
        .parse()
        .map_err(|e| usage(format!("--listen {}: {e}", a.listen)))?;
    let spec = ReceiveSpec {
        listen,
        destination: uri(&a.dst)?,
        format: a.format.into(),
        preserve_partitions: a.preserve_partitions,
        stage_dir: a.stage_dir,
        expected_connections: a.connections,
        queue_capacity: a.queue_capacity,
        max_write_rate: a
            .max_write_rate
            .as_deref()
            .map(|r| parse_quantity(r).map_err(usage))
            .transpose()?,
    };
    let report = run_receive(&spec, &Endpoints::new(), |addr| {
        // scripts wait for this line before starting the sender
        eprintln!("listening on {addr}");
    })?;
    match a.report {
        ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        ReportFormat::Text => println!(
            "{} batches, {} records, {} bytes written to {}",
            report.sink.batches, report.sink.records, report.sink.bytes, report.destination
        ),
    }
    Ok(())
}

fn size_list(text: &str) -> Result<Vec<u64>> {
    text.split(',').map(|s| parse_size(s.trim()).map_err(usage)).collect()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let tmp;
    let work_dir = match a.work_dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir().context("creating bench work dir")?;
            tmp.path().to_path_buf()
        }
    };
    let profile = match a.profile {
        Profile::Object => BenchProfile::Object,
        Profile::Stream => BenchProfile::Stream,
        Profile::All => BenchProfile::All,
    };
    let mut cfg = BenchConfig::new(profile, work_dir);
    cfg.runs = a.runs;
    cfg.corpus_bytes = parse_size(&a.corpus_bytes).map_err(usage)?;
    cfg.stream_bytes = parse_size(&a.stream_bytes).map_err(usage)?;
    cfg.chunk_sizes = size_list(&a.chunk_sizes)?;
    cfg.message_sizes = size_list(&a.message_sizes)?;
    cfg.parallel = a.parallel;
    cfg.bandwidth = parse_quantity(&a.bandwidth).map_err(usage)?;

    let mut out = csv::Writer::from_writer(std::io::stdout());
    let mut write_err = None;
    let report = run_bench(&cfg, |row| {
        if row.run != "mean" {
            eprintln!(
                "{} {} run {}: {}",
                row.sweep,
                row.param_bytes,
                row.run,
                skyhost_core::units::mb_per_sec(row.throughput_bytes_per_sec)
            );
        }
    })?;
    for row in &report.rows {
        if let Err(e) = out.serialize(row) {
            write_err.get_or_insert(e);
        }
    }
    out.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(fit) = report.object_fit {
        eprintln!(
            "object fit from 32/64 MB: T_api = {} ms, tau = {} ms/MB{}",
            fit.api_overhead_tapi * 1e3,
            fit.per_byte_cost_tau * 1e9,
            if fit.negative_intercept {
                " (negative intercept)"
            } else {
                ""
            }
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = matches!(&cli.command, Command::Cp(a) if a.report == ReportFormat::Json);
    let result = match cli.command {
        Command::Cp(a) => cmd_cp(a),
        Command::Receive(a) => cmd_receive(a),
        Command::Predict { which } => model_cmd::predict(which),
        Command::Fit(a) => model_cmd::fit(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Broker { cmd } => broker_cmd::run(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = Failure::from(&e);
            f.print(json);
            ExitCode::from(f.category.exit_code() as u8)
        }
    }
}
