//! `predict` and `fit`.
//!
//! Values are printed with Rust's shortest round-trip float formatting so they can be
//! compared exactly by scripts.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use skyhost_core::model::{
    fit_object_params, predict_object, predict_stream, FitPoint, ObjectLimit, ObjectPerfParams, StreamLimit,
    StreamPerfParams, WorkloadProfile,
};
use skyhost_core::units::{parse_quantity, MB};

use crate::errors::usage;

#[derive(Subcommand)]
pub enum PredictCmd {
    /// Stream replication throughput.
    Stream(StreamArgs),
    /// Bulk object transfer throughput.
    Object(ObjectArgs),
}

#[derive(Args)]
pub struct StreamArgs {
    /// Effective bandwidth B_w, bytes/second (e.g. 100M).
    #[arg(long)]
    bandwidth: String,
    /// Size trigger S_b.
    #[arg(long, default_value = "32M")]
    batch_bytes: String,
    /// Time trigger T_max, milliseconds.
    #[arg(long, default_value = "10000")]
    batch_max_ms: String,
    /// Count trigger C_max.
    #[arg(long, default_value = "100000")]
    batch_max_count: String,
    /// Message arrival rate lambda, messages/second.
    #[arg(long)]
    arrival_rate: String,
    /// Message size M_s.
    #[arg(long)]
    message_bytes: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct ObjectArgs {
    /// Effective bandwidth B_w, bytes/second.
    #[arg(long)]
    bandwidth: String,
    /// Per-request overhead T_api, milliseconds.
    #[arg(long)]
    t_api_ms: f64,
    /// Per-byte cost tau, milliseconds per MB.
    #[arg(long)]
    tau_ms_per_mb: f64,
    /// Chunk size S_c.
    #[arg(long)]
    chunk_bytes: String,
    /// Parallel workers P.
    #[arg(long, default_value_t = 1)]
    parallel: u32,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
pub struct FitArgs {
    /// CSV with header `chunk_bytes,throughput_bytes_per_sec`.
    file: PathBuf,
    #[arg(long)]
    json: bool,
}

fn q(text: &str) -> Result<f64> {
    parse_quantity(text).map_err(usage)
}

pub fn predict(cmd: PredictCmd) -> Result<()> {
    match cmd {
        PredictCmd::Stream(a) => {
            let params = StreamPerfParams {
                bandwidth_bw: q(&a.bandwidth)?,
                batch_bytes_sb: q(&a.batch_bytes)?,
                max_batch_time_tmax: q(&a.batch_max_ms)? / 1e3,
                max_batch_count_cmax: q(&a.batch_max_count)?,
            };
            let workload = WorkloadProfile {
                arrival_rate_lambda: q(&a.arrival_rate)?,
                message_size_ms: q(&a.message_bytes)?,
            };
            let p = predict_stream(&params, &workload)?;
            if a.json {
                let v = serde_json::json!({
                    "params": params,
                    "workload": workload,
                    "t_batch_s": p.t_batch,
                    "t_transmit_s": p.t_transmit,
                    "throughput_bytes_per_sec": p.throughput,
                    "throughput_mb_per_sec": p.throughput / MB,
                    "limiting_stage": p.limiting_stage,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("T_batch = {} s", p.t_batch);
                println!("T_transmit = {} s", p.t_transmit);
                println!("throughput = {} MB/s ({} bytes/s)", p.throughput / MB, p.throughput);
                let stage = match p.limiting_stage {
                    StreamLimit::SourceLimited => "source (batch accumulation)",
                    StreamLimit::NetworkLimited => "network (transmission)",
                };
                println!("limiting stage = {stage}");
            }
        }
        PredictCmd::Object(a) => {
            let params = ObjectPerfParams {
                bandwidth_bw: q(&a.bandwidth)?,
                api_overhead_tapi: a.t_api_ms / 1e3,
                per_byte_cost_tau: a.tau_ms_per_mb / 1e3 / MB,
                chunk_bytes_sc: q(&a.chunk_bytes)?,
                parallel_workers_p: f64::from(a.parallel),
            };
            let p = predict_object(&params)?;
            if a.json {
                let v = serde_json::json!({
                    "params": params,
                    "t_chunk_s": p.t_chunk,
                    "throughput_bytes_per_sec": p.throughput,
                    "throughput_mb_per_sec": p.throughput / MB,
                    "limiting_stage": p.limiting_stage,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("T_chunk = {} s", p.t_chunk);
                println!("throughput = {} MB/s ({} bytes/s)", p.throughput / MB, p.throughput);
                let stage = match p.limiting_stage {
                    ObjectLimit::BandwidthLimited => "bandwidth",
                    ObjectLimit::ProcessingLimited => "processing",
                };
                println!("limiting stage = {stage}");
            }
        }
    }
    Ok(())
}

fn read_points(path: &PathBuf) -> Result<Vec<FitPoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| usage(format!("{}: missing column {name:?}", path.display())))
    };
    let (ci, ti) = (col("chunk_bytes")?, col("throughput_bytes_per_sec")?);
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |idx: usize| -> Result<f64> {
            let field = rec.get(idx).unwrap_or("");
            parse_quantity(field).map_err(|_| usage(format!("{}: row {}: bad number {field:?}", path.display(), i + 2)))
        };
        points.push(FitPoint {
            chunk_bytes: num(ci)?,
            throughput: num(ti)?,
        });
    }
    Ok(points)
}

pub fn fit(a: FitArgs) -> Result<()> {
    let points = read_points(&a.file).map_err(|e| usage(format!("{e:#}")))?;
    let f = fit_object_params(&points)?;
    let t_api_ms = f.api_overhead_tapi * 1e3;
    let tau_ms_per_mb = f.per_byte_cost_tau * 1e3 * MB;
    if a.json {
        let v = serde_json::json!({
            "t_api_ms": t_api_ms,
            "tau_ms_per_mb": tau_ms_per_mb,
            "t_api_s": f.api_overhead_tapi,
            "tau_s_per_byte": f.per_byte_cost_tau,
            "negative_intercept": f.negative_intercept,
            "points_used": f.points_used,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("T_api = {t_api_ms} ms");
        println!("tau = {tau_ms_per_mb} ms/MB");
        println!("points = {}", f.points_used);
        if f.negative_intercept {
            println!("warning: negative T_api; the points are probably not processing-limited");
        }
    }
    Ok(())
}
