//! Loopback benchmark sweeps: object chunk sizes and stream message sizes.
//!
//! Both sweeps run complete transfers through the real transport on 127.0.0.1 into an
//! in-process broker. The object sweep copies a random file into a topic in raw mode; the
//! stream sweep replicates a preloaded topic into another one.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use serde::Serialize;

use crate::model::{
    fit_object_params, predict_error, predict_object, predict_stream, FitPoint, ObjectFit, ObjectPerfParams,
    StreamPerfParams, WorkloadProfile,
};
use crate::pipeline::{BatchTriggerConfig, TransferOptions};
use crate::stream::{Broker, BrokerConfig, BrokerError, StreamClient};
use crate::transfer::{run_transfer, Endpoints, TransferError, TransferSpec};
use crate::uri::EndpointUri;

const BENCH_BROKER: &str = "bench:0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchProfile {
    Object,
    Stream,
    All,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub profile: BenchProfile,
    /// Holds the generated object corpus.
    pub work_dir: PathBuf,
    pub corpus_bytes: u64,
    pub chunk_sizes: Vec<u64>,
    /// Bytes preloaded per message size in the stream sweep.
    pub stream_bytes: u64,
    pub message_sizes: Vec<u64>,
    pub runs: usize,
    pub parallel: usize,
    pub trigger: BatchTriggerConfig,
    /// B_w used for predictions, bytes/second.
    pub bandwidth: f64,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(profile: BenchProfile, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            profile,
            work_dir: work_dir.into(),
            corpus_bytes: 256_000_000,
            chunk_sizes: [1, 4, 16, 32, 64, 96].iter().map(|m| m * 1_000_000).collect(),
            stream_bytes: 64_000_000,
            message_sizes: [1, 10, 100, 1000].iter().map(|k| k * 1_000).collect(),
            runs: 3,
            parallel: 1,
            trigger: BatchTriggerConfig::default(),
            bandwidth: 1.25e9,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub sweep: &'static str,
    /// Chunk size (object) or message size (stream), bytes.
    pub param_bytes: u64,
    /// Run number from 1, or `mean`.
    pub run: String,
    pub records: u64,
    pub bytes: u64,
    pub wall_seconds: f64,
    pub throughput_bytes_per_sec: f64,
    pub msgs_per_sec: f64,
    pub predicted_bytes_per_sec: Option<f64>,
    pub prediction_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted from the 32 MB and 64 MB means when both were measured.
    pub object_fit: Option<ObjectFit>,
}

impl BenchReport {
    /// Mean throughput of one sweep point.
    pub fn mean(&self, sweep: &str, param_bytes: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sweep == sweep && r.param_bytes == param_bytes && r.run == "mean")
            .map(|r| r.throughput_bytes_per_sec)
    }
}

fn uri(s: &str) -> EndpointUri {
    EndpointUri::parse(s).expect("bench uri")
}

fn write_corpus(path: &Path, bytes: u64, seed: u64) -> std::io::Result<()> {
    use std::io::Write;
    if std::fs::metadata(path).map(|m| m.len() == bytes).unwrap_or(false) {
        return Ok(());
    }
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut block = vec![0u8; 1 << 20];
    let mut left = bytes;
    while left > 0 {
        let n = left.min(block.len() as u64) as usize;
        rng.fill_bytes(&mut block[..n]);
        w.write_all(&block[..n])?;
        left -= n as u64;
    }
    w.flush()
}

fn broker_err(e: BrokerError) -> TransferError {
    TransferError::Config(format!("bench broker: {e}"))
}

fn run_row(sweep: &'static str, param: u64, run: usize, r: &crate::transfer::TransferReport) -> BenchRow {
    BenchRow {
        sweep,
        param_bytes: param,
        run: run.to_string(),
        records: r.records_moved,
        bytes: r.bytes_moved,
        wall_seconds: r.wall_seconds,
        throughput_bytes_per_sec: r.throughput_bytes_per_sec,
        msgs_per_sec: r.msgs_per_sec,
        predicted_bytes_per_sec: None,
        prediction_error: None,
    }
}

fn mean_row(runs: &[BenchRow]) -> BenchRow {
    let n = runs.len() as f64;
    let avg = |f: fn(&BenchRow) -> f64| runs.iter().map(f).sum::<f64>() / n;
    BenchRow {
        sweep: runs[0].sweep,
        param_bytes: runs[0].param_bytes,
        run: "mean".into(),
        records: runs[0].records,
        bytes: runs[0].bytes,
        wall_seconds: avg(|r| r.wall_seconds),
        throughput_bytes_per_sec: avg(|r| r.throughput_bytes_per_sec),
        msgs_per_sec: avg(|r| r.msgs_per_sec),
        predicted_bytes_per_sec: None,
        prediction_error: None,
    }
}

/// Run the configured sweeps. `progress` sees every row as it is produced.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<BenchReport, TransferError> {
    if cfg.runs == 0 {
        return Err(TransferError::Config("--runs must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut object_fit = None;
    if cfg.profile != BenchProfile::Stream {
        object_fit = object_sweep(cfg, &mut rows, &mut progress)?;
    }
    if cfg.profile != BenchProfile::Object {
        stream_sweep(cfg, &mut rows, &mut progress)?;
    }
    Ok(BenchReport { rows, object_fit })
}

fn object_sweep(
    cfg: &BenchConfig,
    rows: &mut Vec<BenchRow>,
    progress: &mut impl FnMut(&BenchRow),
) -> Result<Option<ObjectFit>, TransferError> {
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| TransferError::Config(format!("work dir: {e}")))?;
    let corpus = cfg.work_dir.join(format!("corpus-{}.bin", cfg.corpus_bytes));
    write_corpus(&corpus, cfg.corpus_bytes, cfg.seed).map_err(|e| TransferError::Config(format!("corpus: {e}")))?;
    let max_chunk = cfg.chunk_sizes.iter().copied().max().unwrap_or(0);
    let broker = Arc::new(
        Broker::with_config(BrokerConfig {
            max_message_bytes: (max_chunk as usize).max(crate::stream::DEFAULT_MAX_MESSAGE_BYTES) + 64,
            ..Default::default()
        })
        .map_err(broker_err)?,
    );
    let env = Endpoints::new().with_stream(BENCH_BROKER, broker.clone());

    let mut means = Vec::new();
    for &chunk in &cfg.chunk_sizes {
        let mut runs = Vec::new();
        for run in 1..=cfg.runs {
            broker.create_topic("objects", 1).map_err(broker_err)?;
            let opts = TransferOptions {
                chunk_bytes: chunk,
                parallel: cfg.parallel,
                trigger: cfg.trigger,
                ..Default::default()
            };
            let spec = TransferSpec::new(
                uri(&format!("file://{}", corpus.display())),
                uri(&format!("stream://{BENCH_BROKER}/objects")),
                opts,
            );
            let report = run_transfer(&spec, &env);
            broker.delete_topic("objects").map_err(broker_err)?;
            let row = run_row("object", chunk, run, &report?);
            progress(&row);
            runs.push(row);
        }
        let m = mean_row(&runs);
        means.push(m.clone());
        rows.extend(runs);
        rows.push(m);
    }

    // Fit from the 32 MB and 64 MB points, per worker.
    let p = cfg.parallel as f64;
    let points: Vec<FitPoint> = means
        .iter()
        .filter(|m| m.param_bytes == 32_000_000 || m.param_bytes == 64_000_000)
        .map(|m| FitPoint {
            chunk_bytes: m.param_bytes as f64,
            throughput: m.throughput_bytes_per_sec / p,
        })
        .collect();
    let fit = fit_object_params(&points).ok();
    for m in rows.iter_mut().filter(|r| r.sweep == "object" && r.run == "mean") {
        if let Some(f) = fit {
            let pred = predict_object(&ObjectPerfParams {
                bandwidth_bw: cfg.bandwidth,
                api_overhead_tapi: f.api_overhead_tapi,
                per_byte_cost_tau: f.per_byte_cost_tau,
                chunk_bytes_sc: m.param_bytes as f64,
                parallel_workers_p: p,
            });
            if let Ok(pred) = pred {
                m.predicted_bytes_per_sec = Some(pred.throughput);
                m.prediction_error = predict_error(pred.throughput, m.throughput_bytes_per_sec).ok();
            }
        }
        progress(m);
    }
    Ok(fit)
}

fn stream_sweep(
    cfg: &BenchConfig,
    rows: &mut Vec<BenchRow>,
    progress: &mut impl FnMut(&BenchRow),
) -> Result<(), TransferError> {
    let max_msg = cfg.message_sizes.iter().copied().max().unwrap_or(0) as usize;
    let src = Arc::new(
        Broker::with_config(BrokerConfig {
            max_message_bytes: max_msg.max(crate::stream::DEFAULT_MAX_MESSAGE_BYTES),
            ..Default::default()
        })
        .map_err(broker_err)?,
    );
    let dst = Arc::new(
        Broker::with_config(BrokerConfig {
            max_message_bytes: max_msg.max(crate::stream::DEFAULT_MAX_MESSAGE_BYTES),
            ..Default::default()
        })
        .map_err(broker_err)?,
    );
    let env = Endpoints::new()
        .with_stream("bench-src:0", src.clone())
        .with_stream("bench-dst:0", dst.clone());
    let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);

    for &size in &cfg.message_sizes {
        let count = (cfg.stream_bytes / size.max(1)).max(1);
        let topic = format!("msgs-{size}");
        src.create_topic(&topic, 1).map_err(broker_err)?;
        let mut value = vec![0u8; size as usize];
        let per_request = ((1u64 << 20) / size.max(1)).max(1) as usize;
        let mut left = count as usize;
        while left > 0 {
            let n = left.min(per_request);
            let values: Vec<Vec<u8>> = (0..n)
                .map(|_| {
                    rng.fill_bytes(&mut value);
                    value.clone()
                })
                .collect();
            let recs: Vec<(Option<&[u8]>, &[u8])> = values.iter().map(|v| (None, v.as_slice())).collect();
            src.produce_batch(&topic, 0, &recs).map_err(broker_err)?;
            left -= n;
        }

        let mut runs = Vec::new();
        for run in 1..=cfg.runs {
            dst.create_topic("replica", 1).map_err(broker_err)?;
            let opts = TransferOptions {
                parallel: cfg.parallel,
                trigger: cfg.trigger,
                ..Default::default()
            };
            let mut spec = TransferSpec::new(
                uri(&format!("stream://bench-src:0/{topic}")),
                uri("stream://bench-dst:0/replica"),
                opts,
            );
            spec.group = Some(format!("bench-{size}-{run}"));
            let report = run_transfer(&spec, &env);
            dst.delete_topic("replica").map_err(broker_err)?;
            let row = run_row("stream", size, run, &report?);
            progress(&row);
            runs.push(row);
        }
        src.delete_topic(&topic).map_err(broker_err)?;

        // The replay has no producer rate of its own, so λ is the observed message rate.
        let mut m = mean_row(&runs);
        let params = StreamPerfParams {
            bandwidth_bw: cfg.bandwidth,
            batch_bytes_sb: cfg.trigger.size_threshold().unwrap_or(u64::MAX) as f64,
            max_batch_time_tmax: cfg.trigger.time_limit().map_or(f64::INFINITY, |d| d.as_secs_f64()),
            max_batch_count_cmax: cfg.trigger.count_limit().unwrap_or(u64::MAX) as f64,
        };
        let workload = WorkloadProfile {
            arrival_rate_lambda: m.msgs_per_sec,
            message_size_ms: size as f64,
        };
        if let Ok(pred) = predict_stream(&params, &workload) {
            m.predicted_bytes_per_sec = Some(pred.throughput);
            m.prediction_error = predict_error(pred.throughput, m.throughput_bytes_per_sec).ok();
        }
        progress(&m);
        rows.extend(runs);
        rows.push(m);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sweeps_produce_rows_and_a_fit() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = BenchConfig::new(BenchProfile::All, dir.path());
        cfg.corpus_bytes = 200_000_000 / 100;
        cfg.chunk_sizes = vec![250_000, 320_000, 640_000];
        cfg.stream_bytes = 200_000;
        cfg.message_sizes = vec![1_000, 100_000];
        cfg.runs = 2;
        let mut seen = 0;
        let report = run_bench(&cfg, |_| seen += 1).unwrap();
        // 3 runs-worth of rows + mean per point
        assert_eq!(report.rows.len(), 5 * 3);
        assert!(seen >= report.rows.len());
        for r in &report.rows {
            assert!(r.throughput_bytes_per_sec.is_finite() && r.throughput_bytes_per_sec > 0.0);
        }
        assert!(report.mean("stream", 1_000).is_some());
        assert_eq!(
            report
                .rows
                .iter()
                .find(|r| r.sweep == "object" && r.run == "1")
                .unwrap()
                .bytes,
            2_000_000 + 8 * 8
        );
    }
}
