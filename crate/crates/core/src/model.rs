//! Analytical throughput models for stream replication and bulk object transfer.
//!
//! Stream replication is a two-stage pipeline (batch accumulation overlapped with network
//! transmission), so its throughput is one batch divided by the slower stage:
//!
//! ```text
//! T_batch    = min(S_b / (λ·M_s), C_max / λ, T_max)
//! T_transmit = S_b / B_w
//! Θ_stream   = S_b / max(T_batch, T_transmit)
//! ```
//!
//! Bulk transfer charges each chunk a fixed API overhead plus a per-byte cost, and `P`
//! workers share one bandwidth ceiling:
//!
//! ```text
//! T_chunk  = T_api + τ·S_c
//! Θ_object = min(B_w, P·S_c / T_chunk)
//! ```
//!
//! Everything here is in bytes and seconds. `MB` is 10^6 bytes.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` = {value} is outside its domain ({requirement})")]
    Domain {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },
    #[error("fit needs at least two distinct chunk sizes, got {0}")]
    TooFewPoints(usize),
}

fn positive(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ModelError::Domain {
            name,
            value,
            requirement: "finite and > 0",
        })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::Domain {
            name,
            value,
            requirement: "finite and >= 0",
        })
    }
}

fn at_least_one(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() && value >= 1.0 {
        Ok(())
    } else {
        Err(ModelError::Domain {
            name,
            value,
            requirement: "finite and >= 1",
        })
    }
}

/// System constants of the stream replication model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamPerfParams {
    /// Effective bandwidth B_w, bytes/second.
    pub bandwidth_bw: f64,
    /// Batch size trigger S_b, bytes.
    pub batch_bytes_sb: f64,
    /// Time trigger T_max, seconds.
    pub max_batch_time_tmax: f64,
    /// Count trigger C_max, messages.
    pub max_batch_count_cmax: f64,
}

impl StreamPerfParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("bandwidth_bw", self.bandwidth_bw)?;
        at_least_one("batch_bytes_sb", self.batch_bytes_sb)?;
        positive("max_batch_time_tmax", self.max_batch_time_tmax)?;
        positive("max_batch_count_cmax", self.max_batch_count_cmax)
    }
}

/// Workload description: message arrival rate λ and message size M_s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadProfile {
    /// Messages per second.
    pub arrival_rate_lambda: f64,
    /// Bytes per message.
    pub message_size_ms: f64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("arrival_rate_lambda", self.arrival_rate_lambda)?;
        at_least_one("message_size_ms", self.message_size_ms)
    }
}

/// System constants of the bulk object transfer model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectPerfParams {
    /// Effective bandwidth B_w, bytes/second.
    pub bandwidth_bw: f64,
    /// Fixed per-request overhead T_api, seconds.
    pub api_overhead_tapi: f64,
    /// Per-byte processing cost τ, seconds/byte.
    pub per_byte_cost_tau: f64,
    /// Chunk size S_c, bytes.
    pub chunk_bytes_sc: f64,
    /// Parallel workers P.
    pub parallel_workers_p: f64,
}

impl ObjectPerfParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive("bandwidth_bw", self.bandwidth_bw)?;
        non_negative("api_overhead_tapi", self.api_overhead_tapi)?;
        non_negative("per_byte_cost_tau", self.per_byte_cost_tau)?;
        at_least_one("chunk_bytes_sc", self.chunk_bytes_sc)?;
        at_least_one("parallel_workers_p", self.parallel_workers_p)?;
        if self.api_overhead_tapi == 0.0 && self.per_byte_cost_tau == 0.0 {
            return Err(ModelError::Domain {
                name: "api_overhead_tapi + per_byte_cost_tau",
                value: 0.0,
                requirement: "chunk time must be > 0",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StreamLimit {
    SourceLimited,
    NetworkLimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ObjectLimit {
    BandwidthLimited,
    ProcessingLimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StreamPrediction {
    pub t_batch: f64,
    pub t_transmit: f64,
    /// Bytes/second.
    pub throughput: f64,
    pub limiting_stage: StreamLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectPrediction {
    pub t_chunk: f64,
    /// Bytes/second.
    pub throughput: f64,
    pub limiting_stage: ObjectLimit,
}

/// Stream replication throughput. Ties between the two stages count as network-limited.
pub fn predict_stream(params: &StreamPerfParams, workload: &WorkloadProfile) -> Result<StreamPrediction, ModelError> {
    params.validate()?;
    workload.validate()?;
    let lambda = workload.arrival_rate_lambda;
    let by_size = params.batch_bytes_sb / (lambda * workload.message_size_ms);
    let by_count = params.max_batch_count_cmax / lambda;
    let t_batch = by_size.min(by_count).min(params.max_batch_time_tmax);
    let t_transmit = params.batch_bytes_sb / params.bandwidth_bw;
    let throughput = params.batch_bytes_sb / t_batch.max(t_transmit);
    let limiting_stage = if t_transmit >= t_batch {
        StreamLimit::NetworkLimited
    } else {
        StreamLimit::SourceLimited
    };
    Ok(StreamPrediction {
        t_batch,
        t_transmit,
        throughput,
        limiting_stage,
    })
}

/// Time to process one chunk of `chunk_bytes` under the linear cost model.
pub fn chunk_time(api_overhead: f64, per_byte_cost: f64, chunk_bytes: f64) -> f64 {
    api_overhead + per_byte_cost * chunk_bytes
}

/// Bulk object throughput. Ties count as bandwidth-limited.
pub fn predict_object(params: &ObjectPerfParams) -> Result<ObjectPrediction, ModelError> {
    params.validate()?;
    let t_chunk = chunk_time(
        params.api_overhead_tapi,
        params.per_byte_cost_tau,
        params.chunk_bytes_sc,
    );
    let processing = params.parallel_workers_p * params.chunk_bytes_sc / t_chunk;
    let (throughput, limiting_stage) = if params.bandwidth_bw <= processing {
        (params.bandwidth_bw, ObjectLimit::BandwidthLimited)
    } else {
        (processing, ObjectLimit::ProcessingLimited)
    };
    Ok(ObjectPrediction {
        t_chunk,
        throughput,
        limiting_stage,
    })
}

/// One measurement for [`fit_object_params`]: a chunk size and the single-worker
/// throughput observed at that size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitPoint {
    pub chunk_bytes: f64,
    pub throughput: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectFit {
    /// Seconds.
    pub api_overhead_tapi: f64,
    /// Seconds per byte.
    pub per_byte_cost_tau: f64,
    /// Set when the fitted intercept came out negative. The value is reported unclamped.
    pub negative_intercept: bool,
    pub points_used: usize,
}

/// Fit `T_api` and `τ` from processing-limited throughput measurements.
///
/// Each point becomes `t_chunk = S_c / Θ`, and `t_chunk = T_api + τ·S_c` is fitted by
/// ordinary least squares. Two points give the exact line through them.
pub fn fit_object_params(points: &[FitPoint]) -> Result<ObjectFit, ModelError> {
    for p in points {
        positive("throughput", p.throughput)?;
        at_least_one("chunk_bytes", p.chunk_bytes)?;
    }
    let mut sizes: Vec<f64> = points.iter().map(|p| p.chunk_bytes).collect();
    sizes.sort_by(f64::total_cmp);
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(ModelError::TooFewPoints(sizes.len()));
    }

    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.chunk_bytes).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.chunk_bytes / p.throughput).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    if intercept < 0.0 {
        log::warn!("fitted API overhead is negative ({intercept} s); the points are probably not processing-limited");
    }
    Ok(ObjectFit {
        api_overhead_tapi: intercept,
        per_byte_cost_tau: slope,
        negative_intercept: intercept < 0.0,
        points_used: points.len(),
    })
}

/// Relative prediction error `|predicted - measured| / measured`.
pub fn predict_error(predicted: f64, measured: f64) -> Result<f64, ModelError> {
    positive("measured", measured)?;
    if !predicted.is_finite() {
        return Err(ModelError::Domain {
            name: "predicted",
            value: predicted,
            requirement: "finite",
        });
    }
    Ok((predicted - measured).abs() / measured)
}
