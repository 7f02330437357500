//! Byte-size parsing and formatting.
//!
//! All sizes are plain bytes internally. Decimal suffixes (`K`, `M`, `G`) are powers of
//! 10, binary suffixes (`Ki`, `Mi`, `Gi`) are powers of 2. A trailing `B` is accepted and
//! ignored, so `32MB`, `32M` and `32000000` are the same value.

use thiserror::Error;

/// One megabyte, 10^6 bytes.
pub const MB: f64 = 1e6;

/// One kilobyte, 10^3 bytes.
pub const KB: f64 = 1e3;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid size {0:?}: expected an integer with optional K/M/G or Ki/Mi/Gi suffix")]
pub struct SizeParseError(pub String);

fn split_suffix(text: &str) -> Result<(&str, u64), SizeParseError> {
    let err = || SizeParseError(text.to_string());
    let t = text.trim();
    let t = t.strip_suffix(['B', 'b']).unwrap_or(t);
    let split = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
    let (num, suffix) = t.split_at(split);
    if num.is_empty() {
        return Err(err());
    }
    let mult: u64 = match suffix {
        "" => 1,
        "K" | "k" => 1_000,
        "M" | "m" => 1_000_000,
        "G" | "g" => 1_000_000_000,
        "Ki" | "ki" => 1 << 10,
        "Mi" | "mi" => 1 << 20,
        "Gi" | "gi" => 1 << 30,
        _ => return Err(err()),
    };
    Ok((num, mult))
}

/// Parse a size such as `32M`, `7Mi`, `1000` or `1.5G` into bytes.
pub fn parse_size(text: &str) -> Result<u64, SizeParseError> {
    let err = || SizeParseError(text.to_string());
    let (num, mult) = split_suffix(text)?;
    if num.contains('.') {
        let bytes = parse_quantity(text)?;
        if bytes > u64::MAX as f64 {
            return Err(err());
        }
        Ok(bytes.round() as u64)
    } else {
        let v: u64 = num.parse().map_err(|_| err())?;
        v.checked_mul(mult).ok_or_else(err)
    }
}

/// Parse a rate or size that may be fractional, e.g. `100M`, `0.5K` or `16000`.
pub fn parse_quantity(text: &str) -> Result<f64, SizeParseError> {
    let (num, mult) = split_suffix(text)?;
    let v: f64 = num.parse().map_err(|_| SizeParseError(text.to_string()))?;
    let q = v * mult as f64;
    if q.is_finite() {
        Ok(q)
    } else {
        Err(SizeParseError(text.to_string()))
    }
}

/// Format bytes/second as decimal megabytes per second.
pub fn mb_per_sec(bytes_per_sec: f64) -> String {
    format!("{:.3} MB/s", bytes_per_sec / MB)
}
