//! BATCH payload encoding and the optional DEFLATE compression layer.
//!
//! Decompressed payload layout, repeated `record_count` times:
//! `offset u64 | key_len u32 (0xFFFFFFFF = null) | key | value_len u32 | value`, all
//! big-endian.

use std::io::{Read, Write};
use std::time::Instant;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

use super::frame::{Frame, MsgType, FLAG_COMPRESSED};
use crate::pipeline::{Record, RecordBatch};

const NULL_KEY: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("batch of {0} bytes does not fit a frame")]
    TooLarge(u64),
    #[error("expected a BATCH frame, got {0:?}")]
    NotABatch(MsgType),
}

/// DEFLATE-compress `bytes`.
pub fn compress(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::with_capacity(bytes.len() / 2), Compression::fast());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

/// Inflate `bytes`, requiring exactly `expected_len` bytes of output.
pub fn decompress(bytes: &[u8], expected_len: usize) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(expected_len);
    DeflateDecoder::new(bytes)
        .take(expected_len as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| CodecError::CorruptPayload(format!("inflate: {e}")))?;
    if out.len() != expected_len {
        return Err(CodecError::CorruptPayload(format!(
            "inflated to {} bytes, header says {expected_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Encoded size of a record inside a batch payload.
pub fn record_wire_len(r: &Record) -> usize {
    8 + 4 + r.key.as_ref().map_or(0, Vec::len) + 4 + r.value.len()
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let len: usize = records.iter().map(record_wire_len).sum();
    let mut out = Vec::with_capacity(len);
    for r in records {
        put_record(&mut out, r);
    }
    out
}

/// Like [`encode_records`] but frees each record once it is copied, so the batch and
/// its payload are never both fully resident.
fn encode_records_owned(records: Vec<Record>) -> Vec<u8> {
    let len: usize = records.iter().map(record_wire_len).sum();
    let mut out = Vec::with_capacity(len);
    for r in records {
        put_record(&mut out, &r);
    }
    out
}

fn put_record(out: &mut Vec<u8>, r: &Record) {
    out.extend_from_slice(&r.offset.to_be_bytes());
    match &r.key {
        Some(k) => {
            out.extend_from_slice(&(k.len() as u32).to_be_bytes());
            out.extend_from_slice(k);
        }
        None => out.extend_from_slice(&NULL_KEY.to_be_bytes()),
    }
    out.extend_from_slice(&(r.value.len() as u32).to_be_bytes());
    out.extend_from_slice(&r.value);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CodecError::CorruptPayload(format!("record runs past end of payload at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode exactly `count` records occupying all of `payload`. Every record gets
/// `partition`.
pub fn decode_records(payload: &[u8], count: u32, partition: u32) -> Result<Vec<Record>, CodecError> {
    let mut cur = Cursor { buf: payload, pos: 0 };
    // each record is at least 16 bytes; do not trust `count` for the allocation
    let mut out = Vec::with_capacity((count as usize).min(payload.len() / 16));
    for _ in 0..count {
        let offset = cur.u64()?;
        let key = match cur.u32()? {
            NULL_KEY => None,
            n => Some(cur.take(n as usize)?.to_vec()),
        };
        let vlen = cur.u32()? as usize;
        let value = cur.take(vlen)?.to_vec();
        out.push(Record::new(partition, offset, key, value));
    }
    if cur.pos != payload.len() {
        return Err(CodecError::CorruptPayload(format!(
            "{} bytes left after {count} records",
            payload.len() - cur.pos
        )));
    }
    Ok(out)
}

/// Frame a batch. With `compress_payload`, the compressed form is sent only when it is
/// smaller.
pub fn batch_to_frame(batch: &RecordBatch, compress_payload: bool) -> Result<Frame, CodecError> {
    let header = BatchHeader::of(batch);
    header.frame(encode_records(&batch.records), compress_payload)
}

/// [`batch_to_frame`] for a batch that is no longer needed.
pub fn batch_into_frame(batch: RecordBatch, compress_payload: bool) -> Result<Frame, CodecError> {
    let header = BatchHeader::of(&batch);
    header.frame(encode_records_owned(batch.records), compress_payload)
}

struct BatchHeader {
    batch_id: u64,
    partition: i32,
    record_count: usize,
}

impl BatchHeader {
    fn of(batch: &RecordBatch) -> Self {
        Self {
            batch_id: batch.batch_id,
            partition: batch.partition_hint.map_or(-1, |p| p as i32),
            record_count: batch.records.len(),
        }
    }

    fn frame(self, raw: Vec<u8>, compress_payload: bool) -> Result<Frame, CodecError> {
        if raw.len() > u32::MAX as usize || self.record_count > u32::MAX as usize {
            return Err(CodecError::TooLarge(raw.len() as u64));
        }
        let uncompressed_len = raw.len() as u32;
        let (flags, payload) = if compress_payload {
            let c = compress(&raw);
            if c.len() < raw.len() {
                (FLAG_COMPRESSED, c)
            } else {
                (0, raw)
            }
        } else {
            (0, raw)
        };
        Ok(Frame {
            msg_type: MsgType::Batch,
            flags,
            batch_id: self.batch_id,
            partition: self.partition,
            record_count: self.record_count as u32,
            uncompressed_len,
            payload,
        })
    }
}

/// Rebuild a batch from a BATCH frame. `created_at` is set to now.
pub fn frame_to_batch(frame: &Frame) -> Result<RecordBatch, CodecError> {
    if frame.msg_type != MsgType::Batch {
        return Err(CodecError::NotABatch(frame.msg_type));
    }
    let inflated;
    let payload = if frame.is_compressed() {
        inflated = decompress(&frame.payload, frame.uncompressed_len as usize)?;
        &inflated[..]
    } else {
        &frame.payload[..]
    };
    let hint = (frame.partition >= 0).then_some(frame.partition as u32);
    let records = decode_records(payload, frame.record_count, hint.unwrap_or(0))?;
    let mut batch = RecordBatch::new(frame.batch_id, records, hint);
    batch.created_at = Instant::now();
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_record_batch_is_54_bytes() {
        let batch = RecordBatch::new(0, vec![Record::new(0, 0, None, b"ab".to_vec())], None);
        let frame = batch_to_frame(&batch, false).unwrap();
        assert_eq!(frame.payload.len(), 18);
        assert_eq!(frame.partition, -1);
        assert_eq!(frame.encode().len(), 54);
    }

    #[test]
    fn decompress_checks_length() {
        let c = compress(b"hello hello hello");
        assert_eq!(decompress(&c, 17).unwrap(), b"hello hello hello");
        assert!(decompress(&c, 16).is_err());
        assert!(decompress(&c, 18).is_err());
        assert!(decompress(b"\xff\xff\xff garbage", 10).is_err());
    }

    #[test]
    fn incompressible_payload_sent_plain() {
        let noise: Vec<u8> = (0..4096u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        let batch = RecordBatch::new(1, vec![Record::new(0, 0, None, noise)], Some(2));
        let f = batch_to_frame(&batch, true).unwrap();
        if !f.is_compressed() {
            assert_eq!(f.payload.len() as u32, f.uncompressed_len);
        }
        let back = frame_to_batch(&f).unwrap();
        assert_eq!(
            back.records,
            batch
                .records
                .iter()
                .map(|r| Record {
                    partition: 2,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn count_mismatch_rejected() {
        let recs = vec![Record::new(0, 5, Some(b"k".to_vec()), b"v".to_vec())];
        let payload = encode_records(&recs);
        assert!(decode_records(&payload, 2, 0).is_err());
        assert!(decode_records(&payload, 0, 0).is_err());
        assert_eq!(decode_records(&payload, 1, 0).unwrap(), recs);
    }

    fn records() -> impl Strategy<Value = Vec<Record>> {
        proptest::collection::vec(
            (
                any::<u64>(),
                proptest::option::of(proptest::collection::vec(any::<u8>(), 0..16)),
                proptest::collection::vec(any::<u8>(), 0..512),
            )
                .prop_map(|(o, k, v)| Record::new(3, o, k, v)),
            1..20,
        )
    }

    proptest! {
        #[test]
        fn batch_round_trip(recs in records(), compress_it in any::<bool>(), id in any::<u64>()) {
            let batch = RecordBatch::new(id, recs, Some(3));
            let frame = batch_to_frame(&batch, compress_it).unwrap();
            let wire = frame.encode();
            let back = frame_to_batch(&Frame::decode(&wire).unwrap()).unwrap();
            prop_assert_eq!(back.batch_id, id);
            prop_assert_eq!(back.partition_hint, Some(3));
            prop_assert_eq!(back.total_bytes, batch.total_bytes);
            prop_assert_eq!(back.records, batch.records);
        }

        #[test]
        fn compression_round_trip(data in proptest::collection::vec(any::<u8>(), 0..8192)) {
            let c = compress(&data);
            prop_assert_eq!(decompress(&c, data.len()).unwrap(), data);
        }
    }
}
