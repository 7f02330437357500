//! Gateway wire format.
//!
//! Every message is a 36-byte big-endian header followed by `payload_len` bytes:
//!
//! ```text
//! off len field
//!   0   4 magic "SKHT"
//!   4   1 version (1)
//!   5   1 msg_type  1=HELLO 2=BATCH 3=ACK 4=FIN 5=ERR
//!   6   1 flags     bit0 = payload compressed
//!   7   1 reserved  (0)
//!   8   8 batch_id          u64
//!  16   4 partition         i32, -1 = none
//!  20   4 record_count      u32
//!  24   4 uncompressed_len  u32
//!  28   4 payload_len       u32
//!  32   4 payload_crc32     u32, IEEE, over the payload as transmitted
//!  36   … payload
//! ```
//!
//! HELLO carries the sender session id in `batch_id` and the connection index in
//! `partition`. ERR carries a UTF-8 message as payload.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SKHT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 36;
pub const FLAG_COMPRESSED: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Batch = 2,
    Ack = 3,
    Fin = 4,
    Err = 5,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Hello,
            2 => Self::Batch,
            3 => Self::Ack,
            4 => Self::Fin,
            5 => Self::Err,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MalformedFrame {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadType(u8),
    #[error("unknown flag bits {0:#04x}")]
    BadFlags(u8),
    #[error("reserved byte is {0:#04x}, expected 0")]
    BadReserved(u8),
    #[error("payload CRC mismatch (header {expected:#010x}, computed {actual:#010x})")]
    BadCrc { expected: u32, actual: u32 },
    #[error("uncompressed frame declares payload_len {payload_len} != uncompressed_len {uncompressed_len}")]
    LengthMismatch { payload_len: u32, uncompressed_len: u32 },
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(u64),
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("malformed frame: {0}")]
    Malformed(#[from] MalformedFrame),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub flags: u8,
    pub batch_id: u64,
    pub partition: i32,
    pub record_count: u32,
    pub uncompressed_len: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    fn control(msg_type: MsgType, batch_id: u64, partition: i32) -> Self {
        Self {
            msg_type,
            flags: 0,
            batch_id,
            partition,
            record_count: 0,
            uncompressed_len: 0,
            payload: Vec::new(),
        }
    }

    /// Session id in `batch_id`, connection index in `partition`, connection count in
    /// `record_count`.
    pub fn hello(session: u64, connection: u32, connections: u32) -> Self {
        Self {
            record_count: connections,
            ..Self::control(MsgType::Hello, session, connection as i32)
        }
    }

    pub fn ack(batch_id: u64) -> Self {
        Self::control(MsgType::Ack, batch_id, -1)
    }

    pub fn fin() -> Self {
        Self::control(MsgType::Fin, 0, -1)
    }

    pub fn err(message: &str) -> Self {
        let payload = message.as_bytes().to_vec();
        Self {
            uncompressed_len: payload.len() as u32,
            payload,
            ..Self::control(MsgType::Err, 0, -1)
        }
    }

    pub fn is_compressed(&self) -> bool {
        self.flags & FLAG_COMPRESSED != 0
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = VERSION;
        h[5] = self.msg_type as u8;
        h[6] = self.flags;
        h[7] = 0;
        h[8..16].copy_from_slice(&self.batch_id.to_be_bytes());
        h[16..20].copy_from_slice(&self.partition.to_be_bytes());
        h[20..24].copy_from_slice(&self.record_count.to_be_bytes());
        h[24..28].copy_from_slice(&self.uncompressed_len.to_be_bytes());
        h[28..32].copy_from_slice(&(self.payload.len() as u32).to_be_bytes());
        h[32..36].copy_from_slice(&crc32fast::hash(&self.payload).to_be_bytes());
        h
    }

    /// Serialize to bytes.
    ///
    /// # Panics
    /// If the payload does not fit a u32 length.
    pub fn encode(&self) -> Vec<u8> {
        assert!(self.payload.len() <= u32::MAX as usize, "frame payload too large");
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Write header and payload without concatenating them first.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)
    }

    /// Decode exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, MalformedFrame> {
        let (frame, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(MalformedFrame::TrailingBytes(bytes.len() - used));
        }
        Ok(frame)
    }

    /// Decode one frame from the front of `bytes`; returns it and the bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Frame, usize), MalformedFrame> {
        if bytes.len() < HEADER_LEN {
            // report bad magic early when we can see it
            let n = bytes.len().min(4);
            if bytes[..n] != MAGIC[..n] {
                return Err(MalformedFrame::BadMagic);
            }
            return Err(MalformedFrame::Truncated {
                needed: HEADER_LEN,
                have: bytes.len(),
            });
        }
        let header = Header::parse(bytes[..HEADER_LEN].try_into().expect("36 bytes"))?;
        let total = HEADER_LEN + header.payload_len as usize;
        if bytes.len() < total {
            return Err(MalformedFrame::Truncated {
                needed: total,
                have: bytes.len(),
            });
        }
        let payload = bytes[HEADER_LEN..total].to_vec();
        Ok((header.into_frame(payload)?, total))
    }
}

struct Header {
    msg_type: MsgType,
    flags: u8,
    batch_id: u64,
    partition: i32,
    record_count: u32,
    uncompressed_len: u32,
    payload_len: u32,
    crc: u32,
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b.try_into().expect("4 bytes"))
}

impl Header {
    fn parse(h: &[u8; HEADER_LEN]) -> Result<Self, MalformedFrame> {
        if h[0..4] != MAGIC {
            return Err(MalformedFrame::BadMagic);
        }
        if h[4] != VERSION {
            return Err(MalformedFrame::BadVersion(h[4]));
        }
        let msg_type = MsgType::from_u8(h[5]).ok_or(MalformedFrame::BadType(h[5]))?;
        let flags = h[6];
        if flags & !FLAG_COMPRESSED != 0 {
            return Err(MalformedFrame::BadFlags(flags));
        }
        if h[7] != 0 {
            return Err(MalformedFrame::BadReserved(h[7]));
        }
        let uncompressed_len = be_u32(&h[24..28]);
        let payload_len = be_u32(&h[28..32]);
        if flags & FLAG_COMPRESSED == 0 && payload_len != uncompressed_len {
            return Err(MalformedFrame::LengthMismatch {
                payload_len,
                uncompressed_len,
            });
        }
        Ok(Self {
            msg_type,
            flags,
            batch_id: u64::from_be_bytes(h[8..16].try_into().expect("8 bytes")),
            partition: i32::from_be_bytes(h[16..20].try_into().expect("4 bytes")),
            record_count: be_u32(&h[20..24]),
            uncompressed_len,
            payload_len,
            crc: be_u32(&h[32..36]),
        })
    }

    fn into_frame(self, payload: Vec<u8>) -> Result<Frame, MalformedFrame> {
        let actual = crc32fast::hash(&payload);
        if actual != self.crc {
            return Err(MalformedFrame::BadCrc {
                expected: self.crc,
                actual,
            });
        }
        Ok(Frame {
            msg_type: self.msg_type,
            flags: self.flags,
            batch_id: self.batch_id,
            partition: self.partition,
            record_count: self.record_count,
            uncompressed_len: self.uncompressed_len,
            payload,
        })
    }
}

/// Read one frame from a byte stream, refusing payloads above `max_payload` bytes.
///
/// A clean EOF before the first header byte is reported as `UnexpectedEof`.
pub fn read_frame<R: Read>(r: &mut R, max_payload: u64) -> Result<Frame, FrameError> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let header = Header::parse(&h)?;
    if u64::from(header.payload_len) > max_payload {
        return Err(MalformedFrame::TooLarge(header.payload_len.into()).into());
    }
    let mut payload = vec![0u8; header.payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(header.into_frame(payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ack_is_36_bytes() {
        let bytes = Frame::ack(7).encode();
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[28..32], &[0, 0, 0, 0]);
        // CRC-32 of the empty string is 0
        assert_eq!(&bytes[32..36], &[0, 0, 0, 0]);
        assert_eq!(Frame::decode(&bytes).unwrap(), Frame::ack(7));
    }

    #[test]
    fn rejects_bad_header_fields() {
        let good = Frame::ack(1).encode();
        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(Frame::decode(&b), Err(MalformedFrame::BadMagic));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(Frame::decode(&b), Err(MalformedFrame::BadVersion(2)));
        let mut b = good.clone();
        b[5] = 9;
        assert_eq!(Frame::decode(&b), Err(MalformedFrame::BadType(9)));
        let mut b = good.clone();
        b[7] = 1;
        assert_eq!(Frame::decode(&b), Err(MalformedFrame::BadReserved(1)));
        assert!(matches!(
            Frame::decode(&good[..20]),
            Err(MalformedFrame::Truncated { needed: 36, have: 20 })
        ));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(Frame::decode(&long), Err(MalformedFrame::TrailingBytes(1)));
    }

    #[test]
    fn payload_bit_flip_is_bad_crc() {
        let f = Frame::err("boom");
        let enc = f.encode();
        for byte in HEADER_LEN..enc.len() {
            for bit in 0..8 {
                let mut b = enc.clone();
                b[byte] ^= 1 << bit;
                assert!(matches!(Frame::decode(&b), Err(MalformedFrame::BadCrc { .. })));
            }
        }
    }

    #[test]
    fn read_frame_limits_payload() {
        let f = Frame::err("0123456789");
        let enc = f.encode();
        let err = read_frame(&mut &enc[..], 4).unwrap_err();
        assert!(matches!(err, FrameError::Malformed(MalformedFrame::TooLarge(10))));
        assert_eq!(read_frame(&mut &enc[..], 1 << 20).unwrap(), f);
    }

    fn any_frame() -> impl Strategy<Value = Frame> {
        (
            1u8..=5,
            any::<bool>(),
            any::<u64>(),
            any::<i32>(),
            any::<u32>(),
            proptest::collection::vec(any::<u8>(), 0..4096),
            any::<u32>(),
        )
            .prop_map(
                |(t, compressed, batch_id, partition, record_count, payload, ulen)| Frame {
                    msg_type: MsgType::from_u8(t).unwrap(),
                    flags: if compressed { FLAG_COMPRESSED } else { 0 },
                    batch_id,
                    partition,
                    record_count,
                    uncompressed_len: if compressed { ulen } else { payload.len() as u32 },
                    payload,
                },
            )
    }

    proptest! {
        #[test]
        fn round_trip(f in any_frame()) {
            let enc = f.encode();
            prop_assert_eq!(enc.len(), HEADER_LEN + f.payload.len());
            prop_assert_eq!(Frame::decode(&enc).unwrap(), f.clone());
            let mut streamed = Vec::new();
            f.write_to(&mut streamed).unwrap();
            prop_assert_eq!(&streamed, &enc);
            prop_assert_eq!(read_frame(&mut &enc[..], u64::MAX).unwrap(), f);
        }

        #[test]
        fn truncation_never_decodes(f in any_frame(), cut in any::<prop::sample::Index>()) {
            let enc = f.encode();
            let at = cut.index(enc.len());
            prop_assert!(Frame::decode(&enc[..at]).is_err());
        }
    }
}
