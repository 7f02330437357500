//! Object-store endpoints: ranged reads over a local directory or an S3-compatible
//! HTTP server, chunk planning, line-oriented record parsing, and the source operator.

mod local;
mod records;
mod s3;
mod sink;
mod source;

use std::io;

use serde::Serialize;
use thiserror::Error;

use crate::uri::{EndpointUri, Scheme, UriError};

pub use local::LocalFile;
pub use records::{RecordReader, RecordsFormat};
pub use s3::{sign_v4, S3Config, S3Object, SigningInput};
pub use sink::{FileSink, FileSinkMode};
pub use source::{object_source_run, ObjectSourceStats};

#[derive(Debug, Error)]
pub enum ObjectError {
    #[error("object not found: {0}")]
    NotFound(String),
    #[error("{0}:// objects are not supported; only file:// and s3:// have backends")]
    UnsupportedBackend(String),
    #[error("range read at {start} expected {expected} bytes, got {got}")]
    Range { start: u64, expected: u64, got: u64 },
    #[error("size of {0} is unavailable")]
    SizeUnavailable(String),
    #[error("authorization failed for {0}")]
    Auth(String),
    #[error("HTTP {status} from {url}")]
    Http { status: u16, url: String },
    #[error("object store configuration: {0}")]
    Config(String),
    #[error("line {line}: {reason}")]
    Format { line: u64, reason: String },
    #[error("line {line} is {len} bytes, above the {limit}-byte batch size; transfer it with --format raw")]
    LineTooLong { line: u64, len: u64, limit: u64 },
    #[error("reading [{start}, {start}+{len}): {source}")]
    ReadFailed {
        start: u64,
        len: u64,
        #[source]
        source: Box<ObjectError>,
    },
    #[error(transparent)]
    Uri(#[from] UriError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Backend {
    LocalDir,
    S3Compatible,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectRef {
    pub backend: Backend,
    /// Bucket, or the directory holding a local file.
    pub container: String,
    pub key: String,
    pub size_bytes: u64,
}

/// Positioned reads of a single object.
pub trait RangeReader: Send + Sync {
    /// Exactly `len` bytes starting at `start`.
    fn read_range(&self, start: u64, len: u64) -> Result<Vec<u8>, ObjectError>;
}

/// An opened object: its resolved reference plus a reader.
pub struct ObjectHandle {
    pub object: ObjectRef,
    reader: Box<dyn RangeReader>,
}

impl ObjectHandle {
    pub fn new(object: ObjectRef, reader: Box<dyn RangeReader>) -> Self {
        Self { object, reader }
    }

    /// Open the object named by `uri` and resolve its size.
    pub fn open(uri: &EndpointUri) -> Result<Self, ObjectError> {
        match uri.scheme {
            Scheme::File => {
                let f = LocalFile::open(&uri.path)?;
                Ok(Self::new(f.object_ref(), Box::new(f)))
            }
            Scheme::S3 => {
                let cfg = S3Config::from_env()?;
                let o = S3Object::open(cfg, &uri.authority, &uri.path)?;
                Ok(Self::new(o.object_ref(), Box::new(o)))
            }
            Scheme::Gs | Scheme::Azure => Err(ObjectError::UnsupportedBackend(uri.scheme.as_str().to_string())),
            Scheme::Stream => Err(ObjectError::Config(format!("{uri} is a stream, not an object"))),
        }
    }

    pub fn size(&self) -> u64 {
        self.object.size_bytes
    }

    pub fn read_range(&self, start: u64, len: u64) -> Result<Vec<u8>, ObjectError> {
        if start.checked_add(len).is_none_or(|end| end > self.size()) {
            return Err(ObjectError::Range {
                start,
                expected: len,
                got: self.size().saturating_sub(start),
            });
        }
        if len == 0 {
            return Ok(Vec::new());
        }
        self.reader.read_range(start, len)
    }
}

/// `(start, length)` ranges of `chunk_bytes` covering `[0, size)` in order.
pub fn plan_chunks(size: u64, chunk_bytes: u64) -> Vec<(u64, u64)> {
    assert!(chunk_bytes >= 1, "chunk size must be positive");
    (0..size.div_ceil(chunk_bytes))
        .map(|i| {
            let start = i * chunk_bytes;
            (start, chunk_bytes.min(size - start))
        })
        .collect()
}
