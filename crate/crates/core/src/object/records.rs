//! Line-oriented record parsing of CSV and NDJSON objects.
//!
//! Lines end in LF or CRLF; the terminator is not part of the record value. Empty lines
//! are skipped. CSV quoting is not interpreted, so quoted fields must not contain line
//! breaks.

use serde::de::IgnoredAny;

use super::{ObjectError, ObjectHandle};
use crate::pipeline::Record;

const READ_BLOCK: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordsFormat {
    Csv,
    Ndjson,
}

fn trim_cr(line: &[u8]) -> &[u8] {
    line.strip_suffix(b"\r").unwrap_or(line)
}

/// Iterator over the records of one object, read in 1 MiB ranges. Only the current
/// range and the start of a line that crosses into the next one are held.
pub struct RecordReader<'a> {
    object: &'a ObjectHandle,
    format: RecordsFormat,
    skip_header: bool,
    max_line: Option<u64>,
    partitions: u32,
    read_block: u64,
    pos: u64,
    block: Vec<u8>,
    /// Start of unconsumed bytes in `block`.
    head: usize,
    /// Partial line left over from earlier blocks.
    carry: Vec<u8>,
    line_no: u64,
    next_offset: u64,
    failed: bool,
}

impl<'a> RecordReader<'a> {
    /// `partitions` is the destination partition count used for round-robin
    /// assignment. Lines longer than `max_line` bytes are an error.
    pub fn new(
        object: &'a ObjectHandle,
        format: RecordsFormat,
        skip_header: bool,
        max_line: Option<u64>,
        partitions: u32,
    ) -> Self {
        Self {
            object,
            format,
            skip_header,
            max_line,
            partitions: partitions.max(1),
            read_block: READ_BLOCK,
            pos: 0,
            block: Vec::new(),
            head: 0,
            carry: Vec::new(),
            line_no: 0,
            next_offset: 0,
            failed: false,
        }
    }

    /// Bytes fetched from the object so far.
    pub fn bytes_read(&self) -> u64 {
        self.pos
    }

    /// The next raw line without its terminator, or `None` at end of object.
    fn next_line(&mut self) -> Result<Option<Vec<u8>>, ObjectError> {
        loop {
            let rest = &self.block[self.head..];
            if let Some(i) = rest.iter().position(|&b| b == b'\n') {
                let line = if self.carry.is_empty() {
                    trim_cr(&rest[..i]).to_vec()
                } else {
                    self.carry.extend_from_slice(&rest[..i]);
                    let mut line = std::mem::take(&mut self.carry);
                    if line.last() == Some(&b'\r') {
                        line.pop();
                    }
                    line
                };
                self.head += i + 1;
                self.check_len(line.len() as u64)?;
                self.line_no += 1;
                return Ok(Some(line));
            }
            self.carry.extend_from_slice(rest);
            // allow for a CR whose LF has not been read yet
            self.check_len(self.carry.len().saturating_sub(1) as u64)?;
            // drop the consumed block before fetching the next one
            self.block = Vec::new();
            self.head = 0;
            let size = self.object.size();
            if self.pos >= size {
                if self.carry.is_empty() {
                    return Ok(None);
                }
                let mut line = std::mem::take(&mut self.carry);
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                self.check_len(line.len() as u64)?;
                self.line_no += 1;
                return Ok(Some(line));
            }
            let len = self.read_block.min(size - self.pos);
            self.block = self
                .object
                .read_range(self.pos, len)
                .map_err(|e| ObjectError::ReadFailed {
                    start: self.pos,
                    len,
                    source: Box::new(e),
                })?;
            self.pos += len;
        }
    }

    fn check_len(&self, len: u64) -> Result<(), ObjectError> {
        match self.max_line {
            Some(limit) if len > limit => Err(ObjectError::LineTooLong {
                line: self.line_no + 1,
                len,
                limit,
            }),
            _ => Ok(()),
        }
    }

    fn parse(&mut self) -> Result<Option<Record>, ObjectError> {
        loop {
            let Some(line) = self.next_line()? else {
                return Ok(None);
            };
            if self.skip_header {
                self.skip_header = false;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if self.format == RecordsFormat::Ndjson {
                if let Err(e) = serde_json::from_slice::<IgnoredAny>(&line) {
                    return Err(ObjectError::Format {
                        line: self.line_no,
                        reason: format!("invalid JSON: {e}"),
                    });
                }
            }
            let offset = self.next_offset;
            self.next_offset += 1;
            let partition = (offset % u64::from(self.partitions)) as u32;
            return Ok(Some(Record::new(partition, offset, None, line)));
        }
    }
}

impl Iterator for RecordReader<'_> {
    type Item = Result<Record, ObjectError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.parse().transpose();
        if matches!(r, Some(Err(_))) {
            self.failed = true;
        }
        r
    }
}
