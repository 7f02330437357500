//! Gateway-to-gateway data plane: framed batches over parallel TCP connections.

mod chunk_store;
pub mod codec;
pub mod frame;
mod receiver;
mod sender;

use std::io;

use thiserror::Error;

pub use chunk_store::ChunkStore;
pub use codec::{batch_into_frame, batch_to_frame, compress, decompress, frame_to_batch, CodecError};
pub use frame::{read_frame, Frame, FrameError, MalformedFrame, MsgType, HEADER_LEN};
pub use receiver::{Receiver, ReceiverConfig, ReceiverHandle, ReceiverStats, DEDUP_WINDOW};
pub use sender::{Sender, SenderConfig, SenderHandle, SenderStats};

/// Default listener port of the destination gateway.
pub const DEFAULT_TRANSPORT_PORT: u16 = 7331;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("cannot bind listener: {0}")]
    Bind(io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("peer reported error: {0}")]
    Remote(String),
    #[error("receiver {addr} unreachable after {attempts} attempts")]
    Unreachable { addr: String, attempts: u32 },
    #[error("transfer aborted")]
    Aborted,
}

impl TransportError {
    /// Errors that a reconnect may cure.
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Io(_) | TransportError::Frame(_))
    }

    /// Whether this is a network reachability problem rather than a data problem.
    pub fn is_connectivity(&self) -> bool {
        matches!(
            self,
            TransportError::Unreachable { .. } | TransportError::Bind(_) | TransportError::Io(_)
        )
    }
}
