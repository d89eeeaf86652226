//! Master/worker messages and their frame encoding: a 4-byte big-endian
//! length followed by one JSON object.

use std::io::{self, Read, Write};

use proofkernel_core::dag::{SpanState, TaskId};
use proofkernel_core::document::SpanId;
use proofkernel_core::script::CheckOutcome;
use proofkernel_core::snapshot::{BlobKey, Snapshot};
use serde::{Deserialize, Serialize};

/// Frames larger than this are refused by [`FrameReader`].
pub const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackKind {
    Status,
    Diagnostic,
    Timing,
    Progress,
}

/// Master to worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerMsg {
    Assign {
        task: TaskId,
        version: u64,
        span: SpanId,
        snapshot: Snapshot,
        /// Source text of the lemma, re-parsed by the worker.
        lemma: String,
    },
    FetchReply {
        key: BlobKey,
        /// Base64 blob contents; absent when the key is no longer live.
        bytes: Option<String>,
    },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    /// Task the frame belongs to.
    pub exec_ref: TaskId,
    pub version: u64,
    pub span: SpanId,
    pub kind: FeedbackKind,
    pub state: SpanState,
    pub msg: String,
    pub ms: f64,
}

/// Worker to master, on the bus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MasterMsg {
    Feedback(Feedback),
    FetchRequest { key: BlobKey },
    TaskResult { task: TaskId, version: u64, outcome: CheckOutcome, ms: f64 },
    /// The worker could not run the assignment (e.g. a blob was gone); the
    /// master puts the task back in the queue.
    Abandoned { task: TaskId, version: u64, reason: String },
}

/// A bus message stamped with its sender and per-worker sequence number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusFrame {
    pub worker: u32,
    pub seq: u64,
    pub msg: MasterMsg,
}

/// Encodes one frame: length prefix plus JSON body.
pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    let body = serde_json::to_vec(value).expect("wire types always serialize");
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("frame shorter than its length prefix")]
    Truncated,
    #[error("{0} trailing bytes after frame")]
    Trailing(usize),
    #[error("bad frame body: {0}")]
    Body(#[from] serde_json::Error),
}

/// Decodes a complete frame produced by [`encode`].
pub fn decode<T: for<'de> Deserialize<'de>>(frame: &[u8]) -> Result<T, DecodeError> {
    let (len, body) = frame.split_first_chunk::<4>().ok_or(DecodeError::Truncated)?;
    let len = u32::from_be_bytes(*len) as usize;
    if body.len() < len {
        return Err(DecodeError::Truncated);
    }
    if body.len() > len {
        return Err(DecodeError::Trailing(body.len() - len));
    }
    Ok(serde_json::from_slice(body)?)
}

/// Reads whole frames (prefix included) from a byte stream.
pub struct FrameReader<R> {
    inner: R,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner }
    }

    /// The next frame, or `None` at a clean end of stream.
    pub fn next_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut prefix = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.inner.read(&mut prefix[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let len = u32::from_be_bytes(prefix) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
        }
        let mut frame = vec![0u8; len + 4];
        frame[..4].copy_from_slice(&prefix);
        self.inner.read_exact(&mut frame[4..])?;
        Ok(Some(frame))
    }
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}
