//! Chunked payload streaming through a fixed pool of staging buffers.
//!
//! At most `in_flight` staging buffers of `chunk_bytes` each exist at any
//! time. A buffer is refilled only after the sink reports that the write it
//! carried has completed.

use std::collections::VecDeque;
use std::io::{self, Read, Seek, SeekFrom};
use std::sync::mpsc;

use thiserror::Error;

use super::TensorInfo;

pub const DEFAULT_CHUNK_BYTES: usize = 1 << 20;
pub const DEFAULT_IN_FLIGHT: usize = 4;
pub const MIN_CHUNK_BYTES: usize = 64 << 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub chunk_bytes: usize,
    pub in_flight: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk_bytes: DEFAULT_CHUNK_BYTES,
            in_flight: DEFAULT_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("source ended after {read} of {expected} bytes")]
    ShortRead { read: u64, expected: u64 },
    #[error("sink write failed: {0}")]
    SinkWriteFailed(String),
    #[error("invalid stream config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Completion signal for one submitted chunk. Resolves to the staging buffer
/// so it can be reused.
pub struct Completion(mpsc::Receiver<Result<Vec<u8>, String>>);

impl Completion {
    pub fn channel() -> (mpsc::Sender<Result<Vec<u8>, String>>, Completion) {
        let (tx, rx) = mpsc::channel();
        (tx, Completion(rx))
    }

    pub fn ready(buf: Vec<u8>) -> Completion {
        let (tx, c) = Completion::channel();
        let _ = tx.send(Ok(buf));
        c
    }

    pub fn wait(self) -> Result<Vec<u8>, StreamError> {
        match self.0.recv() {
            Ok(Ok(buf)) => Ok(buf),
            Ok(Err(msg)) => Err(StreamError::SinkWriteFailed(msg)),
            Err(_) => Err(StreamError::SinkWriteFailed("completion dropped".into())),
        }
    }
}

/// Destination of a streamed tensor, typically a device buffer.
pub trait TensorSink {
    /// Writable bytes available to the stream.
    fn capacity(&self) -> u64;

    /// Queue `buf[..len]` for writing at `offset`. The sink owns the staging
    /// buffer until the returned completion resolves.
    fn submit(&mut self, offset: u64, buf: Vec<u8>, len: usize) -> Result<Completion, StreamError>;
}

/// Host-memory sink, completing each write immediately.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub data: Vec<u8>,
    pub writes: usize,
}

impl MemorySink {
    pub fn with_capacity(bytes: usize) -> Self {
        Self {
            data: vec![0; bytes],
            writes: 0,
        }
    }
}

impl TensorSink for MemorySink {
    fn capacity(&self) -> u64 {
        self.data.len() as u64
    }

    fn submit(&mut self, offset: u64, buf: Vec<u8>, len: usize) -> Result<Completion, StreamError> {
        let start = offset as usize;
        let dst = self
            .data
            .get_mut(start..start + len)
            .ok_or_else(|| StreamError::SinkWriteFailed(format!("write past end at {offset}")))?;
        dst.copy_from_slice(&buf[..len]);
        self.writes += 1;
        Ok(Completion::ready(buf))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub bytes: u64,
    pub chunks: usize,
    /// Staging buffers ever allocated (never more than `in_flight`).
    pub staging_buffers: usize,
    /// Largest number of staging bytes alive at once.
    pub peak_staging_bytes: usize,
}

/// Copy one tensor's payload from `src` into `sink`.
///
/// `data_start` is the absolute offset of the file's data region.
pub fn stream_tensor<R: Read + Seek>(
    src: &mut R,
    data_start: u64,
    info: &TensorInfo,
    sink: &mut dyn TensorSink,
    config: StreamConfig,
) -> Result<StreamStats, StreamError> {
    if config.chunk_bytes < MIN_CHUNK_BYTES {
        return Err(StreamError::InvalidConfig(format!(
            "chunk_bytes {} is below the {MIN_CHUNK_BYTES}-byte minimum",
            config.chunk_bytes
        )));
    }
    if config.in_flight == 0 {
        return Err(StreamError::InvalidConfig("in_flight must be at least 1".into()));
    }
    let total = info.byte_size();
    if sink.capacity() < total {
        return Err(StreamError::SinkWriteFailed(format!(
            "sink holds {} bytes, tensor `{}` needs {total}",
            sink.capacity(),
            info.name
        )));
    }

    src.seek(SeekFrom::Start(data_start + info.offset))?;
    let buf_len = config.chunk_bytes.min(total as usize);
    let mut stats = StreamStats::default();
    let mut free: Vec<Vec<u8>> = Vec::new();
    let mut pending: VecDeque<Completion> = VecDeque::new();
    let mut written = 0u64;

    while written < total {
        let mut buf = match free.pop() {
            Some(b) => b,
            None if stats.staging_buffers < config.in_flight => {
                stats.staging_buffers += 1;
                stats.peak_staging_bytes = stats.staging_buffers * buf_len;
                vec![0u8; buf_len]
            }
            None => pending.pop_front().expect("pool exhausted with nothing pending").wait()?,
        };
        let len = (total - written).min(buf_len as u64) as usize;
        read_full(src, &mut buf[..len]).map_err(|e| match e {
            ReadFailure::Eof(n) => StreamError::ShortRead {
                read: written + n as u64,
                expected: total,
            },
            ReadFailure::Io(e) => StreamError::Io(e),
        })?;
        pending.push_back(sink.submit(written, buf, len)?);
        written += len as u64;
        stats.chunks += 1;
    }
    for c in pending {
        free.push(c.wait()?);
    }
    stats.bytes = total;
    Ok(stats)
}

enum ReadFailure {
    Eof(usize),
    Io(io::Error),
}

fn read_full<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<(), ReadFailure> {
    let mut filled = 0;
    while filled < buf.len() {
        match src.read(&mut buf[filled..]) {
            Ok(0) => return Err(ReadFailure::Eof(filled)),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ReadFailure::Io(e)),
        }
    }
    Ok(())
}
