//! GGUF v3 containers: header/index parsing, fixture writing, and chunked
//! streaming of tensor payloads into device buffers.

mod reader;
mod stream;
mod writer;

use std::fs::File;
use std::io::{self, BufReader, Read, Seek, SeekFrom};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::quant::BlockFormat;

pub use reader::read_header;
pub use stream::{
    stream_tensor, Completion, MemorySink, StreamConfig, StreamError, StreamStats, TensorSink, DEFAULT_CHUNK_BYTES, DEFAULT_IN_FLIGHT,
    MIN_CHUNK_BYTES,
};
pub use writer::{write_gguf, TensorPayload};

pub const MAGIC: &[u8; 4] = b"GGUF";
pub const VERSION: u32 = 3;
pub const DEFAULT_ALIGNMENT: u64 = 32;
pub const ALIGNMENT_KEY: &str = "general.alignment";

#[derive(Debug, Error)]
pub enum GgufError {
    #[error("bad magic {0:?}, expected \"GGUF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported GGUF version {0} (only v3 is supported)")]
    UnsupportedVersion(u32),
    #[error("header truncated")]
    TruncatedHeader,
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensorName(String),
    #[error("duplicate metadata key `{0}`")]
    DuplicateKey(String),
    #[error("tensor `{name}` offset {offset} is not a multiple of the alignment {alignment}")]
    MisalignedOffset { name: String, offset: u64, alignment: u64 },
    #[error("unknown metadata value kind {0}")]
    UnknownValueKind(u32),
    #[error("arrays of arrays are not supported (key `{0}`)")]
    NestedArray(String),
    #[error("unknown tensor type id {1} for tensor `{0}`")]
    UnknownTensorType(String, u32),
    #[error("tensor `{0}` has an invalid dimension list {1:?}")]
    BadDims(String, Vec<u64>),
    #[error("tensor `{name}` innermost dimension {inner} is not a multiple of the {format} block length")]
    IndivisibleRow { name: String, inner: u64, format: BlockFormat },
    #[error("tensors `{0}` and `{1}` overlap in the data region")]
    OverlappingTensors(String, String),
    #[error("tensor `{name}` ends at byte {end}, past the end of the file ({file_len})")]
    TensorOutOfBounds { name: String, end: u64, file_len: u64 },
    #[error("invalid alignment {0}")]
    BadAlignment(u64),
    #[error("invalid utf-8 in a string field")]
    InvalidUtf8,
    #[error("payload for `{name}` is {got} bytes, expected {expected}")]
    SizeMismatch { name: String, expected: u64, got: u64 },
    #[error("no tensor named `{0}`")]
    TensorNotFound(String),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for GgufError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            GgufError::TruncatedHeader
        } else {
            GgufError::Io(e)
        }
    }
}

/// GGUF metadata value type ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueKind {
    U8 = 0,
    I8 = 1,
    U16 = 2,
    I16 = 3,
    U32 = 4,
    I32 = 5,
    F32 = 6,
    Bool = 7,
    String = 8,
    Array = 9,
    U64 = 10,
    I64 = 11,
    F64 = 12,
}

impl ValueKind {
    pub fn from_id(id: u32) -> Option<Self> {
        use ValueKind::*;
        Some(match id {
            0 => U8,
            1 => I8,
            2 => U16,
            3 => I16,
            4 => U32,
            5 => I32,
            6 => F32,
            7 => Bool,
            8 => String,
            9 => Array,
            10 => U64,
            11 => I64,
            12 => F64,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetadataValue {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    U64(u64),
    I64(i64),
    F32(f32),
    F64(f64),
    Bool(bool),
    String(String),
    /// Homogeneous array of scalars or strings; `kind` survives empty arrays.
    Array {
        kind: ValueKind,
        items: Vec<MetadataValue>,
    },
}

impl MetadataValue {
    pub fn kind(&self) -> ValueKind {
        match self {
            MetadataValue::U8(_) => ValueKind::U8,
            MetadataValue::I8(_) => ValueKind::I8,
            MetadataValue::U16(_) => ValueKind::U16,
            MetadataValue::I16(_) => ValueKind::I16,
            MetadataValue::U32(_) => ValueKind::U32,
            MetadataValue::I32(_) => ValueKind::I32,
            MetadataValue::U64(_) => ValueKind::U64,
            MetadataValue::I64(_) => ValueKind::I64,
            MetadataValue::F32(_) => ValueKind::F32,
            MetadataValue::F64(_) => ValueKind::F64,
            MetadataValue::Bool(_) => ValueKind::Bool,
            MetadataValue::String(_) => ValueKind::String,
            MetadataValue::Array { .. } => ValueKind::Array,
        }
    }

    /// Integer value of any unsigned/signed scalar kind, if non-negative.
    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            MetadataValue::U8(v) => Some(v as u64),
            MetadataValue::U16(v) => Some(v as u64),
            MetadataValue::U32(v) => Some(v as u64),
            MetadataValue::U64(v) => Some(v),
            MetadataValue::I8(v) => u64::try_from(v).ok(),
            MetadataValue::I16(v) => u64::try_from(v).ok(),
            MetadataValue::I32(v) => u64::try_from(v).ok(),
            MetadataValue::I64(v) => u64::try_from(v).ok(),
            _ => None,
        }
    }
}

impl std::fmt::Display for MetadataValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetadataValue::U8(v) => write!(f, "{v}"),
            MetadataValue::I8(v) => write!(f, "{v}"),
            MetadataValue::U16(v) => write!(f, "{v}"),
            MetadataValue::I16(v) => write!(f, "{v}"),
            MetadataValue::U32(v) => write!(f, "{v}"),
            MetadataValue::I32(v) => write!(f, "{v}"),
            MetadataValue::U64(v) => write!(f, "{v}"),
            MetadataValue::I64(v) => write!(f, "{v}"),
            MetadataValue::F32(v) => write!(f, "{v}"),
            MetadataValue::F64(v) => write!(f, "{v}"),
            MetadataValue::Bool(v) => write!(f, "{v}"),
            MetadataValue::String(s) => write!(f, "{s:?}"),
            MetadataValue::Array { kind, items } => {
                write!(f, "[{kind:?}; {}]", items.len())
            }
        }
    }
}

pub type Metadata = IndexMap<String, MetadataValue>;

/// One entry of the tensor index. `dims` are innermost-first, as stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<u64>,
    pub format: BlockFormat,
    /// Relative to `GgufModel::data_start`.
    pub offset: u64,
}

impl TensorInfo {
    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn byte_size(&self) -> u64 {
        let f = self.format;
        self.elements() / f.block_len() as u64 * f.block_bytes() as u64
    }

    /// Row-major shape (outermost first).
    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().rev().map(|&d| d as usize).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GgufModel {
    pub version: u32,
    pub metadata: Metadata,
    pub tensors: Vec<TensorInfo>,
    pub alignment: u64,
    pub data_start: u64,
}

impl GgufModel {
    pub fn tensor(&self, name: &str) -> Result<&TensorInfo, GgufError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| GgufError::TensorNotFound(name.to_string()))
    }

    /// Verify every tensor region lies inside a file of `file_len` bytes.
    pub fn check_bounds(&self, file_len: u64) -> Result<(), GgufError> {
        for t in &self.tensors {
            let end = self.data_start + t.offset + t.byte_size();
            if end > file_len {
                return Err(GgufError::TensorOutOfBounds {
                    name: t.name.clone(),
                    end,
                    file_len,
                });
            }
        }
        Ok(())
    }

    /// Read one tensor's payload in full. Intended for small tensors and
    /// tooling; model loading goes through [`stream_tensor`].
    pub fn read_tensor_bytes<R: Read + Seek>(&self, src: &mut R, info: &TensorInfo) -> Result<Vec<u8>, GgufError> {
        src.seek(SeekFrom::Start(self.data_start + info.offset))?;
        let mut buf = vec![0u8; info.byte_size() as usize];
        src.read_exact(&mut buf)?;
        Ok(buf)
    }
}

/// Open a GGUF file, parse its index and check tensor bounds.
pub fn open(path: impl AsRef<Path>) -> Result<(GgufModel, BufReader<File>), GgufError> {
    let file = File::open(path).map_err(GgufError::Io)?;
    let len = file.metadata().map_err(GgufError::Io)?.len();
    let mut reader = BufReader::new(file);
    let model = read_header(&mut reader)?;
    model.check_bounds(len)?;
    Ok((model, reader))
}

pub(crate) fn align_up(value: u64, alignment: u64) -> u64 {
    value.div_ceil(alignment) * alignment
}
