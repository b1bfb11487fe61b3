use std::collections::HashSet;
use std::io::Read;

use super::{
    align_up, GgufError, GgufModel, Metadata, MetadataValue, TensorInfo, ValueKind, ALIGNMENT_KEY, DEFAULT_ALIGNMENT, MAGIC, VERSION,
};
use crate::quant::BlockFormat;

/// Counts consumed bytes so the data-region start can be derived.
struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], GgufError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        self.pos += N as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, GgufError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64, GgufError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String, GgufError> {
        let len = self.u64()?;
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(len).read_to_end(&mut buf)?;
        if (got as u64) < len {
            return Err(GgufError::TruncatedHeader);
        }
        self.pos += len;
        String::from_utf8(buf).map_err(|_| GgufError::InvalidUtf8)
    }

    fn value(&mut self, kind: ValueKind, key: &str) -> Result<MetadataValue, GgufError> {
        Ok(match kind {
            ValueKind::U8 => MetadataValue::U8(self.bytes::<1>()?[0]),
            ValueKind::I8 => MetadataValue::I8(self.bytes::<1>()?[0] as i8),
            ValueKind::U16 => MetadataValue::U16(u16::from_le_bytes(self.bytes()?)),
            ValueKind::I16 => MetadataValue::I16(i16::from_le_bytes(self.bytes()?)),
            ValueKind::U32 => MetadataValue::U32(self.u32()?),
            ValueKind::I32 => MetadataValue::I32(i32::from_le_bytes(self.bytes()?)),
            ValueKind::U64 => MetadataValue::U64(self.u64()?),
            ValueKind::I64 => MetadataValue::I64(i64::from_le_bytes(self.bytes()?)),
            ValueKind::F32 => MetadataValue::F32(f32::from_le_bytes(self.bytes()?)),
            ValueKind::F64 => MetadataValue::F64(f64::from_le_bytes(self.bytes()?)),
            ValueKind::Bool => MetadataValue::Bool(self.bytes::<1>()?[0] != 0),
            ValueKind::String => MetadataValue::String(self.string()?),
            ValueKind::Array => {
                let id = self.u32()?;
                let kind = ValueKind::from_id(id).ok_or(GgufError::UnknownValueKind(id))?;
                if kind == ValueKind::Array {
                    return Err(GgufError::NestedArray(key.to_string()));
                }
                let count = self.u64()?;
                let mut items = Vec::with_capacity(count.min(4096) as usize);
                for _ in 0..count {
                    items.push(self.value(kind, key)?);
                }
                MetadataValue::Array { kind, items }
            }
        })
    }
}

/// Parse the header and tensor index. No payload bytes are read.
pub fn read_header<R: Read>(src: R) -> Result<GgufModel, GgufError> {
    let mut cur = Cursor { inner: src, pos: 0 };
    let magic = cur.bytes::<4>()?;
    if &magic != MAGIC {
        return Err(GgufError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(GgufError::UnsupportedVersion(version));
    }
    let tensor_count = cur.u64()?;
    let kv_count = cur.u64()?;

    let mut metadata = Metadata::new();
    for _ in 0..kv_count {
        let key = cur.string()?;
        let id = cur.u32()?;
        let kind = ValueKind::from_id(id).ok_or(GgufError::UnknownValueKind(id))?;
        let value = cur.value(kind, &key)?;
        if metadata.insert(key.clone(), value).is_some() {
            return Err(GgufError::DuplicateKey(key));
        }
    }

    let alignment = match metadata.get(ALIGNMENT_KEY) {
        None => DEFAULT_ALIGNMENT,
        Some(v) => match v.as_u64() {
            Some(a) if a > 0 && a.is_power_of_two() => a,
            Some(a) => return Err(GgufError::BadAlignment(a)),
            None => return Err(GgufError::BadAlignment(0)),
        },
    };

    let mut names = HashSet::new();
    let mut tensors = Vec::with_capacity(tensor_count.min(4096) as usize);
    for _ in 0..tensor_count {
        let name = cur.string()?;
        let n_dims = cur.u32()?;
        if n_dims > 4 {
            return Err(GgufError::BadDims(name, vec![n_dims as u64]));
        }
        let dims = (0..n_dims).map(|_| cur.u64()).collect::<Result<Vec<_>, _>>()?;
        if dims.is_empty() || dims.contains(&0) {
            return Err(GgufError::BadDims(name, dims));
        }
        let type_id = cur.u32()?;
        let format = BlockFormat::from_ggml_type(type_id).ok_or_else(|| GgufError::UnknownTensorType(name.clone(), type_id))?;
        if dims[0] % format.block_len() as u64 != 0 {
            return Err(GgufError::IndivisibleRow {
                name,
                inner: dims[0],
                format,
            });
        }
        let offset = cur.u64()?;
        if offset % alignment != 0 {
            return Err(GgufError::MisalignedOffset { name, offset, alignment });
        }
        if !names.insert(name.clone()) {
            return Err(GgufError::DuplicateTensorName(name));
        }
        tensors.push(TensorInfo {
            name,
            dims,
            format,
            offset,
        });
    }

    let mut by_offset: Vec<&TensorInfo> = tensors.iter().collect();
    by_offset.sort_by_key(|t| t.offset);
    for pair in by_offset.windows(2) {
        if pair[0].offset + pair[0].byte_size() > pair[1].offset {
            return Err(GgufError::OverlappingTensors(pair[0].name.clone(), pair[1].name.clone()));
        }
    }

    let data_start = align_up(cur.pos, alignment);
    Ok(GgufModel {
        version,
        metadata,
        tensors,
        alignment,
        data_start,
    })
}
