use super::{align_up, GgufError, Metadata, MetadataValue, ALIGNMENT_KEY, DEFAULT_ALIGNMENT, MAGIC, VERSION};
use crate::quant::BlockFormat;

/// A tensor to be written: index fields plus its encoded payload.
#[derive(Debug, Clone, Copy)]
pub struct TensorPayload<'a> {
    pub name: &'a str,
    /// Innermost-first, as stored in the file.
    pub dims: &'a [u64],
    pub format: BlockFormat,
    pub data: &'a [u8],
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_value(out: &mut Vec<u8>, value: &MetadataValue) {
    match value {
        MetadataValue::U8(v) => out.push(*v),
        MetadataValue::I8(v) => out.push(*v as u8),
        MetadataValue::U16(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::I16(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::U32(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::I32(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::I64(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::F32(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::F64(v) => out.extend_from_slice(&v.to_le_bytes()),
        MetadataValue::Bool(v) => out.push(*v as u8),
        MetadataValue::String(s) => put_string(out, s),
        MetadataValue::Array { kind, items } => {
            out.extend_from_slice(&(*kind as u32).to_le_bytes());
            out.extend_from_slice(&(items.len() as u64).to_le_bytes());
            for item in items {
                put_value(out, item);
            }
        }
    }
}

/// Serialize a GGUF v3 file. Tensor offsets are assigned in order, each
/// padded to the file alignment.
pub fn write_gguf(metadata: &Metadata, tensors: &[TensorPayload<'_>]) -> Result<Vec<u8>, GgufError> {
    let alignment = match metadata.get(ALIGNMENT_KEY) {
        None => DEFAULT_ALIGNMENT,
        Some(v) => match v.as_u64() {
            Some(a) if a > 0 && a.is_power_of_two() => a,
            other => return Err(GgufError::BadAlignment(other.unwrap_or(0))),
        },
    };
    for (key, value) in metadata {
        if let MetadataValue::Array { kind, items } = value {
            if *kind == super::ValueKind::Array || items.iter().any(|i| i.kind() != *kind) {
                return Err(GgufError::NestedArray(key.clone()));
            }
        }
    }

    let mut offsets = Vec::with_capacity(tensors.len());
    let mut cursor = 0u64;
    for t in tensors {
        if t.dims.is_empty() || t.dims.len() > 4 || t.dims.contains(&0) {
            return Err(GgufError::BadDims(t.name.to_string(), t.dims.to_vec()));
        }
        let elements: u64 = t.dims.iter().product();
        if t.dims[0] % t.format.block_len() as u64 != 0 {
            return Err(GgufError::IndivisibleRow {
                name: t.name.to_string(),
                inner: t.dims[0],
                format: t.format,
            });
        }
        let expected = t.format.bytes_for(elements).unwrap();
        if t.data.len() as u64 != expected {
            return Err(GgufError::SizeMismatch {
                name: t.name.to_string(),
                expected,
                got: t.data.len() as u64,
            });
        }
        offsets.push(cursor);
        cursor = align_up(cursor + expected, alignment);
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    for (key, value) in metadata {
        put_string(&mut out, key);
        out.extend_from_slice(&(value.kind() as u32).to_le_bytes());
        put_value(&mut out, value);
    }
    for (t, &offset) in tensors.iter().zip(&offsets) {
        put_string(&mut out, t.name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.format.ggml_type().to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
    }
    let data_start = align_up(out.len() as u64, alignment);
    out.resize(data_start as usize, 0);
    for (t, &offset) in tensors.iter().zip(&offsets) {
        out.resize((data_start + offset) as usize, 0);
        out.extend_from_slice(t.data);
    }
    out.resize((data_start + cursor) as usize, 0);
    Ok(out)
}
