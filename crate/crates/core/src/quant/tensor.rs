use super::{decode_into, encode_into, BlockFormat, QuantError};
use crate::tensor::TensorDesc;

/// Encode a row-major tensor block by block along its innermost dimension.
pub fn quantize_tensor(data: &[f32], shape: &[usize], format: BlockFormat) -> Result<(Vec<u8>, TensorDesc), QuantError> {
    let elements: usize = shape.iter().product();
    if elements != data.len() || shape.is_empty() {
        return Err(QuantError::ShapeMismatch {
            shape: shape.to_vec(),
            len: data.len(),
        });
    }
    let block_len = format.block_len();
    let inner = *shape.last().unwrap();
    if !inner.is_multiple_of(block_len) {
        return Err(QuantError::IndivisibleRow { format, inner, block_len });
    }
    if format.is_quantized() {
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(QuantError::NonFiniteInput { index, value });
        }
    }
    let block_bytes = format.block_bytes();
    let mut out = vec![0u8; elements / block_len * block_bytes];
    for (values, dst) in data.chunks_exact(block_len).zip(out.chunks_exact_mut(block_bytes)) {
        encode_into(values, format, dst);
    }
    Ok((out, TensorDesc::contiguous(shape, format)))
}

/// Decode a contiguous tensor described by `desc` back to row-major f32.
pub fn dequantize_tensor(bytes: &[u8], desc: &TensorDesc) -> Result<Vec<f32>, QuantError> {
    let format = desc.format;
    let block_len = format.block_len();
    let inner = desc.inner_dim();
    if !inner.is_multiple_of(block_len) {
        return Err(QuantError::IndivisibleRow { format, inner, block_len });
    }
    let expected = desc.byte_size();
    if bytes.len() != expected {
        return Err(QuantError::ByteLenMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let mut out = vec![0.0f32; desc.elements()];
    for (block, dst) in bytes.chunks_exact(format.block_bytes()).zip(out.chunks_exact_mut(block_len)) {
        decode_into(block, format, dst)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_row_q4_0() {
        let (bytes, desc) = quantize_tensor(&[0.0; 32], &[1, 32], BlockFormat::Q4_0).unwrap();
        assert_eq!(bytes.len(), 18);
        assert_eq!(dequantize_tensor(&bytes, &desc).unwrap(), vec![0.0; 32]);
    }

    #[test]
    fn q6_k_size_is_blocks_times_bytes() {
        let data: Vec<f32> = (0..1024).map(|i| (i as f32 * 0.37).sin()).collect();
        let (bytes, desc) = quantize_tensor(&data, &[4, 256], BlockFormat::Q6_K).unwrap();
        assert_eq!(bytes.len(), 4 * 210);
        assert_eq!(dequantize_tensor(&bytes, &desc).unwrap().len(), 1024);
    }

    #[test]
    fn q2_k_rejects_short_rows() {
        let err = quantize_tensor(&[0.0; 128], &[2, 64], BlockFormat::Q2_K).unwrap_err();
        assert_eq!(
            err,
            QuantError::IndivisibleRow {
                format: BlockFormat::Q2_K,
                inner: 64,
                block_len: 256
            }
        );
    }

    #[test]
    fn plain_formats_pass_through() {
        let data = [1.5f32, -2.25, 0.0, 65504.0];
        let (bytes, desc) = quantize_tensor(&data, &[4], BlockFormat::F32).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(dequantize_tensor(&bytes, &desc).unwrap(), data);
        let (bytes, desc) = quantize_tensor(&data, &[2, 2], BlockFormat::F16).unwrap();
        assert_eq!(bytes.len(), 8);
        assert_eq!(dequantize_tensor(&bytes, &desc).unwrap(), data);
    }

    #[test]
    fn byte_length_checked() {
        let desc = TensorDesc::contiguous(&[1, 32], BlockFormat::Q8_0);
        assert!(matches!(
            dequantize_tensor(&[0; 33], &desc),
            Err(QuantError::ByteLenMismatch { expected: 34, got: 33 })
        ));
    }
}
