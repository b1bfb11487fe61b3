//! CPU reference codecs for the GGUF block formats.
//!
//! Every GPU kernel that reads or writes quantized data is checked against
//! these routines. Encoded bytes follow the GGUF block layouts bit-exactly;
//! see the per-format modules for field order.

mod kquant;
mod legacy;
mod tensor;

use std::fmt;
use std::str::FromStr;

use half::f16;
use thiserror::Error;

pub use legacy::q8_0_scale;
pub use tensor::{dequantize_tensor, quantize_tensor};

/// Non-linear 4-bit codebook used by IQ4_NL (upstream `kvalues_iq4nl`).
pub const IQ4_NL_CODEBOOK: [i8; 16] = [-127, -104, -83, -65, -49, -35, -22, -10, 1, 13, 25, 38, 53, 69, 89, 113];

/// Element encoding of a tensor. `F32`/`F16` are plain scalars (block length 1);
/// everything else is a block-quantized format.
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockFormat {
    F32,
    F16,
    Q4_0,
    Q4_1,
    Q5_0,
    Q5_1,
    Q8_0,
    Q2_K,
    Q4_K,
    Q6_K,
    Q1_0,
    IQ4_NL,
}

impl BlockFormat {
    pub const ALL: [BlockFormat; 12] = [
        BlockFormat::F32,
        BlockFormat::F16,
        BlockFormat::Q4_0,
        BlockFormat::Q4_1,
        BlockFormat::Q5_0,
        BlockFormat::Q5_1,
        BlockFormat::Q8_0,
        BlockFormat::Q2_K,
        BlockFormat::Q4_K,
        BlockFormat::Q6_K,
        BlockFormat::Q1_0,
        BlockFormat::IQ4_NL,
    ];

    /// Formats that `quantize_block` accepts.
    pub const QUANTIZED: [BlockFormat; 10] = [
        BlockFormat::Q4_0,
        BlockFormat::Q4_1,
        BlockFormat::Q5_0,
        BlockFormat::Q5_1,
        BlockFormat::Q8_0,
        BlockFormat::Q2_K,
        BlockFormat::Q4_K,
        BlockFormat::Q6_K,
        BlockFormat::Q1_0,
        BlockFormat::IQ4_NL,
    ];

    /// Weights per block.
    pub const fn block_len(self) -> usize {
        match self {
            BlockFormat::F32 | BlockFormat::F16 => 1,
            BlockFormat::Q4_0 | BlockFormat::Q4_1 | BlockFormat::Q5_0 | BlockFormat::Q5_1 | BlockFormat::Q8_0 | BlockFormat::IQ4_NL => 32,
            BlockFormat::Q1_0 => 128,
            BlockFormat::Q2_K | BlockFormat::Q4_K | BlockFormat::Q6_K => 256,
        }
    }

    /// Encoded size of one block in bytes.
    pub const fn block_bytes(self) -> usize {
        match self {
            BlockFormat::F32 => 4,
            BlockFormat::F16 => 2,
            BlockFormat::Q4_0 => 2 + 16,
            BlockFormat::Q4_1 => 2 + 2 + 16,
            BlockFormat::Q5_0 => 2 + 4 + 16,
            BlockFormat::Q5_1 => 2 + 2 + 4 + 16,
            BlockFormat::Q8_0 => 2 + 32,
            BlockFormat::Q2_K => 16 + 64 + 2 + 2,
            BlockFormat::Q4_K => 2 + 2 + 12 + 128,
            BlockFormat::Q6_K => 128 + 64 + 16 + 2,
            BlockFormat::Q1_0 => 2 + 16,
            BlockFormat::IQ4_NL => 2 + 16,
        }
    }

    pub const fn is_quantized(self) -> bool {
        !matches!(self, BlockFormat::F32 | BlockFormat::F16)
    }

    /// True when the format stores no per-block offset (μ = 0).
    pub const fn is_symmetric(self) -> bool {
        matches!(
            self,
            BlockFormat::Q4_0 | BlockFormat::Q5_0 | BlockFormat::Q8_0 | BlockFormat::Q6_K | BlockFormat::Q1_0 | BlockFormat::IQ4_NL
        )
    }

    /// Byte size of `elements` weights, or `None` when not a whole number of blocks.
    pub fn bytes_for(self, elements: u64) -> Option<u64> {
        let len = self.block_len() as u64;
        elements.is_multiple_of(len).then(|| elements / len * self.block_bytes() as u64)
    }

    /// `ggml_type` id used in GGUF tensor records.
    pub const fn ggml_type(self) -> u32 {
        match self {
            BlockFormat::F32 => 0,
            BlockFormat::F16 => 1,
            BlockFormat::Q4_0 => 2,
            BlockFormat::Q4_1 => 3,
            BlockFormat::Q5_0 => 6,
            BlockFormat::Q5_1 => 7,
            BlockFormat::Q8_0 => 8,
            BlockFormat::Q2_K => 10,
            BlockFormat::Q4_K => 12,
            BlockFormat::Q6_K => 14,
            BlockFormat::IQ4_NL => 20,
            BlockFormat::Q1_0 => 40,
        }
    }

    pub fn from_ggml_type(id: u32) -> Option<BlockFormat> {
        BlockFormat::ALL.into_iter().find(|f| f.ggml_type() == id)
    }

    /// Lower-case name as used by llama.cpp tooling (`q4_k`, `iq4_nl`, ...).
    pub const fn name(self) -> &'static str {
        match self {
            BlockFormat::F32 => "f32",
            BlockFormat::F16 => "f16",
            BlockFormat::Q4_0 => "q4_0",
            BlockFormat::Q4_1 => "q4_1",
            BlockFormat::Q5_0 => "q5_0",
            BlockFormat::Q5_1 => "q5_1",
            BlockFormat::Q8_0 => "q8_0",
            BlockFormat::Q2_K => "q2_k",
            BlockFormat::Q4_K => "q4_k",
            BlockFormat::Q6_K => "q6_k",
            BlockFormat::Q1_0 => "q1_0",
            BlockFormat::IQ4_NL => "iq4_nl",
        }
    }
}

impl fmt::Display for BlockFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockFormat {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        BlockFormat::ALL
            .into_iter()
            .find(|f| f.name() == lower)
            .ok_or_else(|| QuantError::UnknownFormat(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("expected {expected} values for one {format} block, got {got}")]
    WrongBlockLen { format: BlockFormat, expected: usize, got: usize },
    #[error("non-finite input value {value} at index {index}")]
    NonFiniteInput { index: usize, value: f32 },
    #[error("{0} is not a block-quantized format")]
    UnsupportedFormat(BlockFormat),
    #[error("{format} block must be {expected} bytes, got {got}")]
    MalformedBlock { format: BlockFormat, expected: usize, got: usize },
    #[error("innermost dimension {inner} is not divisible by the {format} block length {block_len}")]
    IndivisibleRow {
        format: BlockFormat,
        inner: usize,
        block_len: usize,
    },
    #[error("tensor needs {expected} bytes, got {got}")]
    ByteLenMismatch { expected: usize, got: usize },
    #[error("shape {shape:?} does not describe {len} elements")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("length mismatch: reference has {reference}, candidate has {candidate}")]
    LengthMismatch { reference: usize, candidate: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("unknown format name `{0}`")]
    UnknownFormat(String),
}

/// One encoded block together with its format.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantBlock {
    format: BlockFormat,
    bytes: Vec<u8>,
}

impl QuantBlock {
    pub fn new(format: BlockFormat, bytes: Vec<u8>) -> Result<Self, QuantError> {
        if bytes.len() != format.block_bytes() {
            return Err(QuantError::MalformedBlock {
                format,
                expected: format.block_bytes(),
                got: bytes.len(),
            });
        }
        Ok(Self { format, bytes })
    }

    pub fn format(&self) -> BlockFormat {
        self.format
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Encode exactly `format.block_len()` values into one block.
pub fn quantize_block(values: &[f32], format: BlockFormat) -> Result<QuantBlock, QuantError> {
    if !format.is_quantized() {
        return Err(QuantError::UnsupportedFormat(format));
    }
    if values.len() != format.block_len() {
        return Err(QuantError::WrongBlockLen {
            format,
            expected: format.block_len(),
            got: values.len(),
        });
    }
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(QuantError::NonFiniteInput { index, value });
    }
    let mut out = vec![0u8; format.block_bytes()];
    encode_into(values, format, &mut out);
    Ok(QuantBlock { format, bytes: out })
}

/// Decode one block to `format.block_len()` weights.
pub fn dequantize_block(block: &QuantBlock) -> Result<Vec<f32>, QuantError> {
    let mut out = vec![0.0; block.format.block_len()];
    decode_into(&block.bytes, block.format, &mut out)?;
    Ok(out)
}

/// Decode a raw block slice; used by the tensor-level codec to avoid copies.
pub fn decode_into(bytes: &[u8], format: BlockFormat, out: &mut [f32]) -> Result<(), QuantError> {
    if bytes.len() != format.block_bytes() {
        return Err(QuantError::MalformedBlock {
            format,
            expected: format.block_bytes(),
            got: bytes.len(),
        });
    }
    debug_assert_eq!(out.len(), format.block_len());
    match format {
        BlockFormat::F32 => out[0] = f32::from_le_bytes(bytes.try_into().unwrap()),
        BlockFormat::F16 => out[0] = read_f16(bytes, 0),
        BlockFormat::Q4_0 => legacy::decode_q4_0(bytes, out),
        BlockFormat::Q4_1 => legacy::decode_q4_1(bytes, out),
        BlockFormat::Q5_0 => legacy::decode_q5_0(bytes, out),
        BlockFormat::Q5_1 => legacy::decode_q5_1(bytes, out),
        BlockFormat::Q8_0 => legacy::decode_q8_0(bytes, out),
        BlockFormat::Q1_0 => legacy::decode_q1_0(bytes, out),
        BlockFormat::IQ4_NL => legacy::decode_iq4_nl(bytes, out),
        BlockFormat::Q2_K => kquant::decode_q2_k(bytes, out),
        BlockFormat::Q4_K => kquant::decode_q4_k(bytes, out),
        BlockFormat::Q6_K => kquant::decode_q6_k(bytes, out),
    }
    Ok(())
}

pub(crate) fn encode_into(values: &[f32], format: BlockFormat, out: &mut [u8]) {
    match format {
        BlockFormat::F32 => out.copy_from_slice(&values[0].to_le_bytes()),
        BlockFormat::F16 => write_f16(out, 0, values[0]),
        BlockFormat::Q4_0 => legacy::encode_q4_0(values, out),
        BlockFormat::Q4_1 => legacy::encode_q4_1(values, out),
        BlockFormat::Q5_0 => legacy::encode_q5_0(values, out),
        BlockFormat::Q5_1 => legacy::encode_q5_1(values, out),
        BlockFormat::Q8_0 => legacy::encode_q8_0(values, out),
        BlockFormat::Q1_0 => legacy::encode_q1_0(values, out),
        BlockFormat::IQ4_NL => legacy::encode_iq4_nl(values, out),
        BlockFormat::Q2_K => kquant::encode_q2_k(values, out),
        BlockFormat::Q4_K => kquant::encode_q4_k(values, out),
        BlockFormat::Q6_K => kquant::encode_q6_k(values, out),
    }
}

/// Normalized mean squared error `Σ(a−b)² / Σa²`.
///
/// An all-zero reference yields `0.0` when the candidate is also all zero and
/// `f64::INFINITY` otherwise.
pub fn nmse(reference: &[f32], candidate: &[f32]) -> Result<f64, QuantError> {
    if reference.len() != candidate.len() {
        return Err(QuantError::LengthMismatch {
            reference: reference.len(),
            candidate: candidate.len(),
        });
    }
    if reference.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for (&a, &b) in reference.iter().zip(candidate) {
        let (a, b) = (a as f64, b as f64);
        err += (a - b) * (a - b);
        norm += a * a;
    }
    if norm == 0.0 {
        return Ok(if err == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(err / norm)
}

/// Round half away from zero, computed in f64 so ties are detected exactly.
#[inline]
pub(crate) fn round_code(x: f32, scale: f32) -> i32 {
    if scale == 0.0 {
        return 0;
    }
    (x as f64 / scale as f64).round() as i32
}

#[inline]
pub(crate) fn read_f16(bytes: &[u8], at: usize) -> f32 {
    f16::from_le_bytes([bytes[at], bytes[at + 1]]).to_f32()
}

#[inline]
pub(crate) fn write_f16(bytes: &mut [u8], at: usize, value: f32) {
    bytes[at..at + 2].copy_from_slice(&f16::from_f32(value).to_le_bytes());
}

/// Round-trip through f16 (round-to-nearest-even).
#[inline]
pub(crate) fn to_f16_f32(value: f32) -> f32 {
    f16::from_f32(value).to_f32()
}

/// Signed value with the largest magnitude; the first one wins on ties.
pub(crate) fn signed_absmax(values: &[f32]) -> f32 {
    let mut best = 0.0f32;
    for &v in values {
        if v.abs() > best.abs() {
            best = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sizes_match_field_layouts() {
        let expected = [
            (BlockFormat::F32, 1, 4),
            (BlockFormat::F16, 1, 2),
            (BlockFormat::Q8_0, 32, 34),
            (BlockFormat::Q4_0, 32, 18),
            (BlockFormat::Q4_1, 32, 20),
            (BlockFormat::Q5_0, 32, 22),
            (BlockFormat::Q5_1, 32, 24),
            (BlockFormat::IQ4_NL, 32, 18),
            (BlockFormat::Q2_K, 256, 84),
            (BlockFormat::Q4_K, 256, 144),
            (BlockFormat::Q6_K, 256, 210),
            (BlockFormat::Q1_0, 128, 18),
        ];
        for (format, len, bytes) in expected {
            assert_eq!(format.block_len(), len, "{format}");
            assert_eq!(format.block_bytes(), bytes, "{format}");
        }
    }

    #[test]
    fn format_names_roundtrip() {
        for f in BlockFormat::ALL {
            assert_eq!(f.name().parse::<BlockFormat>().unwrap(), f);
            assert_eq!(BlockFormat::from_ggml_type(f.ggml_type()), Some(f));
        }
        assert!("Q4_K".parse::<BlockFormat>().is_ok());
        assert!("q3_k".parse::<BlockFormat>().is_err());
    }

    #[test]
    fn q8_0_zero_block() {
        let block = quantize_block(&[0.0; 32], BlockFormat::Q8_0).unwrap();
        assert!(block.bytes().iter().all(|&b| b == 0));
        assert_eq!(dequantize_block(&block).unwrap(), vec![0.0; 32]);
    }

    #[test]
    fn q8_0_single_peak() {
        let mut values = [0.0f32; 32];
        values[0] = 127.0;
        let block = quantize_block(&values, BlockFormat::Q8_0).unwrap();
        assert_eq!(read_f16(block.bytes(), 0), 1.0);
        assert_eq!(block.bytes()[2] as i8, 127);
        assert!(block.bytes()[3..].iter().all(|&b| b == 0));
    }

    #[test]
    fn q4_0_centered_code_decodes_to_zero() {
        let mut bytes = vec![0x88u8; 18];
        bytes[..2].copy_from_slice(&f16::from_f32(1.0).to_le_bytes());
        let block = QuantBlock::new(BlockFormat::Q4_0, bytes).unwrap();
        assert_eq!(dequantize_block(&block).unwrap(), vec![0.0; 32]);
    }

    #[test]
    fn q8_0_direct_decode() {
        let mut bytes = vec![0u8; 34];
        bytes[..2].copy_from_slice(&f16::from_f32(0.5).to_le_bytes());
        bytes[2] = 2i8 as u8;
        bytes[3] = (-4i8) as u8;
        let block = QuantBlock::new(BlockFormat::Q8_0, bytes).unwrap();
        let out = dequantize_block(&block).unwrap();
        assert_eq!(&out[..3], &[1.0, -2.0, 0.0]);
        assert!(out[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn q1_0_all_bits_set() {
        let mut bytes = vec![0xffu8; 18];
        bytes[..2].copy_from_slice(&f16::from_f32(0.25).to_le_bytes());
        let block = QuantBlock::new(BlockFormat::Q1_0, bytes).unwrap();
        assert_eq!(dequantize_block(&block).unwrap(), vec![0.25; 128]);
    }

    #[test]
    fn quantize_block_errors() {
        assert_eq!(
            quantize_block(&[0.0; 31], BlockFormat::Q8_0),
            Err(QuantError::WrongBlockLen {
                format: BlockFormat::Q8_0,
                expected: 32,
                got: 31
            })
        );
        let mut v = [0.0f32; 32];
        v[5] = f32::NAN;
        assert!(matches!(
            quantize_block(&v, BlockFormat::Q4_0),
            Err(QuantError::NonFiniteInput { index: 5, .. })
        ));
        v[5] = f32::INFINITY;
        assert!(matches!(
            quantize_block(&v, BlockFormat::Q4_0),
            Err(QuantError::NonFiniteInput { index: 5, .. })
        ));
        assert_eq!(
            quantize_block(&[1.0], BlockFormat::F32),
            Err(QuantError::UnsupportedFormat(BlockFormat::F32))
        );
        assert_eq!(
            quantize_block(&[1.0], BlockFormat::F16),
            Err(QuantError::UnsupportedFormat(BlockFormat::F16))
        );
    }

    #[test]
    fn malformed_block_rejected() {
        assert!(matches!(
            QuantBlock::new(BlockFormat::Q6_K, vec![0; 209]),
            Err(QuantError::MalformedBlock {
                expected: 210,
                got: 209,
                ..
            })
        ));
        let mut out = vec![0.0; 32];
        assert!(decode_into(&[0; 17], BlockFormat::Q4_0, &mut out).is_err());
    }

    #[test]
    fn zero_block_roundtrips_exactly_for_every_format() {
        for format in BlockFormat::QUANTIZED {
            let zeros = vec![0.0f32; format.block_len()];
            let block = quantize_block(&zeros, format).unwrap();
            let out = dequantize_block(&block).unwrap();
            assert!(out.iter().all(|&v| v == 0.0), "{format}: {out:?}");
        }
    }

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(nmse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        // (2.002 - 2)^2 / 8 with the f32 rounding of 2.002 carried through.
        let got = nmse(&[2.0, 2.0], &[2.0, 2.002]).unwrap();
        let diff = 2.002f32 as f64 - 2.0;
        assert_eq!(got, diff * diff / 8.0);
        // 2.002 is not representable in f32; the exact-decimal value is 5e-7.
        assert!((got - 5e-7).abs() / 5e-7 < 1e-3);
    }

    #[test]
    fn nmse_edge_cases() {
        assert_eq!(nmse(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(nmse(&[0.0, 0.0], &[0.0, 1e-3]).unwrap(), f64::INFINITY);
        assert_eq!(nmse(&[], &[]), Err(QuantError::EmptyInput));
        assert!(matches!(
            nmse(&[1.0], &[1.0, 2.0]),
            Err(QuantError::LengthMismatch {
                reference: 1,
                candidate: 2
            })
        ));
    }
}
