//! Logical tensor descriptors shared by the codecs, kernels and runtime.

use crate::quant::BlockFormat;

/// Opaque id of a device buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub u32);

/// Where a tensor lives on the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Binding {
    pub buffer: BufferId,
    pub byte_offset: u64,
}

/// Shape is outermost-first (row-major); strides are in elements.
///
/// Quantized tensors are always contiguous along the innermost dimension, so
/// for them only the outer strides are meaningful.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorDesc {
    pub shape: Vec<usize>,
    pub strides: Vec<usize>,
    pub format: BlockFormat,
    pub binding: Option<Binding>,
}

impl TensorDesc {
    /// Contiguous row-major tensor with no device binding.
    pub fn contiguous(shape: &[usize], format: BlockFormat) -> Self {
        Self {
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            format,
            binding: None,
        }
    }

    pub fn with_binding(mut self, buffer: BufferId, byte_offset: u64) -> Self {
        self.binding = Some(Binding { buffer, byte_offset });
        self
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn inner_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn outer_rows(&self) -> usize {
        self.elements() / self.inner_dim().max(1)
    }

    /// Encoded size for a contiguous tensor of this shape and format.
    pub fn byte_size(&self) -> usize {
        let f = self.format;
        self.elements() / f.block_len() * f.block_bytes()
    }

    pub fn is_contiguous(&self) -> bool {
        self.strides == contiguous_strides(&self.shape)
    }
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
