use crate::device::Bindings;
use crate::quant::{decode_into, BlockFormat};

/// Per-element reads from a possibly quantized binding, decoding one block
/// at a time. Decoding follows the same operation order as the WGSL
/// fragments, so values are identical to element-wise extraction.
pub(crate) struct BlockReader {
    binding: usize,
    format: BlockFormat,
    current: Option<usize>,
    bytes: Vec<u8>,
    values: Vec<f32>,
}

impl BlockReader {
    pub fn new(binding: usize, format: BlockFormat) -> Self {
        Self {
            binding,
            format,
            current: None,
            bytes: vec![0; format.block_bytes()],
            values: vec![0.0; format.block_len()],
        }
    }

    #[inline]
    pub fn get(&mut self, mem: &Bindings<'_>, elem: usize) -> f32 {
        match self.format {
            BlockFormat::F32 => mem.ld_f32(self.binding, elem),
            BlockFormat::F16 => mem.ld_f16(self.binding, elem),
            f => {
                let blk = elem / f.block_len();
                if self.current != Some(blk) {
                    let base = blk * f.block_bytes();
                    for (i, b) in self.bytes.iter_mut().enumerate() {
                        *b = mem.ld_byte(self.binding, base + i);
                    }
                    decode_into(&self.bytes, f, &mut self.values).expect("block sized buffers");
                    self.current = Some(blk);
                }
                self.values[elem % f.block_len()]
            }
        }
    }
}

/// Element `i` of an f32 or packed-f16 binding.
#[inline]
pub(crate) fn load_plain(mem: &Bindings<'_>, binding: usize, f16: bool, i: usize) -> f32 {
    if f16 {
        mem.ld_f16(binding, i)
    } else {
        mem.ld_f32(binding, i)
    }
}

/// Linear workgroup index for grids folded into x and y.
#[inline]
pub(crate) fn linear_group(mem: &Bindings<'_>, wg: [u32; 3]) -> usize {
    wg[1] as usize * mem.num_workgroups()[0] as usize + wg[0] as usize
}

/// Tree reduction over a power-of-two slice, as in the workgroup-memory arm.
fn tree(values: &mut [f32], op: fn(f32, f32) -> f32) -> f32 {
    let mut s = values.len() / 2;
    while s > 0 {
        for l in 0..s {
            values[l] = op(values[l], values[l + s]);
        }
        s /= 2;
    }
    values[0]
}

/// Workgroup reduction of one value per invocation. With `subgroup` set,
/// each subgroup reduces its lanes and the per-subgroup results are folded
/// in order, as in the subgroup arm.
pub(crate) fn wg_reduce(values: &mut [f32], subgroup: Option<usize>, op: fn(f32, f32) -> f32) -> f32 {
    match subgroup {
        None => tree(values, op),
        Some(sg) => {
            let mut partials = values.chunks_mut(sg).map(|c| tree(c, op));
            let first = partials.next().unwrap_or(0.0);
            partials.fold(first, op)
        }
    }
}

pub(crate) fn add(a: f32, b: f32) -> f32 {
    a + b
}

pub(crate) fn max(a: f32, b: f32) -> f32 {
    a.max(b)
}

/// Packed f16 pair, low half first, rounded to nearest even.
#[inline]
pub(crate) fn pack_f16(lo: f32, hi: f32) -> u32 {
    half::f16::from_f32(lo).to_bits() as u32 | ((half::f16::from_f32(hi).to_bits() as u32) << 16)
}
