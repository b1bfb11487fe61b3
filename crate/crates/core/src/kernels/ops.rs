//! Typed entry points that specialize, compile and describe one dispatch.

use std::sync::Arc;

use crate::device::{Buffer, BufferSlice, CommandEncoder, Device, DeviceCaps, DeviceError, Dispatch, SubmissionReport};
use crate::quant::BlockFormat;
use crate::tensor::{BufferId, TensorDesc};

use super::cache::{CompiledKernel, PipelineCache};
use super::key::*;
use super::specialize::specialize;

/// One dispatch ready to be recorded: pipeline, storage bindings, uniform
/// parameter words and grid.
#[derive(Debug, Clone)]
pub struct Launch {
    pub kernel: Arc<CompiledKernel>,
    pub bindings: Vec<BufferSlice>,
    pub params: Vec<u32>,
    pub workgroups: [u32; 3],
}

impl Launch {
    pub fn category(&self) -> Category {
        self.kernel.key.op.category()
    }

    pub fn param_bytes(&self) -> Vec<u8> {
        self.params.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Dispatch reading its parameters from `params`.
    pub fn dispatch(&self, params: BufferSlice, tag: u32) -> Dispatch {
        Dispatch {
            pipeline: self.kernel.pipeline.clone(),
            bindings: self.bindings.clone(),
            params: Some(params),
            workgroups: self.workgroups,
            tag,
        }
    }
}

/// Sub-range of flat elements for [`Kernels::elementwise_range`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EwRange {
    pub n: usize,
    pub a_off: usize,
    pub b_off: usize,
    pub dst_off: usize,
}

/// The kernel library bound to one device.
pub struct Kernels {
    cache: PipelineCache,
    caps: DeviceCaps,
    tuning: TuningParams,
}

fn f32_words(v: f32) -> u32 {
    v.to_bits()
}

/// Bytes spanned by a strided tensor, rounded up to whole words.
pub fn span_bytes(t: &TensorDesc) -> u64 {
    let span = t.shape.iter().zip(&t.strides).map(|(&n, &s)| (n.max(1) - 1) * s).sum::<usize>() + 1;
    let f = t.format;
    let bytes = span.div_ceil(f.block_len()) * f.block_bytes();
    (bytes as u64).next_multiple_of(4)
}

impl Kernels {
    pub fn new(device: Arc<Device>) -> Self {
        let caps = device.caps().clone();
        Self {
            cache: PipelineCache::new(device),
            caps,
            tuning: TuningParams::default(),
        }
    }

    pub fn with_tuning(mut self, tuning: TuningParams) -> Self {
        self.tuning = tuning;
        self
    }

    /// Use the workgroup-memory reductions even when subgroups exist.
    pub fn force_portable(mut self, on: bool) -> Self {
        if on {
            self.caps.subgroups = false;
        } else {
            self.caps.subgroups = self.cache.device().caps().subgroups;
        }
        self
    }

    pub fn device(&self) -> &Arc<Device> {
        self.cache.device()
    }

    pub fn cache(&self) -> &PipelineCache {
        &self.cache
    }

    /// Capabilities used for specialization.
    pub fn caps(&self) -> &DeviceCaps {
        &self.caps
    }

    pub fn tuning(&self) -> &TuningParams {
        &self.tuning
    }

    fn compile(&self, op: OpKind, operands: &[&TensorDesc], in_place: bool) -> Result<(Arc<CompiledKernel>, [u32; 3]), KernelError> {
        let ctx = OpContext {
            op,
            operands: operands.iter().map(|t| (*t).clone()).collect(),
            caps: self.caps.clone(),
            in_place,
        };
        let spec = specialize(&ctx, Some(&self.tuning))?;
        let kernel = self.cache.get_or_compile(&spec)?;
        Ok((kernel, spec.workgroups))
    }

    fn slice(&self, t: &TensorDesc, index: usize) -> Result<BufferSlice, KernelError> {
        let b = t.binding.ok_or(KernelError::Unbound(index))?;
        if b.byte_offset % self.caps.storage_alignment as u64 != 0 {
            return Err(KernelError::MisalignedBinding(b.byte_offset));
        }
        Ok(BufferSlice {
            buffer: b.buffer,
            offset: b.byte_offset,
            size: span_bytes(t),
        })
    }

    /// `c = a · b`. `a` must be contiguous along K.
    pub fn matmul(&self, a: &TensorDesc, b: &TensorDesc, c: &TensorDesc) -> Result<Launch, KernelError> {
        let (kernel, workgroups) = self.compile(OpKind::Matmul, &[a, b, c], false)?;
        let (m, k) = (a.shape[0], a.shape[1]);
        let n = b.shape[1];
        if a.strides[1] != 1 || !a.strides[0].is_multiple_of(a.format.block_len()) {
            return Err(KernelError::ShapeMismatch(format!("matmul A strides {:?}", a.strides)));
        }
        let params = [m, n, k, a.strides[0], b.strides[0], b.strides[1], c.strides[0], c.strides[1]]
            .map(|v| v as u32)
            .to_vec();
        Ok(Launch {
            bindings: vec![self.slice(a, 0)?, self.slice(b, 1)?, self.slice(c, 2)?],
            kernel,
            params,
            workgroups,
        })
    }

    /// `y = a · x`. `a` must be contiguous along K.
    pub fn matvec(&self, a: &TensorDesc, x: &TensorDesc, y: &TensorDesc) -> Result<Launch, KernelError> {
        let (kernel, workgroups) = self.compile(OpKind::Matvec, &[a, x, y], false)?;
        let (m, k) = match a.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => (1, a.shape[0]),
        };
        let lda = if a.rank() == 2 { a.strides[0] } else { k };
        if a.strides.last() != Some(&1) || lda % a.format.block_len() != 0 {
            return Err(KernelError::ShapeMismatch(format!("matvec A strides {:?}", a.strides)));
        }
        Ok(Launch {
            bindings: vec![self.slice(a, 0)?, self.slice(x, 1)?, self.slice(y, 2)?],
            kernel,
            params: vec![m as u32, k as u32, lda as u32, 0],
            workgroups,
        })
    }

    /// Single-query attention over the first `seq_len` cache positions.
    ///
    /// `q` and `o` are `[heads, D]`; the caches are `[kv_heads, capacity, D]`.
    /// With more than one split the partial results go to `partials`
    /// (`[MAX_SPLITS * heads * (D + 2)]` f32) and a reduce launch follows.
    #[allow(clippy::too_many_arguments)]
    pub fn flash_decode(
        &self,
        q: &TensorDesc,
        k_cache: &TensorDesc,
        v_cache: &TensorDesc,
        o: &TensorDesc,
        partials: &TensorDesc,
        seq_len: usize,
        scale: f32,
        splits: Option<u32>,
    ) -> Result<Vec<Launch>, KernelError> {
        let (kernel, _) = self.compile(OpKind::FlashDecode, &[q, k_cache, v_cache, o], false)?;
        let heads = q.shape[0];
        let d = q.shape[1];
        let (kv_heads, cap) = (k_cache.shape[0], k_cache.shape[1]);
        if seq_len == 0 || seq_len > cap {
            return Err(KernelError::ShapeMismatch(format!("sequence length {seq_len} for capacity {cap}")));
        }
        let splits = splits.unwrap_or_else(|| self.tuning.flash.splits_for(seq_len));
        if splits == 0 || splits > MAX_SPLITS {
            return Err(KernelError::TuningViolatesDeviceLimits(format!(
                "splits={splits} outside 1..={MAX_SPLITS}"
            )));
        }
        let needed = splits as usize * heads * (d + 2);
        if splits > 1 && partials.elements() < needed {
            return Err(KernelError::ShapeMismatch(format!(
                "partials hold {} floats, {needed} needed",
                partials.elements()
            )));
        }
        let grid = kernel.rule.grid((heads, splits as usize), self.caps.max_workgroups_per_dim);
        let o_slice = self.slice(o, 3)?;
        let p_slice = self.slice(partials, 4)?;
        let mut launches = vec![Launch {
            bindings: vec![
                self.slice(q, 0)?,
                self.slice(k_cache, 1)?,
                self.slice(v_cache, 2)?,
                o_slice,
                p_slice,
            ],
            kernel,
            params: vec![
                seq_len as u32,
                cap as u32,
                heads as u32,
                kv_heads as u32,
                splits,
                f32_words(scale),
                0,
                0,
            ],
            workgroups: grid,
        }];
        if splits > 1 {
            let (reduce, _) = self.compile(OpKind::FlashReduce, &[q], false)?;
            let grid = reduce.rule.grid((heads, 1), self.caps.max_workgroups_per_dim);
            launches.push(Launch {
                kernel: reduce,
                bindings: vec![p_slice, o_slice],
                params: vec![heads as u32, splits, 0, 0],
                workgroups: grid,
            });
        }
        Ok(launches)
    }

    /// Multi-query attention. `q` and `o` are `[heads, q_len, D]`; the
    /// queries sit at positions `seq_len - q_len ..seq_len`.
    #[allow(clippy::too_many_arguments)]
    pub fn flash_tile(
        &self,
        q: &TensorDesc,
        k_cache: &TensorDesc,
        v_cache: &TensorDesc,
        o: &TensorDesc,
        seq_len: usize,
        scale: f32,
        causal: bool,
    ) -> Result<Launch, KernelError> {
        let (kernel, _) = self.compile(OpKind::FlashTile, &[q, k_cache, v_cache, o], false)?;
        let (heads, q_len) = (q.shape[0], q.shape[1]);
        let (kv_heads, cap) = (k_cache.shape[0], k_cache.shape[1]);
        if seq_len == 0 || seq_len > cap || q_len > seq_len {
            return Err(KernelError::ShapeMismatch(format!(
                "{q_len} queries over sequence length {seq_len} with capacity {cap}"
            )));
        }
        let grid = kernel.rule.grid((q_len, heads), self.caps.max_workgroups_per_dim);
        Ok(Launch {
            bindings: vec![
                self.slice(q, 0)?,
                self.slice(k_cache, 1)?,
                self.slice(v_cache, 2)?,
                self.slice(o, 3)?,
            ],
            kernel,
            params: vec![
                q_len as u32,
                seq_len as u32,
                cap as u32,
                heads as u32,
                kv_heads as u32,
                causal as u32,
                f32_words(scale),
                0,
            ],
            workgroups: grid,
        })
    }

    /// Whole-tensor elementwise op. `b` is required for add, mul and silu_glu.
    pub fn elementwise(
        &self,
        kind: EwKind,
        a: &TensorDesc,
        b: Option<&TensorDesc>,
        dst: &TensorDesc,
        scale: f32,
    ) -> Result<Launch, KernelError> {
        let range = EwRange {
            n: a.elements(),
            ..EwRange::default()
        };
        if dst.elements() != a.elements() {
            return Err(KernelError::ShapeMismatch(format!("{:?} into {:?}", a.shape, dst.shape)));
        }
        self.elementwise_range(kind, a, b, dst, range, scale)
    }

    /// Elementwise op over flat element ranges of its operands.
    pub fn elementwise_range(
        &self,
        kind: EwKind,
        a: &TensorDesc,
        b: Option<&TensorDesc>,
        dst: &TensorDesc,
        range: EwRange,
        scale: f32,
    ) -> Result<Launch, KernelError> {
        let op = OpKind::Elementwise(kind);
        let mut operands = vec![a];
        match (kind.binary(), b) {
            (true, Some(b)) => operands.push(b),
            (true, None) => return Err(KernelError::ShapeMismatch(format!("{op} needs a second operand"))),
            (false, _) => {}
        }
        operands.push(dst);
        let (kernel, _) = self.compile(op, &operands, false)?;
        let fits = |t: &TensorDesc, off: usize| off + range.n <= t.elements();
        if range.n == 0 || !fits(a, range.a_off) || !fits(dst, range.dst_off) || b.is_some_and(|b| !fits(b, range.b_off)) {
            return Err(KernelError::ShapeMismatch(format!("range {range:?} exceeds an operand")));
        }
        if dst.format == BlockFormat::F16 && !range.dst_off.is_multiple_of(2) {
            return Err(KernelError::ShapeMismatch(format!(
                "f16 destination offset {} must be even",
                range.dst_off
            )));
        }
        let a_slice = self.slice(a, 0)?;
        let b_slice = match b {
            Some(b) if kind.binary() => self.slice(b, 1)?,
            _ => a_slice,
        };
        let grid = kernel.rule.grid((range.n, 0), self.caps.max_workgroups_per_dim);
        Ok(Launch {
            bindings: vec![a_slice, b_slice, self.slice(dst, 2)?],
            kernel,
            params: vec![
                range.n as u32,
                range.a_off as u32,
                range.b_off as u32,
                range.dst_off as u32,
                f32_words(scale),
                0,
                0,
                0,
            ],
            workgroups: grid,
        })
    }

    pub fn rms_norm(&self, x: &TensorDesc, w: &TensorDesc, y: &TensorDesc, eps: f32) -> Result<Launch, KernelError> {
        if !(eps > 0.0) {
            return Err(KernelError::EpsNonPositive(eps));
        }
        if x.shape != y.shape {
            return Err(KernelError::ShapeMismatch(format!("{:?} into {:?}", x.shape, y.shape)));
        }
        let (kernel, workgroups) = self.compile(OpKind::RmsNorm, &[x, w, y], false)?;
        Ok(Launch {
            bindings: vec![self.slice(x, 0)?, self.slice(w, 1)?, self.slice(y, 2)?],
            kernel,
            params: vec![x.outer_rows() as u32, x.inner_dim() as u32, f32_words(eps), 0],
            workgroups,
        })
    }

    pub fn softmax_row(&self, x: &TensorDesc, y: &TensorDesc) -> Result<Launch, KernelError> {
        if x.shape != y.shape {
            return Err(KernelError::ShapeMismatch(format!("{:?} into {:?}", x.shape, y.shape)));
        }
        let (kernel, workgroups) = self.compile(OpKind::SoftmaxRow, &[x, y], false)?;
        Ok(Launch {
            bindings: vec![self.slice(x, 0)?, self.slice(y, 1)?],
            kernel,
            params: vec![x.outer_rows() as u32, x.inner_dim() as u32, 0, 0],
            workgroups,
        })
    }

    /// Rotary embedding of `x: [T, H, D]` with one u32 position per token.
    /// Writes `y` when given, otherwise rotates `x` in place.
    pub fn rope(&self, x: &TensorDesc, positions: BufferSlice, y: Option<&TensorDesc>, theta_base: f32) -> Result<Launch, KernelError> {
        let in_place = y.is_none();
        let out = y.unwrap_or(x);
        if out.shape != x.shape {
            return Err(KernelError::ShapeMismatch(format!("{:?} into {:?}", x.shape, out.shape)));
        }
        let (kernel, workgroups) = self.compile(OpKind::Rope, &[x, out], in_place)?;
        if positions.size < 4 * x.shape[0] as u64 {
            return Err(KernelError::ShapeMismatch(format!(
                "{} bytes of positions for {} tokens",
                positions.size, x.shape[0]
            )));
        }
        let mut bindings = vec![self.slice(x, 0)?, positions];
        if let Some(y) = y {
            bindings.push(self.slice(y, 2)?);
        }
        Ok(Launch {
            bindings,
            kernel,
            params: vec![x.shape[0] as u32, x.shape[1] as u32, x.shape[2] as u32, f32_words(theta_base)],
            workgroups,
        })
    }

    /// Quantize the rows of `src: [rows, width]` into q8_0 blocks of `dst`,
    /// row `r` starting at block `dst_block + r * dst_row_stride`.
    pub fn quantize_kv(&self, src: &TensorDesc, dst: &TensorDesc, dst_block: usize, dst_row_stride: usize) -> Result<Launch, KernelError> {
        let rows_desc = TensorDesc::contiguous(&[src.outer_rows(), src.inner_dim()], dst.format);
        let (kernel, workgroups) = self.compile(OpKind::QuantizeKv, &[src, &rows_desc], false)?;
        let bpr = src.inner_dim() / 32;
        let rows = src.outer_rows();
        let last = dst_block + (rows - 1) * dst_row_stride + bpr;
        if last * 32 > dst.elements() {
            return Err(KernelError::ShapeMismatch(format!(
                "writing blocks up to {last} of a {}-element destination",
                dst.elements()
            )));
        }
        let src_stride = if src.rank() >= 2 {
            src.strides[src.rank() - 2]
        } else {
            src.inner_dim()
        };
        Ok(Launch {
            bindings: vec![self.slice(src, 0)?, self.slice(dst, 1)?],
            kernel,
            params: [rows, bpr, 0, src_stride, dst_block, dst_row_stride, 0, 0]
                .map(|v| v as u32)
                .to_vec(),
            workgroups,
        })
    }
}

/// Record `launches` into one pass, with parameters in a fresh buffer, and
/// wait for completion. Meant for tests and verification runs; the runtime
/// uses its parameter arena instead.
pub fn run_launches(device: &Device, launches: &[Launch]) -> Result<SubmissionReport, DeviceError> {
    let stride = device.caps().uniform_alignment as u64;
    let params = device.create_buffer(stride * launches.len().max(1) as u64)?;
    let mut encoder = CommandEncoder::new();
    encoder.begin_compute_pass();
    for (i, l) in launches.iter().enumerate() {
        let bytes = l.param_bytes();
        let offset = i as u64 * stride;
        device.write_buffer(params.id, offset, &bytes)?;
        encoder.dispatch(l.dispatch(params.slice(offset, bytes.len() as u64), i as u32));
    }
    encoder.end_compute_pass();
    let report = device.submit(vec![encoder.finish()])?.wait();
    device.destroy_buffer(params);
    report
}

/// Copy `bytes` into a new buffer, padded with zeros to whole words.
pub fn upload(device: &Device, bytes: &[u8]) -> Result<Buffer, DeviceError> {
    let size = (bytes.len() as u64).next_multiple_of(4).max(4);
    let buffer = device.create_buffer(size)?;
    let mut padded = bytes.to_vec();
    padded.resize(size as usize, 0);
    device.write_buffer(buffer.id, 0, &padded)?;
    Ok(buffer)
}

/// Read `count` f32 values starting at byte `offset`.
pub fn download_f32(device: &Device, buffer: BufferId, offset: u64, count: usize) -> Result<Vec<f32>, DeviceError> {
    let bytes = device.read_buffer(BufferSlice {
        buffer,
        offset,
        size: 4 * count as u64,
    })?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Read `count` f16 values starting at byte `offset`, widened to f32.
pub fn download_f16(device: &Device, buffer: BufferId, offset: u64, count: usize) -> Result<Vec<f32>, DeviceError> {
    let bytes = device.read_buffer(BufferSlice {
        buffer,
        offset,
        size: (2 * count as u64).next_multiple_of(4),
    })?;
    Ok(bytes
        .chunks_exact(2)
        .take(count)
        .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
        .collect())
}
