//! Graph execution: every buffer is allocated up front, dispatches are
//! batched into passes and submissions, and parameters go through the
//! fenced arena.

use std::sync::Arc;

use thiserror::Error;

use crate::device::{Buffer, BufferSlice, CommandEncoder, Device, DeviceError, Fence, ReadbackFuture};
use crate::kernels::{Category, KernelError, Kernels, Launch};
use crate::quant::{dequantize_tensor, quantize_tensor, BlockFormat, QuantError};
use crate::tensor::TensorDesc;

use super::arena::{ArenaError, ParamArena};
use super::breakdown::RunTiming;
use super::config::{ArenaConfig, Batching};
use super::graph::{GraphError, Node, NodeOp, OpGraph, TensorId, TensorKind};
use super::plan::{plan_memory, MemoryPlan, PlanError, PlanLimits};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no pipeline for node {node}: {reason}")]
    PipelineMissing { node: usize, reason: String },
    #[error("node {node}: {source}")]
    Kernel { node: usize, source: KernelError },
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("tensor {0:?} has no storage that survives execution")]
    UnplannedTensor(TensorId),
    #[error("tensor {0:?} is not an external tensor")]
    NotExternal(TensorId),
    #[error("node {0} cannot change its operation kind")]
    OpKindChanged(usize),
    #[error("batching sizes must be positive")]
    BadBatching,
}

/// What one [`Executor::execute`] recorded.
#[derive(Debug, Clone, Default)]
pub struct ExecReport {
    pub dispatches: usize,
    pub passes: usize,
    pub submissions: usize,
    /// One fence per submission, with the category of each of its
    /// dispatches in order.
    pub fences: Vec<(Fence, Vec<Category>)>,
}

impl ExecReport {
    /// Wait for every submission and attribute kernel time to categories.
    pub fn timing(&self) -> Result<RunTiming, DeviceError> {
        let mut timing = RunTiming::default();
        for (fence, cats) in &self.fences {
            let report = fence.wait()?;
            if report.dispatch_nanos.len() == cats.len() && !cats.is_empty() {
                timing
                    .samples
                    .extend(cats.iter().zip(&report.dispatch_nanos).map(|(&c, &(_, ns))| (c, ns)));
            } else if !cats.is_empty() {
                timing.coarse = true;
                let each = report.wall_nanos / cats.len() as u64;
                timing.samples.extend(cats.iter().map(|&c| (c, each)));
            }
        }
        Ok(timing)
    }

    /// Wait for the last submission.
    pub fn wait(&self) -> Result<(), DeviceError> {
        match self.fences.last() {
            Some((f, _)) => f.wait().map(|_| ()),
            None => Ok(()),
        }
    }
}

/// Pending readback of one tensor.
pub struct Readback {
    future: ReadbackFuture,
    desc: TensorDesc,
    len: usize,
}

impl Readback {
    pub fn wait(self) -> Result<Vec<f32>, ExecError> {
        let mut bytes = self.future.wait()?;
        bytes.truncate(self.len);
        let contiguous = TensorDesc::contiguous(&self.desc.shape, self.desc.format);
        Ok(dequantize_tensor(&bytes, &contiguous)?)
    }
}

/// Executes one graph repeatedly on statically allocated memory.
pub struct Executor {
    kernels: Arc<Kernels>,
    graph: OpGraph,
    plan: MemoryPlan,
    batching: Batching,
    arena: ParamArena,
    intermediate: Option<Buffer>,
    partials: Option<Buffer>,
    externals: Vec<Option<Buffer>>,
    bound: Vec<TensorDesc>,
    partials_desc: TensorDesc,
    launches: Vec<Vec<Launch>>,
}

impl Executor {
    /// Plan memory, allocate every buffer and compile every pipeline.
    pub fn new(kernels: Arc<Kernels>, graph: OpGraph, batching: Batching, arena: ArenaConfig) -> Result<Self, ExecError> {
        if batching.ops_per_pass == 0 || batching.passes_per_submit == 0 {
            return Err(ExecError::BadBatching);
        }
        let device = kernels.device().clone();
        let caps = device.caps();
        let limits = PlanLimits {
            max_buffer_size: caps.max_buffer_size,
            alignment: caps.storage_alignment as u64,
        };
        let plan = plan_memory(&graph, &limits)?;
        let arena = ParamArena::new(&device, arena.slot_bytes, arena.slot_count)?;
        let intermediate = match plan.total {
            0 => None,
            n => Some(device.create_buffer(n)?),
        };
        let partials = match plan.partials_bytes {
            0 => None,
            n => Some(device.create_buffer(n)?),
        };
        let mut externals = vec![None; graph.tensors().len()];
        for &(id, bytes) in &plan.external_bytes {
            externals[id.0] = Some(device.create_buffer(bytes)?);
        }
        let mut bound: Vec<TensorDesc> = graph.tensors().iter().map(|t| t.desc.clone()).collect();
        for (i, t) in graph.tensors().iter().enumerate() {
            let root = graph.root(TensorId(i));
            let binding = match graph.tensors()[root.0].kind {
                TensorKind::External => externals[root.0].map(|b| (b.id, 0)),
                _ => match (plan.placement(root), intermediate) {
                    (Some(p), Some(buf)) => Some((buf.id, p.offset)),
                    _ => None,
                },
            };
            if let Some((buffer, offset)) = binding {
                bound[i] = t.desc.clone().with_binding(buffer, offset);
            }
        }
        let partials_desc = match partials {
            Some(b) => TensorDesc::contiguous(&[(b.size / 4) as usize], BlockFormat::F32).with_binding(b.id, 0),
            None => TensorDesc::contiguous(&[1], BlockFormat::F32),
        };
        let mut exec = Self {
            kernels,
            graph,
            plan,
            batching,
            arena,
            intermediate,
            partials,
            externals,
            bound,
            partials_desc,
            launches: Vec::new(),
        };
        exec.launches = (0..exec.graph.nodes().len())
            .map(|i| exec.build(i, &exec.graph.nodes()[i]))
            .collect::<Result<_, _>>()?;
        Ok(exec)
    }

    pub fn device(&self) -> &Arc<Device> {
        self.kernels.device()
    }

    pub fn kernels(&self) -> &Arc<Kernels> {
        &self.kernels
    }

    pub fn graph(&self) -> &OpGraph {
        &self.graph
    }

    pub fn plan(&self) -> &MemoryPlan {
        &self.plan
    }

    pub fn batching(&self) -> Batching {
        self.batching
    }

    pub fn set_batching(&mut self, batching: Batching) -> Result<(), ExecError> {
        if batching.ops_per_pass == 0 || batching.passes_per_submit == 0 {
            return Err(ExecError::BadBatching);
        }
        self.batching = batching;
        Ok(())
    }

    /// Launches of node `i`, in dispatch order.
    pub fn launches(&self, node: usize) -> &[Launch] {
        &self.launches[node]
    }

    fn build(&self, index: usize, node: &Node) -> Result<Vec<Launch>, ExecError> {
        let k = &self.kernels;
        let d = |i: usize| &self.bound[node.inputs[i].0];
        let out = &self.bound[node.output.0];
        let wrap = |e: KernelError| match e {
            KernelError::Compile(c) => ExecError::PipelineMissing {
                node: index,
                reason: c.to_string(),
            },
            source => ExecError::Kernel { node: index, source },
        };
        let one = |r: Result<Launch, KernelError>| r.map(|l| vec![l]).map_err(wrap);
        match node.op {
            NodeOp::Matmul => one(k.matmul(d(0), d(1), out)),
            NodeOp::Matvec => one(k.matvec(d(0), d(1), out)),
            NodeOp::FlashDecode { seq_len, scale, splits } => k
                .flash_decode(d(0), d(1), d(2), out, &self.partials_desc, seq_len, scale, Some(splits))
                .map_err(wrap),
            NodeOp::FlashTile { seq_len, scale, causal } => one(k.flash_tile(d(0), d(1), d(2), out, seq_len, scale, causal)),
            NodeOp::Elementwise { kind, scale } => one(k.elementwise(kind, d(0), kind.binary().then(|| d(1)), out, scale)),
            NodeOp::ElementwiseRange { kind, scale, range } => {
                one(k.elementwise_range(kind, d(0), kind.binary().then(|| d(1)), out, range, scale))
            }
            NodeOp::RmsNorm { eps } => one(k.rms_norm(d(0), d(1), out, eps)),
            NodeOp::Rope { theta_base } => {
                let pos = d(1);
                let b = pos.binding.ok_or(ExecError::Kernel {
                    node: index,
                    source: KernelError::Unbound(1),
                })?;
                let slice = BufferSlice {
                    buffer: b.buffer,
                    offset: b.byte_offset,
                    size: 4 * pos.elements() as u64,
                };
                one(k.rope(d(0), slice, Some(out), theta_base))
            }
            NodeOp::SoftmaxRow => one(k.softmax_row(d(0), out)),
            NodeOp::QuantizeKv { dst_block, dst_row_stride } => one(k.quantize_kv(d(0), out, dst_block, dst_row_stride)),
        }
    }

    /// Replace the scalar parameters of node `index` (sequence length, KV
    /// write position, ...). The op kind must stay the same.
    pub fn set_op(&mut self, index: usize, op: NodeOp) -> Result<(), ExecError> {
        let node = self.graph.nodes().get(index).ok_or(ExecError::OpKindChanged(index))?;
        if std::mem::discriminant(&node.op) != std::mem::discriminant(&op) || node.op.kind() != op.kind() {
            return Err(ExecError::OpKindChanged(index));
        }
        let mut node = node.clone();
        node.op = op;
        let launches = self.build(index, &node)?;
        self.graph.node_mut(index).expect("index checked").op = op;
        self.launches[index] = launches;
        Ok(())
    }

    fn external(&self, id: TensorId) -> Result<(Buffer, &TensorDesc), ExecError> {
        let info = self.graph.tensor(id)?;
        match (info.kind, self.externals[id.0]) {
            (TensorKind::External, Some(b)) => Ok((b, &info.desc)),
            _ => Err(ExecError::NotExternal(id)),
        }
    }

    /// Encode `values` in the tensor's format and upload them.
    pub fn write_tensor(&self, id: TensorId, values: &[f32]) -> Result<(), ExecError> {
        let (buffer, desc) = self.external(id)?;
        let (bytes, _) = quantize_tensor(values, &desc.shape, desc.format)?;
        self.write_padded(buffer, &bytes)
    }

    /// Upload raw bytes (already encoded) to an external tensor.
    pub fn write_bytes(&self, id: TensorId, bytes: &[u8]) -> Result<(), ExecError> {
        let (buffer, _) = self.external(id)?;
        self.write_padded(buffer, bytes)
    }

    /// Upload u32 words, e.g. token positions.
    pub fn write_u32(&self, id: TensorId, words: &[u32]) -> Result<(), ExecError> {
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.write_bytes(id, &bytes)
    }

    fn write_padded(&self, buffer: Buffer, bytes: &[u8]) -> Result<(), ExecError> {
        if bytes.len().is_multiple_of(4) {
            self.device().write_buffer(buffer.id, 0, bytes)?;
        } else {
            let mut padded = bytes.to_vec();
            padded.resize(bytes.len().next_multiple_of(4), 0);
            self.device().write_buffer(buffer.id, 0, &padded)?;
        }
        Ok(())
    }

    /// Record and submit the whole graph. Only parameter-slot reuse can
    /// wait on the device; nothing else synchronizes.
    pub fn execute(&mut self) -> Result<ExecReport, ExecError> {
        let device = self.kernels.device().clone();
        let per_pass = self.batching.ops_per_pass;
        let per_submit = (per_pass * self.batching.passes_per_submit).min(self.arena.slot_count() as usize);
        let mut report = ExecReport::default();
        let mut encoder = CommandEncoder::new();
        let mut cats = Vec::new();
        let (mut in_pass, mut in_submit) = (0usize, 0usize);
        let mut tag = 0u32;
        for &node in &self.plan.order {
            for launch in &self.launches[node] {
                if in_pass == 0 {
                    encoder.begin_compute_pass();
                }
                let bytes = launch.param_bytes();
                let w = self.arena.write(&device, &bytes)?;
                encoder.dispatch(launch.dispatch(self.arena.slice(w, bytes.len()), tag));
                cats.push(launch.category());
                tag += 1;
                in_pass += 1;
                in_submit += 1;
                report.dispatches += 1;
                if in_pass == per_pass || in_submit == per_submit {
                    encoder.end_compute_pass();
                    report.passes += 1;
                    in_pass = 0;
                }
                if in_submit == per_submit {
                    let enc = std::mem::take(&mut encoder);
                    submit(&mut self.arena, &device, enc, &mut cats, &mut report)?;
                    in_submit = 0;
                }
            }
        }
        if in_pass > 0 {
            encoder.end_compute_pass();
            report.passes += 1;
        }
        if in_submit > 0 {
            submit(&mut self.arena, &device, encoder, &mut cats, &mut report)?;
        }
        Ok(report)
    }

    /// Start reading a tensor back. Externals are always readable;
    /// intermediates only when marked as graph outputs.
    pub fn readback(&self, id: TensorId) -> Result<Readback, ExecError> {
        let info = self.graph.tensor(id).map_err(|_| ExecError::UnplannedTensor(id))?;
        let root = self.graph.root(id);
        let retained = self.graph.outputs().iter().any(|&o| self.graph.root(o) == root);
        let is_external = self.graph.tensors()[root.0].kind == TensorKind::External;
        if !is_external && !retained {
            return Err(ExecError::UnplannedTensor(id));
        }
        let desc = &self.bound[id.0];
        let b = desc.binding.ok_or(ExecError::UnplannedTensor(id))?;
        let len = desc.byte_size();
        let slice = BufferSlice {
            buffer: b.buffer,
            offset: b.byte_offset,
            size: (len as u64).next_multiple_of(4),
        };
        Ok(Readback {
            future: self.device().read_buffer_async(slice),
            desc: info.desc.clone(),
            len,
        })
    }

    /// Blocking [`Executor::readback`].
    pub fn read(&self, id: TensorId) -> Result<Vec<f32>, ExecError> {
        self.readback(id)?.wait()
    }

    /// Raw bytes of a readable tensor.
    pub fn read_bytes(&self, id: TensorId) -> Result<Vec<u8>, ExecError> {
        let r = self.readback(id)?;
        let mut bytes = r.future.wait()?;
        bytes.truncate(r.len);
        Ok(bytes)
    }

    /// Release every device buffer.
    pub fn destroy(self) {
        let device = self.kernels.device().clone();
        for b in self.externals.into_iter().flatten().chain(self.intermediate).chain(self.partials) {
            device.destroy_buffer(b);
        }
        self.arena.destroy(&device);
    }
}

fn submit(
    arena: &mut ParamArena,
    device: &Device,
    encoder: CommandEncoder,
    cats: &mut Vec<Category>,
    report: &mut ExecReport,
) -> Result<(), ExecError> {
    let fence = device.submit(vec![encoder.finish()])?;
    arena.attach(&fence);
    report.fences.push((fence, std::mem::take(cats)));
    report.submissions += 1;
    Ok(())
}
