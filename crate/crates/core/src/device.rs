//! A WebGPU-model compute device.
//!
//! The device keeps the WebGPU execution model: buffers are created up front,
//! work is recorded into command buffers made of compute passes, submissions
//! complete asynchronously and signal fences, and host reads are
//! asynchronous map operations ordered after earlier submissions.
//!
//! The adapter behind it is a software one. Pipelines are created from WGSL
//! that is parsed and validated by naga against the negotiated capabilities,
//! and each pipeline carries a [`ComputeProgram`] that executes the same
//! workgroup algorithm on the queue's worker thread over flat `u32` buffers.

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use thiserror::Error;

use crate::shaderpp::{Preprocessed, SourceLoc};
use crate::tensor::BufferId;

/// Limits and features an adapter can offer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterProfile {
    pub name: String,
    pub max_workgroup_size: u32,
    pub max_workgroup_dims: [u32; 3],
    pub max_workgroups_per_dim: u32,
    pub shared_memory_bytes: u32,
    pub max_buffer_size: u64,
    pub f16: bool,
    pub subgroups: bool,
    pub subgroup_size: (u32, u32),
    pub timestamps: bool,
}

impl AdapterProfile {
    pub fn software() -> Self {
        Self {
            name: "qkern software adapter".into(),
            max_workgroup_size: 256,
            max_workgroup_dims: [256, 256, 64],
            max_workgroups_per_dim: 65535,
            shared_memory_bytes: 32 << 10,
            max_buffer_size: 1 << 30,
            f16: true,
            subgroups: true,
            subgroup_size: (32, 32),
            timestamps: true,
        }
    }

    /// The software adapter with optional features switched off.
    pub fn software_baseline() -> Self {
        Self {
            name: "qkern software adapter (baseline)".into(),
            f16: false,
            subgroups: false,
            timestamps: false,
            ..Self::software()
        }
    }
}

/// Feature request for [`init_device`]. Required features fail device
/// creation when missing; preferred ones are enabled only when offered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Want {
    #[default]
    No,
    IfAvailable,
    Required,
}

#[derive(Debug, Clone, Default)]
pub struct DeviceOptions {
    pub f16: Want,
    pub subgroups: Want,
    pub timestamps: Want,
    /// Count out-of-bounds buffer accesses as validation errors.
    pub validation: bool,
}

impl DeviceOptions {
    /// Everything the adapter offers, validation off.
    pub fn best_available() -> Self {
        Self {
            f16: Want::IfAvailable,
            subgroups: Want::IfAvailable,
            timestamps: Want::IfAvailable,
            validation: false,
        }
    }

    pub fn with_validation(mut self, on: bool) -> Self {
        self.validation = on;
        self
    }
}

/// Negotiated limits and features, fixed at device creation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceCaps {
    pub adapter: String,
    pub max_workgroup_size: u32,
    pub max_workgroup_dims: [u32; 3],
    pub max_workgroups_per_dim: u32,
    pub shared_memory_bytes: u32,
    pub subgroups: bool,
    pub subgroup_size: (u32, u32),
    pub f16: bool,
    pub timestamps: bool,
    pub max_buffer_size: u64,
    pub validation: bool,
    pub uniform_alignment: u32,
    pub storage_alignment: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("no adapter available")]
    NoAdapter,
    #[error("feature `{0}` is not available on this adapter")]
    FeatureUnavailable(&'static str),
    #[error("buffer of {size} bytes exceeds the {max}-byte limit")]
    BufferTooLarge { size: u64, max: u64 },
    #[error("unknown or destroyed buffer {0:?}")]
    UnknownBuffer(BufferId),
    #[error("range {offset}+{size} is outside buffer {buffer:?} ({len} bytes)")]
    OutOfRange {
        buffer: BufferId,
        offset: u64,
        size: u64,
        len: u64,
    },
    #[error("offset and size must be multiples of 4 (got {offset}, {size})")]
    Unaligned { offset: u64, size: u64 },
    #[error("map of buffer {0:?} failed: {1}")]
    MapFailed(BufferId, String),
    #[error("binding offset {offset} is not a multiple of {alignment}")]
    MisalignedBinding { offset: u64, alignment: u32 },
    #[error("dispatch of {groups:?} workgroups exceeds the per-dimension limit {max}")]
    TooManyWorkgroups { groups: [u32; 3], max: u32 },
    #[error("pipeline `{0}` expects {1} bindings, got {2}")]
    BindingCount(String, usize, usize),
    #[error("device lost: {0}")]
    DeviceLost(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{label}: {}{message}", .location.as_ref().map(|l| format!("{l}: ")).unwrap_or_default())]
pub struct CompileError {
    pub label: String,
    pub message: String,
    /// Template location of the offending line, when known.
    pub location: Option<SourceLoc>,
    /// Full diagnostic text against the generated source.
    pub diagnostics: String,
}

/// Acquire a device from the first adapter in `adapters`.
pub fn init_device_on(adapters: &[AdapterProfile], options: &DeviceOptions) -> Result<Device, DeviceError> {
    let profile = adapters.first().ok_or(DeviceError::NoAdapter)?;
    let pick = |want: Want, offered: bool, name: &'static str| match (want, offered) {
        (Want::Required, false) => Err(DeviceError::FeatureUnavailable(name)),
        (Want::No, _) => Ok(false),
        (_, offered) => Ok(offered),
    };
    let caps = DeviceCaps {
        adapter: profile.name.clone(),
        max_workgroup_size: profile.max_workgroup_size,
        max_workgroup_dims: profile.max_workgroup_dims,
        max_workgroups_per_dim: profile.max_workgroups_per_dim,
        shared_memory_bytes: profile.shared_memory_bytes,
        subgroups: pick(options.subgroups, profile.subgroups, "subgroups")?,
        subgroup_size: profile.subgroup_size,
        f16: pick(options.f16, profile.f16, "shader-f16")?,
        timestamps: pick(options.timestamps, profile.timestamps, "timestamp-query")?,
        max_buffer_size: profile.max_buffer_size,
        validation: options.validation,
        uniform_alignment: 256,
        storage_alignment: 256,
    };
    Ok(Device::start(caps))
}

/// Acquire a device on the software adapter.
pub fn init_device(options: &DeviceOptions) -> Result<Device, DeviceError> {
    init_device_on(&[AdapterProfile::software()], options)
}

/// Counters for allocation and submission activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub buffers_created: u64,
    pub bytes_allocated: u64,
    pub write_buffer_calls: u64,
    pub submissions: u64,
    pub passes: u64,
    pub dispatches: u64,
    pub oob_accesses: u64,
    pub pipelines_created: u64,
}

#[derive(Default)]
struct Counters {
    buffers_created: AtomicU64,
    bytes_allocated: AtomicU64,
    write_buffer_calls: AtomicU64,
    submissions: AtomicU64,
    passes: AtomicU64,
    dispatches: AtomicU64,
    oob_accesses: AtomicU64,
    pipelines_created: AtomicU64,
}

struct Shared {
    buffers: Mutex<Vec<Option<Vec<u32>>>>,
    counters: Counters,
    lost: AtomicBool,
    lost_reason: Mutex<String>,
}

/// Handle to a device buffer. Sizes are in bytes and always multiples of 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Buffer {
    pub id: BufferId,
    pub size: u64,
}

impl Buffer {
    pub fn slice(&self, offset: u64, size: u64) -> BufferSlice {
        BufferSlice {
            buffer: self.id,
            offset,
            size,
        }
    }

    pub fn whole(&self) -> BufferSlice {
        self.slice(0, self.size)
    }
}

/// A bound byte range of a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferSlice {
    pub buffer: BufferId,
    pub offset: u64,
    pub size: u64,
}

/// Executes one workgroup of a compute pipeline.
pub trait ComputeProgram: Send + Sync {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, workgroup: [u32; 3]);
}

pub struct ComputePipeline {
    pub id: u64,
    pub label: String,
    pub workgroup_size: [u32; 3],
    pub shared_bytes: u32,
    pub bindings: usize,
    pub wgsl: Arc<str>,
    program: Arc<dyn ComputeProgram>,
}

impl fmt::Debug for ComputePipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComputePipeline")
            .field("id", &self.id)
            .field("label", &self.label)
            .field("workgroup_size", &self.workgroup_size)
            .finish()
    }
}

pub struct PipelineDescriptor<'a> {
    pub label: &'a str,
    pub source: &'a Preprocessed,
    pub entry_point: &'a str,
    pub program: Arc<dyn ComputeProgram>,
}

#[derive(Debug, Clone)]
pub struct Dispatch {
    pub pipeline: Arc<ComputePipeline>,
    pub bindings: Vec<BufferSlice>,
    /// Uniform parameter block, typically a parameter-arena slot.
    pub params: Option<BufferSlice>,
    pub workgroups: [u32; 3],
    /// Caller-defined tag reported back with the dispatch's timing.
    pub tag: u32,
}

#[derive(Debug, Clone)]
enum Command {
    Pass(Vec<Dispatch>),
    Copy { src: BufferSlice, dst: BufferSlice },
}

/// Records compute passes and copies into a [`CommandBuffer`].
#[derive(Debug, Default)]
pub struct CommandEncoder {
    commands: Vec<Command>,
    open: Option<Vec<Dispatch>>,
}

impl CommandEncoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_compute_pass(&mut self) {
        self.end_compute_pass();
        self.open = Some(Vec::new());
    }

    pub fn dispatch(&mut self, d: Dispatch) {
        self.open.get_or_insert_with(Vec::new).push(d);
    }

    pub fn end_compute_pass(&mut self) {
        if let Some(pass) = self.open.take() {
            self.commands.push(Command::Pass(pass));
        }
    }

    pub fn copy_buffer_to_buffer(&mut self, src: BufferSlice, dst: BufferSlice) {
        self.end_compute_pass();
        self.commands.push(Command::Copy { src, dst });
    }

    pub fn pass_count(&self) -> usize {
        self.commands.iter().filter(|c| matches!(c, Command::Pass(_))).count() + self.open.is_some() as usize
    }

    pub fn finish(mut self) -> CommandBuffer {
        self.end_compute_pass();
        CommandBuffer { commands: self.commands }
    }
}

#[derive(Debug, Default)]
pub struct CommandBuffer {
    commands: Vec<Command>,
}

impl CommandBuffer {
    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }
}

/// What a completed submission reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubmissionReport {
    /// `(tag, nanoseconds)` per dispatch, in execution order. Empty when the
    /// device has no timestamp support.
    pub dispatch_nanos: Vec<(u32, u64)>,
    pub wall_nanos: u64,
    pub oob_accesses: u64,
}

#[derive(Default)]
struct FenceState {
    done: Mutex<Option<Result<SubmissionReport, DeviceError>>>,
    cv: Condvar,
}

/// Completion signal of one queue submission. Cheap to clone.
#[derive(Clone, Default)]
pub struct Fence(Arc<FenceState>);

impl fmt::Debug for Fence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fence({})", if self.is_signaled() { "signaled" } else { "pending" })
    }
}

impl Fence {
    /// A fence that is already signaled.
    pub fn signaled() -> Self {
        let f = Fence::default();
        f.signal(Ok(SubmissionReport::default()));
        f
    }

    fn signal(&self, result: Result<SubmissionReport, DeviceError>) {
        *self.0.done.lock().unwrap() = Some(result);
        self.0.cv.notify_all();
    }

    pub fn is_signaled(&self) -> bool {
        self.0.done.lock().unwrap().is_some()
    }

    pub fn wait(&self) -> Result<SubmissionReport, DeviceError> {
        let mut done = self.0.done.lock().unwrap();
        while done.is_none() {
            done = self.0.cv.wait(done).unwrap();
        }
        done.clone().unwrap()
    }

    pub fn same_as(&self, other: &Fence) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Pending asynchronous buffer read.
pub struct ReadbackFuture {
    rx: Receiver<Result<Vec<u8>, DeviceError>>,
    buffer: BufferId,
}

impl ReadbackFuture {
    pub fn wait(self) -> Result<Vec<u8>, DeviceError> {
        self.rx
            .recv()
            .unwrap_or_else(|_| Err(DeviceError::MapFailed(self.buffer, "device lost".into())))
    }

    pub fn try_take(&self) -> Option<Result<Vec<u8>, DeviceError>> {
        self.rx.try_recv().ok()
    }
}

enum Msg {
    Write {
        buffer: BufferId,
        offset: u64,
        data: Vec<u8>,
    },
    Submit {
        commands: Vec<CommandBuffer>,
        fence: Fence,
    },
    Read {
        slice: BufferSlice,
        reply: Sender<Result<Vec<u8>, DeviceError>>,
    },
}

pub struct Device {
    caps: DeviceCaps,
    shared: Arc<Shared>,
    tx: Option<Sender<Msg>>,
    worker: Option<JoinHandle<()>>,
    next_pipeline: AtomicU64,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device").field("caps", &self.caps).finish()
    }
}

impl Device {
    fn start(caps: DeviceCaps) -> Device {
        let shared = Arc::new(Shared {
            buffers: Mutex::new(Vec::new()),
            counters: Counters::default(),
            lost: AtomicBool::new(false),
            lost_reason: Mutex::new(String::new()),
        });
        let (tx, rx) = mpsc::channel();
        let worker = {
            let shared = Arc::clone(&shared);
            let caps = caps.clone();
            std::thread::Builder::new()
                .name("qkern-queue".into())
                .spawn(move || queue_worker(rx, shared, caps))
                .expect("spawn queue worker")
        };
        Device {
            caps,
            shared,
            tx: Some(tx),
            worker: Some(worker),
            next_pipeline: AtomicU64::new(1),
        }
    }

    pub fn caps(&self) -> &DeviceCaps {
        &self.caps
    }

    pub fn stats(&self) -> DeviceStats {
        let c = &self.shared.counters;
        let l = |a: &AtomicU64| a.load(Ordering::SeqCst);
        DeviceStats {
            buffers_created: l(&c.buffers_created),
            bytes_allocated: l(&c.bytes_allocated),
            write_buffer_calls: l(&c.write_buffer_calls),
            submissions: l(&c.submissions),
            passes: l(&c.passes),
            dispatches: l(&c.dispatches),
            oob_accesses: l(&c.oob_accesses),
            pipelines_created: l(&c.pipelines_created),
        }
    }

    fn check_alive(&self) -> Result<(), DeviceError> {
        if self.shared.lost.load(Ordering::SeqCst) {
            return Err(DeviceError::DeviceLost(self.shared.lost_reason.lock().unwrap().clone()));
        }
        Ok(())
    }

    fn send(&self, msg: Msg) -> Result<(), DeviceError> {
        self.check_alive()?;
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(msg).ok())
            .ok_or_else(|| DeviceError::DeviceLost("queue closed".into()))
    }

    /// Allocate a zero-initialised buffer. `size` is rounded up to 4 bytes.
    pub fn create_buffer(&self, size: u64) -> Result<Buffer, DeviceError> {
        self.check_alive()?;
        let size = size.max(4).next_multiple_of(4);
        if size > self.caps.max_buffer_size {
            return Err(DeviceError::BufferTooLarge {
                size,
                max: self.caps.max_buffer_size,
            });
        }
        let mut buffers = self.shared.buffers.lock().unwrap();
        buffers.push(Some(vec![0u32; (size / 4) as usize]));
        let c = &self.shared.counters;
        c.buffers_created.fetch_add(1, Ordering::SeqCst);
        c.bytes_allocated.fetch_add(size, Ordering::SeqCst);
        Ok(Buffer {
            id: BufferId(buffers.len() as u32 - 1),
            size,
        })
    }

    pub fn destroy_buffer(&self, buffer: Buffer) {
        if let Some(slot) = self.shared.buffers.lock().unwrap().get_mut(buffer.id.0 as usize) {
            *slot = None;
        }
    }

    fn check_range(&self, buffer: BufferId, offset: u64, size: u64) -> Result<(), DeviceError> {
        if !offset.is_multiple_of(4) || !size.is_multiple_of(4) {
            return Err(DeviceError::Unaligned { offset, size });
        }
        let buffers = self.shared.buffers.lock().unwrap();
        let len = buffers
            .get(buffer.0 as usize)
            .and_then(|b| b.as_ref())
            .map(|b| b.len() as u64 * 4)
            .ok_or(DeviceError::UnknownBuffer(buffer))?;
        if offset + size > len {
            return Err(DeviceError::OutOfRange { buffer, offset, size, len });
        }
        Ok(())
    }

    /// Queue a host-to-device write. It lands before any later submission.
    pub fn write_buffer(&self, buffer: BufferId, offset: u64, data: &[u8]) -> Result<(), DeviceError> {
        self.check_range(buffer, offset, data.len() as u64)?;
        self.shared.counters.write_buffer_calls.fetch_add(1, Ordering::SeqCst);
        self.send(Msg::Write {
            buffer,
            offset,
            data: data.to_vec(),
        })
    }

    pub fn submit(&self, commands: Vec<CommandBuffer>) -> Result<Fence, DeviceError> {
        let fence = Fence::default();
        for cb in &commands {
            for cmd in &cb.commands {
                match cmd {
                    Command::Pass(dispatches) => {
                        for d in dispatches {
                            self.check_dispatch(d)?;
                        }
                    }
                    Command::Copy { src, dst } => {
                        self.check_range(src.buffer, src.offset, src.size)?;
                        self.check_range(dst.buffer, dst.offset, dst.size)?;
                    }
                }
            }
        }
        self.shared.counters.submissions.fetch_add(1, Ordering::SeqCst);
        self.send(Msg::Submit {
            commands,
            fence: fence.clone(),
        })?;
        Ok(fence)
    }

    fn check_dispatch(&self, d: &Dispatch) -> Result<(), DeviceError> {
        if d.bindings.len() != d.pipeline.bindings {
            return Err(DeviceError::BindingCount(
                d.pipeline.label.clone(),
                d.pipeline.bindings,
                d.bindings.len(),
            ));
        }
        if d.workgroups.iter().any(|&g| g > self.caps.max_workgroups_per_dim) {
            return Err(DeviceError::TooManyWorkgroups {
                groups: d.workgroups,
                max: self.caps.max_workgroups_per_dim,
            });
        }
        for s in &d.bindings {
            if s.offset % self.caps.storage_alignment as u64 != 0 {
                return Err(DeviceError::MisalignedBinding {
                    offset: s.offset,
                    alignment: self.caps.storage_alignment,
                });
            }
        }
        if let Some(s) = d.params {
            if s.offset % self.caps.uniform_alignment as u64 != 0 {
                return Err(DeviceError::MisalignedBinding {
                    offset: s.offset,
                    alignment: self.caps.uniform_alignment,
                });
            }
        }
        for s in d.bindings.iter().chain(&d.params) {
            self.check_range(s.buffer, s.offset, s.size)?;
        }
        Ok(())
    }

    /// Asynchronously map a range for reading. The data reflects every
    /// submission made before this call.
    pub fn read_buffer_async(&self, slice: BufferSlice) -> ReadbackFuture {
        let (reply, rx) = mpsc::channel();
        let result = self
            .check_range(slice.buffer, slice.offset, slice.size)
            .map_err(|e| DeviceError::MapFailed(slice.buffer, e.to_string()))
            .and_then(|_| {
                self.send(Msg::Read {
                    slice,
                    reply: reply.clone(),
                })
            });
        if let Err(e) = result {
            let _ = reply.send(Err(e));
        }
        ReadbackFuture { rx, buffer: slice.buffer }
    }

    pub fn read_buffer(&self, slice: BufferSlice) -> Result<Vec<u8>, DeviceError> {
        self.read_buffer_async(slice).wait()
    }

    /// Wait until every submission made so far has completed.
    pub fn poll_wait(&self) -> Result<(), DeviceError> {
        self.submit(Vec::new())?.wait().map(|_| ())
    }

    /// Compile WGSL with naga and wrap it with its executable program.
    pub fn create_compute_pipeline(&self, desc: PipelineDescriptor<'_>) -> Result<Arc<ComputePipeline>, CompileError> {
        let (module, source) = compile_wgsl(desc.label, desc.source, &self.caps)?;
        let err = |message: String| CompileError {
            label: desc.label.to_string(),
            diagnostics: message.clone(),
            message,
            location: None,
        };
        let entry = module
            .entry_points
            .iter()
            .find(|e| e.name == desc.entry_point && e.stage == naga::ShaderStage::Compute)
            .ok_or_else(|| err(format!("no compute entry point `{}`", desc.entry_point)))?;
        let wg = entry.workgroup_size;
        let invocations = wg.iter().product::<u32>();
        if invocations > self.caps.max_workgroup_size || wg.iter().zip(self.caps.max_workgroup_dims).any(|(a, b)| *a > b) {
            return Err(err(format!(
                "workgroup size {wg:?} exceeds the device limit of {} invocations",
                self.caps.max_workgroup_size
            )));
        }
        let mut layouter = naga::proc::Layouter::default();
        layouter.update(module.to_ctx()).map_err(|e| err(format!("layout: {e}")))?;
        let mut shared_bytes = 0u32;
        let mut bindings = 0usize;
        for (_, var) in module.global_variables.iter() {
            match var.space {
                naga::AddressSpace::WorkGroup => shared_bytes += layouter[var.ty].size,
                naga::AddressSpace::Storage { .. } => bindings += 1,
                _ => {}
            }
        }
        if shared_bytes > self.caps.shared_memory_bytes {
            return Err(err(format!(
                "workgroup memory {shared_bytes} bytes exceeds the {}-byte limit",
                self.caps.shared_memory_bytes
            )));
        }
        self.shared.counters.pipelines_created.fetch_add(1, Ordering::SeqCst);
        Ok(Arc::new(ComputePipeline {
            id: self.next_pipeline.fetch_add(1, Ordering::SeqCst),
            label: desc.label.to_string(),
            workgroup_size: wg,
            shared_bytes,
            bindings,
            wgsl: source.into(),
            program: desc.program,
        }))
    }
}

impl Drop for Device {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Parse and validate WGSL. Returns the module and the text naga saw.
///
/// naga does not implement the `enable subgroups;` directive that browsers
/// require, so that line is blanked (keeping line numbers) and subgroup
/// support is granted through validator capabilities instead.
pub fn compile_wgsl(label: &str, source: &Preprocessed, caps: &DeviceCaps) -> Result<(naga::Module, String), CompileError> {
    let text: String = source
        .text
        .split_inclusive('\n')
        .map(|l| if l.trim() == "enable subgroups;" { "\n" } else { l })
        .collect();
    let locate = |line: Option<u32>| line.and_then(|l| source.origin_of(l as usize)).cloned();
    let module = naga::front::wgsl::parse_str(&text).map_err(|e| CompileError {
        label: label.to_string(),
        message: e.message().to_string(),
        location: locate(e.location(&text).map(|l| l.line_number)),
        diagnostics: e.emit_to_string(&text),
    })?;
    let mut capabilities = naga::valid::Capabilities::empty();
    if caps.subgroups {
        capabilities |= naga::valid::Capabilities::SUBGROUP | naga::valid::Capabilities::SUBGROUP_BARRIER;
    }
    if caps.f16 {
        capabilities |= naga::valid::Capabilities::SHADER_FLOAT16;
    }
    let mut validator = naga::valid::Validator::new(naga::valid::ValidationFlags::all(), capabilities);
    if caps.subgroups {
        validator
            .subgroup_stages(naga::valid::ShaderStages::COMPUTE)
            .subgroup_operations(naga::valid::SubgroupOperationSet::all());
    }
    validator.validate(&module).map_err(|e| CompileError {
        label: label.to_string(),
        message: e.as_inner().to_string(),
        location: locate(e.location(&text).map(|l| l.line_number)),
        diagnostics: e.emit_to_string(&text),
    })?;
    Ok((module, text))
}

/// Memory view handed to a [`ComputeProgram`] for one dispatch.
///
/// Bindings may alias the same buffer (the runtime binds slices of one
/// intermediate arena), so access goes through raw pointers; the queue
/// worker runs dispatches one at a time.
pub struct Bindings<'a> {
    slots: Vec<(*mut u32, usize)>,
    params: &'a [u32],
    num_workgroups: [u32; 3],
    oob: Cell<u64>,
    validation: bool,
}

impl Bindings<'_> {
    pub fn num_workgroups(&self) -> [u32; 3] {
        self.num_workgroups
    }

    /// Length of binding `b` in 32-bit words (`arrayLength`).
    #[inline]
    pub fn len(&self, b: usize) -> usize {
        self.slots[b].1
    }

    #[inline]
    pub fn ld(&self, b: usize, i: usize) -> u32 {
        let (p, len) = self.slots[b];
        if i < len {
            // SAFETY: `p` points to `len` live words of a buffer locked by the worker.
            unsafe { *p.add(i) }
        } else {
            self.oob.set(self.oob.get() + 1);
            0
        }
    }

    #[inline]
    pub fn st(&mut self, b: usize, i: usize, v: u32) {
        let (p, len) = self.slots[b];
        if i < len {
            // SAFETY: as in `ld`; no references into the buffer exist.
            unsafe { *p.add(i) = v }
        } else {
            self.oob.set(self.oob.get() + 1);
        }
    }

    #[inline]
    pub fn ld_f32(&self, b: usize, i: usize) -> f32 {
        f32::from_bits(self.ld(b, i))
    }

    #[inline]
    pub fn st_f32(&mut self, b: usize, i: usize, v: f32) {
        self.st(b, i, v.to_bits())
    }

    /// Element `i` of a packed f16 array.
    #[inline]
    pub fn ld_f16(&self, b: usize, i: usize) -> f32 {
        let w = self.ld(b, i >> 1);
        half::f16::from_bits((w >> ((i & 1) * 16)) as u16).to_f32()
    }

    /// Byte `i` of a binding viewed as bytes.
    #[inline]
    pub fn ld_byte(&self, b: usize, i: usize) -> u8 {
        (self.ld(b, i >> 2) >> ((i & 3) * 8)) as u8
    }

    pub fn param_u32(&self, i: usize) -> u32 {
        self.params.get(i).copied().unwrap_or_else(|| {
            self.oob.set(self.oob.get() + 1);
            0
        })
    }

    pub fn param_f32(&self, i: usize) -> f32 {
        f32::from_bits(self.param_u32(i))
    }

    /// Out-of-bounds accesses so far in this dispatch.
    pub fn oob(&self) -> u64 {
        self.oob.get()
    }

    pub fn validation(&self) -> bool {
        self.validation
    }
}

fn queue_worker(rx: Receiver<Msg>, shared: Arc<Shared>, caps: DeviceCaps) {
    while let Ok(msg) = rx.recv() {
        match msg {
            Msg::Write { buffer, offset, data } => {
                let mut buffers = shared.buffers.lock().unwrap();
                if let Some(Some(words)) = buffers.get_mut(buffer.0 as usize) {
                    let start = (offset / 4) as usize;
                    for (w, chunk) in words[start..].iter_mut().zip(data.chunks(4)) {
                        let mut b = [0u8; 4];
                        b[..chunk.len()].copy_from_slice(chunk);
                        *w = u32::from_le_bytes(b);
                    }
                }
            }
            Msg::Read { slice, reply } => {
                let buffers = shared.buffers.lock().unwrap();
                let result = match buffers.get(slice.buffer.0 as usize) {
                    Some(Some(words)) => {
                        let start = (slice.offset / 4) as usize;
                        let end = start + (slice.size / 4) as usize;
                        Ok(words[start..end].iter().flat_map(|w| w.to_le_bytes()).collect())
                    }
                    _ => Err(DeviceError::MapFailed(slice.buffer, "buffer destroyed".into())),
                };
                let _ = reply.send(result);
            }
            Msg::Submit { commands, fence } => {
                let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&commands, &shared, &caps)));
                match result {
                    Ok(report) => fence.signal(Ok(report)),
                    Err(panic) => {
                        let reason = panic
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "program panicked".into());
                        *shared.lost_reason.lock().unwrap() = reason.clone();
                        shared.lost.store(true, Ordering::SeqCst);
                        fence.signal(Err(DeviceError::DeviceLost(reason)));
                        // Fail every later submission and read.
                        for msg in rx.iter() {
                            match msg {
                                Msg::Submit { fence, .. } => fence.signal(Err(DeviceError::DeviceLost("lost".into()))),
                                Msg::Read { slice, reply } => {
                                    let _ = reply.send(Err(DeviceError::MapFailed(slice.buffer, "device lost".into())));
                                }
                                Msg::Write { .. } => {}
                            }
                        }
                        return;
                    }
                }
            }
        }
    }
}

fn execute(commands: &[CommandBuffer], shared: &Shared, caps: &DeviceCaps) -> SubmissionReport {
    let started = Instant::now();
    let mut report = SubmissionReport::default();
    let mut buffers = shared.buffers.lock().unwrap();
    let c = &shared.counters;
    for cb in commands {
        for cmd in &cb.commands {
            match cmd {
                Command::Copy { src, dst } => {
                    let n = (src.size.min(dst.size) / 4) as usize;
                    let tmp: Vec<u32> = buffers[src.buffer.0 as usize].as_ref().unwrap()[(src.offset / 4) as usize..][..n].to_vec();
                    buffers[dst.buffer.0 as usize].as_mut().unwrap()[(dst.offset / 4) as usize..][..n].copy_from_slice(&tmp);
                }
                Command::Pass(dispatches) => {
                    c.passes.fetch_add(1, Ordering::SeqCst);
                    for d in dispatches {
                        let t0 = Instant::now();
                        let oob = run_dispatch(d, &mut buffers, caps);
                        c.dispatches.fetch_add(1, Ordering::SeqCst);
                        if caps.validation {
                            c.oob_accesses.fetch_add(oob, Ordering::SeqCst);
                            report.oob_accesses += oob;
                        }
                        if caps.timestamps {
                            report.dispatch_nanos.push((d.tag, t0.elapsed().as_nanos() as u64));
                        }
                    }
                }
            }
        }
    }
    report.wall_nanos = started.elapsed().as_nanos() as u64;
    report
}

fn run_dispatch(d: &Dispatch, buffers: &mut [Option<Vec<u32>>], caps: &DeviceCaps) -> u64 {
    let params: Vec<u32> = match d.params {
        Some(s) => buffers[s.buffer.0 as usize].as_ref().unwrap()[(s.offset / 4) as usize..][..(s.size / 4) as usize].to_vec(),
        None => Vec::new(),
    };
    let slots = d
        .bindings
        .iter()
        .map(|s| {
            let words = buffers[s.buffer.0 as usize].as_mut().unwrap();
            let start = (s.offset / 4) as usize;
            // SAFETY: the range was checked against the buffer at submit time.
            (unsafe { words.as_mut_ptr().add(start) }, (s.size / 4) as usize)
        })
        .collect();
    let mut mem = Bindings {
        slots,
        params: &params,
        num_workgroups: d.workgroups,
        oob: Cell::new(0),
        validation: caps.validation,
    };
    for z in 0..d.workgroups[2] {
        for y in 0..d.workgroups[1] {
            for x in 0..d.workgroups[0] {
                d.pipeline.program.run_workgroup(&mut mem, [x, y, z]);
            }
        }
    }
    mem.oob.get()
}
