use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use crate::device::{CompileError, ComputePipeline, Device, PipelineDescriptor};

use super::key::KernelKey;
use super::programs;
use super::specialize::{DispatchRule, Specialization};

/// A compiled pipeline with the decisions that produced it.
#[derive(Debug)]
pub struct CompiledKernel {
    pub key: KernelKey,
    pub pipeline: Arc<ComputePipeline>,
    pub rule: DispatchRule,
}

type Slot = Arc<OnceLock<Result<Arc<CompiledKernel>, CompileError>>>;

/// Memoizes pipelines by key. Concurrent requests for the same key wait for
/// a single compilation; failures are cached too.
pub struct PipelineCache {
    device: Arc<Device>,
    entries: Mutex<HashMap<KernelKey, Slot>>,
    compiles: AtomicU64,
}

impl PipelineCache {
    pub fn new(device: Arc<Device>) -> Self {
        Self {
            device,
            entries: Mutex::new(HashMap::new()),
            compiles: AtomicU64::new(0),
        }
    }

    pub fn device(&self) -> &Arc<Device> {
        &self.device
    }

    pub fn get_or_compile(&self, spec: &Specialization) -> Result<Arc<CompiledKernel>, CompileError> {
        let slot = self.entries.lock().unwrap().entry(spec.key.clone()).or_default().clone();
        slot.get_or_init(|| {
            self.compiles.fetch_add(1, Ordering::SeqCst);
            let program = programs::build(&spec.key, self.device.caps());
            let pipeline = self.device.create_compute_pipeline(PipelineDescriptor {
                label: &spec.key.label(),
                source: &spec.source,
                entry_point: "main",
                program,
            })?;
            Ok(Arc::new(CompiledKernel {
                key: spec.key.clone(),
                pipeline,
                rule: spec.rule,
            }))
        })
        .clone()
    }

    /// Compilations performed so far (one per distinct key).
    pub fn compile_count(&self) -> u64 {
        self.compiles.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<KernelKey> {
        let mut keys: Vec<KernelKey> = self.entries.lock().unwrap().keys().cloned().collect();
        keys.sort();
        keys
    }
}
