//! Static memory planning: live intervals over a topological order and
//! greedy first-fit offsets in one intermediate buffer.

use thiserror::Error;

use crate::kernels::MAX_SPLITS;

use super::graph::{positions, GraphError, NodeOp, OpGraph, TensorId, TensorKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanLimits {
    pub max_buffer_size: u64,
    /// Offset alignment of every placed tensor.
    pub alignment: u64,
}

impl Default for PlanLimits {
    fn default() -> Self {
        Self {
            max_buffer_size: 1 << 30,
            alignment: 256,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan needs {total} bytes in one buffer, the device allows {max}")]
    ExceedsDeviceLimit { total: u64, max: u64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Live range of an intermediate, as inclusive positions in the order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub tensor: TensorId,
    pub offset: u64,
    pub size: u64,
    pub live: Interval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryPlan {
    /// Node indices in execution order.
    pub order: Vec<usize>,
    /// Size of the intermediate buffer.
    pub total: u64,
    /// One entry per intermediate, in placement order.
    pub placements: Vec<Placement>,
    /// Bytes of each external tensor (KV caches included), by tensor id.
    pub external_bytes: Vec<(TensorId, u64)>,
    /// Flash split partials: the largest `MAX_SPLITS * heads * (D + 2)`
    /// floats over the decode nodes.
    pub partials_bytes: u64,
}

impl MemoryPlan {
    pub fn placement(&self, id: TensorId) -> Option<&Placement> {
        self.placements.iter().find(|p| p.tensor == id)
    }

    /// Sum of all intermediate sizes, the footprint without reuse.
    pub fn unshared_total(&self) -> u64 {
        self.placements.iter().map(|p| p.size).sum()
    }
}

fn aligned(bytes: u64, alignment: u64) -> u64 {
    bytes.max(4).next_multiple_of(alignment)
}

/// Plan `graph`. Intermediates are placed in order of first definition;
/// each takes the lowest aligned offset that does not collide with any
/// already placed tensor whose interval overlaps its own. Graph outputs live
/// to the end.
pub fn plan_memory(graph: &OpGraph, limits: &PlanLimits) -> Result<MemoryPlan, PlanError> {
    let order = graph.topological_order()?;
    let nodes = graph.nodes();
    let pos = positions(&order, nodes.len());
    let last = order.len().saturating_sub(1);

    let n_tensors = graph.tensors().len();
    let mut live: Vec<Option<Interval>> = vec![None; n_tensors];
    for &i in &order {
        let node = &nodes[i];
        let p = pos[i];
        let out = graph.root(node.output);
        if graph.tensors()[out.0].kind == TensorKind::Intermediate {
            let iv = live[out.0].get_or_insert(Interval { start: p, end: p });
            iv.start = iv.start.min(p);
            iv.end = iv.end.max(p);
        }
        for &input in &node.inputs {
            let r = graph.root(input);
            if let Some(iv) = live[r.0].as_mut() {
                iv.end = iv.end.max(p);
            }
        }
    }
    for &o in graph.outputs() {
        if let Some(iv) = live[graph.root(o).0].as_mut() {
            iv.end = last;
        }
    }

    let mut pending: Vec<(TensorId, Interval, u64)> = live
        .iter()
        .enumerate()
        .filter_map(|(t, iv)| {
            iv.map(|iv| {
                let bytes = graph.tensors()[t].desc.byte_size() as u64;
                (TensorId(t), iv, aligned(bytes, limits.alignment))
            })
        })
        .collect();
    pending.sort_by_key(|&(t, iv, _)| (iv.start, t));

    let mut placements: Vec<Placement> = Vec::with_capacity(pending.len());
    let mut total = 0u64;
    for (tensor, iv, size) in pending {
        let mut busy: Vec<(u64, u64)> = placements
            .iter()
            .filter(|p| p.live.overlaps(&iv))
            .map(|p| (p.offset, p.offset + p.size))
            .collect();
        busy.sort_unstable();
        let mut offset = 0u64;
        for (lo, hi) in busy {
            if offset + size <= lo {
                break;
            }
            offset = offset.max(hi.next_multiple_of(limits.alignment));
        }
        total = total.max(offset + size);
        placements.push(Placement {
            tensor,
            offset,
            size,
            live: iv,
        });
    }
    if total > limits.max_buffer_size {
        return Err(PlanError::ExceedsDeviceLimit {
            total,
            max: limits.max_buffer_size,
        });
    }

    let external_bytes = graph
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.kind == TensorKind::External)
        .map(|(i, t)| (TensorId(i), aligned(t.desc.byte_size() as u64, 4)))
        .collect::<Vec<_>>();
    for &(_, bytes) in &external_bytes {
        if bytes > limits.max_buffer_size {
            return Err(PlanError::ExceedsDeviceLimit {
                total: bytes,
                max: limits.max_buffer_size,
            });
        }
    }
    let partials_bytes = nodes
        .iter()
        .filter(|n| matches!(n.op, NodeOp::FlashDecode { .. }))
        .map(|n| {
            let q = &graph.tensors()[n.inputs[0].0].desc;
            4 * MAX_SPLITS as u64 * q.shape[0] as u64 * (q.inner_dim() as u64 + 2)
        })
        .max()
        .unwrap_or(0);

    Ok(MemoryPlan {
        order,
        total,
        placements,
        external_bytes,
        partials_bytes,
    })
}

/// Every pair of placements with overlapping intervals and overlapping
/// byte ranges.
pub fn overlapping_pairs(plan: &MemoryPlan) -> Vec<(TensorId, TensorId)> {
    let mut bad = Vec::new();
    for (i, a) in plan.placements.iter().enumerate() {
        for b in &plan.placements[i + 1..] {
            let bytes = a.offset < b.offset + b.size && b.offset < a.offset + a.size;
            if bytes && a.live.overlaps(&b.live) {
                bad.push((a.tensor, b.tensor));
            }
        }
    }
    bad
}
