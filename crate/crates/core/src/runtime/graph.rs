//! Op graphs: tensors, the nodes that produce them, and a deterministic
//! topological order.

use thiserror::Error;

use crate::kernels::{Category, EwKind, EwRange, OpKind};
use crate::quant::BlockFormat;
use crate::tensor::TensorDesc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Supplied by the host (weights, inputs, KV caches, positions). Gets a
    /// buffer of its own.
    External,
    /// Produced by a node; placed in the intermediate arena by the planner.
    Intermediate,
    /// Another shape over the storage of `base`.
    View { base: TensorId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub desc: TensorDesc,
    pub kind: TensorKind,
}

/// Operation of a node, with its scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeOp {
    /// inputs `[a, b]`
    Matmul,
    /// inputs `[a, x]`
    Matvec,
    /// inputs `[q, k_cache, v_cache]`
    FlashDecode { seq_len: usize, scale: f32, splits: u32 },
    /// inputs `[q, k_cache, v_cache]`
    FlashTile { seq_len: usize, scale: f32, causal: bool },
    /// inputs `[a]` or `[a, b]`
    Elementwise { kind: EwKind, scale: f32 },
    /// Like `Elementwise`, restricted to a flat element window.
    ElementwiseRange { kind: EwKind, scale: f32, range: EwRange },
    /// inputs `[x, weight]`
    RmsNorm { eps: f32 },
    /// inputs `[x, positions]`; positions hold one u32 per token.
    Rope { theta_base: f32 },
    /// inputs `[x]`
    SoftmaxRow,
    /// inputs `[src]`, output is a q8_0 tensor written from `dst_block`.
    QuantizeKv { dst_block: usize, dst_row_stride: usize },
}

impl NodeOp {
    pub fn kind(&self) -> OpKind {
        match *self {
            NodeOp::Matmul => OpKind::Matmul,
            NodeOp::Matvec => OpKind::Matvec,
            NodeOp::FlashDecode { .. } => OpKind::FlashDecode,
            NodeOp::FlashTile { .. } => OpKind::FlashTile,
            NodeOp::Elementwise { kind, .. } | NodeOp::ElementwiseRange { kind, .. } => OpKind::Elementwise(kind),
            NodeOp::RmsNorm { .. } => OpKind::RmsNorm,
            NodeOp::Rope { .. } => OpKind::Rope,
            NodeOp::SoftmaxRow => OpKind::SoftmaxRow,
            NodeOp::QuantizeKv { .. } => OpKind::QuantizeKv,
        }
    }

    pub fn category(&self) -> Category {
        self.kind().category()
    }

    fn arity(&self) -> usize {
        match *self {
            NodeOp::Matmul | NodeOp::Matvec | NodeOp::RmsNorm { .. } | NodeOp::Rope { .. } => 2,
            NodeOp::FlashDecode { .. } | NodeOp::FlashTile { .. } => 3,
            NodeOp::Elementwise { kind, .. } | NodeOp::ElementwiseRange { kind, .. } => 1 + kind.binary() as usize,
            NodeOp::SoftmaxRow | NodeOp::QuantizeKv { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: NodeOp,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown tensor {0:?}")]
    UnknownTensor(TensorId),
    #[error("{op:?} takes {expected} inputs, got {got}")]
    Arity { op: OpKind, expected: usize, got: usize },
    #[error("tensor `{0}` already has a producer")]
    MultipleWriters(String),
    #[error("tensor `{0}` is read but never produced")]
    Unproduced(String),
    #[error("view of {elements} elements over a {base}-element tensor")]
    ViewSize { elements: usize, base: usize },
    #[error("the graph has a cycle")]
    CyclicGraph,
}

/// Tensors and nodes. Node inputs must be external or produced by some
/// node; a node may also write into an external tensor (a KV cache).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpGraph {
    tensors: Vec<TensorInfo>,
    nodes: Vec<Node>,
    outputs: Vec<TensorId>,
}

impl OpGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, id: TensorId) -> Result<&TensorInfo, GraphError> {
        self.tensors.get(id.0).ok_or(GraphError::UnknownTensor(id))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_mut(&mut self, index: usize) -> Option<&mut Node> {
        self.nodes.get_mut(index)
    }

    pub fn outputs(&self) -> &[TensorId] {
        &self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &str, desc: TensorDesc, kind: TensorKind) -> TensorId {
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            desc,
            kind,
        });
        TensorId(self.tensors.len() - 1)
    }

    pub fn external(&mut self, name: &str, desc: TensorDesc) -> TensorId {
        self.push(name, desc, TensorKind::External)
    }

    /// Contiguous external tensor.
    pub fn input(&mut self, name: &str, shape: &[usize], format: BlockFormat) -> TensorId {
        self.external(name, TensorDesc::contiguous(shape, format))
    }

    /// Reinterpret `base` with another contiguous shape.
    pub fn view(&mut self, base: TensorId, shape: &[usize]) -> Result<TensorId, GraphError> {
        let info = self.tensor(base)?.clone();
        let root = match info.kind {
            TensorKind::View { base } => base,
            _ => base,
        };
        let desc = TensorDesc::contiguous(shape, info.desc.format);
        if desc.elements() != info.desc.elements() {
            return Err(GraphError::ViewSize {
                elements: desc.elements(),
                base: info.desc.elements(),
            });
        }
        Ok(self.push(&format!("{}.view", info.name), desc, TensorKind::View { base: root }))
    }

    /// Storage owner of `id` (itself unless it is a view).
    pub fn root(&self, id: TensorId) -> TensorId {
        match self.tensors[id.0].kind {
            TensorKind::View { base } => base,
            _ => id,
        }
    }

    fn check_inputs(&self, op: &NodeOp, inputs: &[TensorId]) -> Result<(), GraphError> {
        if inputs.len() != op.arity() {
            return Err(GraphError::Arity {
                op: op.kind(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        for &i in inputs {
            self.tensor(i)?;
        }
        Ok(())
    }

    /// Add a node producing a new intermediate tensor.
    pub fn node(&mut self, name: &str, op: NodeOp, inputs: &[TensorId], out: TensorDesc) -> Result<TensorId, GraphError> {
        self.check_inputs(&op, inputs)?;
        let output = self.push(name, out, TensorKind::Intermediate);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            output,
        });
        Ok(output)
    }

    /// Add a node that writes into an existing external tensor.
    pub fn write_into(&mut self, op: NodeOp, inputs: &[TensorId], target: TensorId) -> Result<(), GraphError> {
        self.check_inputs(&op, inputs)?;
        self.tensor(target)?;
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            output: target,
        });
        Ok(())
    }

    /// Keep `id` alive to the end of execution for readback.
    pub fn mark_output(&mut self, id: TensorId) {
        if !self.outputs.contains(&id) {
            self.outputs.push(id);
        }
    }

    /// Writing nodes of each tensor's storage. Intermediates have at most
    /// one; externals (KV caches) may be written by several nodes, which
    /// then all run before any reader.
    pub fn producers(&self) -> Result<Vec<Vec<usize>>, GraphError> {
        let mut producer = vec![Vec::new(); self.tensors.len()];
        for (n, node) in self.nodes.iter().enumerate() {
            let root = self.root(node.output);
            let writers: &mut Vec<usize> = &mut producer[root.0];
            if !writers.is_empty() && self.tensors[root.0].kind != TensorKind::External {
                return Err(GraphError::MultipleWriters(self.tensors[root.0].name.clone()));
            }
            writers.push(n);
        }
        Ok(producer)
    }

    /// Kahn's algorithm, lowest node index first among ready nodes.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        let producer = self.producers()?;
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for &input in &node.inputs {
                let root = self.root(input);
                let writers = &producer[root.0];
                if writers.is_empty() && self.tensors[root.0].kind != TensorKind::External {
                    return Err(GraphError::Unproduced(self.tensors[root.0].name.clone()));
                }
                for &p in writers {
                    if p == i {
                        return Err(GraphError::CyclicGraph);
                    }
                    indegree[i] += 1;
                    users[p].push(i);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::CyclicGraph);
        }
        Ok(order)
    }

    /// Nodes that form a cycle-free chain `x -> n0 -> n1 -> ...` of
    /// same-shaped f32 tensors, for tests and examples.
    pub fn chain(len: usize, shape: &[usize]) -> (OpGraph, TensorId, TensorId) {
        let mut g = OpGraph::new();
        let x = g.input("x", shape, BlockFormat::F32);
        let mut cur = x;
        for i in 0..len {
            cur = g
                .node(
                    &format!("t{i}"),
                    NodeOp::Elementwise {
                        kind: EwKind::Scale,
                        scale: 0.5,
                    },
                    &[cur],
                    TensorDesc::contiguous(shape, BlockFormat::F32),
                )
                .expect("valid chain");
        }
        g.mark_output(cur);
        (g, x, cur)
    }
}

/// Position of each node in `order`.
pub(crate) fn positions(order: &[usize], n: usize) -> Vec<usize> {
    let mut pos = vec![usize::MAX; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    pos
}
