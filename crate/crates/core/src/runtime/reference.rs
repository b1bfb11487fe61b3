//! Host reference execution of an [`OpGraph`] on the f64 oracles, with the
//! same storage rounding as the device (f16 outputs, q8_0 cache writes).

use half::f16;

use crate::kernels::EwKind;
use crate::oracle::{self, AttnShape};
use crate::quant::{dequantize_tensor, quantize_block, quantize_tensor, BlockFormat, QuantError};

use super::graph::{GraphError, NodeOp, OpGraph, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum ReferenceError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("tensor {0:?} is stored as {1}, which node outputs cannot use")]
    OutputFormat(TensorId, BlockFormat),
}

pub struct Reference {
    graph: OpGraph,
    values: Vec<Vec<f32>>,
}

impl Reference {
    pub fn new(graph: OpGraph) -> Self {
        let values = graph.tensors().iter().map(|t| vec![0.0; t.desc.elements()]).collect();
        Self { graph, values }
    }

    pub fn graph(&self) -> &OpGraph {
        &self.graph
    }

    pub fn set_op(&mut self, index: usize, op: NodeOp) {
        if let Some(n) = self.graph.node_mut(index) {
            n.op = op;
        }
    }

    /// Store `values` as the device would see them after encoding.
    pub fn write_tensor(&mut self, id: TensorId, values: &[f32]) -> Result<(), ReferenceError> {
        let desc = &self.graph.tensor(id)?.desc;
        let (bytes, contiguous) = quantize_tensor(values, &desc.shape, desc.format)?;
        self.values[self.graph.root(id).0] = dequantize_tensor(&bytes, &contiguous)?;
        Ok(())
    }

    /// Store raw words (token positions).
    pub fn write_u32(&mut self, id: TensorId, words: &[u32]) -> Result<(), ReferenceError> {
        self.graph.tensor(id)?;
        self.values[self.graph.root(id).0] = words.iter().map(|&w| f32::from_bits(w)).collect();
        Ok(())
    }

    pub fn read(&self, id: TensorId) -> Result<Vec<f32>, ReferenceError> {
        self.graph.tensor(id)?;
        Ok(self.values[self.graph.root(id).0].clone())
    }

    pub fn run(&mut self) -> Result<(), ReferenceError> {
        for i in self.graph.topological_order()? {
            let node = self.graph.nodes()[i].clone();
            let input = |k: usize| &self.values[self.graph.root(node.inputs[k]).0];
            let desc = |k: usize| &self.graph.tensors()[node.inputs[k].0].desc;
            let out_id = self.graph.root(node.output);
            let out_desc = self.graph.tensors()[node.output.0].desc.clone();
            let mut out = self.values[out_id.0].clone();
            match node.op {
                NodeOp::Matmul => {
                    let (m, k) = (desc(0).shape[0], desc(0).shape[1]);
                    let n = desc(1).shape[1];
                    out = oracle::matmul(input(0), input(1), m, k, n);
                }
                NodeOp::Matvec => {
                    let (m, k) = (desc(0).shape[0], desc(0).shape[1]);
                    out = oracle::matvec(input(0), input(1), m, k);
                }
                NodeOp::FlashDecode { seq_len, scale, .. } => {
                    out = attend(
                        input(0),
                        input(1),
                        input(2),
                        desc(0).shape[0],
                        1,
                        &desc(1).shape,
                        seq_len,
                        scale,
                        false,
                    );
                }
                NodeOp::FlashTile { seq_len, scale, causal } => {
                    let (heads, q_len) = (desc(0).shape[0], desc(0).shape[1]);
                    out = attend(input(0), input(1), input(2), heads, q_len, &desc(1).shape, seq_len, scale, causal);
                }
                NodeOp::Elementwise { kind, scale } => {
                    let b = kind.binary().then(|| input(1).as_slice());
                    out = elementwise(kind, input(0), b, scale);
                }
                NodeOp::ElementwiseRange { kind, scale, range } => {
                    let a = &input(0)[range.a_off..][..range.n];
                    let b = kind.binary().then(|| &input(1)[range.b_off..][..range.n]);
                    out[range.dst_off..][..range.n].copy_from_slice(&elementwise(kind, a, b, scale));
                }
                NodeOp::RmsNorm { eps } => out = oracle::rms_norm(input(0), input(1), desc(0).inner_dim(), eps),
                NodeOp::SoftmaxRow => out = oracle::softmax_rows(input(0), desc(0).inner_dim()),
                NodeOp::Rope { theta_base } => {
                    let s = &desc(0).shape;
                    let pos: Vec<u32> = input(1)[..s[0]].iter().map(|p| p.to_bits()).collect();
                    out = oracle::rope(input(0), &pos, s[1], s[2], theta_base);
                }
                NodeOp::QuantizeKv { dst_block, dst_row_stride } => {
                    let width = desc(0).inner_dim();
                    for (r, row) in input(0).chunks(width).enumerate() {
                        for (b, values) in row.chunks(32).enumerate() {
                            let block = quantize_block(values, BlockFormat::Q8_0)?;
                            let at = (dst_block + r * dst_row_stride + b) * 32;
                            out[at..at + 32].copy_from_slice(&crate::quant::dequantize_block(&block)?);
                        }
                    }
                }
            }
            match out_desc.format {
                BlockFormat::F32 => {}
                BlockFormat::F16 => out.iter_mut().for_each(|v| *v = f16::from_f32(*v).to_f32()),
                BlockFormat::Q8_0 if matches!(node.op, NodeOp::QuantizeKv { .. }) => {}
                f => return Err(ReferenceError::OutputFormat(node.output, f)),
            }
            self.values[out_id.0] = out;
        }
        Ok(())
    }
}

fn elementwise(kind: EwKind, a: &[f32], b: Option<&[f32]>, scale: f32) -> Vec<f32> {
    match kind {
        EwKind::Add => oracle::add(a, b.unwrap_or_default()),
        EwKind::Mul => oracle::mul(a, b.unwrap_or_default()),
        EwKind::SiluGlu => oracle::silu_glu(a, b.unwrap_or_default()),
        EwKind::Scale => oracle::scale(a, scale),
        EwKind::CopyCast => a.to_vec(),
    }
}

/// Attention over the first `seq_len` rows of `[kv_heads, cap, D]` caches.
#[allow(clippy::too_many_arguments)]
fn attend(
    q: &[f32],
    k_cache: &[f32],
    v_cache: &[f32],
    heads: usize,
    q_len: usize,
    cache_shape: &[usize],
    seq_len: usize,
    scale: f32,
    causal: bool,
) -> Vec<f32> {
    let (kv_heads, cap, d) = (cache_shape[0], cache_shape[1], cache_shape[2]);
    let prefix = |c: &[f32]| -> Vec<f32> {
        (0..kv_heads)
            .flat_map(|h| c[h * cap * d..][..seq_len * d].iter().copied())
            .collect()
    };
    oracle::attention(
        q,
        &prefix(k_cache),
        &prefix(v_cache),
        AttnShape {
            heads,
            kv_heads,
            q_len,
            seq_len,
            head_dim: d,
            scale,
            causal,
        },
    )
}
