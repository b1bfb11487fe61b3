//! A single-token decoder block used for end-to-end checks and profiling:
//! norm, q/k/v projections, rotary embedding, KV cache append, split
//! attention, output projection and residual add.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{EwKind, EwRange};
use crate::quant::BlockFormat;
use crate::tensor::TensorDesc;

use super::graph::{GraphError, NodeOp, OpGraph, TensorId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// KV cache rows per head.
    pub capacity: usize,
    pub weight_format: BlockFormat,
    /// `Q8_0` (written by the quantize kernel) or `F16` (copy-cast per head).
    pub kv_format: BlockFormat,
    pub splits: u32,
    pub theta_base: f32,
    pub eps: f32,
}

impl Default for MicroShape {
    fn default() -> Self {
        Self {
            heads: 4,
            kv_heads: 2,
            head_dim: 64,
            capacity: 256,
            weight_format: BlockFormat::Q8_0,
            kv_format: BlockFormat::Q8_0,
            splits: 4,
            theta_base: 10000.0,
            eps: 1e-5,
        }
    }
}

impl MicroShape {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
pub struct MicroBlock {
    pub shape: MicroShape,
    pub graph: OpGraph,
    pub x: TensorId,
    pub norm_weight: TensorId,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    /// One u32 position, stored in an f32-typed tensor.
    pub positions: TensorId,
    pub k_cache: TensorId,
    pub v_cache: TensorId,
    pub out: TensorId,
    k_writes: Vec<usize>,
    v_writes: Vec<usize>,
    attention: usize,
}

impl MicroBlock {
    /// Build the graph for the token at position 0; see [`MicroBlock::ops_at`].
    pub fn build(shape: MicroShape) -> Result<Self, GraphError> {
        let s = shape;
        let (dm, d, kvw) = (s.d_model(), s.head_dim, s.kv_width());
        let f32d = |sh: &[usize]| TensorDesc::contiguous(sh, BlockFormat::F32);
        let mut g = OpGraph::new();
        let x = g.input("x", &[1, dm], BlockFormat::F32);
        let norm_weight = g.input("norm.weight", &[dm], BlockFormat::F32);
        let w_q = g.input("wq", &[dm, dm], s.weight_format);
        let w_k = g.input("wk", &[kvw, dm], s.weight_format);
        let w_v = g.input("wv", &[kvw, dm], s.weight_format);
        let w_o = g.input("wo", &[dm, dm], s.weight_format);
        let positions = g.input("positions", &[1], BlockFormat::F32);
        let k_cache = g.input("cache.k", &[s.kv_heads, s.capacity, d], s.kv_format);
        let v_cache = g.input("cache.v", &[s.kv_heads, s.capacity, d], s.kv_format);

        let normed = g.node("normed", NodeOp::RmsNorm { eps: s.eps }, &[x, norm_weight], f32d(&[1, dm]))?;
        let normed_v = g.view(normed, &[dm])?;
        let q = g.node("q", NodeOp::Matvec, &[w_q, normed_v], f32d(&[dm]))?;
        let k = g.node("k", NodeOp::Matvec, &[w_k, normed_v], f32d(&[kvw]))?;
        let v = g.node("v", NodeOp::Matvec, &[w_v, normed_v], f32d(&[kvw]))?;
        let rope = NodeOp::Rope { theta_base: s.theta_base };
        let q3 = g.view(q, &[1, s.heads, d])?;
        let q_rot = g.node("q.rot", rope, &[q3, positions], f32d(&[1, s.heads, d]))?;
        let k3 = g.view(k, &[1, s.kv_heads, d])?;
        let k_rot = g.node("k.rot", rope, &[k3, positions], f32d(&[1, s.kv_heads, d]))?;

        let mut block = Self {
            shape,
            graph: OpGraph::new(),
            x,
            norm_weight,
            w_q,
            w_k,
            w_v,
            w_o,
            positions,
            k_cache,
            v_cache,
            out: x,
            k_writes: Vec::new(),
            v_writes: Vec::new(),
            attention: 0,
        };
        let writes = block.write_ops(0);
        let k_rows = g.view(k_rot, &[s.kv_heads, d])?;
        let k_flat = g.view(k_rot, &[kvw])?;
        let v_rows = g.view(v, &[s.kv_heads, d])?;
        for (op, (rows, flat, cache, list)) in writes
            .iter()
            .flat_map(|&op| [(op, (k_rows, k_flat, k_cache, 0)), (op, (v_rows, v, v_cache, 1))])
        {
            let src = if matches!(op, NodeOp::QuantizeKv { .. }) { rows } else { flat };
            g.write_into(op, &[src], cache)?;
            let index = g.nodes().len() - 1;
            if list == 0 {
                block.k_writes.push(index);
            } else {
                block.v_writes.push(index);
            }
        }

        let q_heads = g.view(q_rot, &[s.heads, d])?;
        let attn = g.node("attn", block.attention_op(0), &[q_heads, k_cache, v_cache], f32d(&[s.heads, d]))?;
        block.attention = g.nodes().len() - 1;
        let attn_flat = g.view(attn, &[dm])?;
        let proj = g.node("proj", NodeOp::Matvec, &[w_o, attn_flat], f32d(&[dm]))?;
        let proj2 = g.view(proj, &[1, dm])?;
        let out = g.node(
            "out",
            NodeOp::Elementwise {
                kind: EwKind::Add,
                scale: 1.0,
            },
            &[x, proj2],
            f32d(&[1, dm]),
        )?;
        g.mark_output(out);
        block.out = out;
        block.graph = g;
        Ok(block)
    }

    /// Cache write ops for one of K or V at `pos`, in node order.
    fn write_ops(&self, pos: usize) -> Vec<NodeOp> {
        let s = &self.shape;
        let d = s.head_dim;
        match s.kv_format {
            BlockFormat::Q8_0 => vec![NodeOp::QuantizeKv {
                dst_block: pos * d / 32,
                dst_row_stride: s.capacity * d / 32,
            }],
            _ => (0..s.kv_heads)
                .map(|h| NodeOp::ElementwiseRange {
                    kind: EwKind::CopyCast,
                    scale: 1.0,
                    range: EwRange {
                        n: d,
                        a_off: h * d,
                        b_off: 0,
                        dst_off: (h * s.capacity + pos) * d,
                    },
                })
                .collect(),
        }
    }

    fn attention_op(&self, pos: usize) -> NodeOp {
        NodeOp::FlashDecode {
            seq_len: pos + 1,
            scale: 1.0 / (self.shape.head_dim as f32).sqrt(),
            splits: self.shape.splits,
        }
    }

    /// Node updates that move the block to the token at `pos`.
    pub fn ops_at(&self, pos: usize) -> Vec<(usize, NodeOp)> {
        let writes = self.write_ops(pos);
        let mut ops: Vec<(usize, NodeOp)> = self.k_writes.iter().copied().zip(writes.iter().copied()).collect();
        ops.extend(self.v_writes.iter().copied().zip(writes));
        ops.push((self.attention, self.attention_op(pos)));
        ops
    }

    /// Seeded values for the activations, weights and both caches.
    pub fn random_inputs(&self, seed: u64) -> Vec<(TensorId, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &self.shape;
        let dm = s.d_model();
        let mut gen = |n: usize, amp: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-amp..amp)).collect() };
        let wscale = 1.0 / (dm as f32).sqrt();
        let cache = s.kv_heads * s.capacity * s.head_dim;
        vec![
            (self.x, gen(dm, 1.0)),
            (self.norm_weight, gen(dm, 1.0).iter().map(|v| 1.0 + 0.5 * v).collect()),
            (self.w_q, gen(dm * dm, wscale)),
            (self.w_k, gen(s.kv_width() * dm, wscale)),
            (self.w_v, gen(s.kv_width() * dm, wscale)),
            (self.w_o, gen(dm * dm, wscale)),
            (self.k_cache, gen(cache, 1.0)),
            (self.v_cache, gen(cache, 1.0)),
        ]
    }
}
