//! Executable counterparts of the WGSL templates, run by the device's
//! software queue. Each follows its shader's workgroup algorithm, including
//! tile staging, reduction order and edge guards.

mod attention;
mod common;
mod linalg;
mod quantize;
mod rows;

use std::sync::Arc;

use crate::device::{ComputeProgram, DeviceCaps};
use crate::quant::BlockFormat;

use super::key::{KernelKey, KeyTuning, OpKind};

pub(crate) fn build(key: &KernelKey, caps: &DeviceCaps) -> Arc<dyn ComputeProgram> {
    let subgroup = key.variant.subgroups.then_some(caps.subgroup_size.0 as usize);
    let wg = match key.tuning {
        KeyTuning::Workgroup(w) => w as usize,
        KeyTuning::Flash { wg_size, .. } => wg_size as usize,
        _ => 0,
    };
    let d = key.variant.head_dim as usize;
    let f16 = |i: usize| key.formats.get(i) == Some(&BlockFormat::F16);
    match (key.op, key.tuning) {
        (OpKind::Matmul, KeyTuning::Matmul(p)) => Arc::new(linalg::Matmul {
            a: key.formats[0],
            b_f16: f16(1),
            p,
        }),
        (OpKind::Matvec, KeyTuning::Matvec(p)) => Arc::new(linalg::Matvec {
            a: key.formats[0],
            x_f16: f16(1),
            p,
            subgroup,
        }),
        (OpKind::FlashDecode, KeyTuning::Flash { kv_tile, .. }) => Arc::new(attention::FlashDecode {
            kv: key.formats[0],
            d,
            kv_tile: kv_tile as usize,
        }),
        (OpKind::FlashTile, KeyTuning::Flash { q_tile, kv_tile, .. }) => Arc::new(attention::FlashTile {
            kv: key.formats[0],
            d,
            q_tile: q_tile as usize,
            kv_tile: kv_tile as usize,
        }),
        (OpKind::FlashReduce, _) => Arc::new(attention::FlashReduce { d }),
        (OpKind::Elementwise(kind), _) => Arc::new(rows::Elementwise {
            kind,
            a_f16: f16(0),
            b_f16: f16(1),
            out_f16: key.variant.out_f16,
            wg_size: wg,
        }),
        (OpKind::RmsNorm, _) => Arc::new(rows::RmsNorm { wg_size: wg, subgroup }),
        (OpKind::SoftmaxRow, _) => Arc::new(rows::SoftmaxRow { wg_size: wg, subgroup }),
        (OpKind::Rope, _) => Arc::new(rows::Rope {
            wg_size: wg,
            in_place: key.variant.in_place,
        }),
        (OpKind::QuantizeKv, _) => Arc::new(quantize::QuantizeKv {
            x_f16: f16(0),
            wg_size: wg,
        }),
        (op, tuning) => unreachable!("{op} specialized with {tuning:?}"),
    }
}
