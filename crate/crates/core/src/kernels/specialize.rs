//! Variant selection and source generation.

use crate::device::DeviceCaps;
use crate::quant::BlockFormat;
use crate::shaderpp::{preprocess_mapped, DefineSet, Preprocessed};
use crate::tensor::TensorDesc;

use super::key::*;
use super::templates::{template, Embedded};

/// How a kernel's workgroup grid follows from the problem size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatchRule {
    /// `[ceil(cols / tile_n), ceil(rows / tile_m)]`.
    Tiled { tile_m: u32, tile_n: u32 },
    /// `ceil(items / per_group)` workgroups folded into x and y.
    Linear { per_group: u32 },
    /// `[heads, splits]`.
    HeadsBySplits,
    /// `[ceil(q_len / q_tile), heads]`.
    QueryTiles { q_tile: u32 },
    /// `[ceil(words / per_group), rows]`.
    WordRows { per_group: u32 },
}

impl DispatchRule {
    /// Grid for a problem extent. The meaning of `extent` follows the rule:
    /// `(rows, cols)`, `(items, _)`, `(heads, splits)`, `(q_len, heads)` or
    /// `(words, rows)`.
    pub fn grid(&self, extent: (usize, usize), max_per_dim: u32) -> [u32; 3] {
        let (a, b) = extent;
        match *self {
            DispatchRule::Tiled { tile_m, tile_n } => [b.div_ceil(tile_n as usize) as u32, a.div_ceil(tile_m as usize) as u32, 1],
            DispatchRule::Linear { per_group } => fold(a.div_ceil(per_group as usize) as u64, max_per_dim),
            DispatchRule::HeadsBySplits => [a as u32, b as u32, 1],
            DispatchRule::QueryTiles { q_tile } => [a.div_ceil(q_tile as usize) as u32, b as u32, 1],
            DispatchRule::WordRows { per_group } => [a.div_ceil(per_group as usize) as u32, b as u32, 1],
        }
    }
}

/// Spread `groups` over x and y so neither exceeds `max`. Kernels recover
/// the linear index as `wg.y * nwg.x + wg.x` and guard the excess.
pub fn fold(groups: u64, max: u32) -> [u32; 3] {
    let groups = groups.max(1);
    if groups <= max as u64 {
        return [groups as u32, 1, 1];
    }
    let y = groups.div_ceil(max as u64);
    [groups.div_ceil(y) as u32, y as u32, 1]
}

#[derive(Debug, Clone)]
pub struct Specialization {
    pub key: KernelKey,
    pub source: Preprocessed,
    pub rule: DispatchRule,
    /// Grid for the context's own shapes.
    pub workgroups: [u32; 3],
}

fn format_flag(f: BlockFormat) -> String {
    format!("FMT_{}", f.to_string().to_ascii_uppercase())
}

fn violation(msg: String) -> KernelError {
    KernelError::TuningViolatesDeviceLimits(msg)
}

fn check_pow2(name: &str, v: u32) -> Result<(), KernelError> {
    if v == 0 || !v.is_power_of_two() {
        return Err(violation(format!("{name}={v} is not a power of two")));
    }
    Ok(())
}

fn check_shared(bytes: u64, caps: &DeviceCaps) -> Result<(), KernelError> {
    if bytes > caps.shared_memory_bytes as u64 {
        return Err(violation(format!(
            "needs {bytes} bytes of workgroup memory, device has {}",
            caps.shared_memory_bytes
        )));
    }
    Ok(())
}

fn check_workgroup(x: u32, y: u32, caps: &DeviceCaps) -> Result<(), KernelError> {
    if x * y > caps.max_workgroup_size || x > caps.max_workgroup_dims[0] || y > caps.max_workgroup_dims[1] {
        return Err(violation(format!(
            "workgroup {x}x{y} exceeds the device limit of {} invocations",
            caps.max_workgroup_size
        )));
    }
    Ok(())
}

/// Row-reduction workgroups must cover whole subgroups.
fn check_reduction_wg(wg: u32, subgroups: bool, caps: &DeviceCaps) -> Result<(), KernelError> {
    check_pow2("WG_SIZE", wg)?;
    check_workgroup(wg, 1, caps)?;
    if subgroups && wg < caps.subgroup_size.1 {
        return Err(violation(format!(
            "WG_SIZE={wg} is smaller than the maximum subgroup size {}",
            caps.subgroup_size.1
        )));
    }
    check_shared(wg as u64 * 4, caps)
}

pub fn validate_matmul(p: &MatmulParams, caps: &DeviceCaps) -> Result<(), KernelError> {
    for (name, v) in [
        ("TILE_M", p.tile_m),
        ("TILE_N", p.tile_n),
        ("TILE_K", p.tile_k),
        ("RT_M", p.rt_m),
        ("RT_N", p.rt_n),
        ("WG_X", p.wg_x),
        ("WG_Y", p.wg_y),
    ] {
        check_pow2(name, v)?;
    }
    check_workgroup(p.wg_x, p.wg_y, caps)?;
    if p.tile_m != p.wg_y * p.rt_m || p.tile_n != p.wg_x * p.rt_n {
        return Err(violation(format!(
            "tiles {}x{} do not equal workgroup {}x{} times register tile {}x{}",
            p.tile_m, p.tile_n, p.wg_y, p.wg_x, p.rt_m, p.rt_n
        )));
    }
    check_shared(((p.tile_m * p.tile_k + p.tile_k * p.tile_n) * 4) as u64, caps)
}

pub fn validate_matvec(p: &MatvecParams, subgroups: bool, caps: &DeviceCaps) -> Result<(), KernelError> {
    check_pow2("ROWS_PER_WG", p.rows_per_wg)?;
    check_pow2("VEC", p.vec)?;
    check_reduction_wg(p.wg_size, subgroups, caps)
}

pub fn flash_shared_bytes(op: OpKind, q_tile: u32, kv_tile: u32, d: u32) -> u64 {
    let (q, kv, d) = (q_tile as u64, kv_tile as u64, d as u64);
    match op {
        OpKind::FlashDecode => (d + kv * d + kv) * 4,
        _ => (q * d + kv * d + q * kv + q * d + 3 * q) * 4,
    }
}

pub fn validate_flash(p: &FlashParams, op: OpKind, d: u32, caps: &DeviceCaps) -> Result<(), KernelError> {
    check_pow2("Q_TILE", p.q_tile)?;
    check_pow2("KV_TILE", p.kv_tile)?;
    if p.splits > MAX_SPLITS {
        return Err(violation(format!("SPLITS={} exceeds the cap of {MAX_SPLITS}", p.splits)));
    }
    let wg = if op == OpKind::FlashTile { FLASH_TILE_WG } else { FLASH_DECODE_WG };
    check_workgroup(wg, 1, caps)?;
    check_shared(flash_shared_bytes(op, p.q_tile, p.kv_tile, d), caps)
}

fn operand(ctx: &OpContext, i: usize) -> Result<&TensorDesc, KernelError> {
    ctx.operands
        .get(i)
        .ok_or_else(|| KernelError::ShapeMismatch(format!("{} expects operand {i}", ctx.op)))
}

fn require_format(op: OpKind, f: BlockFormat, allowed: &[BlockFormat]) -> Result<(), KernelError> {
    if allowed.contains(&f) {
        Ok(())
    } else {
        Err(KernelError::UnsupportedFormatForOp { op, format: f })
    }
}

fn check_shapes(ctx: &OpContext) -> Result<(), KernelError> {
    for (i, t) in ctx.operands.iter().enumerate() {
        if t.shape.is_empty() || t.shape.contains(&0) {
            return Err(KernelError::ShapeMismatch(format!("operand {i} has an empty shape {:?}", t.shape)));
        }
        if t.inner_dim() % t.format.block_len() != 0 {
            return Err(KernelError::ShapeMismatch(format!(
                "operand {i}: inner dimension {} is not a multiple of the {} block length {}",
                t.inner_dim(),
                t.format,
                t.format.block_len()
            )));
        }
    }
    Ok(())
}

const PLAIN: [BlockFormat; 2] = [BlockFormat::F32, BlockFormat::F16];
const KV_FORMATS: [BlockFormat; 3] = [BlockFormat::F16, BlockFormat::Q8_0, BlockFormat::Q4_0];

/// Choose the variant for `ctx`, generate its source and dispatch rule.
pub fn specialize(ctx: &OpContext, params: Option<&TuningParams>) -> Result<Specialization, KernelError> {
    let defaults = TuningParams::default();
    let params = params.unwrap_or(&defaults);
    let caps = &ctx.caps;
    check_shapes(ctx)?;
    let op = ctx.op;
    let mut variant = VariantFlags::default();
    let mut defines = DefineSet::new();
    let max = caps.max_workgroups_per_dim;

    let (formats, tuning, rule, extent) = match op {
        OpKind::Matmul => {
            let (a, b, c) = (operand(ctx, 0)?, operand(ctx, 1)?, operand(ctx, 2)?);
            require_format(op, b.format, &PLAIN)?;
            require_format(op, c.format, &[BlockFormat::F32])?;
            let (m, k) = dims2(a)?;
            let (kb, n) = dims2(b)?;
            if k != kb || dims2(c)? != (m, n) {
                return Err(KernelError::ShapeMismatch(format!(
                    "matmul {:?} x {:?} -> {:?}",
                    a.shape, b.shape, c.shape
                )));
            }
            let p = params.matmul;
            validate_matmul(&p, caps)?;
            for (name, v) in [
                ("TILE_M", p.tile_m),
                ("TILE_N", p.tile_n),
                ("TILE_K", p.tile_k),
                ("RT_M", p.rt_m),
                ("RT_N", p.rt_n),
                ("WG_X", p.wg_x),
                ("WG_Y", p.wg_y),
            ] {
                defines.set(name, v)?;
            }
            if b.format == BlockFormat::F16 {
                defines.flag("B_F16")?;
            }
            let rule = DispatchRule::Tiled {
                tile_m: p.tile_m,
                tile_n: p.tile_n,
            };
            (vec![a.format, b.format], KeyTuning::Matmul(p), rule, (m, n))
        }
        OpKind::Matvec => {
            let (a, x, y) = (operand(ctx, 0)?, operand(ctx, 1)?, operand(ctx, 2)?);
            require_format(op, x.format, &PLAIN)?;
            require_format(op, y.format, &[BlockFormat::F32])?;
            let (m, k) = dims2(a)?;
            if x.elements() != k || y.elements() != m {
                return Err(KernelError::ShapeMismatch(format!(
                    "matvec {:?} x {:?} -> {:?}",
                    a.shape, x.shape, y.shape
                )));
            }
            variant.subgroups = caps.subgroups;
            let p = params.matvec;
            validate_matvec(&p, variant.subgroups, caps)?;
            variant.vec_width = p.vec;
            defines.set("WG_SIZE", p.wg_size)?;
            defines.set("ROWS_PER_WG", p.rows_per_wg)?;
            defines.set("VEC", p.vec)?;
            if x.format == BlockFormat::F16 {
                defines.flag("X_F16")?;
            }
            let rule = DispatchRule::Linear { per_group: p.rows_per_wg };
            (vec![a.format, x.format], KeyTuning::Matvec(p), rule, (m, 0))
        }
        OpKind::FlashDecode | OpKind::FlashTile | OpKind::FlashReduce => {
            let q = operand(ctx, 0)?;
            let d = q.inner_dim();
            if d != 64 && d != 128 {
                return Err(KernelError::UnsupportedHeadDim(d));
            }
            variant.head_dim = d as u32;
            let p = params.flash;
            let wg = if op == OpKind::FlashTile { FLASH_TILE_WG } else { FLASH_DECODE_WG };
            defines.set("HEAD_DIM", d)?;
            defines.set("WG_SIZE", wg)?;
            if op == OpKind::FlashReduce {
                // Operand 0 is the query, for the head count and dimension.
                let heads = q.outer_rows();
                let rule = DispatchRule::HeadsBySplits;
                (vec![], KeyTuning::Workgroup(wg), rule, (heads, 1))
            } else {
                let (kc, vc, o) = (operand(ctx, 1)?, operand(ctx, 2)?, operand(ctx, 3)?);
                if !KV_FORMATS.contains(&kc.format) {
                    return Err(KernelError::UnsupportedKVFormat(kc.format));
                }
                if vc.format != kc.format {
                    return Err(KernelError::UnsupportedKVFormat(vc.format));
                }
                require_format(op, q.format, &[BlockFormat::F32])?;
                require_format(op, o.format, &[BlockFormat::F32])?;
                if kc.rank() != 3 || kc.shape != vc.shape || kc.inner_dim() != d || o.shape != q.shape {
                    return Err(KernelError::ShapeMismatch(format!(
                        "attention q {:?}, k {:?}, v {:?}, o {:?}",
                        q.shape, kc.shape, vc.shape, o.shape
                    )));
                }
                let heads = q.shape[0];
                if kc.shape[0] == 0 || heads % kc.shape[0] != 0 {
                    return Err(KernelError::ShapeMismatch(format!(
                        "{heads} query heads cannot share {} KV heads",
                        kc.shape[0]
                    )));
                }
                validate_flash(&p, op, d as u32, caps)?;
                defines.set("KV_TILE", p.kv_tile)?;
                defines.set(&format_flag(kc.format), 1)?;
                defines.set("BLOCK_LEN", kc.format.block_len())?;
                let tuning = if op == OpKind::FlashTile {
                    if q.rank() != 3 {
                        return Err(KernelError::ShapeMismatch(format!("flash_tile query {:?}", q.shape)));
                    }
                    defines.set("Q_TILE", p.q_tile)?;
                    KeyTuning::Flash {
                        q_tile: p.q_tile,
                        kv_tile: p.kv_tile,
                        wg_size: wg,
                    }
                } else {
                    if q.rank() != 2 {
                        return Err(KernelError::ShapeMismatch(format!("flash_decode query {:?}", q.shape)));
                    }
                    defines.set("DIMS_PER_THREAD", d as u32 / wg)?;
                    KeyTuning::Flash {
                        q_tile: 1,
                        kv_tile: p.kv_tile,
                        wg_size: wg,
                    }
                };
                let (rule, extent) = if op == OpKind::FlashTile {
                    (DispatchRule::QueryTiles { q_tile: p.q_tile }, (q.shape[1], heads))
                } else {
                    (DispatchRule::HeadsBySplits, (heads, p.splits_for(kc.shape[1]) as usize))
                };
                (vec![kc.format], tuning, rule, extent)
            }
        }
        OpKind::Elementwise(kind) => {
            let a = operand(ctx, 0)?;
            let dst = operand(ctx, ctx.operands.len() - 1)?;
            require_format(op, a.format, &PLAIN)?;
            require_format(op, dst.format, &PLAIN)?;
            let mut formats = vec![a.format];
            if kind.binary() {
                if ctx.operands.len() != 3 {
                    return Err(KernelError::ShapeMismatch(format!("{op} takes two inputs")));
                }
                let b = operand(ctx, 1)?;
                require_format(op, b.format, &PLAIN)?;
                if b.elements() != a.elements() {
                    return Err(KernelError::ShapeMismatch(format!("{op} {:?} vs {:?}", a.shape, b.shape)));
                }
                if b.format == BlockFormat::F16 {
                    defines.flag("B_F16")?;
                }
                formats.push(b.format);
            } else {
                formats.push(BlockFormat::F32);
            }
            formats.push(dst.format);
            if a.format == BlockFormat::F16 {
                defines.flag("A_F16")?;
            }
            variant.out_f16 = dst.format == BlockFormat::F16;
            let wg = params.linear_wg_size;
            check_pow2("WG_SIZE", wg)?;
            check_workgroup(wg, 1, caps)?;
            defines.set("WG_SIZE", wg)?;
            let per_group = if variant.out_f16 { 2 * wg } else { wg };
            (
                formats,
                KeyTuning::Workgroup(wg),
                DispatchRule::Linear { per_group },
                (a.elements(), 0),
            )
        }
        OpKind::RmsNorm | OpKind::SoftmaxRow => {
            let x = operand(ctx, 0)?;
            require_format(op, x.format, &[BlockFormat::F32])?;
            for t in &ctx.operands[1..] {
                require_format(op, t.format, &[BlockFormat::F32])?;
            }
            if op == OpKind::RmsNorm && operand(ctx, 1)?.elements() != x.inner_dim() {
                return Err(KernelError::ShapeMismatch(format!(
                    "rms_norm weight {:?} for rows of {}",
                    ctx.operands[1].shape,
                    x.inner_dim()
                )));
            }
            variant.subgroups = caps.subgroups;
            let wg = params.row_wg_size;
            check_reduction_wg(wg, variant.subgroups, caps)?;
            defines.set("WG_SIZE", wg)?;
            (
                vec![BlockFormat::F32],
                KeyTuning::Workgroup(wg),
                DispatchRule::Linear { per_group: 1 },
                (x.outer_rows(), 0),
            )
        }
        OpKind::Rope => {
            let x = operand(ctx, 0)?;
            require_format(op, x.format, &[BlockFormat::F32])?;
            if x.rank() != 3 || x.inner_dim() % 2 != 0 {
                return Err(KernelError::ShapeMismatch(format!(
                    "rope expects [T, H, even D], got {:?}",
                    x.shape
                )));
            }
            variant.in_place = ctx.in_place;
            let wg = params.linear_wg_size;
            check_pow2("WG_SIZE", wg)?;
            check_workgroup(wg, 1, caps)?;
            defines.set("WG_SIZE", wg)?;
            (
                vec![BlockFormat::F32],
                KeyTuning::Workgroup(wg),
                DispatchRule::Linear { per_group: wg },
                (x.elements() / 2, 0),
            )
        }
        OpKind::QuantizeKv => {
            let (src, dst) = (operand(ctx, 0)?, operand(ctx, 1)?);
            require_format(op, src.format, &PLAIN)?;
            require_format(op, dst.format, &[BlockFormat::Q8_0])?;
            if src.inner_dim() % 32 != 0 {
                return Err(KernelError::ShapeMismatch(format!(
                    "q8_0 rows need a multiple of 32 values, got {}",
                    src.inner_dim()
                )));
            }
            if src.format == BlockFormat::F16 {
                defines.flag("X_F16")?;
            }
            let wg = 64;
            defines.set("WG_SIZE", wg)?;
            let words = src.inner_dim() / 32 * 34 / 4 + 2;
            (
                vec![src.format, BlockFormat::Q8_0],
                KeyTuning::Workgroup(wg),
                DispatchRule::WordRows { per_group: wg },
                (words, src.outer_rows()),
            )
        }
    };

    // The weight/KV operand selects the dequant fragment.
    if matches!(op, OpKind::Matmul | OpKind::Matvec) {
        defines.set(&format_flag(formats[0]), 1)?;
        defines.set("BLOCK_LEN", formats[0].block_len())?;
    }
    for flag in (KernelKey {
        op,
        formats: vec![],
        variant,
        tuning,
    })
    .flag_names()
    {
        defines.flag(flag)?;
    }
    let key = KernelKey {
        op,
        formats,
        variant,
        tuning,
    };
    let source = preprocess_mapped(&template(op.template()), &defines, &Embedded)?;
    let workgroups = rule.grid(extent, max);
    Ok(Specialization {
        key,
        source,
        rule,
        workgroups,
    })
}

fn dims2(t: &TensorDesc) -> Result<(usize, usize), KernelError> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(KernelError::ShapeMismatch(format!("expected a matrix, got {s:?}"))),
    }
}
