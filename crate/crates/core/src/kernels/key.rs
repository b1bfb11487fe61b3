//! Specialization identity and tuning parameters.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{CompileError, DeviceCaps, DeviceError};
use crate::quant::BlockFormat;
use crate::shaderpp::PreprocessError;
use crate::tensor::TensorDesc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EwKind {
    Add,
    Mul,
    Scale,
    SiluGlu,
    CopyCast,
}

impl EwKind {
    pub const ALL: [EwKind; 5] = [EwKind::Add, EwKind::Mul, EwKind::Scale, EwKind::SiluGlu, EwKind::CopyCast];

    /// Whether the op reads a second operand.
    pub fn binary(self) -> bool {
        matches!(self, EwKind::Add | EwKind::Mul | EwKind::SiluGlu)
    }

    fn flag(self) -> &'static str {
        match self {
            EwKind::Add => "OP_ADD",
            EwKind::Mul => "OP_MUL",
            EwKind::Scale => "OP_SCALE",
            EwKind::SiluGlu => "OP_SILU_GLU",
            EwKind::CopyCast => "OP_COPY_CAST",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EwKind::Add => "add",
            EwKind::Mul => "mul",
            EwKind::Scale => "scale",
            EwKind::SiluGlu => "silu_glu",
            EwKind::CopyCast => "copy_cast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Matmul,
    Matvec,
    FlashDecode,
    FlashReduce,
    FlashTile,
    Elementwise(EwKind),
    RmsNorm,
    Rope,
    SoftmaxRow,
    QuantizeKv,
}

/// Kernel categories used for time breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Matmul,
    Matvec,
    Attention,
    NormElementwise,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Matmul,
        Category::Matvec,
        Category::Attention,
        Category::NormElementwise,
        Category::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Matmul => "matmul",
            Category::Matvec => "matvec",
            Category::Attention => "attention",
            Category::NormElementwise => "norm/elementwise",
            Category::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl OpKind {
    pub fn template(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul_reg_tile.wgsl",
            OpKind::Matvec => "matvec.wgsl",
            OpKind::FlashDecode => "flash_decode.wgsl",
            OpKind::FlashReduce => "flash_reduce.wgsl",
            OpKind::FlashTile => "flash_tile.wgsl",
            OpKind::Elementwise(_) => "elementwise.wgsl",
            OpKind::RmsNorm => "rms_norm.wgsl",
            OpKind::Rope => "rope.wgsl",
            OpKind::SoftmaxRow => "softmax_row.wgsl",
            OpKind::QuantizeKv => "quantize_kv_q8_0.wgsl",
        }
    }

    pub fn category(self) -> Category {
        match self {
            OpKind::Matmul => Category::Matmul,
            OpKind::Matvec => Category::Matvec,
            OpKind::FlashDecode | OpKind::FlashReduce | OpKind::FlashTile => Category::Attention,
            OpKind::Elementwise(_) | OpKind::RmsNorm | OpKind::Rope | OpKind::SoftmaxRow => Category::NormElementwise,
            OpKind::QuantizeKv => Category::Other,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Matmul => f.write_str("matmul"),
            OpKind::Matvec => f.write_str("matvec"),
            OpKind::FlashDecode => f.write_str("flash_decode"),
            OpKind::FlashReduce => f.write_str("flash_reduce"),
            OpKind::FlashTile => f.write_str("flash_tile"),
            OpKind::Elementwise(k) => write!(f, "elementwise.{}", k.name()),
            OpKind::RmsNorm => f.write_str("rms_norm"),
            OpKind::Rope => f.write_str("rope"),
            OpKind::SoftmaxRow => f.write_str("softmax_row"),
            OpKind::QuantizeKv => f.write_str("quantize_kv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Accumulation {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatmulParams {
    pub tile_m: u32,
    pub tile_n: u32,
    pub tile_k: u32,
    pub rt_m: u32,
    pub rt_n: u32,
    pub wg_x: u32,
    pub wg_y: u32,
}

impl Default for MatmulParams {
    fn default() -> Self {
        Self {
            tile_m: 64,
            tile_n: 64,
            tile_k: 16,
            rt_m: 8,
            rt_n: 4,
            wg_x: 16,
            wg_y: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatvecParams {
    pub wg_size: u32,
    pub rows_per_wg: u32,
    pub vec: u32,
}

impl Default for MatvecParams {
    fn default() -> Self {
        Self {
            wg_size: 128,
            rows_per_wg: 1,
            vec: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlashParams {
    pub q_tile: u32,
    pub kv_tile: u32,
    /// KV splits for decode; 0 picks one from the sequence length.
    pub splits: u32,
}

impl Default for FlashParams {
    fn default() -> Self {
        Self {
            q_tile: 8,
            kv_tile: 32,
            splits: 0,
        }
    }
}

/// Largest decode split count; the runtime sizes the partials buffer for it.
pub const MAX_SPLITS: u32 = 8;

impl FlashParams {
    pub fn splits_for(&self, seq_len: usize) -> u32 {
        if self.splits > 0 {
            self.splits.min(MAX_SPLITS)
        } else {
            (seq_len.div_ceil(256) as u32).clamp(1, MAX_SPLITS)
        }
    }
}

/// Tunable parameters for every kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningParams {
    pub matmul: MatmulParams,
    pub matvec: MatvecParams,
    pub flash: FlashParams,
    /// Workgroup size of the row kernels (rms_norm, softmax_row).
    pub row_wg_size: u32,
    /// Workgroup size of the one-invocation-per-item kernels.
    pub linear_wg_size: u32,
}

impl Default for TuningParams {
    fn default() -> Self {
        Self {
            matmul: MatmulParams::default(),
            matvec: MatvecParams::default(),
            flash: FlashParams::default(),
            row_wg_size: 128,
            linear_wg_size: 256,
        }
    }
}

pub const FLASH_DECODE_WG: u32 = 64;
pub const FLASH_TILE_WG: u32 = 128;

/// Compile-time tuning carried by a key; only the relevant family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KeyTuning {
    Matmul(MatmulParams),
    Matvec(MatvecParams),
    Flash { q_tile: u32, kv_tile: u32, wg_size: u32 },
    Workgroup(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariantFlags {
    /// Subgroup reduction instead of the workgroup-memory tree.
    pub subgroups: bool,
    pub in_place: bool,
    pub vec_width: u32,
    pub accumulation: Accumulation,
    /// Head dimension for attention kernels, 0 elsewhere.
    pub head_dim: u32,
    /// Packed f16 output (elementwise).
    pub out_f16: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            subgroups: false,
            in_place: false,
            vec_width: 1,
            accumulation: Accumulation::F32,
            head_dim: 0,
            out_f16: false,
        }
    }
}

/// Everything that determines the generated shader. Equal keys always
/// produce identical source.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KernelKey {
    pub op: OpKind,
    pub formats: Vec<BlockFormat>,
    pub variant: VariantFlags,
    pub tuning: KeyTuning,
}

impl KernelKey {
    pub fn label(&self) -> String {
        let formats: Vec<String> = self.formats.iter().map(|f| f.to_string()).collect();
        let mut label = format!("{}[{}]", self.op, formats.join(","));
        if self.variant.subgroups {
            label.push_str("+sg");
        }
        label
    }

    /// Subgroup variants additionally need the device's subgroup size.
    pub(crate) fn flag_names(&self) -> Vec<&'static str> {
        let mut flags = Vec::new();
        if self.variant.subgroups {
            flags.push("USE_SUBGROUPS");
        }
        if self.variant.in_place {
            flags.push("IN_PLACE");
        }
        if self.variant.out_f16 {
            flags.push("OUT_F16");
        }
        if let OpKind::Elementwise(kind) = self.op {
            flags.push(kind.flag());
        }
        flags
    }
}

/// What a kernel is asked to do, with the device it will run on.
#[derive(Debug, Clone)]
pub struct OpContext {
    pub op: OpKind,
    pub operands: Vec<TensorDesc>,
    pub caps: DeviceCaps,
    pub in_place: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op} does not support operand format {format}")]
    UnsupportedFormatForOp { op: OpKind, format: BlockFormat },
    #[error("tuning parameters violate device limits: {0}")]
    TuningViolatesDeviceLimits(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported head dimension {0} (expected 64 or 128)")]
    UnsupportedHeadDim(usize),
    #[error("unsupported KV-cache format {0}")]
    UnsupportedKVFormat(BlockFormat),
    #[error("epsilon must be positive, got {0}")]
    EpsNonPositive(f32),
    #[error("operand {0} has no device binding")]
    Unbound(usize),
    #[error("binding offset {0} is not a multiple of the storage alignment")]
    MisalignedBinding(u64),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}
