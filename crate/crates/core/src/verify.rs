//! Device-versus-oracle parity cases and the randomized shape sweep behind
//! `qkern verify` and the kernel test suites.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::device::{BufferSlice, DeviceError};
use crate::kernels::{download_f16, download_f32, run_launches, upload, EwKind, KernelError, Kernels, Launch, MAX_SPLITS};
use crate::oracle::{self, AttnShape};
use crate::quant::{dequantize_tensor, nmse, quantize_tensor, BlockFormat, QuantError};
use crate::tensor::TensorDesc;

/// Parity bound when every operand is f32 or block-quantized.
pub const NMSE_F32: f64 = 1e-7;
/// Parity bound when any operand is f16.
pub const NMSE_F16: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// One parity case: an op, its shape and operand formats.
#[derive(Debug, Clone, PartialEq)]
pub enum Case {
    Matmul {
        m: usize,
        n: usize,
        k: usize,
        a: BlockFormat,
        b: BlockFormat,
        /// B stored column-major (strides `[1, k]`).
        b_transposed: bool,
    },
    Matvec {
        m: usize,
        k: usize,
        a: BlockFormat,
        x: BlockFormat,
    },
    FlashDecode {
        heads: usize,
        kv_heads: usize,
        seq: usize,
        cap: usize,
        d: usize,
        kv: BlockFormat,
        splits: Option<u32>,
    },
    FlashTile {
        heads: usize,
        kv_heads: usize,
        q_len: usize,
        seq: usize,
        cap: usize,
        d: usize,
        kv: BlockFormat,
        causal: bool,
    },
    Elementwise {
        kind: EwKind,
        n: usize,
        a: BlockFormat,
        b: BlockFormat,
        out: BlockFormat,
    },
    RmsNorm {
        rows: usize,
        d: usize,
    },
    SoftmaxRow {
        rows: usize,
        d: usize,
    },
    Rope {
        t: usize,
        h: usize,
        d: usize,
        in_place: bool,
    },
    QuantizeKv {
        rows: usize,
        d: usize,
        src: BlockFormat,
    },
}

impl Case {
    /// Kernel name used for filtering and reports.
    pub fn kernel(&self) -> &'static str {
        match self {
            Case::Matmul { .. } => "matmul",
            Case::Matvec { .. } => "matvec",
            Case::FlashDecode { .. } => "flash_decode",
            Case::FlashTile { .. } => "flash_tile",
            Case::Elementwise { kind, .. } => kind.name(),
            Case::RmsNorm { .. } => "rms_norm",
            Case::SoftmaxRow { .. } => "softmax_row",
            Case::Rope { .. } => "rope",
            Case::QuantizeKv { .. } => "quantize_kv",
        }
    }

    fn formats(&self) -> Vec<BlockFormat> {
        match *self {
            Case::Matmul { a, b, .. } => vec![a, b],
            Case::Matvec { a, x, .. } => vec![a, x],
            Case::FlashDecode { kv, .. } | Case::FlashTile { kv, .. } => vec![kv],
            Case::Elementwise { kind, a, b, out, .. } if kind.binary() => vec![a, b, out],
            Case::Elementwise { a, out, .. } => vec![a, out],
            Case::QuantizeKv { src, .. } => vec![src],
            _ => vec![BlockFormat::F32],
        }
    }

    /// NMSE bound for this case.
    pub fn threshold(&self) -> f64 {
        if self.formats().contains(&BlockFormat::F16) {
            NMSE_F16
        } else {
            NMSE_F32
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kernel())?;
        for fmt in self.formats() {
            write!(f, " {fmt}")?;
        }
        match *self {
            Case::Matmul { m, n, k, b_transposed, .. } => {
                write!(f, " {m}x{n}x{k}{}", if b_transposed { " bT" } else { "" })
            }
            Case::Matvec { m, k, .. } => write!(f, " {m}x{k}"),
            Case::FlashDecode {
                heads,
                kv_heads,
                seq,
                cap,
                d,
                splits,
                ..
            } => {
                let s = splits.map_or("auto".to_string(), |s| s.to_string());
                write!(f, " h={heads}/{kv_heads} S={seq}/{cap} D={d} splits={s}")
            }
            Case::FlashTile {
                heads,
                kv_heads,
                q_len,
                seq,
                cap,
                d,
                causal,
                ..
            } => write!(
                f,
                " h={heads}/{kv_heads} T={q_len} S={seq}/{cap} D={d}{}",
                if causal { " causal" } else { "" }
            ),
            Case::Elementwise { n, .. } => write!(f, " n={n}"),
            Case::RmsNorm { rows, d } | Case::SoftmaxRow { rows, d } => write!(f, " {rows}x{d}"),
            Case::Rope { t, h, d, in_place } => {
                write!(f, " {t}x{h}x{d}{}", if in_place { " in_place" } else { "" })
            }
            Case::QuantizeKv { rows, d, .. } => write!(f, " {rows}x{d}"),
        }
    }
}

/// Outcome of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Parity {
    pub case: Case,
    pub nmse: f64,
    pub threshold: f64,
    /// Out-of-bounds accesses the device counted during the run.
    pub oob: u64,
    /// Bytes differing from the CPU codec (quantize_kv only).
    pub byte_mismatches: usize,
    /// Labels of the kernels that ran.
    pub kernels: Vec<String>,
}

impl Parity {
    pub fn passed(&self) -> bool {
        self.nmse <= self.threshold && self.oob == 0 && self.byte_mismatches == 0
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Host data encoded in `format`, its device buffer, and the values the
/// device will see.
struct Operand {
    desc: TensorDesc,
    values: Vec<f32>,
}

struct Run<'a> {
    kernels: &'a Kernels,
    buffers: Vec<crate::device::Buffer>,
}

impl<'a> Run<'a> {
    fn new(kernels: &'a Kernels) -> Self {
        Self {
            kernels,
            buffers: Vec::new(),
        }
    }

    fn operand(&mut self, values: &[f32], shape: &[usize], format: BlockFormat) -> Result<Operand, VerifyError> {
        let (bytes, desc) = quantize_tensor(values, shape, format)?;
        let seen = dequantize_tensor(&bytes, &desc)?;
        let buffer = upload(self.kernels.device(), &bytes)?;
        self.buffers.push(buffer);
        Ok(Operand {
            desc: desc.with_binding(buffer.id, 0),
            values: seen,
        })
    }

    fn output(&mut self, shape: &[usize], format: BlockFormat) -> Result<TensorDesc, VerifyError> {
        let desc = TensorDesc::contiguous(shape, format);
        let bytes = vec![0u8; desc.byte_size()];
        let buffer = upload(self.kernels.device(), &bytes)?;
        self.buffers.push(buffer);
        Ok(desc.with_binding(buffer.id, 0))
    }

    fn read(&self, t: &TensorDesc) -> Result<Vec<f32>, VerifyError> {
        let b = t.binding.expect("bound");
        let device = self.kernels.device();
        Ok(match t.format {
            BlockFormat::F16 => download_f16(device, b.buffer, b.byte_offset, t.elements())?,
            _ => download_f32(device, b.buffer, b.byte_offset, t.elements())?,
        })
    }

    fn read_bytes(&self, t: &TensorDesc) -> Result<Vec<u8>, VerifyError> {
        let b = t.binding.expect("bound");
        let mut bytes = self.kernels.device().read_buffer(BufferSlice {
            buffer: b.buffer,
            offset: b.byte_offset,
            size: (t.byte_size() as u64).next_multiple_of(4),
        })?;
        bytes.truncate(t.byte_size());
        Ok(bytes)
    }

    fn exec(&self, launches: &[Launch]) -> Result<u64, VerifyError> {
        Ok(run_launches(self.kernels.device(), launches)?.oob_accesses)
    }
}

impl Drop for Run<'_> {
    fn drop(&mut self) {
        for b in self.buffers.drain(..) {
            self.kernels.device().destroy_buffer(b);
        }
    }
}

/// Rows `[..seq]` of each head of a `[heads, cap, d]` cache.
fn cache_prefix(values: &[f32], heads: usize, cap: usize, seq: usize, d: usize) -> Vec<f32> {
    (0..heads).flat_map(|h| values[h * cap * d..][..seq * d].iter().copied()).collect()
}

/// Run `case` on the device and compare against the oracle. A nonzero
/// `perturb` is added to every device output before comparison, as a fault
/// injection for the reporting path.
pub fn run_case(kernels: &Kernels, case: &Case, seed: u64, perturb: f32) -> Result<Parity, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run::new(kernels);
    let mut byte_mismatches = 0;
    let (launches, reference, out) = match *case {
        Case::Matmul {
            m,
            n,
            k,
            a,
            b,
            b_transposed,
        } => {
            let av = run.operand(&normal(&mut rng, m * k), &[m, k], a)?;
            let (bv, b_rowmajor) = if b_transposed {
                let op = run.operand(&normal(&mut rng, n * k), &[n, k], b)?;
                let mut rm = vec![0.0; k * n];
                for j in 0..n {
                    for kk in 0..k {
                        rm[kk * n + j] = op.values[j * k + kk];
                    }
                }
                let mut desc = op.desc.clone();
                desc.shape = vec![k, n];
                desc.strides = vec![1, k];
                (Operand { desc, values: op.values }, rm)
            } else {
                let op = run.operand(&normal(&mut rng, k * n), &[k, n], b)?;
                let rm = op.values.clone();
                (op, rm)
            };
            let c = run.output(&[m, n], BlockFormat::F32)?;
            let l = kernels.matmul(&av.desc, &bv.desc, &c)?;
            (vec![l], oracle::matmul(&av.values, &b_rowmajor, m, k, n), c)
        }
        Case::Matvec { m, k, a, x } => {
            let av = run.operand(&normal(&mut rng, m * k), &[m, k], a)?;
            let xv = run.operand(&normal(&mut rng, k), &[k], x)?;
            let y = run.output(&[m], BlockFormat::F32)?;
            let l = kernels.matvec(&av.desc, &xv.desc, &y)?;
            (vec![l], oracle::matvec(&av.values, &xv.values, m, k), y)
        }
        Case::FlashDecode {
            heads,
            kv_heads,
            seq,
            cap,
            d,
            kv,
            splits,
        } => {
            let q = run.operand(&normal(&mut rng, heads * d), &[heads, d], BlockFormat::F32)?;
            let kc = run.operand(&normal(&mut rng, kv_heads * cap * d), &[kv_heads, cap, d], kv)?;
            let vc = run.operand(&normal(&mut rng, kv_heads * cap * d), &[kv_heads, cap, d], kv)?;
            let o = run.output(&[heads, d], BlockFormat::F32)?;
            let partials = run.output(&[MAX_SPLITS as usize * heads * (d + 2)], BlockFormat::F32)?;
            let scale = 1.0 / (d as f32).sqrt();
            let ls = kernels.flash_decode(&q.desc, &kc.desc, &vc.desc, &o, &partials, seq, scale, splits)?;
            let shape = AttnShape {
                heads,
                kv_heads,
                q_len: 1,
                seq_len: seq,
                head_dim: d,
                scale,
                causal: false,
            };
            let k_ref = cache_prefix(&kc.values, kv_heads, cap, seq, d);
            let v_ref = cache_prefix(&vc.values, kv_heads, cap, seq, d);
            (ls, oracle::attention(&q.values, &k_ref, &v_ref, shape), o)
        }
        Case::FlashTile {
            heads,
            kv_heads,
            q_len,
            seq,
            cap,
            d,
            kv,
            causal,
        } => {
            let q = run.operand(&normal(&mut rng, heads * q_len * d), &[heads, q_len, d], BlockFormat::F32)?;
            let kc = run.operand(&normal(&mut rng, kv_heads * cap * d), &[kv_heads, cap, d], kv)?;
            let vc = run.operand(&normal(&mut rng, kv_heads * cap * d), &[kv_heads, cap, d], kv)?;
            let o = run.output(&[heads, q_len, d], BlockFormat::F32)?;
            let scale = 1.0 / (d as f32).sqrt();
            let l = kernels.flash_tile(&q.desc, &kc.desc, &vc.desc, &o, seq, scale, causal)?;
            let shape = AttnShape {
                heads,
                kv_heads,
                q_len,
                seq_len: seq,
                head_dim: d,
                scale,
                causal,
            };
            let k_ref = cache_prefix(&kc.values, kv_heads, cap, seq, d);
            let v_ref = cache_prefix(&vc.values, kv_heads, cap, seq, d);
            (vec![l], oracle::attention(&q.values, &k_ref, &v_ref, shape), o)
        }
        Case::Elementwise { kind, n, a, b, out } => {
            let av = run.operand(&normal(&mut rng, n), &[n], a)?;
            let bv = run.operand(&normal(&mut rng, n), &[n], b)?;
            let dst = run.output(&[n], out)?;
            let s = 0.375;
            let l = kernels.elementwise(kind, &av.desc, kind.binary().then_some(&bv.desc), &dst, s)?;
            let reference = match kind {
                EwKind::Add => oracle::add(&av.values, &bv.values),
                EwKind::Mul => oracle::mul(&av.values, &bv.values),
                EwKind::Scale => oracle::scale(&av.values, s),
                EwKind::SiluGlu => oracle::silu_glu(&av.values, &bv.values),
                EwKind::CopyCast => av.values.clone(),
            };
            (vec![l], reference, dst)
        }
        Case::RmsNorm { rows, d } => {
            let x = run.operand(&normal(&mut rng, rows * d), &[rows, d], BlockFormat::F32)?;
            let w = run.operand(&normal(&mut rng, d), &[d], BlockFormat::F32)?;
            let y = run.output(&[rows, d], BlockFormat::F32)?;
            let eps = 1e-5;
            let l = kernels.rms_norm(&x.desc, &w.desc, &y, eps)?;
            (vec![l], oracle::rms_norm(&x.values, &w.values, d, eps), y)
        }
        Case::SoftmaxRow { rows, d } => {
            let v: Vec<f32> = normal(&mut rng, rows * d).iter().map(|v| v * 4.0).collect();
            let x = run.operand(&v, &[rows, d], BlockFormat::F32)?;
            let y = run.output(&[rows, d], BlockFormat::F32)?;
            let l = kernels.softmax_row(&x.desc, &y)?;
            (vec![l], oracle::softmax_rows(&x.values, d), y)
        }
        Case::Rope { t, h, d, in_place } => {
            let x = run.operand(&normal(&mut rng, t * h * d), &[t, h, d], BlockFormat::F32)?;
            let positions: Vec<u32> = (0..t).map(|_| rng.random_range(0..1024)).collect();
            let pos_bytes: Vec<u8> = positions.iter().flat_map(|p| p.to_le_bytes()).collect();
            let pos_buf = upload(kernels.device(), &pos_bytes)?;
            run.buffers.push(pos_buf);
            let theta = 10000.0;
            let reference = oracle::rope(&x.values, &positions, h, d, theta);
            if in_place {
                let l = kernels.rope(&x.desc, pos_buf.whole(), None, theta)?;
                (vec![l], reference, x.desc)
            } else {
                let y = run.output(&[t, h, d], BlockFormat::F32)?;
                let l = kernels.rope(&x.desc, pos_buf.whole(), Some(&y), theta)?;
                (vec![l], reference, y)
            }
        }
        Case::QuantizeKv { rows, d, src } => {
            let mut v = normal(&mut rng, rows * d);
            // Exercise the zero and constant-block paths now and then.
            if rows > 1 {
                v[..32].fill(0.0);
                let c = rng.random_range(-3.0f32..3.0);
                v[d..d + 32].fill(c);
            }
            let x = run.operand(&v, &[rows, d], src)?;
            let dst = run.output(&[rows, d], BlockFormat::Q8_0)?;
            let l = kernels.quantize_kv(&x.desc, &dst, 0, d / 32)?;
            let oob = run.exec(std::slice::from_ref(&l))?;
            let (expected, desc) = quantize_tensor(&x.values, &[rows, d], BlockFormat::Q8_0)?;
            let mut got = run.read_bytes(&dst)?;
            if perturb != 0.0 {
                got[2] = got[2].wrapping_add(1);
            }
            byte_mismatches = expected.iter().zip(&got).filter(|(a, b)| a != b).count();
            let reference = dequantize_tensor(&expected, &desc)?;
            let candidate = dequantize_tensor(&got, &desc)?;
            return Ok(Parity {
                case: case.clone(),
                nmse: nmse(&reference, &candidate)?,
                threshold: case.threshold(),
                oob,
                byte_mismatches,
                kernels: vec![l.kernel.key.label()],
            });
        }
    };
    let oob = run.exec(&launches)?;
    let mut got = run.read(&out)?;
    if perturb != 0.0 {
        got.iter_mut().for_each(|v| *v += perturb);
    }
    Ok(Parity {
        case: case.clone(),
        nmse: nmse(&reference, &got)?,
        threshold: case.threshold(),
        oob,
        byte_mismatches,
        kernels: launches.iter().map(|l| l.kernel.key.label()).collect(),
    })
}

/// Kernel names in sweep order.
pub const KERNELS: [&str; 13] = [
    "matmul",
    "matvec",
    "flash_decode",
    "flash_tile",
    "add",
    "mul",
    "scale",
    "silu_glu",
    "copy_cast",
    "rms_norm",
    "softmax_row",
    "rope",
    "quantize_kv",
];

const WEIGHT_FORMATS: [BlockFormat; 12] = BlockFormat::ALL;
const KV: [BlockFormat; 3] = [BlockFormat::F16, BlockFormat::Q8_0, BlockFormat::Q4_0];
const PLAIN: [BlockFormat; 2] = [BlockFormat::F32, BlockFormat::F16];

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// A size that is often one off a tile multiple.
fn edge_dim(rng: &mut ChaCha8Rng, tiles: &[usize], max: usize) -> usize {
    if rng.random_bool(0.6) {
        let t = pick(rng, tiles) * rng.random_range(1..=2);
        (t as i64 + rng.random_range(-1i64..=1)).clamp(1, max as i64) as usize
    } else {
        rng.random_range(1..=max)
    }
}

fn heads(rng: &mut ChaCha8Rng, max: usize) -> (usize, usize) {
    let kv = pick(rng, &[1, 2]);
    let group = pick(rng, &[1, 2, 4]);
    (kv * group.min(max / kv).max(1), kv)
}

/// `per_kernel` randomized cases for each kernel in `KERNELS`, with many
/// shapes one less or more than a tile multiple.
pub fn sweep(seed: u64, per_kernel: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for name in KERNELS {
        for i in 0..per_kernel {
            cases.push(random_case(&mut rng, name, i));
        }
    }
    cases
}

fn random_case(rng: &mut ChaCha8Rng, name: &str, i: usize) -> Case {
    match name {
        "matmul" => {
            // Every weight format appears; plain A keeps K free.
            let a = WEIGHT_FORMATS[i % WEIGHT_FORMATS.len()];
            let k = if a.is_quantized() {
                a.block_len() * rng.random_range(1..=(512 / a.block_len()).clamp(1, 4))
            } else {
                edge_dim(rng, &[16, 32], 160)
            };
            Case::Matmul {
                m: edge_dim(rng, &[8, 64], 140),
                n: edge_dim(rng, &[4, 64], 140),
                k,
                a,
                b: pick(rng, &PLAIN),
                b_transposed: rng.random_bool(0.25),
            }
        }
        "matvec" => {
            let a = WEIGHT_FORMATS[i % WEIGHT_FORMATS.len()];
            let k = if a.is_quantized() {
                a.block_len() * rng.random_range(1..=(2048 / a.block_len()).clamp(1, 8))
            } else {
                edge_dim(rng, &[4, 128, 512], 1100)
            };
            Case::Matvec {
                m: edge_dim(rng, &[128], 300),
                k,
                a,
                x: pick(rng, &PLAIN),
            }
        }
        "flash_decode" => {
            let (h, kvh) = heads(rng, 4);
            let seq = if rng.random_bool(0.4) {
                pick(rng, &[1, 31, 32, 33, 255, 256, 257, 512, 517])
            } else {
                rng.random_range(1..=600)
            };
            Case::FlashDecode {
                heads: h,
                kv_heads: kvh,
                seq,
                cap: seq + rng.random_range(0..40),
                d: pick(rng, &[64, 128]),
                kv: KV[i % KV.len()],
                splits: if rng.random_bool(0.3) {
                    None
                } else {
                    Some(pick(rng, &[1, 2, 4, 8]))
                },
            }
        }
        "flash_tile" => {
            let (h, kvh) = heads(rng, 2);
            let q_len = edge_dim(rng, &[8], 40);
            let seq = q_len + rng.random_range(0..300);
            Case::FlashTile {
                heads: h,
                kv_heads: kvh,
                q_len,
                seq,
                cap: seq + rng.random_range(0..40),
                d: pick(rng, &[64, 128]),
                kv: KV[i % KV.len()],
                causal: i.is_multiple_of(2),
            }
        }
        "add" | "mul" | "scale" | "silu_glu" | "copy_cast" => {
            let kind = EwKind::ALL.into_iter().find(|k| k.name() == name).unwrap();
            Case::Elementwise {
                kind,
                n: edge_dim(rng, &[256, 512], 5000),
                a: pick(rng, &PLAIN),
                b: pick(rng, &PLAIN),
                out: pick(rng, &PLAIN),
            }
        }
        "rms_norm" => Case::RmsNorm {
            rows: rng.random_range(1..=64),
            d: edge_dim(rng, &[128, 256], 1100),
        },
        "softmax_row" => Case::SoftmaxRow {
            rows: rng.random_range(1..=64),
            d: edge_dim(rng, &[128, 256], 1100),
        },
        "rope" => Case::Rope {
            t: rng.random_range(1..=16),
            h: rng.random_range(1..=8),
            d: 2 * edge_dim(rng, &[32, 64], 128),
            in_place: rng.random_bool(0.5),
        },
        "quantize_kv" => Case::QuantizeKv {
            rows: rng.random_range(1..=40),
            d: 32 * rng.random_range(1..=8),
            src: pick(rng, &PLAIN),
        },
        other => panic!("unknown kernel {other}"),
    }
}

/// Cases selected by `filter`: a kernel name selects exactly that kernel,
/// anything else matches as a substring of the case label.
pub fn filtered(cases: Vec<Case>, filter: Option<&str>) -> Vec<Case> {
    match filter {
        None => cases,
        Some(f) if KERNELS.contains(&f) => cases.into_iter().filter(|c| c.kernel() == f).collect(),
        Some(f) => cases.into_iter().filter(|c| c.to_string().contains(f)).collect(),
    }
}
