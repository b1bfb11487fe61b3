//! Mirror of `quantize_kv_q8_0.wgsl`, including its hand-rolled f16
//! rounding and exact half-away code rounding, so that comparing its bytes
//! with the CPU codec checks the shader's arithmetic.

use crate::device::{Bindings, ComputeProgram};

use super::common::load_plain;

const F16_MAX: f32 = 65504.0;

pub(crate) fn f16_bits(v: f32) -> u32 {
    let bits = v.to_bits();
    let sign = (bits >> 16) & 0x8000;
    let e = ((bits >> 23) & 0xff) as i32 - 127;
    let mant = bits & 0x7f_ffff;
    if e < -25 {
        return sign;
    }
    let (full, shift, out_base) = if e < -14 {
        (mant | 0x80_0000, (-e - 1) as u32, 0)
    } else {
        (mant, 13, ((e + 15) as u32) << 10)
    };
    let mut q = full >> shift;
    let rem = full & ((1 << shift) - 1);
    let halfway = 1 << (shift - 1);
    if rem > halfway || (rem == halfway && q & 1 == 1) {
        q += 1;
    }
    sign | (out_base + q)
}

fn f16_value(h: u32) -> f32 {
    half::f16::from_bits(h as u16).to_f32()
}

fn code_of(a: f32, d: f32) -> i32 {
    let mut n = (a / d + 0.5).floor();
    if (n + 0.5) * d <= a {
        n += 1.0;
    } else if (n - 0.5) * d > a {
        n -= 1.0;
    }
    n as i32
}

fn scale_code(amax: f32, d: f32) -> i32 {
    if d == 0.0 || amax / d > 1.0e6 {
        return i32::MAX;
    }
    code_of(amax, d)
}

pub(crate) fn block_scale_bits(amax: f32) -> u32 {
    if amax == 0.0 {
        return 0;
    }
    let bits = f16_bits((amax / 127.0).min(F16_MAX));
    let d = f16_value(bits);
    if d == F16_MAX || scale_code(amax, d) == 127 {
        return bits;
    }
    let up = bits + 1;
    let up_hit = scale_code(amax, f16_value(up)) == 127;
    let down_hit = bits != 0 && scale_code(amax, f16_value(bits - 1)) == 127;
    match (down_hit, up_hit) {
        (true, true) => {
            if 2.0 * amax <= 127.0 * (f16_value(bits - 1) + f16_value(up)) {
                bits - 1
            } else {
                up
            }
        }
        (true, false) => bits - 1,
        (false, true) => up,
        (false, false) if scale_code(amax, d) <= 127 => bits,
        _ => up,
    }
}

/// Bindings: src, dst.
pub(crate) struct QuantizeKv {
    pub x_f16: bool,
    pub wg_size: usize,
}

impl ComputeProgram for QuantizeKv {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [rows, blocks_per_row, src_off, src_row_stride, dst_block, dst_row_stride] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let row = wg[1] as usize;
        if row >= rows {
            return;
        }
        let start = (dst_block + row * dst_row_stride) * 34;
        let end = start + blocks_per_row * 34;
        let src_base = src_off + row * src_row_stride;
        let mut cached: Option<(usize, u32)> = None;
        let mut scale_of = |mem: &Bindings<'_>, blk: usize| -> u32 {
            match cached {
                Some((b, bits)) if b == blk => bits,
                _ => {
                    let amax = (0..32).fold(0.0f32, |m, i| m.max(load_plain(mem, 0, self.x_f16, src_base + blk * 32 + i).abs()));
                    let bits = block_scale_bits(amax);
                    cached = Some((blk, bits));
                    bits
                }
            }
        };
        let first = start / 4 + wg[0] as usize * self.wg_size;
        for word in first..first + self.wg_size {
            if word * 4 >= end {
                break;
            }
            let mut out = mem.ld(1, word);
            for k in 0..4 {
                let byte = word * 4 + k;
                if byte < start || byte >= end {
                    continue;
                }
                let rel = byte - start;
                let (blk, o) = (rel / 34, rel % 34);
                let bits = scale_of(mem, blk);
                let v = if o < 2 {
                    (bits >> (8 * o)) & 0xff
                } else {
                    let d = f16_value(bits);
                    if d == 0.0 {
                        0
                    } else {
                        let x = load_plain(mem, 0, self.x_f16, src_base + blk * 32 + o - 2);
                        let q = code_of(x.abs(), d).min(127);
                        (if x < 0.0 { -q } else { q }) as u32 & 0xff
                    }
                };
                out = (out & !(0xff << (8 * k))) | (v << (8 * k));
            }
            mem.st(1, word, out);
        }
    }
}
