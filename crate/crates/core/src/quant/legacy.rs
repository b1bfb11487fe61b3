//! 32-weight formats (q4_0, q4_1, q5_0, q5_1, q8_0, iq4_nl) and the
//! 128-weight q1_0 format.
//!
//! Nibble packing for the 4/5-bit formats: byte `j` holds element `j` in its
//! low nibble and element `j + 16` in its high nibble. The 5-bit formats keep
//! the fifth bit of element `j` in bit `j` of the little-endian `qh` word.

use super::{read_f16, round_code, signed_absmax, write_f16, IQ4_NL_CODEBOOK};

/// Quantize a scale to f16, saturating instead of overflowing to infinity.
pub(super) fn stored_scale(d: f32) -> f32 {
    let max = half::f16::MAX.to_f32();
    super::to_f16_f32(d.clamp(-max, max))
}

fn affine_code(x: f32, min: f32, d: f32) -> i32 {
    if d == 0.0 {
        return 0;
    }
    ((x as f64 - min as f64) / d as f64).round() as i32
}

fn min_max(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn pack_nibbles(codes: &[u8; 32], out: &mut [u8]) {
    for j in 0..16 {
        out[j] = codes[j] | (codes[j + 16] << 4);
    }
}

fn unpack_nibbles(qs: &[u8]) -> [u8; 32] {
    let mut codes = [0u8; 32];
    for j in 0..16 {
        codes[j] = qs[j] & 0x0f;
        codes[j + 16] = qs[j] >> 4;
    }
    codes
}

/// Stored scale for a q8_0 block with absolute maximum `amax`.
///
/// Among f16 scales that put the extreme at code ±127 the one nearest to
/// `amax / 127` is chosen; for normal-range scales that is simply the
/// nearest f16. Tiny blocks may have no such scale, and then the smallest
/// neighbour that keeps every code within ±127 is used.
pub fn q8_0_scale(amax: f32) -> f32 {
    if amax == 0.0 {
        return 0.0;
    }
    let d = stored_scale(amax / 127.0);
    if d == half::f16::MAX.to_f32() {
        return d;
    }
    let code = |d: f32| if d == 0.0 { i32::MAX } else { super::round_code(amax, d) };
    if code(d) == 127 {
        return d;
    }
    let bits = half::f16::from_f32(d).to_bits();
    let down = if bits == 0 {
        None
    } else {
        Some(half::f16::from_bits(bits - 1).to_f32())
    };
    let up = half::f16::from_bits(bits + 1).to_f32();
    let down = down.filter(|&c| code(c) == 127);
    let up_hit = code(up) == 127;
    match (down, up_hit) {
        // Nearest to amax / 127, compared exactly: 2·amax against the sum of
        // the neighbours scaled by 127. The lower one wins a tie.
        (Some(lo), true) if 2.0 * amax as f64 <= 127.0 * (lo as f64 + up as f64) => lo,
        (Some(_), true) => up,
        (Some(lo), false) => lo,
        (None, true) => up,
        (None, false) if code(d) <= 127 => d,
        (None, false) => up,
    }
}

pub(super) fn encode_q8_0(values: &[f32], out: &mut [u8]) {
    let amax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let d = q8_0_scale(amax);
    write_f16(out, 0, d);
    for (dst, &x) in out[2..].iter_mut().zip(values) {
        *dst = round_code(x, d).clamp(-127, 127) as i8 as u8;
    }
}

pub(super) fn decode_q8_0(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    for (dst, &q) in out.iter_mut().zip(&bytes[2..]) {
        *dst = q as i8 as f32 * d;
    }
}

pub(super) fn encode_q4_0(values: &[f32], out: &mut [u8]) {
    let d = stored_scale(signed_absmax(values) / -8.0);
    write_f16(out, 0, d);
    let mut codes = [0u8; 32];
    for (c, &x) in codes.iter_mut().zip(values) {
        *c = (round_code(x, d) + 8).clamp(0, 15) as u8;
    }
    pack_nibbles(&codes, &mut out[2..]);
}

pub(super) fn decode_q4_0(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    for (dst, q) in out.iter_mut().zip(unpack_nibbles(&bytes[2..])) {
        *dst = (q as i32 - 8) as f32 * d;
    }
}

pub(super) fn encode_q4_1(values: &[f32], out: &mut [u8]) {
    let (lo, hi) = min_max(values);
    let d = stored_scale((hi - lo) / 15.0);
    let m = stored_scale(lo);
    write_f16(out, 0, d);
    write_f16(out, 2, m);
    let mut codes = [0u8; 32];
    for (c, &x) in codes.iter_mut().zip(values) {
        *c = affine_code(x, m, d).clamp(0, 15) as u8;
    }
    pack_nibbles(&codes, &mut out[4..]);
}

pub(super) fn decode_q4_1(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    let m = read_f16(bytes, 2);
    for (dst, q) in out.iter_mut().zip(unpack_nibbles(&bytes[4..])) {
        *dst = q as f32 * d + m;
    }
}

fn pack_5bit(codes: &[u8; 32], out: &mut [u8]) {
    let mut qh = 0u32;
    let mut low = [0u8; 32];
    for (j, &q) in codes.iter().enumerate() {
        qh |= ((q as u32 >> 4) & 1) << j;
        low[j] = q & 0x0f;
    }
    out[..4].copy_from_slice(&qh.to_le_bytes());
    pack_nibbles(&low, &mut out[4..]);
}

fn unpack_5bit(bytes: &[u8]) -> [u8; 32] {
    let qh = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let mut codes = unpack_nibbles(&bytes[4..]);
    for (j, c) in codes.iter_mut().enumerate() {
        *c |= (((qh >> j) & 1) as u8) << 4;
    }
    codes
}

pub(super) fn encode_q5_0(values: &[f32], out: &mut [u8]) {
    let d = stored_scale(signed_absmax(values) / -16.0);
    write_f16(out, 0, d);
    let mut codes = [0u8; 32];
    for (c, &x) in codes.iter_mut().zip(values) {
        *c = (round_code(x, d) + 16).clamp(0, 31) as u8;
    }
    pack_5bit(&codes, &mut out[2..]);
}

pub(super) fn decode_q5_0(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    for (dst, q) in out.iter_mut().zip(unpack_5bit(&bytes[2..])) {
        *dst = (q as i32 - 16) as f32 * d;
    }
}

pub(super) fn encode_q5_1(values: &[f32], out: &mut [u8]) {
    let (lo, hi) = min_max(values);
    let d = stored_scale((hi - lo) / 31.0);
    let m = stored_scale(lo);
    write_f16(out, 0, d);
    write_f16(out, 2, m);
    let mut codes = [0u8; 32];
    for (c, &x) in codes.iter_mut().zip(values) {
        *c = affine_code(x, m, d).clamp(0, 31) as u8;
    }
    pack_5bit(&codes, &mut out[4..]);
}

pub(super) fn decode_q5_1(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    let m = read_f16(bytes, 2);
    for (dst, q) in out.iter_mut().zip(unpack_5bit(&bytes[4..])) {
        *dst = q as f32 * d + m;
    }
}

/// Sign code with a mean-magnitude scale: bit set ⇔ sign bit clear.
pub(super) fn encode_q1_0(values: &[f32], out: &mut [u8]) {
    let mean_abs = values.iter().map(|v| v.abs() as f64).sum::<f64>() / values.len() as f64;
    write_f16(out, 0, stored_scale(mean_abs as f32));
    out[2..].fill(0);
    for (b, &x) in values.iter().enumerate() {
        if x.is_sign_positive() {
            out[2 + b / 8] |= 1 << (b % 8);
        }
    }
}

pub(super) fn decode_q1_0(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    for (b, dst) in out.iter_mut().enumerate() {
        let bit = (bytes[2 + b / 8] >> (b % 8)) & 1;
        *dst = if bit == 1 { d } else { -d };
    }
}

fn nearest_codebook_index(t: f64) -> u8 {
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for (i, &v) in IQ4_NL_CODEBOOK.iter().enumerate() {
        let err = (t - v as f64).abs();
        if err < best_err {
            best = i;
            best_err = err;
        }
    }
    best as u8
}

pub(super) fn encode_iq4_nl(values: &[f32], out: &mut [u8]) {
    let d = stored_scale(signed_absmax(values) / IQ4_NL_CODEBOOK[0] as f32);
    write_f16(out, 0, d);
    let mut codes = [0u8; 32];
    for (c, &x) in codes.iter_mut().zip(values) {
        let t = if d == 0.0 { 0.0 } else { x as f64 / d as f64 };
        *c = nearest_codebook_index(t);
    }
    pack_nibbles(&codes, &mut out[2..]);
}

pub(super) fn decode_iq4_nl(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    for (dst, q) in out.iter_mut().zip(unpack_nibbles(&bytes[2..])) {
        *dst = d * IQ4_NL_CODEBOOK[q as usize] as f32;
    }
}
