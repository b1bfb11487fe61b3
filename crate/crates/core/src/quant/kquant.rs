//! 256-weight super-block formats (q2_k, q4_k, q6_k).
//!
//! Sub-block scales are fitted per sub-block and then quantized against a
//! single f16 super-block scale by plain absmax fitting.

use super::legacy::stored_scale;
use super::{read_f16, round_code, signed_absmax, write_f16};

fn quantize_unsigned(value: f32, step: f32, max: i32) -> u8 {
    round_code(value, step).clamp(0, max) as u8
}

/// Per-sub-block affine fit with the minimum pinned at or below zero.
/// Returns `(scale, negated_min)` pairs.
fn affine_fits(values: &[f32], sub_len: usize, levels: f32) -> Vec<(f32, f32)> {
    values
        .chunks(sub_len)
        .map(|sub| {
            let lo = sub.iter().fold(0.0f32, |m, &v| m.min(v));
            let hi = sub.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            ((hi - lo) / levels, -lo)
        })
        .collect()
}

fn affine_code(x: f32, step: f32, offset: f32, max: i32) -> u8 {
    if step == 0.0 {
        return 0;
    }
    ((x as f64 + offset as f64) / step as f64).round().clamp(0.0, max as f64) as u8
}

// ---------------------------------------------------------------- q2_k

pub(super) fn encode_q2_k(values: &[f32], out: &mut [u8]) {
    let fits = affine_fits(values, 16, 3.0);
    let max_scale = fits.iter().fold(0.0f32, |m, f| m.max(f.0));
    let max_min = fits.iter().fold(0.0f32, |m, f| m.max(f.1));
    let d = stored_scale(max_scale / 15.0);
    let dmin = stored_scale(max_min / 15.0);

    let mut codes = [0u8; 256];
    for (j, &(scale, mn)) in fits.iter().enumerate() {
        let sc = quantize_unsigned(scale, d, 15);
        let m = quantize_unsigned(mn, dmin, 15);
        out[j] = sc | (m << 4);
        let step = d * sc as f32;
        let offset = dmin * m as f32;
        for l in 0..16 {
            codes[16 * j + l] = affine_code(values[16 * j + l], step, offset, 3);
        }
    }
    let qs = &mut out[16..80];
    qs.fill(0);
    for n in 0..2 {
        for l in 0..32 {
            for shift in 0..4 {
                qs[32 * n + l] |= codes[128 * n + 32 * shift + l] << (2 * shift);
            }
        }
    }
    write_f16(out, 80, d);
    write_f16(out, 82, dmin);
}

pub(super) fn decode_q2_k(bytes: &[u8], out: &mut [f32]) {
    let scales = &bytes[..16];
    let qs = &bytes[16..80];
    let d = read_f16(bytes, 80);
    let dmin = read_f16(bytes, 82);
    for (e, dst) in out.iter_mut().enumerate() {
        let (n, r) = (e / 128, e % 128);
        let (shift, l) = (r / 32, r % 32);
        let q = (qs[32 * n + l] >> (2 * shift)) & 3;
        let sc = scales[e / 16];
        let dl = d * (sc & 0x0f) as f32;
        let ml = dmin * (sc >> 4) as f32;
        *dst = dl * q as f32 - ml;
    }
}

// ---------------------------------------------------------------- q4_k

/// Pack eight 6-bit scales and eight 6-bit mins into 12 bytes.
fn pack_scale_min_k4(scales: &[u8; 8], mins: &[u8; 8], out: &mut [u8]) {
    out[..12].fill(0);
    for j in 0..8 {
        let (ls, lm) = (scales[j], mins[j]);
        if j < 4 {
            out[j] |= ls;
            out[j + 4] |= lm;
        } else {
            out[j + 4] = (ls & 0x0f) | ((lm & 0x0f) << 4);
            out[j - 4] |= (ls >> 4) << 6;
            out[j] |= (lm >> 4) << 6;
        }
    }
}

pub(crate) fn scale_min_k4(j: usize, q: &[u8]) -> (u8, u8) {
    if j < 4 {
        (q[j] & 63, q[j + 4] & 63)
    } else {
        ((q[j + 4] & 0x0f) | ((q[j - 4] >> 6) << 4), (q[j + 4] >> 4) | ((q[j] >> 6) << 4))
    }
}

pub(super) fn encode_q4_k(values: &[f32], out: &mut [u8]) {
    let fits = affine_fits(values, 32, 15.0);
    let max_scale = fits.iter().fold(0.0f32, |m, f| m.max(f.0));
    let max_min = fits.iter().fold(0.0f32, |m, f| m.max(f.1));
    let d = stored_scale(max_scale / 63.0);
    let dmin = stored_scale(max_min / 63.0);
    write_f16(out, 0, d);
    write_f16(out, 2, dmin);

    let mut scales = [0u8; 8];
    let mut mins = [0u8; 8];
    let mut codes = [0u8; 256];
    for (j, &(scale, mn)) in fits.iter().enumerate() {
        scales[j] = quantize_unsigned(scale, d, 63);
        mins[j] = quantize_unsigned(mn, dmin, 63);
        let step = d * scales[j] as f32;
        let offset = dmin * mins[j] as f32;
        for l in 0..32 {
            codes[32 * j + l] = affine_code(values[32 * j + l], step, offset, 15);
        }
    }
    pack_scale_min_k4(&scales, &mins, &mut out[4..16]);
    let qs = &mut out[16..144];
    for j in 0..4 {
        for l in 0..32 {
            qs[32 * j + l] = codes[64 * j + l] | (codes[64 * j + 32 + l] << 4);
        }
    }
}

pub(super) fn decode_q4_k(bytes: &[u8], out: &mut [f32]) {
    let d = read_f16(bytes, 0);
    let dmin = read_f16(bytes, 2);
    let packed = &bytes[4..16];
    let qs = &bytes[16..144];
    for j in 0..4 {
        let (sc1, m1) = scale_min_k4(2 * j, packed);
        let (sc2, m2) = scale_min_k4(2 * j + 1, packed);
        let (d1, min1) = (d * sc1 as f32, dmin * m1 as f32);
        let (d2, min2) = (d * sc2 as f32, dmin * m2 as f32);
        for l in 0..32 {
            let q = qs[32 * j + l];
            out[64 * j + l] = d1 * (q & 0x0f) as f32 - min1;
            out[64 * j + 32 + l] = d2 * (q >> 4) as f32 - min2;
        }
    }
}

// ---------------------------------------------------------------- q6_k

pub(super) fn encode_q6_k(values: &[f32], out: &mut [u8]) {
    let sub_scales: Vec<f32> = values.chunks(16).map(|s| signed_absmax(s) / -32.0).collect();
    let d = stored_scale(signed_absmax(&sub_scales) / -128.0);

    let mut codes = [0u8; 256];
    for (j, &scale) in sub_scales.iter().enumerate() {
        let sc = round_code(scale, d).clamp(-128, 127) as i8;
        out[192 + j] = sc as u8;
        let step = d * sc as f32;
        for l in 0..16 {
            codes[16 * j + l] = (round_code(values[16 * j + l], step).clamp(-32, 31) + 32) as u8;
        }
    }
    let (ql, rest) = out.split_at_mut(128);
    let qh = &mut rest[..64];
    qh.fill(0);
    for n in 0..2 {
        for l in 0..32 {
            let c = |k: usize| codes[128 * n + 32 * k + l];
            ql[64 * n + l] = (c(0) & 0x0f) | ((c(2) & 0x0f) << 4);
            ql[64 * n + 32 + l] = (c(1) & 0x0f) | ((c(3) & 0x0f) << 4);
            qh[32 * n + l] = (c(0) >> 4) | ((c(1) >> 4) << 2) | ((c(2) >> 4) << 4) | ((c(3) >> 4) << 6);
        }
    }
    write_f16(out, 208, d);
}

pub(super) fn decode_q6_k(bytes: &[u8], out: &mut [f32]) {
    let ql = &bytes[..128];
    let qh = &bytes[128..192];
    let scales = &bytes[192..208];
    let d = read_f16(bytes, 208);
    for (e, dst) in out.iter_mut().enumerate() {
        let (n, r) = (e / 128, e % 128);
        let (k, l) = (r / 32, r % 32);
        let low_byte = ql[64 * n + 32 * (k & 1) + l];
        let low = if k < 2 { low_byte & 0x0f } else { low_byte >> 4 };
        let high = (qh[32 * n + l] >> (2 * k)) & 3;
        let q = (low | (high << 4)) as i32 - 32;
        let sc = scales[e / 16] as i8;
        *dst = d * sc as f32 * q as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_min_packing_roundtrips() {
        let scales = [1u8, 63, 17, 0, 42, 5, 63, 33];
        let mins = [63u8, 0, 8, 21, 1, 62, 30, 16];
        let mut packed = [0u8; 12];
        pack_scale_min_k4(&scales, &mins, &mut packed);
        for j in 0..8 {
            assert_eq!(scale_min_k4(j, &packed), (scales[j], mins[j]), "sub-block {j}");
        }
    }

    #[test]
    fn q6_k_element_mapping_is_a_bijection() {
        // Distinct codes per element must come back in the same positions.
        let values: Vec<f32> = (0..256).map(|i| ((i * 37) % 63) as f32 - 31.0).collect();
        let mut bytes = vec![0u8; 210];
        encode_q6_k(&values, &mut bytes);
        let mut out = vec![0.0; 256];
        decode_q6_k(&bytes, &mut out);
        for (i, (a, b)) in values.iter().zip(&out).enumerate() {
            assert!((a - b).abs() <= 0.51 * a.abs().max(1.0), "elem {i}: {a} vs {b}");
        }
    }

    #[test]
    fn q2_k_small_integers_roundtrip_closely() {
        let values: Vec<f32> = (0..256).map(|i| (i % 4) as f32).collect();
        let mut bytes = vec![0u8; 84];
        encode_q2_k(&values, &mut bytes);
        let mut out = vec![0.0; 256];
        decode_q2_k(&bytes, &mut out);
        for (a, b) in values.iter().zip(&out) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn q4_k_small_integers_roundtrip_closely() {
        let values: Vec<f32> = (0..256).map(|i| (i % 16) as f32).collect();
        let mut bytes = vec![0u8; 144];
        encode_q4_k(&values, &mut bytes);
        let mut out = vec![0.0; 256];
        decode_q4_k(&bytes, &mut out);
        for (a, b) in values.iter().zip(&out) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }
}
