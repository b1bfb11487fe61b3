use crate::device::{Bindings, ComputeProgram};
use crate::quant::BlockFormat;

use super::common::BlockReader;

const NEG: f32 = -1.0e30;

/// `flash_decode.wgsl`. Bindings: q, k cache, v cache, o, partials.
pub(crate) struct FlashDecode {
    pub kv: BlockFormat,
    pub d: usize,
    pub kv_tile: usize,
}

impl ComputeProgram for FlashDecode {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [seq_len, kv_cap, n_heads, n_kv_heads, n_splits] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let scale = mem.param_f32(5);
        let (d, kt) = (self.d, self.kv_tile);
        let (head, split) = (wg[0] as usize, wg[1] as usize);
        let kvh = head / (n_heads / n_kv_heads.max(1)).max(1);
        let chunk = seq_len.div_ceil(n_splits.max(1));
        let s0 = (split * chunk).min(seq_len);
        let s1 = (s0 + chunk).min(seq_len);

        let qs: Vec<f32> = (0..d).map(|i| mem.ld_f32(0, head * d + i)).collect();
        let mut kreader = BlockReader::new(1, self.kv);
        let mut vreader = BlockReader::new(2, self.kv);
        let mut tile = vec![0.0f32; kt * d];
        let mut sc = vec![0.0f32; kt];
        let mut acc = vec![0.0f32; d];
        let (mut m, mut l) = (NEG, 0.0f32);

        let mut t0 = s0;
        while t0 < s1 {
            let n = kt.min(s1 - t0);
            load_tile(mem, &mut kreader, &mut tile, n, d, |j, i| (kvh * kv_cap + t0 + j) * d + i);
            for (j, s) in sc.iter_mut().enumerate().take(n) {
                let mut dot = 0.0f32;
                for i in 0..d {
                    dot += qs[i] * tile[j * d + i];
                }
                *s = dot * scale;
            }
            let m_new = sc[..n].iter().fold(m, |a, &b| a.max(b));
            let corr = (m - m_new).exp();
            let mut l_new = l * corr;
            for &s in &sc[..n] {
                l_new += (s - m_new).exp();
            }
            load_tile(mem, &mut vreader, &mut tile, n, d, |j, i| (kvh * kv_cap + t0 + j) * d + i);
            for (i, a) in acc.iter_mut().enumerate() {
                let mut v = *a * corr;
                for j in 0..n {
                    v += (sc[j] - m_new).exp() * tile[j * d + i];
                }
                *a = v;
            }
            m = m_new;
            l = l_new;
            t0 += kt;
        }

        if n_splits == 1 {
            for (i, &a) in acc.iter().enumerate() {
                mem.st_f32(3, head * d + i, a / l);
            }
        } else {
            let base = (split * n_heads + head) * (d + 2);
            mem.st_f32(4, base, m);
            mem.st_f32(4, base + 1, l);
            for (i, &a) in acc.iter().enumerate() {
                mem.st_f32(4, base + 2 + i, a);
            }
        }
    }
}

/// Stage `n` rows of K or V into the tile, zero-filling the rest.
fn load_tile(mem: &Bindings<'_>, reader: &mut BlockReader, tile: &mut [f32], n: usize, d: usize, elem: impl Fn(usize, usize) -> usize) {
    for (idx, slot) in tile.iter_mut().enumerate() {
        let (j, i) = (idx / d, idx % d);
        *slot = if j < n { reader.get(mem, elem(j, i)) } else { 0.0 };
    }
}

/// `flash_reduce.wgsl`. Bindings: partials, o.
pub(crate) struct FlashReduce {
    pub d: usize,
}

impl ComputeProgram for FlashReduce {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let n_heads = mem.param_u32(0) as usize;
        let n_splits = mem.param_u32(1) as usize;
        let d = self.d;
        let head = wg[0] as usize;
        let base = |s: usize| (s * n_heads + head) * (d + 2);
        let mut m = NEG;
        for s in 0..n_splits {
            m = m.max(mem.ld_f32(0, base(s)));
        }
        let mut l = 0.0f32;
        for s in 0..n_splits {
            l += mem.ld_f32(0, base(s) + 1) * (mem.ld_f32(0, base(s)) - m).exp();
        }
        for i in 0..d {
            let mut acc = 0.0f32;
            for s in 0..n_splits {
                acc += mem.ld_f32(0, base(s) + 2 + i) * (mem.ld_f32(0, base(s)) - m).exp();
            }
            mem.st_f32(1, head * d + i, acc / l);
        }
    }
}

/// `flash_tile.wgsl`. Bindings: q, k cache, v cache, o.
pub(crate) struct FlashTile {
    pub kv: BlockFormat,
    pub d: usize,
    pub q_tile: usize,
    pub kv_tile: usize,
}

impl ComputeProgram for FlashTile {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [q_len, seq_len, kv_cap, n_heads, n_kv_heads, causal] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let scale = mem.param_f32(6);
        let (d, qt, kt) = (self.d, self.q_tile, self.kv_tile);
        let t0 = wg[0] as usize * qt;
        let head = wg[1] as usize;
        let kvh = head / (n_heads / n_kv_heads.max(1)).max(1);
        let first_pos = seq_len - q_len;
        let causal = causal != 0;

        let mut qs = vec![0.0f32; qt * d];
        for (idx, slot) in qs.iter_mut().enumerate() {
            let t = t0 + idx / d;
            if t < q_len {
                *slot = mem.ld_f32(0, (head * q_len + t) * d + idx % d);
            }
        }
        let mut acc = vec![0.0f32; qt * d];
        let mut row_m = vec![NEG; qt];
        let mut row_l = vec![0.0f32; qt];
        let mut row_corr = vec![0.0f32; qt];
        let mut sc = vec![0.0f32; qt * kt];
        let mut tile = vec![0.0f32; kt * d];
        let mut kreader = BlockReader::new(1, self.kv);
        let mut vreader = BlockReader::new(2, self.kv);
        let kv_end = if causal {
            seq_len.min(first_pos + (t0 + qt).min(q_len))
        } else {
            seq_len
        };

        let mut s0 = 0;
        while s0 < kv_end {
            let n = kt.min(kv_end - s0);
            load_tile(mem, &mut kreader, &mut tile, n, d, |j, i| (kvh * kv_cap + s0 + j) * d + i);
            for (idx, s) in sc.iter_mut().enumerate() {
                let (r, j) = (idx / kt, idx % kt);
                let t = t0 + r;
                let visible = !causal || s0 + j <= first_pos + t;
                *s = if t < q_len && j < n && visible {
                    let mut dot = 0.0f32;
                    for i in 0..d {
                        dot += qs[r * d + i] * tile[j * d + i];
                    }
                    dot * scale
                } else {
                    NEG
                };
            }
            for r in 0..qt {
                let row = &mut sc[r * kt..][..kt];
                let m_new = row[..n].iter().fold(row_m[r], |a, &b| a.max(b));
                let corr = (row_m[r] - m_new).exp();
                let mut l = row_l[r] * corr;
                for s in &mut row[..n] {
                    let w = if *s > NEG { (*s - m_new).exp() } else { 0.0 };
                    *s = w;
                    l += w;
                }
                row_m[r] = m_new;
                row_l[r] = l;
                row_corr[r] = corr;
            }
            load_tile(mem, &mut vreader, &mut tile, n, d, |j, i| (kvh * kv_cap + s0 + j) * d + i);
            for (idx, a) in acc.iter_mut().enumerate() {
                let (r, i) = (idx / d, idx % d);
                let mut v = *a * row_corr[r];
                for j in 0..n {
                    v += sc[r * kt + j] * tile[j * d + i];
                }
                *a = v;
            }
            s0 += kt;
        }

        for (idx, &a) in acc.iter().enumerate() {
            let t = t0 + idx / d;
            if t < q_len {
                mem.st_f32(3, (head * q_len + t) * d + idx % d, a / row_l[idx / d]);
            }
        }
    }
}
