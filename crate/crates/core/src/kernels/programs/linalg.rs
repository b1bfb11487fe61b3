use crate::device::{Bindings, ComputeProgram};
use crate::kernels::{MatmulParams, MatvecParams};
use crate::quant::BlockFormat;

use super::common::{add, linear_group, load_plain, wg_reduce, BlockReader};

/// `matmul_reg_tile.wgsl`. Bindings: a, b, c.
pub(crate) struct Matmul {
    pub a: BlockFormat,
    pub b_f16: bool,
    pub p: MatmulParams,
}

impl ComputeProgram for Matmul {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [m, n, k, lda, b_rs, b_cs, c_rs, c_cs] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let (tm, tn, tk) = (self.p.tile_m as usize, self.p.tile_n as usize, self.p.tile_k as usize);
        let row0 = wg[1] as usize * tm;
        let col0 = wg[0] as usize * tn;
        let mut readers: Vec<BlockReader> = (0..tm).map(|_| BlockReader::new(0, self.a)).collect();
        let mut tile_a = vec![0.0f32; tm * tk];
        let mut tile_b = vec![0.0f32; tk * tn];
        let mut acc = vec![0.0f32; tm * tn];

        for k0 in (0..k).step_by(tk) {
            for (i, slot) in tile_a.iter_mut().enumerate() {
                let (r, kk) = (row0 + i / tk, k0 + i % tk);
                *slot = if r < m && kk < k {
                    readers[i / tk].get(mem, r * lda + kk)
                } else {
                    0.0
                };
            }
            for (i, slot) in tile_b.iter_mut().enumerate() {
                let (kk, col) = (k0 + i / tn, col0 + i % tn);
                *slot = if kk < k && col < n {
                    load_plain(mem, 1, self.b_f16, kk * b_rs + col * b_cs)
                } else {
                    0.0
                };
            }
            // Each output keeps its own k-ascending accumulation, exactly as
            // the per-invocation register tiles do.
            for r in 0..tm {
                let a_row = &tile_a[r * tk..][..tk];
                let acc_row = &mut acc[r * tn..][..tn];
                for (kk, &av) in a_row.iter().enumerate() {
                    let b_row = &tile_b[kk * tn..][..tn];
                    for (c, &bv) in acc_row.iter_mut().zip(b_row) {
                        *c += av * bv;
                    }
                }
            }
        }

        for r in 0..tm.min(m.saturating_sub(row0)) {
            for c in 0..tn.min(n.saturating_sub(col0)) {
                mem.st_f32(2, (row0 + r) * c_rs + (col0 + c) * c_cs, acc[r * tn + c]);
            }
        }
    }
}

/// `matvec.wgsl`. Bindings: a, x, y.
pub(crate) struct Matvec {
    pub a: BlockFormat,
    pub x_f16: bool,
    pub p: MatvecParams,
    pub subgroup: Option<usize>,
}

impl ComputeProgram for Matvec {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [m, k, lda] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let wgs = self.p.wg_size as usize;
        let vec = self.p.vec as usize;
        let group = linear_group(mem, wg);
        let mut reader = BlockReader::new(0, self.a);
        let mut row_vals = vec![0.0f32; k];
        let mut partials = vec![0.0f32; wgs];
        for r in 0..self.p.rows_per_wg as usize {
            let row = group * self.p.rows_per_wg as usize + r;
            if row >= m {
                continue;
            }
            for (kk, v) in row_vals.iter_mut().enumerate() {
                *v = reader.get(mem, row * lda + kk) * load_plain(mem, 1, self.x_f16, kk);
            }
            for (lid, slot) in partials.iter_mut().enumerate() {
                let mut sum = 0.0f32;
                let mut k0 = lid * vec;
                while k0 < k {
                    for kk in k0..(k0 + vec).min(k) {
                        sum += row_vals[kk];
                    }
                    k0 += wgs * vec;
                }
                *slot = sum;
            }
            let total = wg_reduce(&mut partials, self.subgroup, add);
            mem.st_f32(2, row, total);
        }
    }
}
