use crate::device::{Bindings, ComputeProgram};
use crate::kernels::EwKind;

use super::common::{add, linear_group, load_plain, max, pack_f16, wg_reduce};

/// `elementwise.wgsl`. Bindings: a, b, dst.
pub(crate) struct Elementwise {
    pub kind: EwKind,
    pub a_f16: bool,
    pub b_f16: bool,
    pub out_f16: bool,
    pub wg_size: usize,
}

impl Elementwise {
    fn apply(&self, mem: &Bindings<'_>, i: usize, a_off: usize, b_off: usize, scale: f32) -> f32 {
        let x = load_plain(mem, 0, self.a_f16, a_off + i);
        let b = || load_plain(mem, 1, self.b_f16, b_off + i);
        match self.kind {
            EwKind::Add => x + b(),
            EwKind::Mul => x * b(),
            EwKind::Scale => x * scale,
            EwKind::SiluGlu => x / (1.0 + (-x).exp()) * b(),
            EwKind::CopyCast => x,
        }
    }
}

impl ComputeProgram for Elementwise {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [n, a_off, b_off, dst_off] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let scale = mem.param_f32(4);
        let first = linear_group(mem, wg) * self.wg_size;
        for w in first..first + self.wg_size {
            if self.out_f16 {
                let i = 2 * w;
                if i >= n {
                    break;
                }
                let lo = self.apply(mem, i, a_off, b_off, scale);
                let at = (dst_off + i) >> 1;
                let word = if i + 1 < n {
                    pack_f16(lo, self.apply(mem, i + 1, a_off, b_off, scale))
                } else {
                    (mem.ld(2, at) & 0xffff_0000) | (pack_f16(lo, 0.0) & 0xffff)
                };
                mem.st(2, at, word);
            } else {
                if w >= n {
                    break;
                }
                let v = self.apply(mem, w, a_off, b_off, scale);
                mem.st_f32(2, dst_off + w, v);
            }
        }
    }
}

/// `rms_norm.wgsl`. Bindings: x, w, y.
pub(crate) struct RmsNorm {
    pub wg_size: usize,
    pub subgroup: Option<usize>,
}

impl ComputeProgram for RmsNorm {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let rows = mem.param_u32(0) as usize;
        let d = mem.param_u32(1) as usize;
        let eps = mem.param_f32(2);
        let row = linear_group(mem, wg);
        if row >= rows {
            return;
        }
        let base = row * d;
        let mut partials: Vec<f32> = (0..self.wg_size)
            .map(|lid| {
                let mut ss = 0.0f32;
                for i in (lid..d).step_by(self.wg_size) {
                    let v = mem.ld_f32(0, base + i);
                    ss += v * v;
                }
                ss
            })
            .collect();
        let total = wg_reduce(&mut partials, self.subgroup, add);
        let inv = 1.0 / (total / d as f32 + eps).sqrt();
        for i in 0..d {
            let v = mem.ld_f32(0, base + i) * inv * mem.ld_f32(1, i);
            mem.st_f32(2, base + i, v);
        }
    }
}

/// `softmax_row.wgsl`. Bindings: x, y.
pub(crate) struct SoftmaxRow {
    pub wg_size: usize,
    pub subgroup: Option<usize>,
}

impl ComputeProgram for SoftmaxRow {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let rows = mem.param_u32(0) as usize;
        let d = mem.param_u32(1) as usize;
        let row = linear_group(mem, wg);
        if row >= rows {
            return;
        }
        let base = row * d;
        let strided = |lid: usize| (lid..d).step_by(self.wg_size);
        let mut partials: Vec<f32> = (0..self.wg_size)
            .map(|lid| strided(lid).fold(-3.4e38f32, |m, i| m.max(mem.ld_f32(0, base + i))))
            .collect();
        let row_max = wg_reduce(&mut partials, self.subgroup, max);
        let mut partials: Vec<f32> = (0..self.wg_size)
            .map(|lid| {
                let mut s = 0.0f32;
                for i in strided(lid) {
                    s += (mem.ld_f32(0, base + i) - row_max).exp();
                }
                s
            })
            .collect();
        let inv = 1.0 / wg_reduce(&mut partials, self.subgroup, add);
        for i in 0..d {
            let v = (mem.ld_f32(0, base + i) - row_max).exp() * inv;
            mem.st_f32(1, base + i, v);
        }
    }
}

/// `rope.wgsl`. Bindings: x, positions, and y unless in place.
pub(crate) struct Rope {
    pub wg_size: usize,
    pub in_place: bool,
}

impl ComputeProgram for Rope {
    fn run_workgroup(&self, mem: &mut Bindings<'_>, wg: [u32; 3]) {
        let [t, h, d] = std::array::from_fn(|i| mem.param_u32(i) as usize);
        let base = mem.param_f32(3);
        let half_d = d / 2;
        let out = if self.in_place { 0 } else { 2 };
        let first = linear_group(mem, wg) * self.wg_size;
        for pair in first..(first + self.wg_size).min(t * h * half_d) {
            let i = pair % half_d;
            let token = pair / (h * half_d);
            let angle = mem.ld(1, token) as f32 * base.powf(-2.0 * i as f32 / d as f32);
            let (s, c) = angle.sin_cos();
            let x0 = mem.ld_f32(0, 2 * pair);
            let x1 = mem.ld_f32(0, 2 * pair + 1);
            mem.st_f32(out, 2 * pair, x0 * c - x1 * s);
            mem.st_f32(out, 2 * pair + 1, x0 * s + x1 * c);
        }
    }
}
