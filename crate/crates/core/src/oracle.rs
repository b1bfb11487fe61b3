//! Naive f64 reference implementations. Inputs are already-dequantized f32
//! values in contiguous row-major order; outputs are rounded to f32 once.

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

/// `[m, k] · [k, n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk] as f64;
            for j in 0..n {
                c[i * n + j] += av * b[kk * n + j] as f64;
            }
        }
    }
    to_f32(c)
}

/// `[m, k] · [k]`.
pub fn matvec(a: &[f32], x: &[f32], m: usize, k: usize) -> Vec<f32> {
    to_f32((0..m).map(|i| (0..k).map(|j| a[i * k + j] as f64 * x[j] as f64).sum()).collect())
}

/// Shapes for [`attention`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub q_len: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub scale: f32,
    pub causal: bool,
}

/// Softmax attention. `q` is `[heads, q_len, D]`, `k` and `v` are
/// `[kv_heads, seq_len, D]`, and query `t` sits at absolute position
/// `seq_len - q_len + t`. Query head `h` reads KV head
/// `h / (heads / kv_heads)`.
pub fn attention(q: &[f32], k: &[f32], v: &[f32], s: AttnShape) -> Vec<f32> {
    let d = s.head_dim;
    let group = s.heads / s.kv_heads;
    let first = s.seq_len - s.q_len;
    let mut out = vec![0.0f64; s.heads * s.q_len * d];
    for h in 0..s.heads {
        let kvh = h / group;
        for t in 0..s.q_len {
            let qrow = &q[(h * s.q_len + t) * d..][..d];
            let visible = if s.causal { first + t + 1 } else { s.seq_len };
            let logits: Vec<f64> = (0..visible)
                .map(|j| {
                    let krow = &k[(kvh * s.seq_len + j) * d..][..d];
                    let dot: f64 = qrow.iter().zip(krow).map(|(&a, &b)| a as f64 * b as f64).sum();
                    dot * s.scale as f64
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = w.iter().sum();
            let o = &mut out[(h * s.q_len + t) * d..][..d];
            for (j, wj) in w.iter().enumerate() {
                let vrow = &v[(kvh * s.seq_len + j) * d..][..d];
                for (oi, &vi) in o.iter_mut().zip(vrow) {
                    *oi += wj / total * vi as f64;
                }
            }
        }
    }
    to_f32(out)
}

/// `y = x · w / sqrt(mean(x²) + eps)` per row of width `d`.
pub fn rms_norm(x: &[f32], w: &[f32], d: usize, eps: f32) -> Vec<f32> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps as f64).sqrt();
        y.extend(row.iter().zip(w).map(|(&v, &wi)| v as f64 * r * wi as f64));
    }
    to_f32(y)
}

/// Row softmax over rows of width `d`.
pub fn softmax_rows(x: &[f32], d: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mx = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        y.extend(e.iter().map(|v| v / s));
    }
    to_f32(y)
}

/// Rotation of adjacent pairs `(2i, 2i+1)` of `x: [T, H, D]` by
/// `pos[t] · base^(-2i/D)`.
pub fn rope(x: &[f32], positions: &[u32], heads: usize, d: usize, theta_base: f32) -> Vec<f32> {
    let mut y = vec![0.0f64; x.len()];
    for (t, &pos) in positions.iter().enumerate() {
        for h in 0..heads {
            let base = (t * heads + h) * d;
            for i in 0..d / 2 {
                let angle = pos as f64 * (theta_base as f64).powf(-2.0 * i as f64 / d as f64);
                let (s, c) = angle.sin_cos();
                let x0 = x[base + 2 * i] as f64;
                let x1 = x[base + 2 * i + 1] as f64;
                y[base + 2 * i] = x0 * c - x1 * s;
                y[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    to_f32(y)
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 + y as f64) as f32).collect()
}

pub fn mul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 * y as f64) as f32).collect()
}

pub fn scale(a: &[f32], s: f32) -> Vec<f32> {
    a.iter().map(|&x| (x as f64 * s as f64) as f32).collect()
}

/// `silu(a) · b`.
pub fn silu_glu(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &g)| {
            let x = x as f64;
            (x / (1.0 + (-x).exp()) * g as f64) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matvec(&a, &[1.0, -1.0], 2, 2), vec![-1.0, -1.0]);
    }

    #[test]
    fn single_logit_attention_returns_value_row() {
        let s = AttnShape {
            heads: 1,
            kv_heads: 1,
            q_len: 1,
            seq_len: 1,
            head_dim: 2,
            scale: 1.0,
            causal: false,
        };
        assert_eq!(attention(&[3.0, -1.0], &[1.0, 2.0], &[7.0, 9.0], s), vec![7.0, 9.0]);
    }

    #[test]
    fn causal_four_by_four_by_hand() {
        // Unit logits everywhere: row t averages the first t+1 value rows.
        let s = AttnShape {
            heads: 1,
            kv_heads: 1,
            q_len: 4,
            seq_len: 4,
            head_dim: 1,
            scale: 1.0,
            causal: true,
        };
        let o = attention(&[1.0; 4], &[1.0; 4], &[4.0, 8.0, 0.0, 4.0], s);
        assert_eq!(o, vec![4.0, 6.0, 4.0, 4.0]);
    }

    #[test]
    fn rms_norm_and_softmax_by_hand() {
        let y = rms_norm(&[3.0, 4.0], &[1.0, 2.0], 2, 1e-30);
        let r = (12.5f64).sqrt();
        assert_eq!(y, vec![(3.0 / r) as f32, (8.0 / r) as f32]);
        assert_eq!(softmax_rows(&[0.0, 0.0, 5.0], 1), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn rope_quarter_turn() {
        let y = rope(&[1.0, 0.0], &[1], 1, 2, 10000.0);
        assert!((y[0] - 1f32.cos()).abs() < 1e-7 && (y[1] - 1f32.sin()).abs() < 1e-7);
    }
}
