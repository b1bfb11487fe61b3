mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::*;
use qkern::device::DeviceCaps;
use qkern::kernels::*;
use qkern::oracle;
use qkern::quant::{dequantize_tensor, nmse, quantize_tensor, BlockFormat};
use qkern::shaderpp::{preprocess_mapped, scan_params, DefineSet, TemplateSource};
use qkern::tensor::TensorDesc;
use qkern::verify::{run_case, Case};

use BlockFormat::*;

fn caps(subgroups: bool) -> DeviceCaps {
    kernels(!subgroups).caps().clone()
}

fn ctx(op: OpKind, operands: Vec<TensorDesc>, subgroups: bool) -> OpContext {
    OpContext {
        op,
        operands,
        caps: caps(subgroups),
        in_place: false,
    }
}

fn matvec_ctx(subgroups: bool) -> OpContext {
    ctx(
        OpKind::Matvec,
        vec![
            TensorDesc::contiguous(&[64, 256], Q8_0),
            TensorDesc::contiguous(&[256], F32),
            TensorDesc::contiguous(&[64], F32),
        ],
        subgroups,
    )
}

#[test]
fn subgroup_variant_is_selected_when_supported() {
    let sg = specialize(&matvec_ctx(true), None).unwrap();
    assert!(sg.key.variant.subgroups);
    assert!(sg.source.text.contains("subgroupAdd"));
    let portable = specialize(&matvec_ctx(false), None).unwrap();
    assert!(!portable.key.variant.subgroups);
    assert!(!portable.source.text.contains("subgroupAdd"));
    assert!(portable.source.text.contains("workgroupBarrier"));
    assert_ne!(sg.key, portable.key);
    let mut a = sg.key.clone();
    a.variant.subgroups = false;
    assert_eq!(a, portable.key);
}

#[test]
fn equal_contexts_give_equal_keys() {
    let a = specialize(&matvec_ctx(true), None).unwrap();
    let b = specialize(&matvec_ctx(true), None).unwrap();
    assert_eq!(a.key, b.key);
    assert_eq!(a.source, b.source);
}

#[test]
fn q4_k_matmul_with_tile_k_32_includes_the_q4_k_fragment() {
    let c = ctx(
        OpKind::Matmul,
        vec![
            TensorDesc::contiguous(&[48, 256], Q4_K),
            TensorDesc::contiguous(&[256, 33], F32),
            TensorDesc::contiguous(&[48, 33], F32),
        ],
        true,
    );
    let mut tuning = TuningParams::default();
    tuning.matmul.tile_k = 32;
    let spec = specialize(&c, Some(&tuning)).unwrap();
    assert!(spec.source.lines.iter().any(|l| l.origin == "dequant/q4_k.wgsl"));
    assert!(!spec.source.lines.iter().any(|l| l.origin == "dequant/q8_0.wgsl"));
    let params = scan_params(&templates::template("matmul_reg_tile.wgsl"), &templates::Embedded).unwrap();
    assert!(params.flags.contains("FMT_Q4_K"));
    assert!(params.interpolations.contains("TILE_K"));
}

#[test]
fn scan_params_documents_each_template() {
    let expect: &[(&str, &[&str])] = &[
        (
            "matmul_reg_tile.wgsl",
            &["TILE_M", "TILE_N", "TILE_K", "RT_M", "RT_N", "WG_X", "WG_Y", "BLOCK_LEN", "B_F16"],
        ),
        (
            "matvec.wgsl",
            &["WG_SIZE", "ROWS_PER_WG", "VEC", "USE_SUBGROUPS", "X_F16", "BLOCK_LEN"],
        ),
        (
            "flash_decode.wgsl",
            &[
                "HEAD_DIM",
                "KV_TILE",
                "WG_SIZE",
                "DIMS_PER_THREAD",
                "FMT_Q8_0",
                "FMT_Q4_0",
                "FMT_F16",
            ],
        ),
        ("flash_tile.wgsl", &["HEAD_DIM", "KV_TILE", "Q_TILE", "WG_SIZE"]),
        ("flash_reduce.wgsl", &["HEAD_DIM", "WG_SIZE"]),
        ("elementwise.wgsl", &["OP_ADD", "OP_SILU_GLU", "A_F16", "OUT_F16", "WG_SIZE"]),
        ("rms_norm.wgsl", &["WG_SIZE", "USE_SUBGROUPS"]),
        ("softmax_row.wgsl", &["WG_SIZE", "USE_SUBGROUPS"]),
        ("rope.wgsl", &["WG_SIZE", "IN_PLACE"]),
        ("quantize_kv_q8_0.wgsl", &["WG_SIZE", "X_F16"]),
    ];
    for (path, names) in expect {
        let params = scan_params(&templates::template(path), &templates::Embedded).unwrap().all();
        for n in *names {
            assert!(params.contains(*n), "{path} lacks {n}: {params:?}");
        }
    }
}

#[test]
fn specialization_errors() {
    let mm = |a, b| {
        ctx(
            OpKind::Matmul,
            vec![
                TensorDesc::contiguous(&[32, 64], a),
                TensorDesc::contiguous(&[64, 32], b),
                TensorDesc::contiguous(&[32, 32], F32),
            ],
            true,
        )
    };
    assert!(matches!(
        specialize(&mm(F32, Q8_0), None),
        Err(KernelError::UnsupportedFormatForOp { format: Q8_0, .. })
    ));
    let mut big = TuningParams::default();
    big.matmul.wg_x = 32;
    big.matmul.wg_y = 32;
    big.matmul.tile_m = 32 * big.matmul.rt_m;
    big.matmul.tile_n = 32 * big.matmul.rt_n;
    assert!(matches!(
        specialize(&mm(F32, F32), Some(&big)),
        Err(KernelError::TuningViolatesDeviceLimits(_))
    ));
    let mut shared = TuningParams::default();
    shared.matmul.tile_k = 128;
    assert!(matches!(
        specialize(&mm(F32, F32), Some(&shared)),
        Err(KernelError::TuningViolatesDeviceLimits(_))
    ));
    let mut bad = TuningParams::default();
    bad.matmul.tile_m = 48;
    assert!(specialize(&mm(F32, F32), Some(&bad)).is_err());
    assert!(matches!(
        specialize(
            &ctx(
                OpKind::Matmul,
                vec![
                    TensorDesc::contiguous(&[32, 64], F32),
                    TensorDesc::contiguous(&[63, 32], F32),
                    TensorDesc::contiguous(&[32, 32], F32),
                ],
                true
            ),
            None
        ),
        Err(KernelError::ShapeMismatch(_))
    ));
    let attn = |d, f| {
        ctx(
            OpKind::FlashDecode,
            vec![
                TensorDesc::contiguous(&[2, d], F32),
                TensorDesc::contiguous(&[2, 16, d], f),
                TensorDesc::contiguous(&[2, 16, d], f),
                TensorDesc::contiguous(&[2, d], F32),
            ],
            true,
        )
    };
    assert!(matches!(specialize(&attn(96, F16), None), Err(KernelError::UnsupportedHeadDim(96))));
    assert!(matches!(
        specialize(&attn(64, Q4_1), None),
        Err(KernelError::UnsupportedKVFormat(Q4_1))
    ));
    let k = kernels(false);
    let x = put(&k, &[1.0; 8], &[2, 4], F32);
    let w = put(&k, &[1.0; 4], &[4], F32);
    let y = out(&k, &[2, 4], F32);
    assert!(matches!(k.rms_norm(&x, &w, &y, 0.0), Err(KernelError::EpsNonPositive(_))));
    assert!(matches!(k.rms_norm(&x, &w, &y, -1.0), Err(KernelError::EpsNonPositive(_))));
}

#[test]
fn cache_compiles_once_per_key() {
    let k = kernels(false);
    let spec = specialize(&matvec_ctx(true), None).unwrap();
    let a = k.cache().get_or_compile(&spec).unwrap();
    let b = k.cache().get_or_compile(&spec).unwrap();
    assert_eq!(k.cache().compile_count(), 1);
    assert!(Arc::ptr_eq(&a.pipeline, &b.pipeline));
    let mut tuning = TuningParams::default();
    tuning.matvec.vec = 2;
    let spec2 = specialize(&matvec_ctx(true), Some(&tuning)).unwrap();
    assert_ne!(spec.key, spec2.key);
    k.cache().get_or_compile(&spec2).unwrap();
    assert_eq!(k.cache().compile_count(), 2);
}

#[test]
fn cache_is_single_flight_under_concurrency() {
    let k = Arc::new(kernels(false));
    let spec = Arc::new(specialize(&matvec_ctx(true), None).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (k, spec) = (k.clone(), spec.clone());
            std::thread::spawn(move || k.cache().get_or_compile(&spec).unwrap().pipeline.id)
        })
        .collect();
    let ids: HashSet<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(ids.len(), 1);
    assert_eq!(k.cache().compile_count(), 1);
}

#[test]
fn compile_count_equals_distinct_keys_over_a_call_sequence() {
    let k = kernels(false);
    let cases = qkern::verify::sweep(3, 6);
    for (i, case) in cases.iter().enumerate() {
        assert!(run_case(&k, case, i as u64, 0.0).unwrap().passed(), "{case}");
    }
    let keys: HashSet<KernelKey> = k.cache().keys().into_iter().collect();
    assert_eq!(k.cache().compile_count() as usize, keys.len());
    let before = k.cache().compile_count();
    for (i, case) in cases.iter().enumerate().rev() {
        run_case(&k, case, i as u64, 0.0).unwrap();
    }
    assert_eq!(k.cache().compile_count(), before);
}

#[test]
fn broken_template_reports_origin_line() {
    let k = kernels(false);
    let src = TemplateSource::new(
        "broken.wgsl",
        "@group(0) @binding(0) var<storage, read_write> x: array<f32>;\n\n@compute @workgroup_size(1)\nfn main() {\n    x[0] = 1.0 +;\n}\n",
    );
    let mut spec = specialize(&matvec_ctx(false), None).unwrap();
    spec.source = preprocess_mapped(&src, &DefineSet::new(), &templates::Embedded).unwrap();
    let err = k.cache().get_or_compile(&spec).unwrap_err();
    let loc = err.location.clone().expect("location");
    assert_eq!((loc.origin.as_str(), loc.line), ("broken.wgsl", 5));
    assert!(err.to_string().contains("broken.wgsl:5"), "{err}");
    // The failure is cached like a success.
    assert!(k.cache().get_or_compile(&spec).is_err());
    assert_eq!(k.cache().compile_count(), 1);
}

// ---- matmul / matvec ----

#[test]
fn matmul_identity_is_exact() {
    let k = kernels(false);
    let eye: Vec<f32> = (0..32 * 32).map(|i| if i / 32 == i % 32 { 1.0 } else { 0.0 }).collect();
    let bv = random(1, 32 * 40);
    let a = put(&k, &eye, &[32, 32], F32);
    let b = put(&k, &bv, &[32, 40], F32);
    let c = out(&k, &[32, 40], F32);
    exec(&k, &[k.matmul(&a, &b, &c).unwrap()]);
    assert_eq!(get(&k, &c), bv);
}

#[test]
fn matmul_one_by_one() {
    let k = kernels(false);
    let a = put(&k, &[2.0], &[1, 1], F32);
    let b = put(&k, &[3.0], &[1, 1], F32);
    let c = out(&k, &[1, 1], F32);
    exec(&k, &[k.matmul(&a, &b, &c).unwrap()]);
    assert_eq!(get(&k, &c), vec![6.0]);
}

#[test]
fn matmul_q4_k_matches_dequantized_oracle() {
    let k = kernels(false);
    let case = Case::Matmul {
        m: 48,
        n: 33,
        k: 256,
        a: Q4_K,
        b: F32,
        b_transposed: false,
    };
    let p = run_case(&k, &case, 11, 0.0).unwrap();
    assert!(p.nmse <= 1e-7 && p.oob == 0, "{p:?}");
}

#[test]
fn matmul_tile_edges_stay_in_bounds() {
    let k = kernels(false);
    for (i, &(m, n, kk)) in [(63, 65, 15), (64, 64, 16), (65, 63, 17), (127, 129, 33), (129, 1, 1), (1, 129, 47)]
        .iter()
        .enumerate()
    {
        let case = Case::Matmul {
            m,
            n,
            k: kk,
            a: F32,
            b: F32,
            b_transposed: i % 2 == 1,
        };
        let p = run_case(&k, &case, i as u64, 0.0).unwrap();
        assert!(p.passed(), "{p:?}");
    }
}

#[test]
fn matvec_identity_and_permutation() {
    let k = kernels(false);
    let n = 64;
    let xv = random(2, n);
    let x = put(&k, &xv, &[n], F32);
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    let eye: Vec<f32> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let onehot: Vec<f32> = (0..n * n).map(|i| if perm[i / n] == i % n { 1.0 } else { 0.0 }).collect();
    for (mat, expect) in [(eye, xv.clone()), (onehot, perm.iter().map(|&j| xv[j]).collect::<Vec<_>>())] {
        let a = put(&k, &mat, &[n, n], F32);
        let y = out(&k, &[n], F32);
        exec(&k, &[k.matvec(&a, &x, &y).unwrap()]);
        assert_eq!(get(&k, &y), expect);
    }
}

#[test]
fn matvec_q8_0_large() {
    let k = kernels(false);
    let case = Case::Matvec {
        m: 1024,
        k: 2048,
        a: Q8_0,
        x: F32,
    };
    let p = run_case(&k, &case, 5, 0.0).unwrap();
    assert!(p.nmse <= 1e-7 && p.oob == 0, "{p:?}");
}

#[test]
fn matvec_variants_agree() {
    let sg = kernels(false);
    let portable = kernels(true);
    for (i, a) in [F32, F16, Q8_0, Q4_K, Q6_K, IQ4_NL].into_iter().enumerate() {
        let (m, kk) = (77, 512);
        let av = random(10 + i as u64, m * kk);
        let xv = random(20 + i as u64, kk);
        let mut outs = Vec::new();
        for k in [&sg, &portable] {
            let ad = put(k, &av, &[m, kk], a);
            let x = put(k, &xv, &[kk], F32);
            let y = out(k, &[m], F32);
            let l = k.matvec(&ad, &x, &y).unwrap();
            exec(k, std::slice::from_ref(&l));
            outs.push((get(k, &y), l.kernel.key.variant.subgroups));
        }
        assert!(outs[0].1 && !outs[1].1);
        assert!(nmse(&outs[0].0, &outs[1].0).unwrap() <= 1e-7, "{a}");
    }
}

// ---- attention ----

struct Attn {
    q: TensorDesc,
    kc: TensorDesc,
    vc: TensorDesc,
    o: TensorDesc,
    parts: TensorDesc,
}

fn attn_setup(k: &Kernels, q: &[f32], kv: (&[f32], &[f32]), shape: (usize, usize, usize, usize), fmt: BlockFormat) -> Attn {
    let (heads, q_len, cap, d) = shape;
    let qshape: Vec<usize> = if q_len == 0 { vec![heads, d] } else { vec![heads, q_len, d] };
    let kvh = kv.0.len() / (cap * d);
    Attn {
        q: put(k, q, &qshape, F32),
        kc: put(k, kv.0, &[kvh, cap, d], fmt),
        vc: put(k, kv.1, &[kvh, cap, d], fmt),
        o: out(k, &qshape, F32),
        parts: out(k, &[MAX_SPLITS as usize * heads * (d + 2)], F32),
    }
}

#[test]
fn decode_single_position_returns_the_value_row() {
    let k = kernels(false);
    let d = 64;
    let vrow: Vec<f32> = random(3, d).iter().map(|v| (v * 64.0).round() / 64.0).collect();
    let a = attn_setup(&k, &random(1, d), (&random(2, d), &vrow), (1, 0, 1, d), F16);
    exec(&k, &k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, 1, 0.125, Some(1)).unwrap());
    assert_eq!(get(&k, &a.o), vrow);
}

#[test]
fn decode_with_identical_keys_averages_values() {
    let k = kernels(false);
    let (d, s) = (128, 40);
    let krow = random(4, d);
    let kv: Vec<f32> = (0..s).flat_map(|_| krow.clone()).collect();
    let vv = random(5, s * d);
    let vq = dequantize_tensor(
        &quantize_tensor(&vv, &[1, s, d], F16).unwrap().0,
        &TensorDesc::contiguous(&[1, s, d], F16),
    )
    .unwrap();
    let mean: Vec<f32> = (0..d)
        .map(|c| ((0..s).map(|r| vq[r * d + c] as f64).sum::<f64>() / s as f64) as f32)
        .collect();
    for splits in [1, 2, 4] {
        let a = attn_setup(&k, &random(6, d), (&kv, &vv), (1, 0, s, d), F16);
        exec(
            &k,
            &k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, s, 0.1, Some(splits)).unwrap(),
        );
        let got = get(&k, &a.o);
        assert!(nmse(&mean, &got).unwrap() <= 1e-12, "splits={splits}");
    }
}

#[test]
fn decode_splits_agree_with_oracle_at_517() {
    let k = kernels(false);
    let mut results = Vec::new();
    for splits in [1, 2, 4, 8] {
        let case = Case::FlashDecode {
            heads: 4,
            kv_heads: 2,
            seq: 517,
            cap: 517,
            d: 64,
            kv: F16,
            splits: Some(splits),
        };
        let p = run_case(&k, &case, 99, 0.0).unwrap();
        assert!(p.nmse <= 1e-6 && p.oob == 0, "{p:?}");
        assert_eq!(p.kernels.len(), if splits == 1 { 1 } else { 2 });
        results.push(p);
    }
}

#[test]
fn split_count_does_not_change_the_output() {
    let k = kernels(false);
    for kv in [F16, Q8_0, Q4_0] {
        let (heads, s, d) = (2, 300, 128);
        let qv = random(7, heads * d);
        let (kk, vv) = (random(8, heads * s * d), random(9, heads * s * d));
        let mut outs = Vec::new();
        for splits in [1, 2, 4, 8] {
            let a = attn_setup(&k, &qv, (&kk, &vv), (heads, 0, s, d), kv);
            exec(
                &k,
                &k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, s, 0.09, Some(splits)).unwrap(),
            );
            outs.push(get(&k, &a.o));
        }
        for o in &outs[1..] {
            assert!(nmse(&outs[0], o).unwrap() <= 1e-6, "{kv}");
        }
    }
}

#[test]
fn tile_with_one_query_matches_decode() {
    let k = kernels(false);
    let (heads, s, d) = (2, 70, 64);
    let qv = random(1, heads * d);
    let (kk, vv) = (random(2, heads * s * d), random(3, heads * s * d));
    let a = attn_setup(&k, &qv, (&kk, &vv), (heads, 0, s, d), Q8_0);
    exec(&k, &k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, s, 0.125, Some(1)).unwrap());
    let t = attn_setup(&k, &qv, (&kk, &vv), (heads, 1, s, d), Q8_0);
    exec(&k, &[k.flash_tile(&t.q, &t.kc, &t.vc, &t.o, s, 0.125, true).unwrap()]);
    assert!(nmse(&get(&k, &a.o), &get(&k, &t.o)).unwrap() <= 1e-12);
}

#[test]
fn tile_causal_four_by_four_by_hand() {
    // Zero queries give uniform weights over the visible prefix, so row t
    // is the mean of value rows 0..=t.
    let k = kernels(false);
    let d = 64;
    let vrows: Vec<f32> = (0..4).flat_map(|r| (0..d).map(move |c| (r * 4 + c % 4) as f32)).collect();
    let t = attn_setup(&k, &vec![0.0; 4 * d], (&random(5, 4 * d), &vrows), (1, 4, 4, d), F16);
    exec(&k, &[k.flash_tile(&t.q, &t.kc, &t.vc, &t.o, 4, 0.125, true).unwrap()]);
    let got = get(&k, &t.o);
    for row in 0..4 {
        for c in 0..d {
            let expect = (0..=row).map(|r| (r * 4 + c % 4) as f32).sum::<f32>() / (row + 1) as f32;
            assert_eq!(got[row * d + c], expect, "row {row} col {c}");
        }
    }
    let u = attn_setup(&k, &vec![0.0; 4 * d], (&random(5, 4 * d), &vrows), (1, 4, 4, d), F16);
    exec(&k, &[k.flash_tile(&u.q, &u.kc, &u.vc, &u.o, 4, 0.125, false).unwrap()]);
    let mean: Vec<f32> = (0..d).map(|c| (0..4).map(|r| (r * 4 + c % 4) as f32).sum::<f32>() / 4.0).collect();
    for row in get(&k, &u.o).chunks(d) {
        assert_eq!(row, mean.as_slice());
    }
}

#[test]
fn tile_64_by_512() {
    let k = kernels(false);
    for (causal, kv) in [(true, F16), (false, Q8_0), (true, Q4_0)] {
        let case = Case::FlashTile {
            heads: 2,
            kv_heads: 1,
            q_len: 64,
            seq: 512,
            cap: 512,
            d: 128,
            kv,
            causal,
        };
        let p = run_case(&k, &case, 17, 0.0).unwrap();
        assert!(p.nmse <= 1e-6 && p.oob == 0, "{p:?}");
    }
}

#[test]
fn attention_oracle_grid() {
    let k = kernels(false);
    for s in [1, 32, 257, 512] {
        for d in [64, 128] {
            for kv in [F16, Q8_0, Q4_0] {
                for splits in [1, 2, 4, 8] {
                    let c = Case::FlashDecode {
                        heads: 2,
                        kv_heads: 1,
                        seq: s,
                        cap: s,
                        d,
                        kv,
                        splits: Some(splits),
                    };
                    let p = run_case(&k, &c, s as u64, 0.0).unwrap();
                    assert!(p.nmse <= 1e-6 && p.oob == 0, "{p:?}");
                }
                for causal in [false, true] {
                    let c = Case::FlashTile {
                        heads: 2,
                        kv_heads: 2,
                        q_len: s.min(9),
                        seq: s,
                        cap: s + 3,
                        d,
                        kv,
                        causal,
                    };
                    let p = run_case(&k, &c, s as u64, 0.0).unwrap();
                    assert!(p.nmse <= 1e-6 && p.oob == 0, "{p:?}");
                }
            }
        }
    }
}

#[test]
fn decode_rejects_bad_split_counts() {
    let k = kernels(false);
    let a = attn_setup(&k, &random(1, 64), (&random(2, 64 * 4), &random(3, 64 * 4)), (1, 0, 4, 64), F16);
    assert!(k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, 4, 1.0, Some(16)).is_err());
    assert!(k.flash_decode(&a.q, &a.kc, &a.vc, &a.o, &a.parts, 5, 1.0, Some(1)).is_err());
}

// ---- rows and elementwise ----

#[test]
fn zero_inputs_give_zero_outputs() {
    let k = kernels(false);
    let n = 300;
    let z = put(&k, &vec![0.0; n], &[n], F32);
    let ones = put(&k, &vec![1.0; n], &[n], F32);
    for kind in EwKind::ALL {
        let dst = out(&k, &[n], F32);
        let b = match kind {
            EwKind::Add => Some(&z),
            _ => kind.binary().then_some(&ones),
        };
        exec(&k, &[k.elementwise(kind, &z, b, &dst, 3.0).unwrap()]);
        assert!(get(&k, &dst).iter().all(|&v| v == 0.0), "{kind:?}");
    }
    let x = put(&k, &vec![0.0; 2 * 64], &[2, 64], F32);
    let w = put(&k, &vec![1.0; 64], &[64], F32);
    let y = out(&k, &[2, 64], F32);
    exec(&k, &[k.rms_norm(&x, &w, &y, 1e-6).unwrap()]);
    assert!(get(&k, &y).iter().all(|&v| v == 0.0));
    let x = put(&k, &[0.0; 2 * 3 * 8], &[2, 3, 8], F32);
    let pos = qkern::kernels::upload(k.device(), &[5u8, 0, 0, 0, 9, 0, 0, 0]).unwrap();
    exec(&k, &[k.rope(&x, pos.whole(), None, 10000.0).unwrap()]);
    assert!(get(&k, &x).iter().all(|&v| v == 0.0));
}

#[test]
fn one_element_cases_by_hand() {
    let k = kernels(false);
    let a = put(&k, &[2.0], &[1], F32);
    let b = put(&k, &[-3.0], &[1], F32);
    let expect = [
        (EwKind::Add, -1.0),
        (EwKind::Mul, -6.0),
        (EwKind::Scale, 1.0),
        (EwKind::SiluGlu, 2.0 / (1.0 + (-2.0f32).exp()) * -3.0),
        (EwKind::CopyCast, 2.0),
    ];
    for (kind, want) in expect {
        let dst = out(&k, &[1], F32);
        exec(&k, &[k.elementwise(kind, &a, Some(&b), &dst, 0.5).unwrap()]);
        assert!((get(&k, &dst)[0] - want).abs() <= 1e-6 * want.abs(), "{kind:?}");
    }
    // f16 destination of odd length keeps the neighbouring half.
    let dst = put(&k, &[7.0, 7.0], &[2], F16);
    let one = TensorDesc {
        shape: vec![1],
        ..dst.clone()
    };
    exec(&k, &[k.elementwise(EwKind::CopyCast, &a, None, &one, 1.0).unwrap()]);
    assert_eq!(get(&k, &dst), vec![2.0, 7.0]);

    let x = put(&k, &[-4.0], &[1, 1], F32);
    let w = put(&k, &[0.5], &[1], F32);
    let y = out(&k, &[1, 1], F32);
    exec(&k, &[k.rms_norm(&x, &w, &y, 1e-30).unwrap()]);
    assert_eq!(get(&k, &y), vec![-0.5]);
    let sy = out(&k, &[1, 1], F32);
    exec(&k, &[k.softmax_row(&x, &sy).unwrap()]);
    assert_eq!(get(&k, &sy), vec![1.0]);
    let r = put(&k, &[1.0, 0.0], &[1, 1, 2], F32);
    let ry = out(&k, &[1, 1, 2], F32);
    let pos = qkern::kernels::upload(k.device(), &0u32.to_le_bytes()).unwrap();
    exec(&k, &[k.rope(&r, pos.whole(), Some(&ry), 10000.0).unwrap()]);
    assert_eq!(get(&k, &ry), vec![1.0, 0.0]);
}

#[test]
fn rows_64_by_256_against_oracles() {
    let k = kernels(false);
    for case in [
        Case::RmsNorm { rows: 64, d: 256 },
        Case::SoftmaxRow { rows: 64, d: 256 },
        Case::Rope {
            t: 64,
            h: 1,
            d: 256,
            in_place: false,
        },
    ] {
        let p = run_case(&k, &case, 8, 0.0).unwrap();
        assert!(p.nmse <= 1e-7 && p.oob == 0, "{p:?}");
    }
    for kind in EwKind::ALL {
        for (a, out) in [(F32, F32), (F16, F32), (F32, F16)] {
            let case = Case::Elementwise {
                kind,
                n: 64 * 256,
                a,
                b: a,
                out,
            };
            let p = run_case(&k, &case, 8, 0.0).unwrap();
            assert!(p.nmse <= case.threshold() && p.oob == 0, "{p:?}");
        }
    }
    let rms = oracle::rms_norm(&[1.0; 4], &[1.0; 4], 4, 0.0);
    assert_eq!(rms, vec![1.0; 4]);
}

#[test]
fn elementwise_range_writes_only_its_window() {
    let k = kernels(false);
    let a = put(&k, &(0..16).map(|i| i as f32).collect::<Vec<_>>(), &[16], F32);
    let dst = put(&k, &[-1.0; 16], &[16], F32);
    let range = EwRange {
        n: 5,
        a_off: 3,
        b_off: 0,
        dst_off: 8,
    };
    exec(&k, &[k.elementwise_range(EwKind::Scale, &a, None, &dst, range, 2.0).unwrap()]);
    let got = get(&k, &dst);
    let mut want = vec![-1.0; 16];
    for i in 0..5 {
        want[8 + i] = 2.0 * (3 + i) as f32;
    }
    assert_eq!(got, want);
    let h = put(&k, &[0.0; 4], &[4], F16);
    assert!(k
        .elementwise_range(EwKind::CopyCast, &a, None, &h, EwRange { n: 1, dst_off: 1, ..range }, 1.0)
        .is_err());
}

// ---- quantize_kv ----

#[test]
fn quantize_kv_zero_and_constant_rows() {
    let k = kernels(false);
    let d = 64;
    let c = -1.7f32;
    let mut v = vec![0.0; d];
    v.extend(std::iter::repeat_n(c, d));
    let x = put(&k, &v, &[2, d], F32);
    let dst = out(&k, &[2, d], Q8_0);
    exec(&k, &[k.quantize_kv(&x, &dst, 0, d / 32).unwrap()]);
    let b = bytes(&k, &dst);
    assert!(b[..2 * 34].iter().all(|&x| x == 0));
    let scale = half::f16::from_f32(c.abs() / 127.0);
    for blk in b[2 * 34..].chunks(34) {
        assert_eq!(&blk[..2], &scale.to_le_bytes());
        assert!(blk[2..].iter().all(|&q| q as i8 == -127));
    }
}

#[test]
fn quantize_kv_matches_cpu_codec_bytes() {
    let k = kernels(false);
    for (i, src) in [F32, F16, F32, F16].into_iter().enumerate() {
        let case = Case::QuantizeKv { rows: 17 + i, d: 128, src };
        let p = run_case(&k, &case, 40 + i as u64, 0.0).unwrap();
        assert!(p.passed(), "{p:?}");
    }
}

#[test]
fn quantize_kv_appends_into_a_cache_row() {
    // Write position 5 of a [heads=2, cap=8, d=64] cache: row stride is
    // cap * d / 32 blocks.
    let k = kernels(false);
    let (cap, d) = (8, 64);
    let src = random(3, 2 * d);
    let x = put(&k, &src, &[2, d], F32);
    let cache = out(&k, &[2, cap, d], Q8_0);
    exec(&k, &[k.quantize_kv(&x, &cache, 5 * d / 32, cap * d / 32).unwrap()]);
    let b = bytes(&k, &cache);
    let (row0, _) = quantize_tensor(&src[..d], &[d], Q8_0).unwrap();
    let (row1, _) = quantize_tensor(&src[d..], &[d], Q8_0).unwrap();
    let rb = d / 32 * 34;
    assert_eq!(&b[5 * rb..6 * rb], row0.as_slice());
    assert_eq!(&b[(cap + 5) * rb..(cap + 6) * rb], row1.as_slice());
    let untouched: usize = b
        .iter()
        .enumerate()
        .filter(|(i, _)| !(5 * rb..6 * rb).contains(i) && !((cap + 5) * rb..(cap + 6) * rb).contains(i))
        .map(|(_, &v)| v as usize)
        .sum();
    assert_eq!(untouched, 0);
}
