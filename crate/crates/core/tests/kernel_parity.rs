mod common;

use std::collections::BTreeMap;

use qkern::verify::{run_case, sweep, Case, KERNELS};

fn check_sweep(portable: bool, seed: u64) {
    let k = common::kernels(portable);
    let cases = sweep(seed, 50);
    let mut per_kernel = BTreeMap::new();
    let mut failures = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let p = run_case(&k, case, seed * 10_000 + i as u64, 0.0).unwrap_or_else(|e| panic!("{case}: {e}"));
        *per_kernel.entry(case.kernel()).or_insert(0) += 1;
        if !p.passed() {
            failures.push(format!("{case}: nmse={:e} oob={} bytes={}", p.nmse, p.oob, p.byte_mismatches));
        }
    }
    assert_eq!(per_kernel.len(), KERNELS.len());
    assert!(per_kernel.values().all(|&n| n >= 50));
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn sweep_with_subgroup_reductions() {
    check_sweep(false, 7);
}

#[test]
fn sweep_with_workgroup_memory_reductions() {
    check_sweep(true, 8);
}

#[test]
fn sweep_covers_tile_edges() {
    let cases = sweep(7, 50);
    let near = |v: usize, t: usize| v % t == 1 || v % t == t - 1;
    assert!(cases.iter().any(|c| matches!(c, Case::Matmul { m, .. } if near(*m, 64))));
    assert!(cases.iter().any(|c| matches!(c, Case::Matmul { n, .. } if near(*n, 64))));
    assert!(cases.iter().any(|c| matches!(c, Case::FlashTile { q_len, .. } if near(*q_len, 8))));
}

#[test]
fn perturbed_outputs_fail() {
    let k = common::kernels(false);
    for case in [
        Case::RmsNorm { rows: 4, d: 64 },
        Case::QuantizeKv {
            rows: 2,
            d: 64,
            src: qkern::quant::BlockFormat::F32,
        },
    ] {
        assert!(run_case(&k, &case, 1, 0.0).unwrap().passed());
        assert!(!run_case(&k, &case, 1, 0.01).unwrap().passed(), "{case}");
    }
}
