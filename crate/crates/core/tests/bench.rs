mod common;

use std::sync::Arc;

use proptest::prelude::*;
use qkern::bench::*;
use qkern::quant::BlockFormat;

fn fixture() -> ThroughputMatrix {
    // Rows are devices, columns configs; already normalized per device.
    ThroughputMatrix::from_rows(&["gpu0", "gpu1"], &["A", "B"], &[&[1.0, 0.8], &[0.5, 0.9]]).unwrap()
}

#[test]
fn two_device_fixture_picks_the_robust_config() {
    let s = select_portable(&fixture(), 0.4).unwrap();
    assert_eq!(s.config, "B");
    // gpu1's best is B, so B normalizes to (0.8, 1.0).
    assert!((s.geomean - 0.8f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.worst, 0.8);
    assert_eq!(select_portable(&fixture(), 0.1), Err(SelectError::NoFeasibleConfig { cap: 0.1 }));
}

proptest! {
    #[test]
    fn selection_ignores_per_device_scale(
        cells in proptest::collection::vec(0.05f64..10.0, 12),
        factors in proptest::collection::vec(1e-3f64..1e3, 3),
        cap in 0.1f64..0.9,
    ) {
        let rows: Vec<&[f64]> = cells.chunks(4).collect();
        let m = ThroughputMatrix::from_rows(&["a", "b", "c"], &["c0", "c1", "c2", "c3"], &rows).unwrap();
        let mut scaled = m.clone();
        for (r, f) in factors.iter().enumerate() {
            scaled.scale_row(r, *f).unwrap();
        }
        let x = select_portable(&m, cap).map(|s| s.config);
        let y = select_portable(&scaled, cap).map(|s| s.config);
        prop_assert_eq!(x, y);
    }
}

// 24 columns: one per (model, phase, kv depth). A row needs most of its
// cells present to stay separable once the rest take the column median.
#[test]
fn three_bands_are_recovered() {
    for seed in 0..5 {
        for missing in [0.0, 0.2] {
            let (m, bands) = common::three_band_matrix(5, 24, missing, seed);
            let c = cluster_devices(&m, 3, 0).unwrap();
            assert!(common::same_partition(&c.assignment, &bands), "seed {seed}, missing {missing}");
            assert!(c.inertia_history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            assert!(c.iterations() <= MAX_ITERATIONS);
        }
    }
}

#[test]
fn clustering_edge_cases() {
    let (m, _) = common::three_band_matrix(2, 4, 0.0, 1);
    let c = cluster_devices(&m, 6, 3).unwrap();
    let mut sorted = c.assignment.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(c.inertia(), 0.0);
    assert_eq!(cluster_devices(&m, 3, 9).unwrap(), cluster_devices(&m, 3, 9).unwrap());
    assert_eq!(cluster_devices(&m, 7, 0), Err(ClusterError::KTooLarge { k: 7, devices: 6 }));

    let mut twins = ThroughputMatrix::from_rows(
        &["a", "a-copy", "b", "c"],
        &["x", "y"],
        &[&[5.0, 9.0], &[5.0, 9.0], &[50.0, 2.0], &[400.0, 700.0]],
    )
    .unwrap();
    for k in 1..4 {
        let c = cluster_devices(&twins, k, 0).unwrap();
        assert_eq!(c.assignment[0], c.assignment[1], "k={k}");
    }
    for r in 0..4 {
        twins.set(r, 1, None).unwrap();
    }
    assert_eq!(cluster_devices(&twins, 2, 0), Err(ClusterError::EmptyColumn("y".into())));
}

#[test]
fn sweep_grids_are_valid_and_capped() {
    let k = common::kernels(false);
    let caps = k.caps();
    let base = *k.tuning();
    for family in Family::ALL {
        let grid = sweep_grid(family, &base, caps, 64, MAX_GRID_POINTS);
        assert!(!grid.is_empty() && grid.len() <= MAX_GRID_POINTS, "{family}: {}", grid.len());
        let mut labels: Vec<String> = grid.iter().map(|t| config_label(family, t)).collect();
        labels.dedup();
        assert_eq!(labels.len(), grid.len());
        assert_eq!(sweep_grid(family, &base, caps, 64, 4).len(), 4.min(grid.len()));
    }
    let matmul = sweep_grid(Family::Matmul, &base, caps, 64, usize::MAX);
    assert_eq!(matmul.len(), MAX_GRID_POINTS);
    for t in &matmul {
        qkern::kernels::validate_matmul(&t.matmul, caps).unwrap();
    }
}

#[test]
fn decode_bench_excludes_warmup_and_reports_three_repeats() {
    let k = Arc::new(common::kernels(false));
    let mut spec = BenchSpec::new(Preset::Decode, BlockFormat::Q8_0, 16);
    spec.iterations = 2;
    let r = run_bench(k.clone(), &spec, "default").unwrap();
    assert_eq!(r.repeats.len(), 3);
    assert!(r.min() <= r.mean() && r.mean() <= r.max() && r.min() > 0.0);
    assert!((r.breakdown.percent.iter().sum::<f64>() - 100.0).abs() < 0.1);
    assert!(r.kernels.iter().any(|l| l.starts_with("flash_decode")));
    let dispatches_per_run = 11;
    // Warmup plus three repeats of two iterations each.
    assert_eq!(k.device().stats().dispatches % dispatches_per_run, 0);

    spec.repeats = 2;
    assert!(matches!(run_bench(k, &spec, "default"), Err(BenchError::TooFewRepeats(2))));
}
