#![allow(dead_code)]

use std::sync::Arc;

use qkern::device::{init_device, DeviceOptions};
use qkern::kernels::{download_f16, download_f32, run_launches, upload, Kernels, Launch};
use qkern::quant::{quantize_tensor, BlockFormat};
use qkern::tensor::TensorDesc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Kernels on a fresh software device with validation on.
pub fn kernels(portable: bool) -> Kernels {
    let device = init_device(&DeviceOptions::best_available().with_validation(true)).unwrap();
    Kernels::new(Arc::new(device)).force_portable(portable)
}

pub fn put(k: &Kernels, values: &[f32], shape: &[usize], format: BlockFormat) -> TensorDesc {
    let (bytes, desc) = quantize_tensor(values, shape, format).unwrap();
    let buffer = upload(k.device(), &bytes).unwrap();
    desc.with_binding(buffer.id, 0)
}

pub fn out(k: &Kernels, shape: &[usize], format: BlockFormat) -> TensorDesc {
    let desc = TensorDesc::contiguous(shape, format);
    let buffer = upload(k.device(), &vec![0u8; desc.byte_size()]).unwrap();
    desc.with_binding(buffer.id, 0)
}

pub fn get(k: &Kernels, t: &TensorDesc) -> Vec<f32> {
    let b = t.binding.unwrap();
    match t.format {
        BlockFormat::F16 => download_f16(k.device(), b.buffer, b.byte_offset, t.elements()).unwrap(),
        _ => download_f32(k.device(), b.buffer, b.byte_offset, t.elements()).unwrap(),
    }
}

pub fn bytes(k: &Kernels, t: &TensorDesc) -> Vec<u8> {
    let b = t.binding.unwrap();
    let size = t.byte_size() as u64;
    let mut v = k
        .device()
        .read_buffer(qkern::device::BufferSlice {
            buffer: b.buffer,
            offset: b.byte_offset,
            size: size.next_multiple_of(4),
        })
        .unwrap();
    v.truncate(size as usize);
    v
}

/// Run and assert no out-of-bounds access.
pub fn exec(k: &Kernels, launches: &[Launch]) {
    let report = run_launches(k.device(), launches).unwrap();
    assert_eq!(report.oob_accesses, 0, "out-of-bounds accesses");
}

pub fn random(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Devices in three throughput bands (1000x, 100x and 10x a base profile)
/// over `cols` workloads, with `missing` of the cells deleted at random.
/// Returns the matrix and each device's band.
pub fn three_band_matrix(per_band: usize, cols: usize, missing: f64, seed: u64) -> (qkern::bench::ThroughputMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..cols).map(|_| rng.random_range(1.0..3.0)).collect();
    let mut rows = Vec::new();
    let mut bands = Vec::new();
    for (band, scale) in [1000.0, 100.0, 10.0].into_iter().enumerate() {
        for i in 0..per_band {
            rows.push((format!("band{band}-dev{i}"), scale));
            bands.push(band);
        }
    }
    let names: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let labels: Vec<String> = (0..cols).map(|c| format!("w{c}")).collect();
    let mut m = qkern::bench::ThroughputMatrix::new(names, labels);
    for (r, (_, scale)) in rows.iter().enumerate() {
        for (c, b) in base.iter().enumerate() {
            let jitter = rng.random_range(0.9..1.1);
            m.set(r, c, Some(scale * b * jitter)).unwrap();
        }
    }
    let total = rows.len() * cols;
    let mut cells: Vec<usize> = (0..total).collect();
    use rand::seq::SliceRandom;
    cells.shuffle(&mut rng);
    let mut deleted = 0;
    for cell in cells {
        if deleted as f64 >= missing * total as f64 {
            break;
        }
        let (r, c) = (cell / cols, cell % cols);
        // Keep one present cell per column.
        let present = (0..rows.len()).filter(|&i| m.get(i, c).is_some()).count();
        if present > 1 {
            m.set(r, c, None).unwrap();
            deleted += 1;
        }
    }
    (m, bands)
}

/// Whether two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}
