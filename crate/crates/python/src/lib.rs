//! Python bindings: codecs, GGUF inspection, the parity sweep, tuning
//! selection, clustering and decode benchmarks.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use qkern::bench::{self, BenchSpec, Preset, ThroughputMatrix};
use qkern::device::{init_device, DeviceOptions};
use qkern::kernels::{Category, Kernels};
use qkern::quant::{self, BlockFormat};
use qkern::tensor::TensorDesc;
use qkern::verify;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn format(name: &str) -> PyResult<BlockFormat> {
    name.parse().map_err(value_err)
}

fn kernels(portable: bool) -> PyResult<Kernels> {
    let device = init_device(&DeviceOptions::best_available()).map_err(runtime_err)?;
    Ok(Kernels::new(Arc::new(device)).force_portable(portable))
}

/// Encode row-major `values` of `shape` (innermost last) in `format`.
#[pyfunction]
fn quantize<'py>(py: Python<'py>, values: Vec<f32>, shape: Vec<usize>, format: &str) -> PyResult<Bound<'py, PyBytes>> {
    let (bytes, _) = quant::quantize_tensor(&values, &shape, self::format(format)?).map_err(value_err)?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn dequantize(data: &[u8], shape: Vec<usize>, format: &str) -> PyResult<Vec<f32>> {
    let desc = TensorDesc::contiguous(&shape, self::format(format)?);
    quant::dequantize_tensor(data, &desc).map_err(value_err)
}

#[pyfunction]
fn nmse(reference: Vec<f32>, candidate: Vec<f32>) -> PyResult<f64> {
    quant::nmse(&reference, &candidate).map_err(value_err)
}

/// Header of a GGUF file: `{"version", "metadata", "tensors"}`, with each
/// tensor as `(name, format, shape, offset, nbytes)`. Metadata values are
/// rendered as strings.
#[pyfunction]
fn inspect_gguf<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyDict>> {
    let (model, _) = qkern::gguf::open(path).map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("version", model.version)?;
    let meta = PyDict::new(py);
    for (k, v) in &model.metadata {
        meta.set_item(k, v.to_string())?;
    }
    out.set_item("metadata", meta)?;
    let tensors: Vec<(String, String, Vec<usize>, u64, u64)> = model
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.format.to_string(), t.shape(), t.offset, t.byte_size()))
        .collect();
    out.set_item("tensors", tensors)?;
    Ok(out)
}

/// Values of one GGUF tensor, dequantized to f32.
#[pyfunction]
fn read_tensor(path: &str, name: &str) -> PyResult<Vec<f32>> {
    let (model, mut reader) = qkern::gguf::open(path).map_err(value_err)?;
    let info = model.tensor(name).map_err(value_err)?;
    let bytes = model.read_tensor_bytes(&mut reader, info).map_err(value_err)?;
    quant::dequantize_tensor(&bytes, &TensorDesc::contiguous(&info.shape(), info.format)).map_err(value_err)
}

/// Kernel parity sweep against the CPU oracles. Returns one
/// `(case, nmse, threshold, passed)` tuple per case.
#[pyfunction]
#[pyo3(signature = (filter=None, per_kernel=50, seed=7, portable=false))]
fn verify_kernels(filter: Option<&str>, per_kernel: usize, seed: u64, portable: bool) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let k = kernels(portable)?;
    verify::filtered(verify::sweep(seed, per_kernel), filter)
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let p = verify::run_case(&k, case, seed * 10_000 + i as u64, 0.0).map_err(runtime_err)?;
            Ok((case.to_string(), p.nmse, p.threshold, p.passed()))
        })
        .collect()
}

fn matrix(devices: Vec<String>, configs: Vec<String>, rows: Vec<Vec<Option<f64>>>) -> PyResult<ThroughputMatrix> {
    if rows.len() != devices.len() {
        return Err(value_err(format!("{} rows for {} devices", rows.len(), devices.len())));
    }
    let cols = configs.len();
    let mut m = ThroughputMatrix::new(devices, configs);
    for (r, row) in rows.into_iter().enumerate() {
        if row.len() != cols {
            return Err(value_err(format!("row {r} has {} cells, expected {cols}", row.len())));
        }
        for (c, v) in row.into_iter().enumerate() {
            m.set(r, c, v).map_err(value_err)?;
        }
    }
    Ok(m)
}

/// Config with the best geometric-mean normalized throughput among those
/// no more than `cap` slower than each device's best. Returns
/// `(config, geomean, worst)`.
#[pyfunction]
#[pyo3(signature = (devices, configs, rows, cap=bench::DEFAULT_SLOWDOWN_CAP))]
fn select_portable(devices: Vec<String>, configs: Vec<String>, rows: Vec<Vec<Option<f64>>>, cap: f64) -> PyResult<(String, f64, f64)> {
    let s = bench::select_portable(&matrix(devices, configs, rows)?, cap).map_err(value_err)?;
    Ok((s.config, s.geomean, s.worst))
}

/// k-means over log1p throughput; `None` cells take the column median.
/// Returns `(assignment, inertia_history)`.
#[pyfunction]
#[pyo3(signature = (devices, workloads, rows, k, seed=0))]
fn cluster_devices(
    devices: Vec<String>,
    workloads: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
    k: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let c = bench::cluster_devices(&matrix(devices, workloads, rows)?, k, seed).map_err(value_err)?;
    Ok((c.assignment, c.inertia_history))
}

/// Decode benchmark of the micro block. Returns tokens/s per repeat and
/// the category breakdown in percent.
#[pyfunction]
#[pyo3(signature = (format="q8_0", kv_depth=0, repeats=3))]
fn bench_decode<'py>(py: Python<'py>, format: &str, kv_depth: usize, repeats: usize) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = BenchSpec::new(Preset::Decode, self::format(format)?, kv_depth);
    spec.repeats = repeats;
    let report = bench::run_bench(Arc::new(kernels(false)?), &spec, "default").map_err(runtime_err)?;
    let out = PyDict::new(py);
    out.set_item("workload", &report.workload)?;
    out.set_item(
        "tokens_per_sec",
        report.repeats.iter().map(|r| r.tokens_per_sec).collect::<Vec<_>>(),
    )?;
    let breakdown = PyDict::new(py);
    for c in Category::ALL {
        breakdown.set_item(c.name(), report.breakdown.share(c))?;
    }
    out.set_item("breakdown", breakdown)?;
    out.set_item("kernels", report.kernels)?;
    Ok(out)
}

#[pymodule]
fn qkern_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_gguf, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(verify_kernels, m)?)?;
    m.add_function(wrap_pyfunction!(select_portable, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_devices, m)?)?;
    m.add_function(wrap_pyfunction!(bench_decode, m)?)?;
    m.add("FORMATS", BlockFormat::ALL.map(|f| f.to_string()).to_vec())?;
    Ok(())
}
