use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qkern::bench::{
    cluster_devices, config_label, run_bench, select_portable, sweep_grid, tuning_label, write_csv, BenchSpec, BreakdownTable, Family,
    Preset, ThroughputMatrix, DEFAULT_SLOWDOWN_CAP, MAX_GRID_POINTS,
};
use qkern::device::{init_device_on, AdapterProfile, DeviceOptions};
use qkern::kernels::{run_launches, upload, Kernels, Launch, TuningParams};
use qkern::quant::{dequantize_tensor, quantize_tensor, BlockFormat};
use qkern::runtime::RuntimeConfig;
use qkern::tensor::TensorDesc;
use qkern::verify::{filtered, run_case, sweep};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "qkern", version, about = "Quantized kernel verification, benchmarking and tuning")]
struct Cli {
    #[command(flatten)]
    device: DeviceArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DeviceArgs {
    /// Adapter profile: `software` or `baseline` (no subgroups, f16 or timestamps).
    #[arg(long, global = true, default_value = "software")]
    adapter: String,
    /// Runtime config file (TOML), shared with the library runtime.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use workgroup-memory reductions even when subgroups are available.
    #[arg(long, global = true)]
    portable: bool,
    /// Count out-of-bounds accesses.
    #[arg(long, global = true)]
    validation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every kernel against its CPU oracle over a randomized sweep.
    Verify {
        /// Kernel name (e.g. `matvec`) or a substring of case labels.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        per_kernel: usize,
        /// Add this value to every kernel output before comparing.
        #[arg(long, default_value_t = 0.0)]
        inject_fault: f32,
    },
    /// Measure throughput of a decode or prefill graph.
    Bench {
        #[arg(long, default_value = "decode")]
        preset: Preset,
        #[arg(long, default_value = "q8_0")]
        format: BlockFormat,
        /// KV cache format; defaults to f16 for f16 weights and q8_0 otherwise.
        #[arg(long)]
        kv_format: Option<BlockFormat>,
        #[arg(long = "kv-depth", default_values_t = [0usize])]
        kv_depth: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        iterations: Option<usize>,
        /// Prefill tokens per iteration.
        #[arg(long, default_value_t = 512)]
        prompt_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write one CSV row per repeat here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Sweep tuning parameters on one or more adapters and pick a portable config.
    Tune {
        #[arg(long, default_value = "matvec")]
        family: Family,
        /// Comma-separated adapter profiles to measure.
        #[arg(long, default_value = "software,baseline", value_delimiter = ',')]
        adapters: Vec<String>,
        #[arg(long, default_value_t = MAX_GRID_POINTS)]
        max_points: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = DEFAULT_SLOWDOWN_CAP)]
        slowdown_cap: f64,
        /// Select from an existing device x config CSV instead of measuring.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Write the measured matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group devices by throughput profile.
    Cluster {
        /// Device x workload CSV; empty cells are imputed.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, short)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-category time shares of the decode graph at several KV depths.
    Breakdown {
        #[arg(long, default_value = "q8_0")]
        format: BlockFormat,
        #[arg(long = "kv-depth", default_values_t = [0usize, 512, 2048])]
        kv_depth: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Print the metadata and tensor index of a GGUF file.
    Inspect { path: PathBuf },
    /// Dump one tensor of a GGUF file.
    Extract {
        path: PathBuf,
        tensor: String,
        /// Decode to f32 text, one value per line.
        #[arg(long)]
        dequant: bool,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn adapter(name: &str) -> AnyResult<AdapterProfile> {
    match name {
        "software" => Ok(AdapterProfile::software()),
        "baseline" => Ok(AdapterProfile::software_baseline()),
        _ => Err(format!("unknown adapter {name:?} (software, baseline)").into()),
    }
}

fn runtime_config(args: &DeviceArgs) -> AnyResult<RuntimeConfig> {
    Ok(match &args.config {
        Some(p) => RuntimeConfig::load(p)?,
        None => RuntimeConfig::default(),
    })
}

fn make_kernels(args: &DeviceArgs, adapter_name: &str, tuning: TuningParams) -> AnyResult<Arc<Kernels>> {
    let cfg = runtime_config(args)?;
    let opts = DeviceOptions::best_available().with_validation(args.validation || cfg.device.validation);
    let device = init_device_on(&[adapter(adapter_name)?], &opts)?;
    let portable = args.portable || cfg.force_portable();
    Ok(Arc::new(
        Kernels::new(Arc::new(device)).with_tuning(tuning).force_portable(portable),
    ))
}

fn output(path: &Option<PathBuf>) -> AnyResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_verify(args: &DeviceArgs, filter: Option<&str>, seed: u64, per_kernel: usize, fault: f32) -> AnyResult<bool> {
    let cfg = runtime_config(args)?;
    let k = make_kernels(args, &args.adapter, cfg.tuning)?;
    let cases = filtered(sweep(seed, per_kernel), filter);
    if cases.is_empty() {
        return Err(format!("no cases match {filter:?}").into());
    }
    let mut per_kernel: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    let mut failed = 0;
    for (i, case) in cases.iter().enumerate() {
        let p = run_case(&k, case, seed.wrapping_add(i as u64), fault)?;
        let entry = per_kernel.entry(case.kernel()).or_default();
        entry.0 += 1;
        entry.2 = entry.2.max(p.nmse);
        if p.passed() {
            entry.1 += 1;
        } else {
            failed += 1;
            println!(
                "FAIL {case}: nmse {:.3e} > {:.0e}, oob {}, byte mismatches {}",
                p.nmse, p.threshold, p.oob, p.byte_mismatches
            );
        }
    }
    println!("{:<14} {:>6} {:>6} {:>12}", "kernel", "cases", "passed", "worst nmse");
    for (name, (n, ok, worst)) in &per_kernel {
        println!("{name:<14} {n:>6} {ok:>6} {worst:>12.3e}");
    }
    println!("{} of {} cases passed on {}", cases.len() - failed, cases.len(), k.caps().adapter);
    Ok(failed == 0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    args: &DeviceArgs,
    preset: Preset,
    format: BlockFormat,
    kv_format: Option<BlockFormat>,
    depths: &[usize],
    repeats: usize,
    warmup: usize,
    iterations: Option<usize>,
    prompt_len: usize,
    seed: u64,
    csv: &Option<PathBuf>,
) -> AnyResult<()> {
    let cfg = runtime_config(args)?;
    let k = make_kernels(args, &args.adapter, cfg.tuning)?;
    let mut reports = Vec::new();
    for &depth in depths {
        let mut spec = BenchSpec::new(preset, format, depth);
        if let Some(kv) = kv_format {
            spec.kv_format = kv;
        }
        spec.repeats = repeats;
        spec.warmup = warmup;
        spec.prompt_len = prompt_len;
        spec.seed = seed;
        spec.batching = cfg.batching;
        if let Some(n) = iterations {
            spec.iterations = n;
        }
        let report = run_bench(k.clone(), &spec, &tuning_label(k.tuning()))?;
        println!("{report}");
        reports.push(report);
    }
    if let Some(path) = csv {
        write_csv(&reports, File::create(path)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Operations per second of one tuning config on a fixed workload.
fn measure(k: &Kernels, family: Family, repeats: usize) -> AnyResult<f64> {
    let device = k.device();
    let put = |values: &[f32], shape: &[usize], fmt: BlockFormat| -> AnyResult<TensorDesc> {
        let (bytes, desc) = quantize_tensor(values, shape, fmt)?;
        Ok(desc.with_binding(upload(device, &bytes)?.id, 0))
    };
    let zeros = |shape: &[usize]| -> AnyResult<TensorDesc> {
        let n = shape.iter().product::<usize>();
        put(&vec![0.0; n], shape, BlockFormat::F32)
    };
    let ramp = |n: usize| -> Vec<f32> { (0..n).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect() };
    let (launches, ops): (Vec<Launch>, f64) = match family {
        Family::Matmul => {
            let (m, kk, n) = (128, 256, 64);
            let a = put(&ramp(m * kk), &[m, kk], BlockFormat::Q8_0)?;
            let b = put(&ramp(kk * n), &[kk, n], BlockFormat::F32)?;
            (vec![k.matmul(&a, &b, &zeros(&[m, n])?)?], 2.0 * (m * kk * n) as f64)
        }
        Family::Matvec => {
            let (m, kk) = (1024, 1024);
            let a = put(&ramp(m * kk), &[m, kk], BlockFormat::Q8_0)?;
            let x = put(&ramp(kk), &[kk], BlockFormat::F32)?;
            (vec![k.matvec(&a, &x, &zeros(&[m])?)?], 2.0 * (m * kk) as f64)
        }
        Family::Flash => {
            let (h, s, d) = (4, 1024, 64);
            let q = put(&ramp(h * d), &[h, d], BlockFormat::F32)?;
            let kc = put(&ramp(h * s * d), &[h, s, d], BlockFormat::Q8_0)?;
            let vc = put(&ramp(h * s * d), &[h, s, d], BlockFormat::Q8_0)?;
            let partials = zeros(&[8 * h * (d + 2)])?;
            let o = zeros(&[h, d])?;
            let launches = k.flash_decode(&q, &kc, &vc, &o, &partials, s, 0.125, None)?;
            (launches, 4.0 * (h * s * d) as f64)
        }
    };
    run_launches(device, &launches)?;
    let mut best = 0.0f64;
    for _ in 0..repeats {
        let start = Instant::now();
        run_launches(device, &launches)?;
        best = best.max(ops / start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(best)
}

#[allow(clippy::too_many_arguments)]
fn cmd_tune(
    args: &DeviceArgs,
    family: Family,
    adapters: &[String],
    max_points: usize,
    repeats: usize,
    cap: f64,
    matrix: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> AnyResult<()> {
    let m = match matrix {
        Some(p) => ThroughputMatrix::read_csv(File::open(p)?)?,
        None => {
            let base = runtime_config(args)?.tuning;
            let mut grids = Vec::new();
            for name in adapters {
                let k = make_kernels(args, name, base)?;
                grids.push(sweep_grid(family, &base, k.caps(), 64, max_points));
            }
            let mut labels: Vec<String> = grids.iter().flatten().map(|t| config_label(family, t)).collect();
            labels.sort();
            labels.dedup();
            let mut m = ThroughputMatrix::new(adapters.to_vec(), labels.clone());
            for (r, (name, grid)) in adapters.iter().zip(&grids).enumerate() {
                for t in grid {
                    let k = make_kernels(args, name, *t)?;
                    let c = labels.iter().position(|l| *l == config_label(family, t)).expect("label listed");
                    m.set(r, c, Some(measure(&k, family, repeats)?))?;
                }
                println!("{name}: measured {} configs", grid.len());
            }
            m
        }
    };
    if let Some(p) = out {
        m.write_csv(File::create(p)?)?;
        println!("wrote {}", p.display());
    }
    let s = select_portable(&m, cap)?;
    println!("selected {} (geomean {:.4}, worst {:.4}, cap {cap})", s.config, s.geomean, s.worst);
    Ok(())
}

fn cmd_cluster(path: &Path, k: usize, seed: u64) -> AnyResult<()> {
    let m = ThroughputMatrix::read_csv(File::open(path)?)?;
    let c = cluster_devices(&m, k, seed)?;
    for (device, cluster) in m.rows().iter().zip(&c.assignment) {
        println!("{cluster}\t{device}");
    }
    let history: Vec<String> = c.inertia_history.iter().map(|v| format!("{v:.4}")).collect();
    println!(
        "inertia {} after {} iterations ({})",
        history.last().cloned().unwrap_or_default(),
        c.iterations(),
        history.join(" ")
    );
    Ok(())
}

fn cmd_breakdown(args: &DeviceArgs, format: BlockFormat, depths: &[usize], repeats: usize) -> AnyResult<()> {
    let cfg = runtime_config(args)?;
    let k = make_kernels(args, &args.adapter, cfg.tuning)?;
    for &depth in depths {
        let mut spec = BenchSpec::new(Preset::Decode, format, depth);
        spec.repeats = repeats;
        spec.batching = cfg.batching;
        let report = run_bench(k.clone(), &spec, &tuning_label(k.tuning()))?;
        println!("kv depth {depth}");
        print!("{}", BreakdownTable(&report.breakdown));
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> AnyResult<()> {
    let (model, _) = qkern::gguf::open(path)?;
    println!(
        "GGUF v{}, alignment {}, data at {}",
        model.version, model.alignment, model.data_start
    );
    println!("{} metadata entries", model.metadata.len());
    for (key, value) in &model.metadata {
        println!("  {key} = {value}");
    }
    println!("{} tensors", model.tensors.len());
    for t in &model.tensors {
        println!(
            "  {:<32} {:<6} {:<20} {:>12} bytes @ {}",
            t.name,
            t.format.to_string(),
            format!("{:?}", t.shape()),
            t.byte_size(),
            t.offset
        );
    }
    Ok(())
}

fn cmd_extract(path: &Path, name: &str, dequant: bool, out: &Option<PathBuf>) -> AnyResult<()> {
    let (model, mut reader) = qkern::gguf::open(path)?;
    let info = model.tensor(name)?;
    let bytes = model.read_tensor_bytes(&mut reader, info)?;
    let mut dst = output(out)?;
    if dequant {
        let values = dequantize_tensor(&bytes, &TensorDesc::contiguous(&info.shape(), info.format))?;
        for v in values {
            writeln!(dst, "{v}")?;
        }
    } else {
        dst.write_all(&bytes)?;
    }
    dst.flush()?;
    Ok(())
}

fn run(cli: Cli) -> AnyResult<bool> {
    let d = &cli.device;
    match cli.command {
        Command::Verify {
            filter,
            seed,
            per_kernel,
            inject_fault,
        } => return cmd_verify(d, filter.as_deref(), seed, per_kernel, inject_fault),
        Command::Bench {
            preset,
            format,
            kv_format,
            kv_depth,
            repeats,
            warmup,
            iterations,
            prompt_len,
            seed,
            csv,
        } => cmd_bench(
            d, preset, format, kv_format, &kv_depth, repeats, warmup, iterations, prompt_len, seed, &csv,
        )?,
        Command::Tune {
            family,
            adapters,
            max_points,
            repeats,
            slowdown_cap,
            matrix,
            out,
        } => cmd_tune(d, family, &adapters, max_points, repeats, slowdown_cap, &matrix, &out)?,
        Command::Cluster { matrix, k, seed } => cmd_cluster(&matrix, k, seed)?,
        Command::Breakdown { format, kv_depth, repeats } => cmd_breakdown(d, format, &kv_depth, repeats)?,
        Command::Inspect { path } => cmd_inspect(&path)?,
        Command::Extract {
            path,
            tensor,
            dequant,
            out,
        } => cmd_extract(&path, &tensor, dequant, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
