//! Throughput runs over the decode micro block and a prefill-shaped graph.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernels::{EwKind, Kernels};
use crate::quant::BlockFormat;
use crate::runtime::{
    timing_breakdown, ArenaConfig, Batching, Breakdown, ExecError, Executor, GraphError, MicroBlock, MicroShape, NodeOp, OpGraph,
    RunTiming, TensorId,
};
use crate::tensor::TensorDesc;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("at least 3 measured repeats are needed, got {0}")]
    TooFewRepeats(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 512 prompt tokens through matmul projections and tiled attention.
    Prefill512,
    /// One token through matvec projections and split decode attention.
    Decode,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Prefill512 => "prefill512",
            Preset::Decode => "decode",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prefill512" => Ok(Preset::Prefill512),
            "decode" => Ok(Preset::Decode),
            _ => Err(format!("unknown preset {s:?} (prefill512, decode)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub preset: Preset,
    pub weight_format: BlockFormat,
    /// `F16` or `Q8_0`.
    pub kv_format: BlockFormat,
    pub kv_depth: usize,
    /// Tokens per prefill iteration; the preset uses 512.
    pub prompt_len: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Graph executions per repeat.
    pub iterations: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub batching: Batching,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(preset: Preset, format: BlockFormat, kv_depth: usize) -> Self {
        let kv_format = if format == BlockFormat::F16 {
            BlockFormat::F16
        } else {
            BlockFormat::Q8_0
        };
        Self {
            preset,
            weight_format: format,
            kv_format,
            kv_depth,
            prompt_len: 512,
            repeats: 3,
            warmup: 1,
            iterations: if preset == Preset::Decode { 4 } else { 1 },
            heads: 4,
            kv_heads: 2,
            head_dim: 64,
            batching: Batching::default(),
            seed: 0,
        }
    }

    pub fn workload(&self) -> String {
        let tokens = match self.preset {
            Preset::Decode => String::new(),
            Preset::Prefill512 => format!("/t{}", self.prompt_len),
        };
        format!(
            "{}{tokens}/w={}/kv={}/depth={}",
            self.preset, self.weight_format, self.kv_format, self.kv_depth
        )
    }

    fn tokens_per_iteration(&self) -> usize {
        match self.preset {
            Preset::Decode => 1,
            Preset::Prefill512 => self.prompt_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repeat {
    pub seconds: f64,
    pub iterations_per_sec: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub device: String,
    pub workload: String,
    pub config: String,
    pub iterations: usize,
    /// Measured repeats only; warmup runs are not included.
    pub repeats: Vec<Repeat>,
    /// Labels of the pipelines the graph dispatches.
    pub kernels: Vec<String>,
    pub breakdown: Breakdown,
}

impl BenchReport {
    fn tokens(&self) -> impl Iterator<Item = f64> + '_ {
        self.repeats.iter().map(|r| r.tokens_per_sec)
    }

    pub fn mean(&self) -> f64 {
        self.tokens().sum::<f64>() / self.repeats.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.tokens().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.tokens().fold(0.0, f64::max)
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "device",
    "workload",
    "config",
    "repeat",
    "iterations",
    "seconds",
    "iterations_per_sec",
    "tokens_per_sec",
];

/// One row per (device, workload, config, repeat).
pub fn write_csv<W: Write>(reports: &[BenchReport], dst: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        for (i, rep) in r.repeats.iter().enumerate() {
            w.write_record([
                r.device.clone(),
                r.workload.clone(),
                r.config.clone(),
                i.to_string(),
                r.iterations.to_string(),
                format!("{:.9}", rep.seconds),
                format!("{:.6}", rep.iterations_per_sec),
                format!("{:.6}", rep.tokens_per_sec),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "device    {}", self.device)?;
        writeln!(f, "workload  {}", self.workload)?;
        writeln!(f, "config    {}", self.config)?;
        writeln!(
            f,
            "tokens/s  mean {:.2}  min {:.2}  max {:.2}  ({} repeats x {} iterations)",
            self.mean(),
            self.min(),
            self.max(),
            self.repeats.len(),
            self.iterations
        )?;
        write!(f, "{}", BreakdownTable(&self.breakdown))?;
        writeln!(f, "kernels   {}", self.kernels.join(" "))
    }
}

/// Category shares as aligned text.
pub struct BreakdownTable<'a>(pub &'a Breakdown);

impl fmt::Display for BreakdownTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        let coarse = if b.coarse { " (coarse)" } else { "" };
        writeln!(f, "breakdown{coarse}")?;
        for c in crate::kernels::Category::ALL {
            writeln!(f, "  {:<17} {:>6.2}%", c.name(), b.share(c))?;
        }
        Ok(())
    }
}

struct Workload {
    graph: OpGraph,
    inputs: Vec<(TensorId, Vec<f32>)>,
    positions: Option<(TensorId, u32)>,
    ops: Vec<(usize, NodeOp)>,
}

fn decode_workload(spec: &BenchSpec, splits: u32) -> Result<Workload, BenchError> {
    let shape = MicroShape {
        heads: spec.heads,
        kv_heads: spec.kv_heads,
        head_dim: spec.head_dim,
        capacity: spec.kv_depth + 1,
        weight_format: spec.weight_format,
        kv_format: spec.kv_format,
        splits,
        ..MicroShape::default()
    };
    let block = MicroBlock::build(shape)?;
    Ok(Workload {
        inputs: block.random_inputs(spec.seed),
        positions: Some((block.positions, spec.kv_depth as u32)),
        ops: block.ops_at(spec.kv_depth),
        graph: block.graph,
    })
}

/// Projections and attention over `prompt_len` tokens with the caches
/// already holding `kv_depth + prompt_len` rows. Activations between the
/// matmuls are reinterpreted rather than transposed: the graph has the cost
/// of a prefill step, not its numerics.
fn prefill_workload(spec: &BenchSpec) -> Result<Workload, BenchError> {
    let (h, kvh, d, t) = (spec.heads, spec.kv_heads, spec.head_dim, spec.prompt_len);
    let dm = h * d;
    let kvw = kvh * d;
    let cap = spec.kv_depth + t;
    let f32d = |s: &[usize]| TensorDesc::contiguous(s, BlockFormat::F32);
    let mut g = OpGraph::new();
    let x = g.input("x", &[t, dm], BlockFormat::F32);
    let norm_w = g.input("norm.weight", &[dm], BlockFormat::F32);
    let wq = g.input("wq", &[dm, dm], spec.weight_format);
    let wk = g.input("wk", &[kvw, dm], spec.weight_format);
    let wv = g.input("wv", &[kvw, dm], spec.weight_format);
    let wo = g.input("wo", &[dm, dm], spec.weight_format);
    let kc = g.input("cache.k", &[kvh, cap, d], spec.kv_format);
    let vc = g.input("cache.v", &[kvh, cap, d], spec.kv_format);
    let normed = g.node("normed", NodeOp::RmsNorm { eps: 1e-5 }, &[x, norm_w], f32d(&[t, dm]))?;
    let cols = g.view(normed, &[dm, t])?;
    let q = g.node("q", NodeOp::Matmul, &[wq, cols], f32d(&[dm, t]))?;
    let k = g.node("k", NodeOp::Matmul, &[wk, cols], f32d(&[kvw, t]))?;
    let v = g.node("v", NodeOp::Matmul, &[wv, cols], f32d(&[kvw, t]))?;
    g.mark_output(k);
    g.mark_output(v);
    let qh = g.view(q, &[h, t, d])?;
    let attn_op = NodeOp::FlashTile {
        seq_len: cap,
        scale: 1.0 / (d as f32).sqrt(),
        causal: true,
    };
    let attn = g.node("attn", attn_op, &[qh, kc, vc], f32d(&[h, t, d]))?;
    let attn_cols = g.view(attn, &[dm, t])?;
    let proj = g.node("proj", NodeOp::Matmul, &[wo, attn_cols], f32d(&[dm, t]))?;
    let proj_rows = g.view(proj, &[t, dm])?;
    let add = NodeOp::Elementwise {
        kind: EwKind::Add,
        scale: 1.0,
    };
    let out = g.node("out", add, &[x, proj_rows], f32d(&[t, dm]))?;
    g.mark_output(out);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gen = |n: usize, amp: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(-amp..amp)).collect() };
    let ws = 1.0 / (dm as f32).sqrt();
    let inputs = vec![
        (x, gen(t * dm, 1.0)),
        (norm_w, vec![1.0; dm]),
        (wq, gen(dm * dm, ws)),
        (wk, gen(kvw * dm, ws)),
        (wv, gen(kvw * dm, ws)),
        (wo, gen(dm * dm, ws)),
        (kc, gen(kvh * cap * d, 1.0)),
        (vc, gen(kvh * cap * d, 1.0)),
    ];
    Ok(Workload {
        graph: g,
        inputs,
        positions: None,
        ops: Vec::new(),
    })
}

/// Run `spec` serially: warmup executions first, then `repeats` timed
/// blocks of `iterations` executions each.
pub fn run_bench(kernels: Arc<Kernels>, spec: &BenchSpec, config: &str) -> Result<BenchReport, BenchError> {
    if spec.repeats < 3 {
        return Err(BenchError::TooFewRepeats(spec.repeats));
    }
    if spec.iterations == 0 {
        return Err(BenchError::Invalid("iterations must be positive".into()));
    }
    let work = match spec.preset {
        Preset::Decode => decode_workload(spec, kernels.tuning().flash.splits_for(spec.kv_depth + 1))?,
        Preset::Prefill512 => prefill_workload(spec)?,
    };
    let device = kernels.device().caps().adapter.clone();
    let mut exec = Executor::new(kernels, work.graph, spec.batching, ArenaConfig::default())?;
    for (id, values) in &work.inputs {
        exec.write_tensor(*id, values)?;
    }
    if let Some((id, pos)) = work.positions {
        exec.write_u32(id, &[pos])?;
    }
    for &(node, op) in &work.ops {
        exec.set_op(node, op)?;
    }
    let mut kernels: Vec<String> = Vec::new();
    for &n in &exec.plan().order {
        for l in exec.launches(n) {
            let label = l.kernel.key.label();
            if !kernels.contains(&label) {
                kernels.push(label);
            }
        }
    }
    for _ in 0..spec.warmup {
        exec.execute()?.wait().map_err(ExecError::from)?;
    }
    let mut repeats = Vec::with_capacity(spec.repeats);
    let mut timing = RunTiming::default();
    for _ in 0..spec.repeats {
        let start = Instant::now();
        let mut reports = Vec::with_capacity(spec.iterations);
        for _ in 0..spec.iterations {
            reports.push(exec.execute()?);
        }
        if let Some(last) = reports.last() {
            last.wait().map_err(ExecError::from)?;
        }
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        for r in &reports {
            timing.extend(r.timing().map_err(ExecError::from)?);
        }
        let ips = spec.iterations as f64 / seconds;
        repeats.push(Repeat {
            seconds,
            iterations_per_sec: ips,
            tokens_per_sec: ips * spec.tokens_per_iteration() as f64,
        });
    }
    exec.destroy();
    Ok(BenchReport {
        device,
        workload: spec.workload(),
        config: config.to_string(),
        iterations: spec.iterations,
        repeats,
        kernels,
        breakdown: timing_breakdown(&timing),
    })
}
