mod common;

use std::sync::{mpsc, Arc};

use proptest::prelude::*;
use qkern::device::{init_device, init_device_on, AdapterProfile, DeviceError, DeviceOptions, Want};
use qkern::kernels::{Category, EwKind, Kernels};
use qkern::quant::{nmse, BlockFormat};
use qkern::runtime::*;
use qkern::tensor::TensorDesc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shared_kernels() -> Arc<Kernels> {
    Arc::new(common::kernels(false))
}

fn f32d(shape: &[usize]) -> TensorDesc {
    TensorDesc::contiguous(shape, BlockFormat::F32)
}

// Arena

/// Slot bookkeeping kept independently of `SlotRing`: which submission
/// last read each slot and which submissions have finished.
#[derive(Default)]
struct RingModel {
    owner: Vec<Option<Option<usize>>>,
    done: Vec<bool>,
    cursor: usize,
    pending: Vec<usize>,
}

impl RingModel {
    fn new(n: usize) -> Self {
        Self {
            owner: vec![None; n],
            ..Self::default()
        }
    }

    fn acquire(&mut self) -> Result<u32, ArenaError> {
        let s = self.cursor;
        match self.owner[s] {
            Some(None) => return Err(ArenaError::SlotPending(s as u32)),
            Some(Some(sub)) if !self.done[sub] => return Err(ArenaError::WouldBlock(s as u32)),
            _ => {}
        }
        self.owner[s] = Some(None);
        self.pending.push(s);
        self.cursor = (s + 1) % self.owner.len();
        Ok(s as u32)
    }

    fn submit(&mut self) -> usize {
        let id = self.done.len();
        self.done.push(false);
        for s in self.pending.drain(..) {
            self.owner[s] = Some(Some(id));
        }
        id
    }
}

#[test]
fn arena_matches_model_over_10k_random_writes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for slots in [1u32, 2, 3, 7, 16] {
        let mut ring: SlotRing<Flag> = SlotRing::new(slots);
        let mut model = RingModel::new(slots as usize);
        let mut flags: Vec<Flag> = Vec::new();
        let mut unfinished: Vec<usize> = Vec::new();
        let mut writes = 0;
        while writes < 10_000 {
            match rng.random_range(0..10) {
                0..=5 => {
                    let got = ring.acquire(false);
                    assert_eq!(got, model.acquire(), "slots={slots} write {writes}");
                    writes += 1;
                }
                6..=7 if ring.pending() > 0 => {
                    let flag = Flag::default();
                    ring.attach(&flag);
                    let id = model.submit();
                    flags.push(flag);
                    unfinished.push(id);
                }
                _ if !unfinished.is_empty() => {
                    let id = unfinished.swap_remove(rng.random_range(0..unfinished.len()));
                    flags[id].set();
                    model.done[id] = true;
                }
                _ => {}
            }
        }
    }
}

#[test]
fn arena_never_reuses_a_slot_before_its_reader_finishes() {
    let (tx, rx) = mpsc::channel::<Flag>();
    let completer = std::thread::spawn(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut held: Vec<Flag> = Vec::new();
        let mut closed = false;
        while !(closed && held.is_empty()) {
            match rx.try_recv() {
                Ok(f) => held.push(f),
                Err(mpsc::TryRecvError::Disconnected) => closed = true,
                Err(mpsc::TryRecvError::Empty) => {}
            }
            if !held.is_empty() && (closed || held.len() > 3 || rng.random_bool(0.3)) {
                held.swap_remove(rng.random_range(0..held.len())).set();
            }
            std::thread::yield_now();
        }
    });
    let mut ring: SlotRing<Flag> = SlotRing::new(8);
    let mut reader: Vec<Option<Flag>> = vec![None; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut batch = Vec::new();
    for _ in 0..10_000 {
        let slot = ring.acquire(true).unwrap() as usize;
        if let Some(prev) = &reader[slot] {
            assert!(prev.is_done(), "slot {slot} rewritten while in flight");
        }
        batch.push(slot);
        if batch.len() == 8 || rng.random_bool(0.3) {
            let flag = Flag::default();
            ring.attach(&flag);
            for s in batch.drain(..) {
                reader[s] = Some(flag.clone());
            }
            tx.send(flag).unwrap();
        }
    }
    let flag = Flag::default();
    ring.attach(&flag);
    tx.send(flag).unwrap();
    drop(tx);
    completer.join().unwrap();
}

#[test]
fn device_arena_holds_the_third_write_until_a_submission_completes() {
    let k = common::kernels(false);
    let device = k.device();
    let mut arena = ParamArena::new(device, 256, 2).unwrap();
    arena.set_blocking(false);
    let a = arena.write(device, &[1; 16]).unwrap();
    arena.write(device, &[2; 16]).unwrap();
    assert_eq!(arena.write(device, &[3; 16]), Err(ArenaError::SlotPending(0)));
    let fence = device.submit(vec![]).unwrap();
    arena.attach(&fence);
    fence.wait().unwrap();
    let c = arena.write(device, &[3; 16]).unwrap();
    assert_eq!((a.slot, c.slot, c.offset), (0, 0, 0));
    assert!(matches!(
        arena.write(device, &[0; 300]),
        Err(ArenaError::ParamsTooLarge { len: 300, .. })
    ));
}

// Planner

/// Tensors live at order position `p` under the plan, from first write to
/// last read, recomputed from the graph.
fn live_at(graph: &OpGraph, order: &[usize], p: usize) -> Vec<TensorId> {
    let mut first = vec![usize::MAX; graph.tensors().len()];
    let mut last = vec![0usize; graph.tensors().len()];
    for (pos, &n) in order.iter().enumerate() {
        let node = &graph.nodes()[n];
        let out = graph.root(node.output).0;
        first[out] = first[out].min(pos);
        last[out] = last[out].max(pos);
        for &i in &node.inputs {
            last[graph.root(i).0] = last[graph.root(i).0].max(pos);
        }
    }
    for &o in graph.outputs() {
        last[graph.root(o).0] = order.len() - 1;
    }
    (0..graph.tensors().len())
        .filter(|&t| graph.tensors()[t].kind == TensorKind::Intermediate && first[t] <= p && p <= last[t])
        .map(TensorId)
        .collect()
}

fn random_graph(seed: u64, nodes: usize) -> OpGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = OpGraph::new();
    let mut avail = vec![g.input("x", &[64], BlockFormat::F32)];
    for i in 0..nodes {
        let kind = if rng.random_bool(0.5) { EwKind::Add } else { EwKind::Scale };
        let mut inputs = vec![avail[rng.random_range(0..avail.len())]];
        if kind.binary() {
            inputs.push(avail[rng.random_range(0..avail.len())]);
        }
        let len = rng.random_range(1..3000);
        let t = g
            .node(&format!("n{i}"), NodeOp::Elementwise { kind, scale: 1.0 }, &inputs, f32d(&[len]))
            .unwrap();
        if rng.random_bool(0.15) {
            g.mark_output(t);
        }
        avail.push(t);
    }
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn planned_tensors_never_share_bytes_while_live(seed in any::<u64>(), nodes in 1usize..40) {
        let g = random_graph(seed, nodes);
        let plan = plan_memory(&g, &PlanLimits::default()).unwrap();
        prop_assert!(overlapping_pairs(&plan).is_empty());
        for p in &plan.placements {
            prop_assert_eq!(p.offset % 256, 0);
            prop_assert!(p.offset + p.size <= plan.total);
            prop_assert!(p.size >= g.tensors()[p.tensor.0].desc.byte_size() as u64);
        }
        for pos in 0..plan.order.len() {
            let mut ranges: Vec<(u64, u64)> = live_at(&g, &plan.order, pos)
                .iter()
                .map(|&t| {
                    let p = plan.placement(t).unwrap();
                    (p.offset, p.offset + g.tensors()[t.0].desc.byte_size() as u64)
                })
                .collect();
            ranges.sort_unstable();
            for w in ranges.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "position {}: {:?}", pos, ranges);
            }
        }
        prop_assert!(plan.total <= plan.unshared_total());
    }
}

#[test]
fn chain_reuses_memory_down_to_the_peak() {
    let mut g = OpGraph::new();
    let x = g.input("x", &[256], BlockFormat::F32);
    let scale = NodeOp::Elementwise {
        kind: EwKind::Scale,
        scale: 2.0,
    };
    let a = g.node("a", scale, &[x], f32d(&[256])).unwrap();
    let b = g.node("b", scale, &[a], f32d(&[64])).unwrap();
    let c = g.node("c", scale, &[b], f32d(&[256])).unwrap();
    g.mark_output(c);
    let plan = plan_memory(&g, &PlanLimits::default()).unwrap();
    assert_eq!(plan.unshared_total(), 2304);
    assert_eq!(plan.total, 1280);
    assert_eq!(plan.placement(c).unwrap().offset, plan.placement(a).unwrap().offset);
}

#[test]
fn single_node_plan_and_device_limit() {
    let (g, _, _) = OpGraph::chain(1, &[256]);
    let plan = plan_memory(&g, &PlanLimits::default()).unwrap();
    assert_eq!(plan.total, 1024);
    let tight = PlanLimits {
        max_buffer_size: 1000,
        alignment: 256,
    };
    assert_eq!(
        plan_memory(&g, &tight),
        Err(PlanError::ExceedsDeviceLimit { total: 1024, max: 1000 })
    );
}

// Execution

#[test]
fn five_node_chain_with_two_ops_per_pass_takes_three_passes() {
    let (g, x, out) = OpGraph::chain(5, &[64]);
    let mut exec = Executor::new(shared_kernels(), g, Batching::new(2, 16), ArenaConfig::default()).unwrap();
    exec.write_tensor(x, &[1.0; 64]).unwrap();
    let report = exec.execute().unwrap();
    assert_eq!((report.dispatches, report.passes, report.submissions), (5, 3, 1));
    assert_eq!(exec.read(out).unwrap(), vec![1.0 / 32.0; 64]);

    exec.set_batching(Batching::new(2, 1)).unwrap();
    let report = exec.execute().unwrap();
    assert_eq!((report.passes, report.submissions), (3, 3));
}

#[test]
fn empty_graph_submits_nothing() {
    let k = shared_kernels();
    let before = k.device().stats().submissions;
    let mut exec = Executor::new(k.clone(), OpGraph::new(), Batching::default(), ArenaConfig::default()).unwrap();
    let report = exec.execute().unwrap();
    assert_eq!((report.dispatches, report.passes, report.submissions), (0, 0, 0));
    assert_eq!(k.device().stats().submissions, before);
    assert_eq!(timing_breakdown(&report.timing().unwrap()).percent, [0.0; 5]);
}

#[test]
fn submissions_are_capped_by_the_arena() {
    let (g, x, _) = OpGraph::chain(10, &[64]);
    let arena = ArenaConfig {
        slot_bytes: 256,
        slot_count: 3,
    };
    let mut exec = Executor::new(shared_kernels(), g, Batching::new(64, 1), arena).unwrap();
    exec.write_tensor(x, &[1.0; 64]).unwrap();
    let report = exec.execute().unwrap();
    assert_eq!(report.submissions, 4);
    assert_eq!(report.passes, 4);
}

fn load_micro(exec: &mut Executor, reference: &mut Reference, block: &MicroBlock, seed: u64) {
    for (id, values) in block.random_inputs(seed) {
        exec.write_tensor(id, &values).unwrap();
        reference.write_tensor(id, &values).unwrap();
    }
}

fn step(exec: &mut Executor, reference: &mut Reference, block: &MicroBlock, pos: usize) {
    for (node, op) in block.ops_at(pos) {
        exec.set_op(node, op).unwrap();
        reference.set_op(node, op);
    }
    exec.write_u32(block.positions, &[pos as u32]).unwrap();
    reference.write_u32(block.positions, &[pos as u32]).unwrap();
    exec.execute().unwrap();
    reference.run().unwrap();
}

fn micro_matches_reference(shape: MicroShape) {
    let block = MicroBlock::build(shape).unwrap();
    let mut exec = Executor::new(shared_kernels(), block.graph.clone(), Batching::default(), ArenaConfig::default()).unwrap();
    let mut reference = Reference::new(block.graph.clone());
    load_micro(&mut exec, &mut reference, &block, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for pos in [0, 1, 37, shape.capacity - 1] {
        let x: Vec<f32> = (0..shape.d_model()).map(|_| rng.random_range(-1.0..1.0)).collect();
        exec.write_tensor(block.x, &x).unwrap();
        reference.write_tensor(block.x, &x).unwrap();
        step(&mut exec, &mut reference, &block, pos);
        let got = exec.read(block.out).unwrap();
        let want = reference.read(block.out).unwrap();
        let e = nmse(&want, &got).unwrap();
        assert!(e <= 1e-5, "{shape:?} pos {pos}: nmse {e:e}");
        for cache in [block.k_cache, block.v_cache] {
            let e = nmse(&reference.read(cache).unwrap(), &exec.read(cache).unwrap()).unwrap();
            assert!(e <= 1e-5, "cache after pos {pos}: nmse {e:e}");
        }
    }
}

#[test]
fn micro_block_with_q8_cache_matches_reference() {
    micro_matches_reference(MicroShape::default());
}

#[test]
fn micro_block_with_f16_cache_matches_reference() {
    micro_matches_reference(MicroShape {
        kv_format: BlockFormat::F16,
        weight_format: BlockFormat::Q4_K,
        splits: 1,
        ..MicroShape::default()
    });
}

#[test]
fn batching_does_not_change_results() {
    let block = MicroBlock::build(MicroShape::default()).unwrap();
    let mut outputs = Vec::new();
    for (ops, passes) in [(1, 1), (8, 4), (64, 1)] {
        let mut exec = Executor::new(
            shared_kernels(),
            block.graph.clone(),
            Batching::new(ops, passes),
            ArenaConfig::default(),
        )
        .unwrap();
        for (id, values) in block.random_inputs(9) {
            exec.write_tensor(id, &values).unwrap();
        }
        for (node, op) in block.ops_at(20) {
            exec.set_op(node, op).unwrap();
        }
        exec.write_u32(block.positions, &[20]).unwrap();
        exec.execute().unwrap();
        let mut bytes = exec.read_bytes(block.out).unwrap();
        bytes.extend(exec.read_bytes(block.k_cache).unwrap());
        outputs.push(bytes);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn steady_state_allocates_no_buffers() {
    let block = MicroBlock::build(MicroShape::default()).unwrap();
    let k = shared_kernels();
    let mut exec = Executor::new(k.clone(), block.graph.clone(), Batching::default(), ArenaConfig::default()).unwrap();
    for (id, values) in block.random_inputs(1) {
        exec.write_tensor(id, &values).unwrap();
    }
    exec.execute().unwrap().wait().unwrap();
    let before = k.device().stats();
    for pos in 0..100 {
        for (node, op) in block.ops_at(pos) {
            exec.set_op(node, op).unwrap();
        }
        exec.write_u32(block.positions, &[pos as u32]).unwrap();
        exec.execute().unwrap();
    }
    exec.read(block.out).unwrap();
    let after = k.device().stats();
    assert_eq!(after.buffers_created, before.buffers_created);
    assert_eq!(after.pipelines_created, before.pipelines_created);
    assert_eq!(after.oob_accesses, 0);
}

#[test]
fn readback_needs_retained_storage() {
    let (mut g, x, out) = OpGraph::chain(3, &[64]);
    g.mark_output(out);
    let middle = TensorId(out.0 - 1);
    let mut exec = Executor::new(shared_kernels(), g, Batching::default(), ArenaConfig::default()).unwrap();
    exec.write_tensor(x, &[2.0; 64]).unwrap();
    exec.execute().unwrap();
    assert_eq!(exec.read(out).unwrap(), vec![0.25; 64]);
    assert_eq!(exec.read(x).unwrap(), vec![2.0; 64]);
    assert!(matches!(exec.readback(middle), Err(ExecError::UnplannedTensor(_))));
    assert!(matches!(exec.readback(TensorId(99)), Err(ExecError::UnplannedTensor(_))));
    assert!(matches!(exec.write_tensor(middle, &[0.0; 64]), Err(ExecError::NotExternal(_))));
}

#[test]
fn set_op_keeps_the_op_kind() {
    let (g, _, _) = OpGraph::chain(1, &[64]);
    let mut exec = Executor::new(shared_kernels(), g, Batching::default(), ArenaConfig::default()).unwrap();
    assert!(matches!(exec.set_op(0, NodeOp::SoftmaxRow), Err(ExecError::OpKindChanged(0))));
    let add = NodeOp::Elementwise {
        kind: EwKind::Add,
        scale: 1.0,
    };
    assert!(matches!(exec.set_op(0, add), Err(ExecError::OpKindChanged(0))));
}

// Breakdown

#[test]
fn matvec_only_graph_is_all_matvec() {
    let mut g = OpGraph::new();
    let a = g.input("a", &[128, 256], BlockFormat::Q8_0);
    let x = g.input("x", &[256], BlockFormat::F32);
    let y = g.node("y", NodeOp::Matvec, &[a, x], f32d(&[128])).unwrap();
    g.mark_output(y);
    let mut exec = Executor::new(shared_kernels(), g, Batching::default(), ArenaConfig::default()).unwrap();
    let b = timing_breakdown(&exec.execute().unwrap().timing().unwrap());
    assert!(!b.coarse);
    assert!((b.share(Category::Matvec) - 100.0).abs() < 0.1, "{b:?}");
    assert!((b.percent.iter().sum::<f64>() - 100.0).abs() < 0.1);
}

#[test]
fn coarse_timing_without_timestamps_still_partitions() {
    let device = init_device_on(&[AdapterProfile::software_baseline()], &DeviceOptions::best_available()).unwrap();
    assert!(!device.caps().timestamps);
    let k = Arc::new(Kernels::new(Arc::new(device)));
    let block = MicroBlock::build(MicroShape::default()).unwrap();
    let mut exec = Executor::new(k, block.graph.clone(), Batching::new(4, 1), ArenaConfig::default()).unwrap();
    let b = timing_breakdown(&exec.execute().unwrap().timing().unwrap());
    assert!(b.coarse);
    assert!((b.percent.iter().sum::<f64>() - 100.0).abs() < 0.1);
}

fn attention_share(depth: usize) -> f64 {
    let shape = MicroShape {
        capacity: 2049,
        ..MicroShape::default()
    };
    let block = MicroBlock::build(shape).unwrap();
    let mut exec = Executor::new(shared_kernels(), block.graph.clone(), Batching::default(), ArenaConfig::default()).unwrap();
    for (id, values) in block.random_inputs(2) {
        exec.write_tensor(id, &values).unwrap();
    }
    for (node, op) in block.ops_at(depth) {
        exec.set_op(node, op).unwrap();
    }
    exec.write_u32(block.positions, &[depth as u32]).unwrap();
    let mut timing = RunTiming::default();
    for _ in 0..5 {
        timing.extend(exec.execute().unwrap().timing().unwrap());
    }
    let b = timing_breakdown(&timing);
    assert!((b.percent.iter().sum::<f64>() - 100.0).abs() < 0.1);
    b.share(Category::Attention)
}

#[test]
fn attention_share_grows_with_kv_depth() {
    let shares: Vec<f64> = [0, 512, 2048].map(attention_share).to_vec();
    assert!(shares[0] < shares[1] && shares[1] < shares[2], "{shares:?}");
}

// Device and config

#[test]
fn required_feature_missing_fails_device_creation() {
    let opts = DeviceOptions {
        f16: Want::Required,
        ..DeviceOptions::default()
    };
    let err = init_device_on(&[AdapterProfile::software_baseline()], &opts).unwrap_err();
    assert_eq!(err, DeviceError::FeatureUnavailable("shader-f16"));
    assert!(init_device(&opts).is_ok());
}
