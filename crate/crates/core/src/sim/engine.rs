use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use super::report::{CoreStats, EventKind, LinkBytes, SimEvent, SimReport};
use super::{crop_output, prepare_l3, CostConfig, SimError};
use crate::arch::{peak_flops, CoreId, Grid, StreamKind, FIRST_COMPUTE_ROW};
use crate::bf16::Bf16;
use crate::kernel::{accumulate_micro_tiled, schedule_kernel_with, ScheduleOptions};
use crate::layout::{
    micro_tile_pattern, micro_tile_residue, pair_fixup_in_place, tile_extract_pattern, AccessPattern, Dim, MicroOperand,
    PairResidue, GRANULE_BYTES,
};
use crate::matrix::Matrix;
use crate::plan::{Operand, TilingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub trace: bool,
    /// Delay before any engine starts, from a preceding reconfiguration.
    pub reconfig_cycles: u64,
}

const L1_SLOTS: usize = 2;
const JOIN_SLOTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    ShimIn(usize),
    Dist(usize, u8),
    Compute(usize),
    Drain(usize),
    ShimOut(usize),
}

impl Ev {
    /// Ordinal of the acting core for deterministic tie-breaking.
    fn core_key(&self, columns: usize) -> usize {
        match *self {
            Ev::ShimIn(i) | Ev::ShimOut(i) => i,
            Ev::Dist(i, _) => columns + i,
            Ev::Compute(c) | Ev::Drain(c) => 2 * columns + c,
        }
    }
}

type Tile = Arc<Vec<Bf16>>;

#[derive(Default)]
struct Shim {
    a_next: usize,
    b_next: usize,
    busy: Option<(Operand, Tile)>,
    last_was_a: bool,
    writing: Option<usize>,
}

struct JoinSlot {
    block: usize,
    filled: usize,
    writing: bool,
    buf: Vec<f32>,
}

struct Mem {
    queue: [VecDeque<Tile>; 2],
    reserved: [usize; 2],
    dist: [Option<Tile>; 2],
    join: Vec<JoinSlot>,
    blocks_written: usize,
}

impl Mem {
    fn occupancy(&self, op: usize) -> usize {
        self.queue[op].len() + self.reserved[op] + self.dist[op].is_some() as usize
    }
}

#[derive(Default)]
struct InSlots {
    full: VecDeque<Tile>,
    filling: usize,
    in_use: bool,
    received: usize,
    consumed: usize,
}

impl InSlots {
    fn free(&self) -> usize {
        L1_SLOTS - self.full.len() - self.filling - self.in_use as usize
    }
}

struct Core {
    id: CoreId,
    row: usize,
    col: usize,
    input: [InSlots; 2],
    busy: bool,
    kb: usize,
    out_idx: usize,
    active: Option<Vec<f32>>,
    ready: VecDeque<(usize, Vec<f32>)>,
    draining: Option<(usize, Vec<f32>)>,
    stats: CoreStats,
}

impl Core {
    fn c_free(&self) -> usize {
        L1_SLOTS - self.active.is_some() as usize - self.ready.len() - self.draining.is_some() as usize
    }
}

struct Sim<'a> {
    plan: &'a TilingPlan,
    cost: &'a CostConfig,
    l3_a: Vec<Bf16>,
    l3_b: Vec<Bf16>,
    l3_c: Vec<f32>,
    shims: Vec<Shim>,
    mems: Vec<Mem>,
    cores: Vec<Core>,
    heap: BinaryHeap<Reverse<(u64, usize, Ev, u64)>>,
    seq: u64,
    now: u64,
    trace: Option<Vec<SimEvent>>,
    bytes: LinkBytes,
    steady: u64,
    preamble: u64,
    postamble: u64,
    l2_cap: usize,
    micro: [AccessPattern; 2],
    residue_b: PairResidue,
    micro_c_inv: AccessPattern,
    blocks_per_mem: usize,
    first_compute: Option<u64>,
    last_compute: u64,
}

fn op_index(op: Operand) -> usize {
    match op {
        Operand::A => 0,
        Operand::B => 1,
    }
}

fn stream_of(op: usize) -> StreamKind {
    if op == 0 {
        StreamKind::A
    } else {
        StreamKind::B
    }
}

/// Execute `plan` on the array with the default options.
pub fn run(plan: &TilingPlan, grid: &Grid, a: &Matrix<Bf16>, b: &Matrix<Bf16>, cost: &CostConfig) -> Result<SimReport, SimError> {
    run_with(plan, grid, a, b, cost, &RunOptions::default())
}

pub fn run_with(
    plan: &TilingPlan,
    grid: &Grid,
    a: &Matrix<Bf16>,
    b: &Matrix<Bf16>,
    cost: &CostConfig,
    opts: &RunOptions,
) -> Result<SimReport, SimError> {
    cost.validate()?;
    if grid.columns != plan.columns || grid.compute_rows != plan.columns {
        return Err(SimError::ShapeMismatch(format!(
            "plan for {} columns on a {}x{} grid",
            plan.columns, grid.columns, grid.compute_rows
        )));
    }
    let t = plan.tile;
    let l2_cap = cost.l2_tiles_per_operand as usize;
    let needed = (l2_cap * (t.m * t.k + t.k * t.n) * 2 + JOIN_SLOTS * plan.columns * t.m * t.n * 4) as u64;
    if needed > grid.memory.l2_bytes as u64 {
        return Err(SimError::CapacityExceeded {
            needed,
            capacity: grid.memory.l2_bytes as u64,
        });
    }
    let sched = schedule_kernel_with(
        t,
        &grid.compute,
        ScheduleOptions {
            preamble_cycles: cost.preamble_cycles,
            postamble_cycles: cost.postamble_cycles,
            ..ScheduleOptions::default()
        },
    )?;
    let l3 = prepare_l3(plan, a, b)?;
    let p = plan.columns;
    let p_m = plan.problem;

    let cores = grid
        .compute_cores()
        .map(|id| Core {
            id,
            row: id.row(),
            col: id.col(),
            input: Default::default(),
            busy: false,
            kb: 0,
            out_idx: 0,
            active: None,
            ready: VecDeque::new(),
            draining: None,
            stats: CoreStats {
                core: id,
                busy_cycles: 0,
                utilization: 0.0,
                tile_pairs: 0,
                output_tiles: 0,
                bytes_in: 0,
                bytes_out: 0,
            },
        })
        .collect::<Vec<_>>();
    let mems = (0..p)
        .map(|_| Mem {
            queue: Default::default(),
            reserved: [0; 2],
            dist: [None, None],
            join: (0..JOIN_SLOTS)
                .map(|s| JoinSlot {
                    block: s,
                    filled: 0,
                    writing: false,
                    buf: vec![0f32; p * t.m * t.n],
                })
                .collect(),
            blocks_written: 0,
        })
        .collect();
    let mut sim = Sim {
        plan,
        cost,
        l3_a: l3.a,
        l3_b: l3.b,
        l3_c: vec![0f32; p_m.m * p_m.n],
        shims: (0..p).map(|_| Shim::default()).collect(),
        mems,
        cores,
        heap: BinaryHeap::new(),
        seq: 0,
        now: opts.reconfig_cycles,
        trace: opts.trace.then(Vec::new),
        bytes: LinkBytes::default(),
        steady: sched.steady_cycles,
        preamble: sched.preamble_cycles,
        postamble: sched.postamble_cycles,
        l2_cap,
        micro: [micro_tile_pattern(t, MicroOperand::A)?, micro_tile_pattern(t, MicroOperand::B)?],
        residue_b: micro_tile_residue(MicroOperand::B),
        micro_c_inv: micro_tile_pattern(t, MicroOperand::C)?.invert()?,
        blocks_per_mem: plan.out_tiles_per_core(),
        first_compute: None,
        last_compute: 0,
    };
    if opts.reconfig_cycles > 0 {
        for i in 0..p {
            sim.record(0, EventKind::Reconfig, CoreId::shim(i), None, None, None);
        }
    }
    sim.main_loop()?;

    let total = sim.now;
    let busy_sum: u64 = sim.cores.iter().map(|c| c.stats.busy_cycles).sum();
    let n_cores = sim.cores.len() as f64;
    let first = sim.first_compute.unwrap_or(total);
    let window = sim.last_compute.saturating_sub(first);
    let peak = peak_flops(grid);
    let cores = sim
        .cores
        .iter()
        .map(|c| CoreStats {
            utilization: if total == 0 { 0.0 } else { c.stats.busy_cycles as f64 / total as f64 },
            ..c.stats.clone()
        })
        .collect();
    let seconds = total as f64 / grid.compute.clock_hz;
    Ok(SimReport {
        problem: plan.original,
        padded: plan.problem,
        total_cycles: total,
        reconfig_cycles: opts.reconfig_cycles,
        first_compute_cycle: first,
        last_compute_cycle: sim.last_compute,
        cores,
        bytes: sim.bytes,
        aggregate_utilization: if total == 0 { 0.0 } else { busy_sum as f64 / (n_cores * total as f64) },
        steady_state_utilization: if window == 0 { 0.0 } else { busy_sum as f64 / (n_cores * window as f64) },
        effective_flops: if seconds > 0.0 { plan.original.flops() as f64 / seconds } else { 0.0 },
        peak_flops: peak.aggregate,
        output: crop_output(plan, std::mem::take(&mut sim.l3_c)),
        trace: sim.trace.take(),
    })
}

impl Sim<'_> {
    fn record(&mut self, time: u64, kind: EventKind, core: CoreId, stream: Option<StreamKind>, slot: Option<usize>, peer: Option<CoreId>) {
        if let Some(t) = self.trace.as_mut() {
            t.push(SimEvent {
                time,
                kind,
                core,
                stream,
                slot: slot.map(|s| s as u8),
                peer,
            });
        }
    }

    fn schedule(&mut self, delay: u64, ev: Ev) {
        let key = ev.core_key(self.plan.columns);
        self.heap.push(Reverse((self.now + delay, key, ev, self.seq)));
        self.seq += 1;
    }

    fn done(&self) -> bool {
        self.mems.iter().all(|m| m.blocks_written == self.blocks_per_mem)
    }

    fn main_loop(&mut self) -> Result<(), SimError> {
        self.kick()?;
        while let Some(Reverse((time, _, ev, _))) = self.heap.pop() {
            self.now = time;
            self.finish(ev)?;
            self.kick()?;
        }
        if !self.done() {
            return Err(SimError::Deadlock {
                time: self.now,
                detail: self.describe_stall(),
            });
        }
        Ok(())
    }

    fn describe_stall(&self) -> String {
        let written: Vec<usize> = self.mems.iter().map(|m| m.blocks_written).collect();
        let waiting: Vec<String> = self
            .cores
            .iter()
            .filter(|c| c.out_idx < self.blocks_per_mem)
            .map(|c| format!("{} at tile {} pair {}", c.id, c.out_idx, c.kb))
            .collect();
        format!(
            "blocks written {:?} of {}; cores waiting: {}",
            written,
            self.blocks_per_mem,
            waiting.join(", ")
        )
    }

    fn a_targets(&self, mem: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.plan.columns;
        (0..p).map(move |t| mem * p + t)
    }

    fn targets(&self, mem: usize, op: usize) -> Vec<usize> {
        let p = self.plan.columns;
        if op == 0 {
            self.a_targets(mem).collect()
        } else {
            (0..p).map(|t| t * p + mem).collect()
        }
    }

    fn kick(&mut self) -> Result<(), SimError> {
        let p = self.plan.columns;
        for i in 0..p {
            self.try_shim_in(i)?;
        }
        for i in 0..p {
            for op in 0..2 {
                self.try_distribute(i, op);
            }
        }
        for c in 0..self.cores.len() {
            self.try_compute(c)?;
        }
        for c in 0..self.cores.len() {
            self.try_drain(c);
        }
        for i in 0..p {
            self.try_shim_out(i);
        }
        Ok(())
    }

    fn try_shim_in(&mut self, i: usize) -> Result<(), SimError> {
        if self.shims[i].busy.is_some() {
            return Ok(());
        }
        let seq = &self.plan.shim_sequences[i];
        let a_ok = self.shims[i].a_next < seq.a.len() && self.mems[i].occupancy(0) < self.l2_cap;
        let b_ok = self.shims[i].b_next < seq.b.len() && self.mems[i].occupancy(1) < self.l2_cap;
        let pick_a = match (a_ok, b_ok) {
            (false, false) => return Ok(()),
            (true, false) => true,
            (false, true) => false,
            (true, true) => !self.shims[i].last_was_a,
        };
        let (t, pm) = (self.plan.tile, self.plan.problem);
        let (op, tile_ref) = if pick_a {
            let r = seq.a[self.shims[i].a_next];
            self.shims[i].a_next += 1;
            (Operand::A, r)
        } else {
            let r = seq.b[self.shims[i].b_next];
            self.shims[i].b_next += 1;
            (Operand::B, r)
        };
        let data = match op {
            Operand::A => tile_extract_pattern(pm.k, t.m, t.k, 2, tile_ref.row_blk, tile_ref.col_blk)?.gather(&self.l3_a)?,
            Operand::B => tile_extract_pattern(pm.k, t.n, t.k, 2, tile_ref.col_blk, tile_ref.row_blk)?.gather(&self.l3_b)?,
        };
        let bytes = (data.len() * 2) as u64;
        let oi = op_index(op);
        match op {
            Operand::A => self.bytes.l3_to_l2_a += bytes,
            Operand::B => self.bytes.l3_to_l2_b += bytes,
        }
        self.mems[i].reserved[oi] += 1;
        self.shims[i].busy = Some((op, Arc::new(data)));
        self.shims[i].last_was_a = pick_a;
        self.record(self.now, EventKind::DmaBegin, CoreId::memory(i), Some(stream_of(oi)), None, Some(CoreId::shim(i)));
        let d = self.cost.transfer_cycles(bytes, self.cost.l3_l2_bytes_per_cycle);
        self.schedule(d, Ev::ShimIn(i));
        Ok(())
    }

    fn try_distribute(&mut self, i: usize, op: usize) {
        if self.mems[i].dist[op].is_some() || self.mems[i].queue[op].is_empty() {
            return;
        }
        let targets = self.targets(i, op);
        if targets.iter().any(|&c| self.cores[c].input[op].free() == 0) {
            return;
        }
        let tile = self.mems[i].queue[op].pop_front().expect("non-empty");
        let l1 = Arc::new(self.micro[op].gather(&tile).expect("tile-sized pattern"));
        let bytes = (l1.len() * 2) as u64;
        for &c in &targets {
            let slot = self.cores[c].input[op].received % L1_SLOTS;
            self.cores[c].input[op].filling += 1;
            self.cores[c].input[op].received += 1;
            self.cores[c].stats.bytes_in += bytes;
            let id = self.cores[c].id;
            self.record(self.now, EventKind::LockAcquire, id, Some(stream_of(op)), Some(slot), None);
            self.record(self.now, EventKind::DmaBegin, id, Some(stream_of(op)), Some(slot), Some(CoreId::memory(i)));
        }
        if op == 0 {
            self.bytes.l2_to_l1_a += bytes * targets.len() as u64;
        } else {
            self.bytes.l2_to_l1_b += bytes * targets.len() as u64;
        }
        self.mems[i].dist[op] = Some(l1);
        let d = self.cost.transfer_cycles(bytes, self.cost.l2_l1_bytes_per_cycle);
        self.schedule(d, Ev::Dist(i, op as u8));
    }

    fn try_compute(&mut self, c: usize) -> Result<(), SimError> {
        let per_core = self.blocks_per_mem;
        let core = &self.cores[c];
        if core.busy || core.input[0].full.is_empty() || core.input[1].full.is_empty() {
            return Ok(());
        }
        if core.kb == 0 && (core.out_idx >= per_core || core.c_free() == 0) {
            return Ok(());
        }
        let t = self.plan.tile;
        let acc_depth = self.plan.acc_depth;
        let now = self.now;
        let core = &mut self.cores[c];
        let a = core.input[0].full.pop_front().expect("A ready");
        let b = core.input[1].full.pop_front().expect("B ready");
        let slots = [core.input[0].consumed % L1_SLOTS, core.input[1].consumed % L1_SLOTS];
        for s in &mut core.input {
            s.in_use = true;
            s.consumed += 1;
        }
        let first = core.kb == 0;
        if first {
            core.active = Some(vec![0f32; t.m * t.n]);
        }
        let last = core.kb + 1 == acc_depth;
        // VSHUFFLE completes the B layout inside the core
        let mut b_fixed = b.as_ref().clone();
        pair_fixup_in_place(&mut b_fixed, &self.residue_b);
        accumulate_micro_tiled(t, &a, &b_fixed, core.active.as_mut().expect("active C tile"))?;
        let d = self.steady + if first { self.preamble } else { 0 } + if last { self.postamble } else { 0 };
        core.busy = true;
        core.stats.busy_cycles += d;
        core.stats.tile_pairs += 1;
        let (id, c_slot) = (core.id, core.out_idx % L1_SLOTS);
        self.first_compute.get_or_insert(now);
        for (op, &slot) in slots.iter().enumerate() {
            self.record(now, EventKind::LockAcquire, id, Some(stream_of(op)), Some(slot), None);
        }
        if first {
            self.record(now, EventKind::LockAcquire, id, Some(StreamKind::C), Some(c_slot), None);
        }
        self.record(now, EventKind::ComputeBegin, id, None, None, None);
        self.schedule(d, Ev::Compute(c));
        Ok(())
    }

    fn try_drain(&mut self, c: usize) {
        let core = &self.cores[c];
        if core.draining.is_some() {
            return;
        }
        let Some(&(idx, _)) = core.ready.front() else {
            return;
        };
        let mem = &self.mems[core.col];
        let js = &mem.join[idx % JOIN_SLOTS];
        if js.block != idx || js.writing {
            return;
        }
        let (i, tile) = self.cores[c].ready.pop_front().expect("ready tile");
        let row_major = self.micro_c_inv.gather(&tile).expect("tile-sized pattern");
        let bytes = (row_major.len() * 4) as u64;
        self.bytes.l1_to_l2_c += bytes;
        let core = &mut self.cores[c];
        core.stats.bytes_out += bytes;
        core.draining = Some((i, row_major));
        let (id, col) = (core.id, core.col);
        self.record(self.now, EventKind::LockAcquire, id, Some(StreamKind::C), Some(i % L1_SLOTS), None);
        self.record(self.now, EventKind::DmaBegin, CoreId::memory(col), Some(StreamKind::C), None, Some(id));
        let d = self.cost.transfer_cycles(bytes, self.cost.l2_l1_bytes_per_cycle);
        self.schedule(d, Ev::Drain(c));
    }

    fn try_shim_out(&mut self, i: usize) {
        if self.shims[i].writing.is_some() {
            return;
        }
        let p = self.plan.columns;
        let ready = self.mems[i]
            .join
            .iter()
            .enumerate()
            .filter(|(_, s)| s.filled == p && !s.writing)
            .min_by_key(|(_, s)| s.block)
            .map(|(k, _)| k);
        let Some(slot) = ready else {
            return;
        };
        self.mems[i].join[slot].writing = true;
        self.shims[i].writing = Some(slot);
        let bytes = (self.mems[i].join[slot].buf.len() * 4) as u64;
        self.bytes.l2_to_l3_c += bytes;
        self.record(self.now, EventKind::DmaBegin, CoreId::shim(i), Some(StreamKind::C), Some(slot), Some(CoreId::memory(i)));
        let d = self.cost.transfer_cycles(bytes, self.cost.l3_l2_bytes_per_cycle);
        self.schedule(d, Ev::ShimOut(i));
    }

    /// Sub-tile `sub` of a joined `m x p*n` block, as a granule pattern.
    fn join_pattern(&self, sub: usize) -> AccessPattern {
        let t = self.plan.tile;
        let row = self.plan.columns * t.n * 4 / GRANULE_BYTES;
        AccessPattern::new(GRANULE_BYTES, vec![Dim::new(t.m, row), Dim::new(t.n, 1)], sub * t.n).expect("join pattern")
    }

    fn finish(&mut self, ev: Ev) -> Result<(), SimError> {
        let now = self.now;
        match ev {
            Ev::ShimIn(i) => {
                let (op, data) = self.shims[i].busy.take().expect("shim transfer in flight");
                let oi = op_index(op);
                self.mems[i].reserved[oi] -= 1;
                self.mems[i].queue[oi].push_back(data);
                self.record(now, EventKind::DmaEnd, CoreId::memory(i), Some(stream_of(oi)), None, Some(CoreId::shim(i)));
            }
            Ev::Dist(i, op) => {
                let op = op as usize;
                let data = self.mems[i].dist[op].take().expect("distribution in flight");
                for c in self.targets(i, op) {
                    let slot = (self.cores[c].input[op].received - self.cores[c].input[op].filling) % L1_SLOTS;
                    let s = &mut self.cores[c].input[op];
                    s.filling -= 1;
                    s.full.push_back(Arc::clone(&data));
                    let id = self.cores[c].id;
                    self.record(now, EventKind::DmaEnd, id, Some(stream_of(op)), Some(slot), Some(CoreId::memory(i)));
                    self.record(now, EventKind::LockRelease, id, Some(stream_of(op)), Some(slot), None);
                }
            }
            Ev::Compute(c) => {
                let acc_depth = self.plan.acc_depth;
                let core = &mut self.cores[c];
                core.busy = false;
                let slots = [(core.input[0].consumed - 1) % L1_SLOTS, (core.input[1].consumed - 1) % L1_SLOTS];
                for s in &mut core.input {
                    s.in_use = false;
                }
                core.kb += 1;
                let id = core.id;
                let mut finished = None;
                if core.kb == acc_depth {
                    core.kb = 0;
                    let tile = core.active.take().expect("active C tile");
                    core.ready.push_back((core.out_idx, tile));
                    finished = Some(core.out_idx % L1_SLOTS);
                    core.out_idx += 1;
                    core.stats.output_tiles += 1;
                }
                self.last_compute = self.last_compute.max(now);
                self.record(now, EventKind::ComputeEnd, id, None, None, None);
                for (op, &slot) in slots.iter().enumerate() {
                    self.record(now, EventKind::LockRelease, id, Some(stream_of(op)), Some(slot), None);
                }
                if let Some(slot) = finished {
                    self.record(now, EventKind::LockRelease, id, Some(StreamKind::C), Some(slot), None);
                }
            }
            Ev::Drain(c) => {
                let (idx, tile) = self.cores[c].draining.take().expect("drain in flight");
                let (row, col, id) = (self.cores[c].row - FIRST_COMPUTE_ROW, self.cores[c].col, self.cores[c].id);
                let pat = self.join_pattern(row);
                let js = &mut self.mems[col].join[idx % JOIN_SLOTS];
                debug_assert_eq!(js.block, idx);
                pat.scatter(&tile, &mut js.buf)?;
                js.filled += 1;
                self.record(now, EventKind::DmaEnd, CoreId::memory(col), Some(StreamKind::C), None, Some(id));
                self.record(now, EventKind::LockRelease, id, Some(StreamKind::C), Some(idx % L1_SLOTS), None);
            }
            Ev::ShimOut(i) => {
                let slot = self.shims[i].writing.take().expect("write-back in flight");
                let (t, pm, p) = (self.plan.tile, self.plan.problem, self.plan.columns);
                let block = self.mems[i].join[slot].block;
                for sub in 0..p {
                    let (ti, tj) = self.plan.join_map[i].c_tile(block, sub);
                    let part = self.join_pattern(sub).gather(&self.mems[i].join[slot].buf)?;
                    tile_extract_pattern(pm.n, t.m, t.n, 4, ti, tj)?.scatter(&part, &mut self.l3_c)?;
                }
                let js = &mut self.mems[i].join[slot];
                js.block += JOIN_SLOTS;
                js.filled = 0;
                js.writing = false;
                self.mems[i].blocks_written += 1;
                self.record(now, EventKind::DmaEnd, CoreId::shim(i), Some(StreamKind::C), Some(slot), Some(CoreId::memory(i)));
            }
        }
        Ok(())
    }
}
