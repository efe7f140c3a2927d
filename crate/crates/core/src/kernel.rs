//! Compute-core kernel: bfloat16 inputs, float32 accumulation, and the
//! static issue schedule of the four-accumulator inner loop.
//!
//! Accumulation order is fixed: input-tile pairs outermost, then the `k/8`
//! micro-tile steps, then the 8 products inside one VMAC, each added to the
//! running sum one at a time (no fused multiply-add). Per output element this
//! is a strictly sequential sum over `k`, so any GEMM that adds the same
//! products in ascending `k` order produces the same bits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ComputeSpec;
use crate::bf16::Bf16;
use crate::layout::MicroOperand;
use crate::matrix::{LayoutTag, Matrix};
use crate::plan::TileShape;

pub const MICRO_M: usize = 4;
pub const MICRO_K: usize = 8;
pub const MICRO_N: usize = 4;
/// Distinct accumulator registers used by the inner loop.
pub const ACCUMULATORS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tile {tile} has {micro_tiles} output micro-tiles, not a multiple of {needed} independent accumulators")]
    HazardUnavoidable {
        tile: TileShape,
        micro_tiles: usize,
        needed: usize,
    },
}

pub fn bf16_round(x: f32) -> Bf16 {
    Bf16::from_f32(x)
}

/// `acc + a * b` for a row-major `4 x 8` micro-tile `a`, a row-major `8 x 4`
/// micro-tile `b` and a row-major `4 x 4` accumulator.
#[inline]
pub fn micro_vmac(a: &[Bf16; 32], b: &[Bf16; 32], acc: [f32; 16]) -> [f32; 16] {
    let mut acc = acc;
    vmac_into(a, b, &mut acc);
    acc
}

fn vmac_into(a: &[Bf16], b: &[Bf16], acc: &mut [f32]) {
    let af: [f32; 32] = std::array::from_fn(|i| a[i].to_f32());
    let bf: [f32; 32] = std::array::from_fn(|i| b[i].to_f32());
    vmac_f32(&af, &bf, acc.try_into().expect("4x4 accumulator"));
}

/// VMAC on operands already widened to f32 (widening is exact).
#[inline(always)]
fn vmac_f32(a: &[f32; 32], b: &[f32; 32], acc: &mut [f32; 16]) {
    for i in 0..MICRO_M {
        for kk in 0..MICRO_K {
            let x = a[i * MICRO_K + kk];
            for j in 0..MICRO_N {
                acc[i * MICRO_N + j] += x * b[kk * MICRO_N + j];
            }
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), KernelError> {
    if got != want {
        return Err(KernelError::ShapeMismatch(format!("{what} has {got} elements, expected {want}")));
    }
    Ok(())
}

/// `c += a * b` on micro-tiled buffers: `a` is `m x k` in `4 x 8`
/// micro-tiles, `b` is `k x n` in `8 x 4` micro-tiles and `c` is `m x n` in
/// `4 x 4` micro-tiles, all row-of-micro-tiles.
pub fn accumulate_micro_tiled(tile: TileShape, a: &[Bf16], b: &[Bf16], c: &mut [f32]) -> Result<(), KernelError> {
    if !tile.is_aligned() {
        return Err(KernelError::ShapeMismatch(format!("tile {tile} is not micro-tile aligned")));
    }
    check_len("A tile", a.len(), tile.m * tile.k)?;
    check_len("B tile", b.len(), tile.k * tile.n)?;
    check_len("C tile", c.len(), tile.m * tile.n)?;
    let kb_count = tile.k / MICRO_K;
    let nb_count = tile.n / MICRO_N;
    let micro = MICRO_M * MICRO_N;
    let total = (tile.m / MICRO_M) * nb_count;
    let af: Vec<f32> = a.iter().map(|x| x.to_f32()).collect();
    let bf: Vec<f32> = b.iter().map(|x| x.to_f32()).collect();
    // groups of four output micro-tiles share the k sweep
    let mut t0 = 0;
    while t0 < total {
        let group = ACCUMULATORS.min(total - t0);
        for kb in 0..kb_count {
            for t in t0..t0 + group {
                let (ib, jb) = (t / nb_count, t % nb_count);
                let am: &[f32; 32] = af[(ib * kb_count + kb) * 32..][..32].try_into().unwrap();
                let bm: &[f32; 32] = bf[(kb * nb_count + jb) * 32..][..32].try_into().unwrap();
                let acc: &mut [f32; 16] = (&mut c[t * micro..t * micro + micro]).try_into().unwrap();
                vmac_f32(am, bm, acc);
            }
        }
        t0 += group;
    }
    Ok(())
}

/// Matrix form of [`accumulate_micro_tiled`], with layout checks.
pub fn tile_matmul_accumulate(a: &Matrix<Bf16>, b: &Matrix<Bf16>, c: &Matrix<f32>) -> Result<Matrix<f32>, KernelError> {
    if a.cols() != b.rows() || a.rows() != c.rows() || b.cols() != c.cols() {
        return Err(KernelError::ShapeMismatch(format!(
            "{}x{} * {}x{} into {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let tile = TileShape::new(a.rows(), a.cols(), b.cols());
    for (name, got, want) in [
        ("A", a.layout(), MicroOperand::A.micro_layout(tile)),
        ("B", b.layout(), MicroOperand::B.micro_layout(tile)),
        ("C", c.layout(), MicroOperand::C.micro_layout(tile)),
    ] {
        if got != want {
            return Err(KernelError::ShapeMismatch(format!("{name} is {got:?}, kernel expects {want:?}")));
        }
    }
    let mut out = c.clone();
    accumulate_micro_tiled(tile, a.data(), b.data(), out.data_mut())?;
    Ok(out)
}

/// Plain row-major `C = A * B` with the same per-element summation order as
/// the kernel. `a` is `m x k`, `b` is `k x n`.
pub fn sequential_gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut c = vec![0f32; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let x = a[i * k + kk];
            let br = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(br) {
                *cj += x * bj;
            }
        }
    }
    c
}

/// f64 brute-force product, for error measurement.
pub fn f64_gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f64> {
    let mut c = vec![0f64; m * n];
    for i in 0..m {
        for kk in 0..k {
            let x = a[i * k + kk] as f64;
            for j in 0..n {
                c[i * n + j] += x * b[kk * n + j] as f64;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Vmac,
    Vload,
    Vstore,
    Vshuffle,
    Nop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOp {
    pub kind: OpKind,
    /// Accumulator written (VMAC) or read (VSTORE).
    pub accumulator_id: Option<u8>,
    pub issue_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Accumulators rotated through; 1 gives the dependent-chain diagnostic.
    pub accumulators: usize,
    pub preamble_cycles: u64,
    pub postamble_cycles: u64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            accumulators: ACCUMULATORS,
            preamble_cycles: 8,
            postamble_cycles: 8,
        }
    }
}

impl ScheduleOptions {
    pub fn single_accumulator() -> Self {
        ScheduleOptions {
            accumulators: 1,
            ..Self::default()
        }
    }
}

/// Issue schedule of one tile pair. `ops` covers the steady-state loop only;
/// cycles are relative to its first VMAC.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSchedule {
    pub tile: TileShape,
    pub ops: Vec<MicroOp>,
    pub preamble_cycles: u64,
    pub steady_cycles: u64,
    pub postamble_cycles: u64,
}

impl KernelSchedule {
    pub fn vmac_count(&self) -> usize {
        self.count(OpKind::Vmac)
    }

    pub fn nop_count(&self) -> usize {
        self.count(OpKind::Nop)
    }

    fn count(&self, kind: OpKind) -> usize {
        self.ops.iter().filter(|o| o.kind == kind).count()
    }

    /// Fraction of steady-state cycles issuing a VMAC.
    pub fn utilization(&self) -> f64 {
        if self.steady_cycles == 0 {
            return 0.0;
        }
        self.vmac_count() as f64 / self.steady_cycles as f64
    }

    pub fn tile_pair_cycles(&self) -> u64 {
        self.preamble_cycles + self.steady_cycles + self.postamble_cycles
    }

    /// Cycles to finish one output tile accumulated over `acc_depth` pairs.
    pub fn output_tile_cycles(&self, acc_depth: usize) -> u64 {
        acc_depth as u64 * self.steady_cycles + self.preamble_cycles + self.postamble_cycles
    }

    /// Minimum NOP run between two VMACs writing the same accumulator.
    pub fn min_dependent_gap_nops(&self) -> Option<u64> {
        let mut last: [Option<u64>; 256] = [None; 256];
        let mut best: Option<u64> = None;
        for op in self.ops.iter().filter(|o| o.kind == OpKind::Vmac) {
            let a = op.accumulator_id.unwrap_or(0) as usize;
            if let Some(prev) = last[a] {
                let nops = self
                    .ops
                    .iter()
                    .filter(|o| o.kind == OpKind::Nop && o.issue_cycle > prev && o.issue_cycle < op.issue_cycle)
                    .count() as u64;
                best = Some(best.map_or(nops, |b| b.min(nops)));
            }
            last[a] = Some(op.issue_cycle);
        }
        best
    }

    /// First VMAC that issues too soon after the previous write to its
    /// accumulator, if any.
    pub fn hazard(&self, latency: u64) -> Option<MicroOp> {
        let mut last: [Option<u64>; 256] = [None; 256];
        let mut cycle_busy = None;
        for op in self.ops.iter().filter(|o| o.kind == OpKind::Vmac) {
            if cycle_busy == Some(op.issue_cycle) {
                return Some(*op);
            }
            cycle_busy = Some(op.issue_cycle);
            let a = op.accumulator_id.unwrap_or(0) as usize;
            if let Some(prev) = last[a] {
                if op.issue_cycle < prev + latency {
                    return Some(*op);
                }
            }
            last[a] = Some(op.issue_cycle);
        }
        None
    }
}

pub fn schedule_kernel(tile: TileShape, cspec: &ComputeSpec) -> Result<KernelSchedule, KernelError> {
    schedule_kernel_with(tile, cspec, ScheduleOptions::default())
}

/// List-schedule the VMAC stream: each VMAC issues as soon as the VMAC slot
/// is free and its accumulator's previous result has landed; idle VMAC-slot
/// cycles become NOPs. Loads and shuffles ride in their own slots.
pub fn schedule_kernel_with(tile: TileShape, cspec: &ComputeSpec, opts: ScheduleOptions) -> Result<KernelSchedule, KernelError> {
    if !tile.is_aligned() {
        return Err(KernelError::ShapeMismatch(format!("tile {tile} is not micro-tile aligned")));
    }
    let latency = cspec.vmac_latency_cycles.max(1) as u64;
    let micro_tiles = (tile.m / MICRO_M) * (tile.n / MICRO_N);
    let accs = opts.accumulators.clamp(1, ACCUMULATORS);
    if accs >= ACCUMULATORS && (!micro_tiles.is_multiple_of(accs) || (accs as u64) < latency) {
        return Err(KernelError::HazardUnavoidable {
            tile,
            micro_tiles,
            needed: latency.max(accs as u64) as usize,
        });
    }
    let kb_count = tile.k / MICRO_K;
    let mut ops = Vec::with_capacity(micro_tiles * kb_count * 3);
    let mut ready = [0u64; ACCUMULATORS];
    let mut cycle = 0u64;
    let mut t0 = 0;
    while t0 < micro_tiles {
        let group = accs.min(micro_tiles - t0);
        for kb in 0..kb_count {
            for g in 0..group {
                let acc = g as u8;
                let issue = cycle.max(ready[g]);
                for c in cycle..issue {
                    ops.push(MicroOp {
                        kind: OpKind::Nop,
                        accumulator_id: None,
                        issue_cycle: c,
                    });
                }
                ops.push(MicroOp {
                    kind: OpKind::Vmac,
                    accumulator_id: Some(acc),
                    issue_cycle: issue,
                });
                ops.push(MicroOp {
                    kind: OpKind::Vload,
                    accumulator_id: None,
                    issue_cycle: issue,
                });
                ops.push(MicroOp {
                    kind: OpKind::Vshuffle,
                    accumulator_id: None,
                    issue_cycle: issue,
                });
                if kb + 1 == kb_count {
                    ops.push(MicroOp {
                        kind: OpKind::Vstore,
                        accumulator_id: Some(acc),
                        issue_cycle: issue + latency,
                    });
                }
                ready[g] = issue + latency;
                cycle = issue + 1;
            }
        }
        t0 += group;
    }
    ops.sort_by_key(|o| o.issue_cycle);
    Ok(KernelSchedule {
        tile,
        ops,
        preamble_cycles: opts.preamble_cycles,
        steady_cycles: cycle,
        postamble_cycles: opts.postamble_cycles,
    })
}

/// Row-major `rows x cols` matrix retagged into the micro-tiled layout the
/// kernel expects, for tests and tools.
pub fn to_micro_layout<T: crate::matrix::Element>(m: &Matrix<T>, operand: MicroOperand, tile: TileShape) -> Matrix<T> {
    let layout = operand.micro_layout(tile);
    let src = m.to_row_major();
    let mut out = Matrix::zeros(m.rows(), m.cols(), layout);
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, src.get(r, c));
        }
    }
    out
}

/// Micro-tiled matrix back to row-major.
pub fn from_micro_layout<T: crate::matrix::Element>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows(), m.cols(), LayoutTag::RowMajor);
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(r, c, m.get(r, c));
        }
    }
    out
}
