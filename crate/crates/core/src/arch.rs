//! Static model of the array: 4 shim cores, 4 memory cores and a 4x4 block of
//! compute cores, plus the fixed stream routes the GEMM design uses.
//!
//! Coordinates are `(x, y)` from the bottom left: `x` is the hardware column,
//! `y` the hardware row. Shims sit in row 0, memory cores in row 1, compute
//! cores in rows 2 and up.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First hardware row holding compute cores.
pub const FIRST_COMPUTE_ROW: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchError {
    #[error("grid geometry must be square and non-empty, got {columns} columns x {compute_rows} compute rows")]
    BadGeometry { columns: usize, compute_rows: usize },
    #[error("memory capacities must be positive")]
    ZeroCapacity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreKind {
    Shim,
    Memory,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoreId {
    pub x: usize,
    pub y: usize,
    pub kind: CoreKind,
}

impl CoreId {
    pub fn shim(x: usize) -> Self {
        CoreId { x, y: 0, kind: CoreKind::Shim }
    }

    pub fn memory(x: usize) -> Self {
        CoreId { x, y: 1, kind: CoreKind::Memory }
    }

    /// Compute core at hardware row `row` (>= 2) and column `col`.
    pub fn compute(row: usize, col: usize) -> Self {
        debug_assert!(row >= FIRST_COMPUTE_ROW);
        CoreId { x: col, y: row, kind: CoreKind::Compute }
    }

    pub fn row(&self) -> usize {
        self.y
    }

    pub fn col(&self) -> usize {
        self.x
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            CoreKind::Shim => "shim",
            CoreKind::Memory => "mem",
            CoreKind::Compute => "compute",
        };
        write!(f, "{k}({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
}

impl Default for MemorySpec {
    fn default() -> Self {
        MemorySpec {
            l1_bytes: 64 * 1024,
            l2_bytes: 512 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeSpec {
    /// bfloat16 FMAs retired per cycle by one core (one 4x8x4 VMAC).
    pub fma_per_cycle: u32,
    pub clock_hz: f64,
    pub vmac_latency_cycles: u32,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        ComputeSpec {
            fma_per_cycle: 4 * 8 * 4,
            clock_hz: 1e9,
            vmac_latency_cycles: 4,
        }
    }
}

impl ComputeSpec {
    pub fn peak_flops_per_core(&self) -> f64 {
        2.0 * self.fma_per_cycle as f64 * self.clock_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKind {
    A,
    B,
    C,
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamKind::A => "A",
            StreamKind::B => "B",
            StreamKind::C => "C",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub core: CoreId,
    pub channel: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub stream: StreamKind,
    pub from: Endpoint,
    pub to: Endpoint,
}

/// Logical stream links; switch boxes are not modelled individually.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteMap {
    pub edges: Vec<Route>,
}

impl RouteMap {
    pub fn from_core(&self, core: CoreId, stream: StreamKind) -> impl Iterator<Item = &Route> {
        self.edges
            .iter()
            .filter(move |e| e.from.core == core && e.stream == stream)
    }

    pub fn into_core(&self, core: CoreId, stream: StreamKind) -> impl Iterator<Item = &Route> {
        self.edges
            .iter()
            .filter(move |e| e.to.core == core && e.stream == stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub columns: usize,
    pub compute_rows: usize,
    pub memory: MemorySpec,
    pub compute: ComputeSpec,
    pub cores: Vec<CoreId>,
    pub routes: RouteMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakFlops {
    pub per_core: f64,
    pub aggregate: f64,
    pub cores: usize,
}

// Channel numbering on each core. Memory cores take one C input per
// compute row (`MEM_C_IN_BASE + row offset`).
const CH_A: u8 = 0;
const CH_B: u8 = 1;
const CH_C: u8 = 2;
const MEM_C_IN_BASE: u8 = 2;

/// Default 4x4 partition.
pub fn build_grid(spec: MemorySpec, cspec: ComputeSpec) -> Grid {
    Grid::with_geometry(4, spec, cspec).expect("default geometry is valid")
}

pub fn peak_flops(grid: &Grid) -> PeakFlops {
    let per_core = grid.compute.peak_flops_per_core();
    let cores = grid.compute_cores().count();
    PeakFlops {
        per_core,
        aggregate: per_core * cores as f64,
        cores,
    }
}

impl Default for Grid {
    fn default() -> Self {
        build_grid(MemorySpec::default(), ComputeSpec::default())
    }
}

impl Grid {
    /// A `size x size` compute block with one shim and one memory core per
    /// column. The routes of the GEMM design pair memory column `i` with
    /// compute row `i + 2`, so the block has to be square.
    pub fn with_geometry(size: usize, memory: MemorySpec, compute: ComputeSpec) -> Result<Grid, ArchError> {
        if size == 0 {
            return Err(ArchError::BadGeometry {
                columns: size,
                compute_rows: size,
            });
        }
        if memory.l1_bytes == 0 || memory.l2_bytes == 0 {
            return Err(ArchError::ZeroCapacity);
        }
        let mut cores = Vec::with_capacity(size * (size + 2));
        cores.extend((0..size).map(CoreId::shim));
        cores.extend((0..size).map(CoreId::memory));
        for row in FIRST_COMPUTE_ROW..FIRST_COMPUTE_ROW + size {
            for col in 0..size {
                cores.push(CoreId::compute(row, col));
            }
        }

        let ep = |core, channel| Endpoint { core, channel };
        let mut edges = Vec::new();
        for i in 0..size {
            let shim = CoreId::shim(i);
            let mem = CoreId::memory(i);
            edges.push(Route { stream: StreamKind::A, from: ep(shim, CH_A), to: ep(mem, CH_A) });
            edges.push(Route { stream: StreamKind::B, from: ep(shim, CH_B), to: ep(mem, CH_B) });
            for t in 0..size {
                edges.push(Route {
                    stream: StreamKind::A,
                    from: ep(mem, CH_A),
                    to: ep(CoreId::compute(FIRST_COMPUTE_ROW + i, t), CH_A),
                });
            }
            for t in 0..size {
                edges.push(Route {
                    stream: StreamKind::B,
                    from: ep(mem, CH_B),
                    to: ep(CoreId::compute(FIRST_COMPUTE_ROW + t, i), CH_B),
                });
            }
            for r in 0..size {
                edges.push(Route {
                    stream: StreamKind::C,
                    from: ep(CoreId::compute(FIRST_COMPUTE_ROW + r, i), CH_C),
                    to: ep(mem, MEM_C_IN_BASE + r as u8),
                });
            }
            edges.push(Route { stream: StreamKind::C, from: ep(mem, CH_C), to: ep(shim, CH_C) });
        }

        Ok(Grid {
            columns: size,
            compute_rows: size,
            memory,
            compute,
            cores,
            routes: RouteMap { edges },
        })
    }

    pub fn compute_cores(&self) -> impl Iterator<Item = CoreId> + '_ {
        self.cores.iter().copied().filter(|c| c.kind == CoreKind::Compute)
    }

    pub fn num_compute_cores(&self) -> usize {
        self.columns * self.compute_rows
    }

    /// Human-readable description: `key = value` lines followed by one
    /// `EDGE` line per stream link.
    pub fn dump(&self) -> String {
        let peak = peak_flops(self);
        let mut s = String::new();
        let _ = writeln!(s, "columns = {}", self.columns);
        let _ = writeln!(s, "compute_rows = {}", self.compute_rows);
        let _ = writeln!(s, "cores = {}", self.cores.len());
        let _ = writeln!(s, "compute_cores = {}", self.num_compute_cores());
        let _ = writeln!(s, "l1_bytes = {}", self.memory.l1_bytes);
        let _ = writeln!(s, "l2_bytes = {}", self.memory.l2_bytes);
        let _ = writeln!(s, "fma_per_cycle = {}", self.compute.fma_per_cycle);
        let _ = writeln!(s, "clock_hz = {}", self.compute.clock_hz);
        let _ = writeln!(s, "vmac_latency_cycles = {}", self.compute.vmac_latency_cycles);
        let _ = writeln!(s, "peak_flops_per_core = {}", peak.per_core);
        let _ = writeln!(s, "peak_flops_aggregate = {}", peak.aggregate);
        for e in &self.routes.edges {
            let _ = writeln!(
                s,
                "EDGE {} {}:{} -> {}:{}",
                e.stream, e.from.core, e.from.channel, e.to.core, e.to.channel
            );
        }
        s
    }
}
