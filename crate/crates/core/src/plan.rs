//! Static mapping of a GEMM onto the array.
//!
//! The mapping follows an accumulate-in-place recipe: every compute core
//! owns a fixed set of `m x n` output tiles of `C` and sums all `K/k` partial
//! products for one tile locally before streaming it out.
//!
//! With `p` columns (4 on the default grid), shim column `i` streams
//! tile-row `p*j + i` of `A` (all `K/k` tiles, repeated once per output
//! column group) and tile-column `p*j' + i` of `B`. Compute core at
//! hardware row `r + 2`, column `c` therefore produces the output tiles
//! `(p*j + r, p*j' + c)`, visited in row-major order of `(j, j')`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{CoreId, Grid, FIRST_COMPUTE_ROW};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("problem dimensions must be at least 1, got {0}")]
    ZeroDimension(ProblemSize),
    #[error("tile {tile} is not aligned to the 4x8 / 8x4 micro-tiles (m % 4, k % 8, n % 4 must be 0)")]
    MisalignedTile { tile: TileShape },
    #[error("tile {tile} needs {footprint} bytes of double-buffered L1, only {capacity} available")]
    TileTooLarge {
        tile: TileShape,
        footprint: usize,
        capacity: usize,
    },
    #[error("column {column} out of range for a {columns}-column array")]
    ColumnOutOfRange { column: usize, columns: usize },
    #[error("slot {slot} out of range for a {columns}-column array")]
    SlotOutOfRange { slot: usize, columns: usize },
    #[error("cannot parse {what} from {input:?}")]
    Parse { what: &'static str, input: String },
}

/// GEMM dimensions: `A` is `m x k`, `B` is `k x n`, `C` is `m x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProblemSize {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl ProblemSize {
    pub const fn new(m: usize, k: usize, n: usize) -> Self {
        ProblemSize { m, k, n }
    }

    pub fn flops(&self) -> u64 {
        2 * self.m as u64 * self.k as u64 * self.n as u64
    }
}

impl fmt::Display for ProblemSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

fn parse_triple(s: &str, what: &'static str) -> Result<(usize, usize, usize), PlanError> {
    let err = || PlanError::Parse { what, input: s.to_string() };
    let parts: Vec<_> = s.trim().split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let p = |i: usize| parts[i].trim().parse::<usize>().map_err(|_| err());
    Ok((p(0)?, p(1)?, p(2)?))
}

impl FromStr for ProblemSize {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, k, n) = parse_triple(s, "problem size")?;
        Ok(ProblemSize { m, k, n })
    }
}

/// Tile dimensions: `A` tiles are `m x k`, `B` tiles `k x n`, `C` tiles `m x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileShape {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl Default for TileShape {
    fn default() -> Self {
        TileShape { m: 64, k: 64, n: 32 }
    }
}

impl fmt::Display for TileShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

impl FromStr for TileShape {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, k, n) = parse_triple(s, "tile shape")?;
        Ok(TileShape { m, k, n })
    }
}

impl TileShape {
    pub const fn new(m: usize, k: usize, n: usize) -> Self {
        TileShape { m, k, n }
    }

    /// Bytes of L1 taken by double-buffered A, B (bf16) and C (f32) tiles.
    pub fn l1_footprint(&self) -> usize {
        2 * (self.m * self.k * 2 + self.k * self.n * 2 + self.m * self.n * 4)
    }

    pub fn is_aligned(&self) -> bool {
        self.m > 0 && self.k > 0 && self.n > 0 && self.m.is_multiple_of(4) && self.k.is_multiple_of(8) && self.n.is_multiple_of(4)
    }

    pub fn validate(&self, l1_bytes: usize) -> Result<(), PlanError> {
        if !self.is_aligned() {
            return Err(PlanError::MisalignedTile { tile: *self });
        }
        let footprint = self.l1_footprint();
        if footprint > l1_bytes {
            return Err(PlanError::TileTooLarge {
                tile: *self,
                footprint,
                capacity: l1_bytes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PaddingRecord {
    pub pad_m: usize,
    pub pad_k: usize,
    pub pad_n: usize,
}

impl PaddingRecord {
    pub fn is_zero(&self) -> bool {
        self.pad_m == 0 && self.pad_k == 0 && self.pad_n == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operand {
    A,
    B,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operand::A => "A",
            Operand::B => "B",
        })
    }
}

/// One input tile: block coordinates in units of the tile shape (`m x k` for
/// `A`, `k x n` for `B`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRef {
    pub matrix: Operand,
    pub row_blk: usize,
    pub col_blk: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimSequence {
    pub column: usize,
    pub a: Vec<TileRef>,
    pub b: Vec<TileRef>,
}

/// The two values rewritten in every compute core when the problem size
/// changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeParams {
    /// Tile pairs accumulated per output tile (`K/k`).
    pub acc_tiles: usize,
    /// Output tiles in `C` (`M*N/(m*n)`).
    pub out_tiles: usize,
}

/// Slot `t` of a memory core's L2 block feeds core `a_targets[t]` (for `A`)
/// and `b_targets[t]`. Every slot receives the full tile stream: a core needs
/// all `K/k` tiles of its tile-row to accumulate an output tile in place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributeMap {
    pub mem_column: usize,
    pub a_targets: Vec<CoreId>,
    pub b_targets: Vec<CoreId>,
}

impl DistributeMap {
    pub fn target(&self, operand: Operand, slot: usize) -> Result<CoreId, PlanError> {
        let v = match operand {
            Operand::A => &self.a_targets,
            Operand::B => &self.b_targets,
        };
        v.get(slot).copied().ok_or(PlanError::SlotOutOfRange {
            slot,
            columns: v.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinPlacement {
    pub core: CoreId,
    /// Position of the core's `m x n` tile inside the `m x p*n` joined block.
    pub sub_column: usize,
}

/// How memory column `mem_column` joins the output tiles of its compute
/// column and where each joined block lands in `C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinMap {
    pub mem_column: usize,
    pub columns: usize,
    /// Output column groups (`N/(p*n)`), needed to decode block indices.
    pub col_groups: usize,
    pub placements: Vec<JoinPlacement>,
}

impl JoinMap {
    pub fn sub_column_of(&self, core: CoreId) -> Option<usize> {
        self.placements.iter().find(|p| p.core == core).map(|p| p.sub_column)
    }

    /// C tile (row block, column block) receiving `sub_column` of joined block
    /// number `block` (blocks are produced in row-major `(j, j')` order).
    pub fn c_tile(&self, block: usize, sub_column: usize) -> (usize, usize) {
        let j = block / self.col_groups;
        let jp = block % self.col_groups;
        (self.columns * j + sub_column, self.columns * jp + self.mem_column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    /// Padded problem.
    pub problem: ProblemSize,
    pub original: ProblemSize,
    pub tile: TileShape,
    pub padding: PaddingRecord,
    /// Array width `p`; every quantum is a multiple of it.
    pub columns: usize,
    pub acc_depth: usize,
    pub out_tiles: usize,
    pub runtime_params: RuntimeParams,
    pub repeat_a: usize,
    pub repeat_b: usize,
    pub shim_sequences: Vec<ShimSequence>,
    pub distribute_map: Vec<DistributeMap>,
    pub join_map: Vec<JoinMap>,
}

fn round_up(x: usize, q: usize) -> usize {
    x.div_ceil(q) * q
}

pub fn plan(problem: ProblemSize, tile: TileShape, grid: &Grid) -> Result<TilingPlan, PlanError> {
    if problem.m == 0 || problem.k == 0 || problem.n == 0 {
        return Err(PlanError::ZeroDimension(problem));
    }
    tile.validate(grid.memory.l1_bytes)?;
    let p = grid.columns;

    let padded = ProblemSize {
        m: round_up(problem.m, p * tile.m),
        k: round_up(problem.k, tile.k),
        n: round_up(problem.n, p * tile.n),
    };
    let padding = PaddingRecord {
        pad_m: padded.m - problem.m,
        pad_k: padded.k - problem.k,
        pad_n: padded.n - problem.n,
    };

    let acc_depth = padded.k / tile.k;
    let row_groups = padded.m / (p * tile.m);
    let col_groups = padded.n / (p * tile.n);
    let out_tiles = (padded.m / tile.m) * (padded.n / tile.n);

    let shim_sequences = (0..p)
        .map(|i| {
            let mut a = Vec::with_capacity(row_groups * col_groups * acc_depth);
            for j in 0..row_groups {
                for _rep in 0..col_groups {
                    for kb in 0..acc_depth {
                        a.push(TileRef { matrix: Operand::A, row_blk: p * j + i, col_blk: kb });
                    }
                }
            }
            // B sweeps all of its tile-columns once per A tile-row so that
            // both streams reach the cores in the same output-tile order.
            let mut b = Vec::with_capacity(row_groups * col_groups * acc_depth);
            for _rep in 0..row_groups {
                for jp in 0..col_groups {
                    for kb in 0..acc_depth {
                        b.push(TileRef { matrix: Operand::B, row_blk: kb, col_blk: p * jp + i });
                    }
                }
            }
            ShimSequence { column: i, a, b }
        })
        .collect();

    let distribute_map = (0..p)
        .map(|i| DistributeMap {
            mem_column: i,
            a_targets: (0..p).map(|t| CoreId::compute(FIRST_COMPUTE_ROW + i, t)).collect(),
            b_targets: (0..p).map(|t| CoreId::compute(FIRST_COMPUTE_ROW + t, i)).collect(),
        })
        .collect();

    let join_map = (0..p)
        .map(|i| JoinMap {
            mem_column: i,
            columns: p,
            col_groups,
            placements: (0..p)
                .map(|r| JoinPlacement {
                    core: CoreId::compute(FIRST_COMPUTE_ROW + r, i),
                    sub_column: r,
                })
                .collect(),
        })
        .collect();

    Ok(TilingPlan {
        problem: padded,
        original: problem,
        tile,
        padding,
        columns: p,
        acc_depth,
        out_tiles,
        runtime_params: RuntimeParams {
            acc_tiles: acc_depth,
            out_tiles,
        },
        repeat_a: col_groups,
        repeat_b: row_groups,
        shim_sequences,
        distribute_map,
        join_map,
    })
}

impl TilingPlan {
    fn check_column(&self, column: usize) -> Result<(), PlanError> {
        if column >= self.columns {
            return Err(PlanError::ColumnOutOfRange {
                column,
                columns: self.columns,
            });
        }
        Ok(())
    }

    /// `A` transfers followed by `B` transfers of shim `column`, each in
    /// stream order.
    pub fn shim_stream_sequence(&self, column: usize) -> Result<Vec<TileRef>, PlanError> {
        self.check_column(column)?;
        let s = &self.shim_sequences[column];
        Ok(s.a.iter().chain(s.b.iter()).copied().collect())
    }

    pub fn shim_sequence(&self, column: usize) -> Result<&ShimSequence, PlanError> {
        self.check_column(column)?;
        Ok(&self.shim_sequences[column])
    }

    pub fn distribute(&self, mem_column: usize) -> Result<&DistributeMap, PlanError> {
        self.check_column(mem_column)?;
        Ok(&self.distribute_map[mem_column])
    }

    pub fn join(&self, mem_column: usize) -> Result<&JoinMap, PlanError> {
        self.check_column(mem_column)?;
        Ok(&self.join_map[mem_column])
    }

    pub fn row_groups(&self) -> usize {
        self.repeat_b
    }

    pub fn col_groups(&self) -> usize {
        self.repeat_a
    }

    pub fn num_cores(&self) -> usize {
        self.columns * self.columns
    }

    pub fn out_tiles_per_core(&self) -> usize {
        self.out_tiles / self.num_cores()
    }

    /// Output tiles produced by `core`, in production order.
    pub fn core_output_tiles(&self, core: CoreId) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = core.row() - FIRST_COMPUTE_ROW;
        let c = core.col();
        let p = self.columns;
        let cg = self.col_groups();
        (0..self.row_groups() * cg).map(move |b| (p * (b / cg) + r, p * (b % cg) + c))
    }

    /// Structured text summary used by the `plan` subcommand.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "original = {}", self.original);
        let _ = writeln!(s, "padded = {}", self.problem);
        let _ = writeln!(s, "tile = {}", self.tile);
        let _ = writeln!(s, "pad_m = {}", self.padding.pad_m);
        let _ = writeln!(s, "pad_k = {}", self.padding.pad_k);
        let _ = writeln!(s, "pad_n = {}", self.padding.pad_n);
        let _ = writeln!(s, "acc_depth = {}", self.acc_depth);
        let _ = writeln!(s, "out_tiles = {}", self.out_tiles);
        let _ = writeln!(s, "out_tiles_per_core = {}", self.out_tiles_per_core());
        let _ = writeln!(
            s,
            "runtime_params = {} {}",
            self.runtime_params.acc_tiles, self.runtime_params.out_tiles
        );
        let _ = writeln!(s, "repeat_a = {}", self.repeat_a);
        let _ = writeln!(s, "repeat_b = {}", self.repeat_b);
        let _ = writeln!(s, "l1_footprint_bytes = {}", self.tile.l1_footprint());
        for seq in &self.shim_sequences {
            for (name, list) in [("a", &seq.a), ("b", &seq.b)] {
                let first = list.first().expect("sequences are never empty");
                let last = list.last().expect("sequences are never empty");
                let _ = writeln!(s, "shim{}.{}.transfers = {}", seq.column, name, list.len());
                let _ = writeln!(s, "shim{}.{}.first = {} {}", seq.column, name, first.row_blk, first.col_blk);
                let _ = writeln!(s, "shim{}.{}.last = {} {}", seq.column, name, last.row_blk, last.col_blk);
            }
        }
        s
    }

    /// One `SHIM <col> <A|B> <rowblk> <colblk>` line per transfer.
    pub fn emit_schedule(&self) -> String {
        let mut s = String::new();
        for seq in &self.shim_sequences {
            for t in seq.a.iter().chain(seq.b.iter()) {
                let _ = writeln!(s, "SHIM {} {} {} {}", seq.column, t.matrix, t.row_blk, t.col_blk);
            }
        }
        s
    }
}
