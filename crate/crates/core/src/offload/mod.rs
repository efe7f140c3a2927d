//! Host-side GEMM offload: a per-size pool of plans and buffers, layout
//! fix-up on copy-in, and dispatch to the simulated array or a plain f32
//! reference.

pub mod io;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::Grid;
use crate::bf16::Bf16;
use crate::matrix::{Element, LayoutTag, Matrix};
use crate::plan::{plan, PlanError, ProblemSize, TileShape, TilingPlan};
use crate::sim::{self, reconfigure, CostConfig, ReconfigMode, RunOptions, SimError, SimReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OffloadError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("operand {operand} has layout {layout:?}; only row- and column-major host buffers are accepted")]
    UnsupportedLayout { operand: &'static str, layout: LayoutTag },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    ReferenceF32,
    EmulatedNpu,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::ReferenceF32 => "reference-f32",
            Backend::EmulatedNpu => "emulated-npu",
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference-f32" | "reference" => Ok(Backend::ReferenceF32),
            "emulated-npu" | "npu" => Ok(Backend::EmulatedNpu),
            _ => Err(format!("unknown backend {s:?}, expected reference-f32 or emulated-npu")),
        }
    }
}

/// Model-time cost of each host stage, in array clock cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub input_copy: u64,
    pub transpose: u64,
    pub input_sync: u64,
    pub reconfig: u64,
    pub kernel: u64,
    pub output_sync: u64,
    pub output_copy: u64,
}

impl StageTimings {
    pub fn total(&self) -> u64 {
        self.input_copy + self.transpose + self.input_sync + self.reconfig + self.kernel + self.output_sync + self.output_copy
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.input_copy += o.input_copy;
        self.transpose += o.transpose;
        self.input_sync += o.input_sync;
        self.reconfig += o.reconfig;
        self.kernel += o.kernel;
        self.output_sync += o.output_sync;
        self.output_copy += o.output_copy;
    }
}

/// Real elapsed seconds per stage; diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WallclockTimings {
    pub copy_in: f64,
    pub kernel: f64,
    pub copy_out: f64,
}

/// `C = op(a) * op(b)` where `op` transposes when the flag is set.
#[derive(Debug, Clone, Copy)]
pub struct GemmRequest<'a> {
    pub a: &'a Matrix<f32>,
    pub b: &'a Matrix<f32>,
    pub transpose_a: bool,
    pub transpose_b: bool,
}

impl<'a> GemmRequest<'a> {
    pub fn new(a: &'a Matrix<f32>, b: &'a Matrix<f32>) -> Self {
        GemmRequest {
            a,
            b,
            transpose_a: false,
            transpose_b: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GemmOutput {
    pub c: Matrix<f32>,
    /// Present for the simulated backend.
    pub report: Option<SimReport>,
    pub timings: StageTimings,
    pub wallclock: Option<WallclockTimings>,
}

struct Buffers {
    plan: TilingPlan,
    a: Matrix<Bf16>,
    b: Matrix<Bf16>,
}

pub struct OffloadContext {
    pub grid: Grid,
    pub cost: CostConfig,
    pub tile: TileShape,
    pub backend: Backend,
    pub mode: ReconfigMode,
    pub wallclock: bool,
    cache: BTreeMap<ProblemSize, Buffers>,
    last_plan: Option<ProblemSize>,
    plans_built: usize,
}

impl OffloadContext {
    /// Plan and allocate buffers for every listed size up front.
    pub fn init(sizes: &[ProblemSize], tile: TileShape, grid: Grid, cost: CostConfig, backend: Backend) -> Result<Self, OffloadError> {
        let mut ctx = OffloadContext {
            grid,
            cost,
            tile,
            backend,
            mode: ReconfigMode::Minimal,
            wallclock: false,
            cache: BTreeMap::new(),
            last_plan: None,
            plans_built: 0,
        };
        for &s in sizes {
            ctx.entry(s)?;
        }
        Ok(ctx)
    }

    pub fn cached_sizes(&self) -> Vec<ProblemSize> {
        self.cache.keys().copied().collect()
    }

    pub fn plans_built(&self) -> usize {
        self.plans_built
    }

    pub fn plan_for(&self, size: ProblemSize) -> Option<&TilingPlan> {
        self.cache.get(&size).map(|b| &b.plan)
    }

    /// Drop the buffers of one size, keeping the rest of the pool.
    pub fn evict(&mut self, size: ProblemSize) {
        self.cache.remove(&size);
    }

    fn entry(&mut self, size: ProblemSize) -> Result<&mut Buffers, OffloadError> {
        if !self.cache.contains_key(&size) {
            let p = plan(size, self.tile, &self.grid)?;
            let pm = p.problem;
            // the array backend holds padded bf16 inputs; the reference
            // backend needs no device buffers
            let (a, b) = match self.backend {
                Backend::EmulatedNpu => (
                    Matrix::zeros(pm.m, pm.k, LayoutTag::RowMajor),
                    Matrix::zeros(pm.k, pm.n, LayoutTag::ColMajor),
                ),
                Backend::ReferenceF32 => (Matrix::default(), Matrix::default()),
            };
            self.plans_built += 1;
            self.cache.insert(size, Buffers { plan: p, a, b });
        }
        Ok(self.cache.get_mut(&size).expect("just inserted"))
    }

    pub fn matmul(&mut self, req: GemmRequest<'_>) -> Result<GemmOutput, OffloadError> {
        let (a_rows, a_cols, a_layout) = effective(req.a, req.transpose_a, "A")?;
        let (b_rows, b_cols, b_layout) = effective(req.b, req.transpose_b, "B")?;
        if a_cols != b_rows {
            return Err(OffloadError::ShapeMismatch(format!(
                "op(A) is {a_rows}x{a_cols}, op(B) is {b_rows}x{b_cols}"
            )));
        }
        let size = ProblemSize::new(a_rows, a_cols, b_cols);
        let cost = self.cost;
        let mut t = StageTimings {
            input_sync: cost.input_sync_cycles,
            output_sync: cost.output_sync_cycles,
            ..StageTimings::default()
        };
        // bytes read from each host operand, by whether it needs a transpose
        let a_bytes = (req.a.len() * 4) as u64;
        let b_bytes = (req.b.len() * 4) as u64;
        for (bytes, layout, want) in [(a_bytes, a_layout, LayoutTag::RowMajor), (b_bytes, b_layout, LayoutTag::ColMajor)] {
            if layout == want {
                t.input_copy += bytes.div_ceil(cost.host_copy_bytes_per_cycle);
            } else {
                t.transpose += bytes.div_ceil(cost.host_transpose_bytes_per_cycle);
            }
        }
        t.output_copy = ((size.m * size.n * 4) as u64).div_ceil(cost.host_copy_bytes_per_cycle);

        let reconfig = if self.last_plan == Some(size) {
            0
        } else {
            let from = self.last_plan.and_then(|s| self.cache.get(&s)).map(|b| b.plan.clone());
            let to = self.entry(size)?.plan.clone();
            reconfigure(from.as_ref(), &to, self.mode, &cost)?
        };
        self.last_plan = Some(size);
        t.reconfig = reconfig;

        let backend = self.backend;
        let wallclock = self.wallclock;
        let grid = self.grid.clone();
        let t0 = Instant::now();
        match backend {
            Backend::ReferenceF32 => {
                self.entry(size)?;
                let a = oriented(req.a, req.transpose_a, LayoutTag::RowMajor);
                // the reference loop streams rows of B
                let b = oriented(req.b, req.transpose_b, LayoutTag::RowMajor);
                let t1 = Instant::now();
                let c = reference_gemm(&a, &b);
                let t2 = Instant::now();
                Ok(GemmOutput {
                    c,
                    report: None,
                    timings: t,
                    wallclock: wallclock.then(|| WallclockTimings {
                        copy_in: (t1 - t0).as_secs_f64(),
                        kernel: (t2 - t1).as_secs_f64(),
                        copy_out: 0.0,
                    }),
                })
            }
            Backend::EmulatedNpu => {
                let buf = self.entry(size)?;
                fill_padded(&mut buf.a, req.a, req.transpose_a, LayoutTag::RowMajor);
                fill_padded(&mut buf.b, req.b, req.transpose_b, LayoutTag::ColMajor);
                let t1 = Instant::now();
                let opts = RunOptions {
                    trace: false,
                    reconfig_cycles: 0,
                };
                let mut report = sim::run_with(&buf.plan, &grid, &buf.a, &buf.b, &cost, &opts)?;
                let t2 = Instant::now();
                report.reconfig_cycles = reconfig;
                t.kernel = report.total_cycles;
                report.total_cycles += reconfig;
                // already cropped to the unpadded size
                let c = std::mem::take(&mut report.output);
                let t3 = Instant::now();
                Ok(GemmOutput {
                    c,
                    report: Some(report),
                    timings: t,
                    wallclock: wallclock.then(|| WallclockTimings {
                        copy_in: (t1 - t0).as_secs_f64(),
                        kernel: (t2 - t1).as_secs_f64(),
                        copy_out: (t3 - t2).as_secs_f64(),
                    }),
                })
            }
        }
    }
}

/// Logical shape and storage order of `op(m)`.
fn effective(m: &Matrix<f32>, transpose: bool, operand: &'static str) -> Result<(usize, usize, LayoutTag), OffloadError> {
    let layout = match m.layout() {
        l @ (LayoutTag::RowMajor | LayoutTag::ColMajor) => l,
        layout => return Err(OffloadError::UnsupportedLayout { operand, layout }),
    };
    Ok(if transpose {
        let flipped = if layout == LayoutTag::RowMajor { LayoutTag::ColMajor } else { LayoutTag::RowMajor };
        (m.cols(), m.rows(), flipped)
    } else {
        (m.rows(), m.cols(), layout)
    })
}

/// `op(m)` stored in layout `want`, copying only when the order differs.
fn oriented(m: &Matrix<f32>, transpose: bool, want: LayoutTag) -> Matrix<f32> {
    let view = if transpose { m.clone().transposed_view().expect("plain layout") } else { m.clone() };
    if view.layout() == want {
        view
    } else {
        transpose_copy(&view)
    }
}

/// Write `op(src)` as bf16 into the top-left corner of the padded device
/// buffer `dst`, transposing on the fly when storage orders differ.
fn fill_padded(dst: &mut Matrix<Bf16>, src: &Matrix<f32>, transpose: bool, want: LayoutTag) {
    let (rows, cols) = if transpose { (src.cols(), src.rows()) } else { (src.rows(), src.cols()) };
    let (drows, dcols) = (dst.rows(), dst.cols());
    let layout = dst.layout();
    // view of op(src) in its own order
    let src_layout = match (src.layout(), transpose) {
        (l, false) => l,
        (LayoutTag::RowMajor, true) => LayoutTag::ColMajor,
        (_, true) => LayoutTag::RowMajor,
    };
    let data = src.data();
    let out = dst.data_mut();
    out.fill(Bf16::ZERO);
    // destination runs: rows for row-major, columns for column-major
    let (runs, run_len, dst_stride) = if want == LayoutTag::RowMajor { (rows, cols, dcols) } else { (cols, rows, drows) };
    debug_assert_eq!(layout, want);
    if src_layout == want {
        out.par_chunks_mut(dst_stride).take(runs).enumerate().for_each(|(r, row)| {
            for (d, &s) in row[..run_len].iter_mut().zip(&data[r * run_len..(r + 1) * run_len]) {
                *d = Bf16::from_f32(s);
            }
        });
    } else {
        // source runs are the other dimension
        out.par_chunks_mut(dst_stride).take(runs).enumerate().for_each(|(r, row)| {
            for (j, d) in row[..run_len].iter_mut().enumerate() {
                *d = Bf16::from_f32(data[j * runs + r]);
            }
        });
    }
}

/// Same logical matrix in the other storage order (column-major becomes
/// row-major and back). Parallel over output runs; bitwise equal to a
/// sequential copy since it only moves elements.
pub fn transpose_copy<T: Element>(src: &Matrix<T>) -> Matrix<T> {
    let (rows, cols) = (src.rows(), src.cols());
    let (to, runs, run_len) = match src.layout() {
        LayoutTag::ColMajor => (LayoutTag::RowMajor, rows, cols),
        LayoutTag::RowMajor => (LayoutTag::ColMajor, cols, rows),
        _ => return src.to_row_major(),
    };
    if rows == 1 || cols == 1 {
        return Matrix::new(rows, cols, to, src.data().to_vec()).expect("same size");
    }
    let data = src.data();
    let mut out = vec![T::default(); rows * cols];
    const BLOCK: usize = 64;
    out.par_chunks_mut(run_len * BLOCK).enumerate().for_each(|(bi, chunk)| {
        let r0 = bi * BLOCK;
        let nr = chunk.len() / run_len;
        for j0 in (0..run_len).step_by(BLOCK) {
            for j in j0..(j0 + BLOCK).min(run_len) {
                let src_run = &data[j * runs..];
                for r in 0..nr {
                    chunk[r * run_len + j] = src_run[r0 + r];
                }
            }
        }
    });
    Matrix::new(rows, cols, to, out).expect("same size")
}

/// f32 GEMM on row-major operands, each element summed in ascending `k`.
pub fn reference_gemm(a: &Matrix<f32>, b: &Matrix<f32>) -> Matrix<f32> {
    assert_eq!(a.layout(), LayoutTag::RowMajor);
    assert_eq!(b.layout(), LayoutTag::RowMajor);
    assert_eq!(a.cols(), b.rows());
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![0f32; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let x = ad[i * k + kk];
            for (cj, &bj) in row.iter_mut().zip(&bd[kk * n..(kk + 1) * n]) {
                *cj += x * bj;
            }
        }
    });
    Matrix::new(m, n, LayoutTag::RowMajor, c).expect("m x n")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub size: ProblemSize,
    pub mean: f64,
    pub max: f64,
    pub elements: usize,
}

/// Element-wise `|x - y| / |y|` against `reference`; `0/0` counts as 0.
pub fn divergence(size: ProblemSize, x: &[f32], reference: &[f32]) -> Divergence {
    assert_eq!(x.len(), reference.len());
    let mut sum = 0f64;
    let mut max = 0f64;
    for (&a, &y) in x.iter().zip(reference) {
        let d = (a as f64 - y as f64).abs();
        let rel = if d == 0.0 { 0.0 } else { d / (y as f64).abs() };
        sum += rel;
        max = max.max(rel);
    }
    Divergence {
        size,
        mean: if x.is_empty() { 0.0 } else { sum / x.len() as f64 },
        max,
        elements: x.len(),
    }
}

/// Seeded `U[0, 1)` operands for `size`: row-major `A`, column-major `B`.
pub fn random_operands(size: ProblemSize, seed: u64) -> (Matrix<f32>, Matrix<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f32> = (0..size.m * size.k).map(|_| rng.random::<f32>()).collect();
    let b: Vec<f32> = (0..size.k * size.n).map(|_| rng.random::<f32>()).collect();
    (
        Matrix::new(size.m, size.k, LayoutTag::RowMajor, a).expect("m x k"),
        Matrix::new(size.k, size.n, LayoutTag::ColMajor, b).expect("k x n"),
    )
}

/// Divergence of `backend` against the f32 reference for each size, with
/// inputs drawn from `seed + index`.
pub fn compare_oracle(sizes: &[ProblemSize], seed: u64, backend: Backend, tile: TileShape, cost: &CostConfig) -> Result<Vec<Divergence>, OffloadError> {
    let grid = Grid::default();
    let mut reference = OffloadContext::init(&[], tile, grid.clone(), *cost, Backend::ReferenceF32)?;
    let mut other = OffloadContext::init(&[], tile, grid, *cost, backend)?;
    let mut out = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let (a, b) = random_operands(size, seed.wrapping_add(i as u64));
        let req = GemmRequest::new(&a, &b);
        let want = reference.matmul(req)?.c;
        let got = other.matmul(req)?.c;
        out.push(divergence(size, got.data(), want.data()));
        other.evict(size);
        reference.evict(size);
    }
    Ok(out)
}
