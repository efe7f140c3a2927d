//! Event-driven execution of a tiling plan over the array.

mod cost;
mod engine;
pub mod functional;
mod reconfig;
mod report;

use thiserror::Error;

use crate::bf16::Bf16;
use crate::kernel::KernelError;
use crate::layout::LayoutError;
use crate::matrix::{LayoutTag, Matrix};
use crate::plan::{TileShape, TilingPlan};

pub use cost::CostConfig;
pub use engine::{run, run_with, RunOptions};
pub use reconfig::{reconfigure, reconfigure_detail, ReconfigBreakdown, ReconfigMode};
pub use report::{CoreStats, EventKind, LinkBytes, SimEvent, SimReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("deadlock at cycle {time}: {detail}")]
    Deadlock { time: u64, detail: String },
    #[error("L2 needs {needed} bytes per memory core, capacity is {capacity}")]
    CapacityExceeded { needed: u64, capacity: u64 },
    #[error("run was executed without tracing")]
    TracingDisabled,
    #[error("minimal reconfiguration needs the same tile shape, got {from} -> {to}")]
    TileShapeMismatch { from: TileShape, to: TileShape },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("operand {operand} is {found:?}, expected {expected:?}")]
    LayoutMismatch {
        operand: &'static str,
        expected: LayoutTag,
        found: LayoutTag,
    },
    #[error("cost config: {0}")]
    Config(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Ordered events of a traced run.
pub fn trace(report: &SimReport) -> Result<&[SimEvent], SimError> {
    report.trace.as_deref().ok_or(SimError::TracingDisabled)
}

/// Operands as they sit in L3: padded row-major `A` and padded column-major
/// `B`. Inputs may be given at the original or the padded size; padding is
/// zero-filled.
pub(crate) struct L3Inputs {
    pub a: Vec<Bf16>,
    pub b: Vec<Bf16>,
}

pub(crate) fn prepare_l3(plan: &TilingPlan, a: &Matrix<Bf16>, b: &Matrix<Bf16>) -> Result<L3Inputs, SimError> {
    if a.layout() != LayoutTag::RowMajor {
        return Err(SimError::LayoutMismatch {
            operand: "A",
            expected: LayoutTag::RowMajor,
            found: a.layout(),
        });
    }
    if b.layout() != LayoutTag::ColMajor {
        return Err(SimError::LayoutMismatch {
            operand: "B",
            expected: LayoutTag::ColMajor,
            found: b.layout(),
        });
    }
    let (o, p) = (plan.original, plan.problem);
    let fits = |r: usize, c: usize, r0: usize, c0: usize, r1: usize, c1: usize| (r == r0 && c == c0) || (r == r1 && c == c1);
    if !fits(a.rows(), a.cols(), o.m, o.k, p.m, p.k) || !fits(b.rows(), b.cols(), o.k, o.n, p.k, p.n) {
        return Err(SimError::ShapeMismatch(format!(
            "operands {}x{} and {}x{} do not match plan {}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            o
        )));
    }
    let a_data = if a.rows() == p.m && a.cols() == p.k {
        a.data().to_vec()
    } else {
        let mut v = vec![Bf16::ZERO; p.m * p.k];
        for r in 0..a.rows() {
            v[r * p.k..r * p.k + a.cols()].copy_from_slice(&a.data()[r * a.cols()..(r + 1) * a.cols()]);
        }
        v
    };
    // column-major: columns are contiguous runs of `rows`
    let b_data = if b.rows() == p.k && b.cols() == p.n {
        b.data().to_vec()
    } else {
        let mut v = vec![Bf16::ZERO; p.k * p.n];
        for c in 0..b.cols() {
            v[c * p.k..c * p.k + b.rows()].copy_from_slice(&b.data()[c * b.rows()..(c + 1) * b.rows()]);
        }
        v
    };
    Ok(L3Inputs { a: a_data, b: b_data })
}

/// Padded row-major `C` cropped to the original size.
pub(crate) fn crop_output(plan: &TilingPlan, c: Vec<f32>) -> Matrix<f32> {
    let (o, p) = (plan.original, plan.problem);
    let data = if o == p {
        c
    } else {
        let mut v = Vec::with_capacity(o.m * o.n);
        for r in 0..o.m {
            v.extend_from_slice(&c[r * p.n..r * p.n + o.n]);
        }
        v
    };
    Matrix::new(o.m, o.n, LayoutTag::RowMajor, data).expect("cropped size")
}
