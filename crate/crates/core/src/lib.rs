//! Tiled GEMM offload onto a spatial NPU array: architecture model, tiling
//! planner, layout transformations, kernel emulation, a cycle-approximate
//! simulator, a host offload runtime and a GPT-2 workload driver.

pub mod arch;
pub mod bf16;
pub mod gpt2;
pub mod kernel;
pub mod layout;
pub mod matrix;
pub mod offload;
pub mod plan;
pub mod sim;

pub use arch::{build_grid, peak_flops, ComputeSpec, CoreId, CoreKind, Grid, MemorySpec, StreamKind};
pub use bf16::Bf16;
pub use layout::{AccessPattern, LayoutError, LayoutTransform, MicroOperand, PairResidue};
pub use matrix::{DType, Element, LayoutTag, Matrix, MatrixError, Order};
pub use sim::{CostConfig, ReconfigMode, SimError, SimReport};
pub use offload::{Backend, GemmRequest, OffloadContext, OffloadError, StageTimings};
pub use plan::{plan, PlanError, ProblemSize, TileShape, TilingPlan};
pub use gpt2::{count_flops, extract_gemm_sizes, FlopLedger, Gpt2, Gpt2Error, ModelConfig, ParamStore};
