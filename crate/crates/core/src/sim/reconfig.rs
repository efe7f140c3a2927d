//! Cost of switching the array from one plan to another.

use serde::{Deserialize, Serialize};

use super::{CostConfig, SimError};
use crate::plan::TilingPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReconfigMode {
    /// Shim descriptors and the two runtime parameters of every core.
    Minimal,
    /// Every core, memory core and switch box.
    Full,
}

impl std::str::FromStr for ReconfigMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "minimal" => Ok(ReconfigMode::Minimal),
            "full" => Ok(ReconfigMode::Full),
            _ => Err(format!("unknown reconfiguration mode {s:?}, expected minimal or full")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReconfigBreakdown {
    pub shim_descriptors: u64,
    pub parameter_writes: u64,
    pub compute_cores: u64,
    pub memory_cores: u64,
    pub switches: u64,
}

impl ReconfigBreakdown {
    pub fn total(&self) -> u64 {
        self.shim_descriptors + self.parameter_writes + self.compute_cores + self.memory_cores + self.switches
    }
}

/// Itemized cost of moving from `from` (`None`: nothing loaded) to `to`.
pub fn reconfigure_detail(
    from: Option<&TilingPlan>,
    to: &TilingPlan,
    mode: ReconfigMode,
    cost: &CostConfig,
) -> Result<ReconfigBreakdown, SimError> {
    let same_streams = match from {
        Some(f) => {
            if mode == ReconfigMode::Minimal && f.tile != to.tile {
                return Err(SimError::TileShapeMismatch { from: f.tile, to: to.tile });
            }
            f.shim_sequences == to.shim_sequences
        }
        None => false,
    };
    let columns = to.columns as u64;
    let cores = to.num_cores() as u64;
    let mut b = ReconfigBreakdown {
        shim_descriptors: if same_streams { 0 } else { columns * cost.shim_descriptor_cycles },
        parameter_writes: cores * 2 * cost.param_write_cycles,
        ..ReconfigBreakdown::default()
    };
    if mode == ReconfigMode::Full {
        b.shim_descriptors = columns * cost.shim_descriptor_cycles;
        b.compute_cores = cores * cost.core_config_cycles;
        b.memory_cores = columns * cost.memory_config_cycles;
        b.switches = cost.switches * cost.switch_config_cycles;
    }
    Ok(b)
}

/// Cycles added in front of the next run.
pub fn reconfigure(from: Option<&TilingPlan>, to: &TilingPlan, mode: ReconfigMode, cost: &CostConfig) -> Result<u64, SimError> {
    reconfigure_detail(from, to, mode, cost).map(|b| b.total())
}
