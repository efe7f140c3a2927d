use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{CoreId, StreamKind};
use crate::matrix::Matrix;
use crate::plan::ProblemSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Reconfig,
    DmaBegin,
    DmaEnd,
    LockAcquire,
    LockRelease,
    ComputeBegin,
    ComputeEnd,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Reconfig => "reconfig",
            EventKind::DmaBegin => "dma_begin",
            EventKind::DmaEnd => "dma_end",
            EventKind::LockAcquire => "lock_acquire",
            EventKind::LockRelease => "lock_release",
            EventKind::ComputeBegin => "compute_begin",
            EventKind::ComputeEnd => "compute_end",
        }
    }

    pub fn is_dma(self) -> bool {
        matches!(self, EventKind::DmaBegin | EventKind::DmaEnd)
    }
}

/// One trace record. DMA events name the receiving core; `peer` is the
/// sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: u64,
    pub kind: EventKind,
    pub core: CoreId,
    pub stream: Option<StreamKind>,
    pub slot: Option<u8>,
    pub peer: Option<CoreId>,
}

impl fmt::Display for SimEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.time, self.kind.name(), self.core)?;
        if let Some(s) = self.stream {
            write!(f, " {s}")?;
        }
        if let Some(s) = self.slot {
            write!(f, " slot{s}")?;
        }
        if let Some(p) = self.peer {
            write!(f, " from {p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinkBytes {
    pub l3_to_l2_a: u64,
    pub l3_to_l2_b: u64,
    pub l2_to_l1_a: u64,
    pub l2_to_l1_b: u64,
    pub l1_to_l2_c: u64,
    pub l2_to_l3_c: u64,
}

impl LinkBytes {
    pub fn l3_to_l2(&self) -> u64 {
        self.l3_to_l2_a + self.l3_to_l2_b
    }

    pub fn l2_to_l1(&self) -> u64 {
        self.l2_to_l1_a + self.l2_to_l1_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreStats {
    pub core: CoreId,
    pub busy_cycles: u64,
    pub utilization: f64,
    pub tile_pairs: u64,
    pub output_tiles: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub problem: ProblemSize,
    pub padded: ProblemSize,
    pub total_cycles: u64,
    pub reconfig_cycles: u64,
    pub first_compute_cycle: u64,
    pub last_compute_cycle: u64,
    pub cores: Vec<CoreStats>,
    pub bytes: LinkBytes,
    /// Busy share of all cores over the whole run.
    pub aggregate_utilization: f64,
    /// Busy share between the first compute start and the last compute end.
    pub steady_state_utilization: f64,
    pub effective_flops: f64,
    pub peak_flops: f64,
    #[serde(skip)]
    pub output: Matrix<f32>,
    #[serde(skip)]
    pub trace: Option<Vec<SimEvent>>,
}

impl SimReport {
    pub fn trace_text(&self) -> Option<String> {
        self.trace.as_ref().map(|t| {
            let mut s = String::new();
            for e in t {
                s.push_str(&e.to_string());
                s.push('\n');
            }
            s
        })
    }
}
