//! Cost-model constants, read from a line-oriented `key = value` file.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConfig {
    pub l3_l2_bytes_per_cycle: u64,
    pub l2_l1_bytes_per_cycle: u64,
    pub dma_setup_cycles: u64,
    pub param_write_cycles: u64,
    pub shim_descriptor_cycles: u64,
    /// Full reconfiguration: program and configuration of one compute core.
    pub core_config_cycles: u64,
    pub memory_config_cycles: u64,
    pub switch_config_cycles: u64,
    pub switches: u64,
    pub preamble_cycles: u64,
    pub postamble_cycles: u64,
    /// L2 tile slots per input operand and memory core.
    pub l2_tiles_per_operand: u64,
    pub host_copy_bytes_per_cycle: u64,
    pub host_transpose_bytes_per_cycle: u64,
    pub input_sync_cycles: u64,
    pub output_sync_cycles: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            l3_l2_bytes_per_cycle: 32,
            l2_l1_bytes_per_cycle: 32,
            dma_setup_cycles: 50,
            param_write_cycles: 10,
            shim_descriptor_cycles: 500,
            core_config_cycles: 250,
            memory_config_cycles: 300,
            switch_config_cycles: 25,
            switches: 24,
            preamble_cycles: 8,
            postamble_cycles: 8,
            l2_tiles_per_operand: 8,
            host_copy_bytes_per_cycle: 16,
            host_transpose_bytes_per_cycle: 4,
            input_sync_cycles: 0,
            output_sync_cycles: 0,
        }
    }
}

macro_rules! fields {
    ($mac:ident) => {
        $mac!(
            l3_l2_bytes_per_cycle,
            l2_l1_bytes_per_cycle,
            dma_setup_cycles,
            param_write_cycles,
            shim_descriptor_cycles,
            core_config_cycles,
            memory_config_cycles,
            switch_config_cycles,
            switches,
            preamble_cycles,
            postamble_cycles,
            l2_tiles_per_operand,
            host_copy_bytes_per_cycle,
            host_transpose_bytes_per_cycle,
            input_sync_cycles,
            output_sync_cycles
        )
    };
}

impl CostConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut cfg = CostConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = key.trim();
            let value: u64 = value
                .trim()
                .parse()
                .map_err(|_| SimError::Config(format!("line {}: `{}` is not a non-negative integer", no + 1, value.trim())))?;
            macro_rules! set {
                ($($f:ident),*) => {
                    match key {
                        $(stringify!($f) => cfg.$f = value,)*
                        _ => return Err(SimError::Config(format!("line {}: unknown key `{key}`", no + 1))),
                    }
                };
            }
            fields!(set);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("l3_l2_bytes_per_cycle", self.l3_l2_bytes_per_cycle),
            ("l2_l1_bytes_per_cycle", self.l2_l1_bytes_per_cycle),
            ("host_copy_bytes_per_cycle", self.host_copy_bytes_per_cycle),
            ("host_transpose_bytes_per_cycle", self.host_transpose_bytes_per_cycle),
            ("l2_tiles_per_operand", self.l2_tiles_per_operand),
        ] {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! put {
            ($($f:ident),*) => {
                $(let _ = writeln!(s, "{} = {}", stringify!($f), self.$f);)*
            };
        }
        fields!(put);
        s
    }

    /// Cycles of one DMA transfer on a link of `bytes_per_cycle`.
    pub fn transfer_cycles(&self, bytes: u64, bytes_per_cycle: u64) -> u64 {
        self.dma_setup_cycles + bytes.div_ceil(bytes_per_cycle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = CostConfig {
            dma_setup_cycles: 7,
            switches: 3,
            ..CostConfig::default()
        };
        assert_eq!(CostConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = CostConfig::parse("# slow links\nl3_l2_bytes_per_cycle = 4  # narrow\n\n").unwrap();
        assert_eq!(c.l3_l2_bytes_per_cycle, 4);
        assert_eq!(c.l2_l1_bytes_per_cycle, 32);
    }

    #[test]
    fn parse_errors() {
        assert!(CostConfig::parse("bogus = 1").is_err());
        assert!(CostConfig::parse("dma_setup_cycles 1").is_err());
        assert!(CostConfig::parse("dma_setup_cycles = -1").is_err());
        assert!(CostConfig::parse("l2_l1_bytes_per_cycle = 0").is_err());
    }

    #[test]
    fn transfer_time() {
        let c = CostConfig::default();
        assert_eq!(c.transfer_cycles(8192, 32), 50 + 256);
        assert_eq!(c.transfer_cycles(33, 32), 52);
    }
}
