//! Model and training configuration read from `key = value` text.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Gpt2Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl ModelConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, seq_len: usize) -> Result<Self, Gpt2Error> {
        let c = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size,
            seq_len,
        };
        c.validate()?;
        Ok(c)
    }

    /// 2 layers, width 64, 4 heads, 256 tokens, context 32.
    pub fn toy() -> Self {
        ModelConfig::new(2, 64, 4, 256, 32).expect("valid")
    }

    /// GPT-2 small with the vocabulary padded to 50304, at context 256.
    pub fn gpt2_124m() -> Self {
        ModelConfig::new(12, 768, 12, 50304, 256).expect("valid")
    }

    pub fn validate(&self) -> Result<(), Gpt2Error> {
        let all = [self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.seq_len];
        if all.contains(&0) {
            return Err(Gpt2Error::Config("all dimensions must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Gpt2Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff != 4 * self.d_model {
            return Err(Gpt2Error::Config(format!("d_ff must be 4 * d_model = {}", 4 * self.d_model)));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `V*C + T*C + L*(12*C^2 + 13*C) + 2*C`.
    pub fn param_count(&self) -> usize {
        let (c, l) = (self.d_model, self.n_layers);
        self.vocab_size * c + self.seq_len * c + l * (12 * c * c + 13 * c) + 2 * c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    AdamW,
}

impl FromStr for Optimizer {
    type Err = Gpt2Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adamw" => Ok(Optimizer::AdamW),
            other => Err(Gpt2Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub steps: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub weight_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            steps: 50,
            optimizer: Optimizer::Sgd,
            seed: 0,
            weight_decay: 0.0,
        }
    }
}

/// Both halves of a config file. Model keys missing from the file fall
/// back to the toy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Gpt2Error> {
        let mut m = ModelConfig::toy();
        let mut d_ff = None;
        let mut t = TrainConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Gpt2Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Gpt2Error::Config(format!("line {}: bad value `{value}` for `{key}`", no + 1));
            let int = || value.parse::<usize>().map_err(|_| bad());
            match key {
                "n_layers" => m.n_layers = int()?,
                "d_model" => m.d_model = int()?,
                "n_heads" => m.n_heads = int()?,
                "d_ff" => d_ff = Some(int()?),
                "vocab_size" => m.vocab_size = int()?,
                "seq_len" => m.seq_len = int()?,
                "learning_rate" => t.learning_rate = value.parse().map_err(|_| bad())?,
                "weight_decay" => t.weight_decay = value.parse().map_err(|_| bad())?,
                "steps" => t.steps = int()?,
                "seed" => t.seed = value.parse().map_err(|_| bad())?,
                "optimizer" => t.optimizer = value.parse()?,
                _ => return Err(Gpt2Error::Config(format!("line {}: unknown key `{key}`", no + 1))),
            }
        }
        m.d_ff = d_ff.unwrap_or(4 * m.d_model);
        m.validate()?;
        Ok(RunConfig { model: m, train: t })
    }

    pub fn load(path: &Path) -> Result<Self, Gpt2Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Gpt2Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}
