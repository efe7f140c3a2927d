//! Analytic FLOP counts for one training step. Matrix products are exact
//! (`2*M*K*N`); element-wise operators use fixed per-element estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::plan::ProblemSize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopClass {
    Gemm,
    Attention,
    Elementwise,
    Update,
}

/// One operator of the graph. `forward`/`backward` are per instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub name: String,
    pub class: FlopClass,
    pub instances: u64,
    pub forward: u64,
    pub backward: u64,
}

impl FlopEntry {
    pub fn total(&self) -> u64 {
        self.instances * (self.forward + self.backward)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub config: ModelConfig,
    pub entries: Vec<FlopEntry>,
    pub forward: u64,
    pub backward: u64,
    pub update: u64,
    pub gemm: u64,
    pub attention: u64,
    pub elementwise: u64,
    /// Forward, backward and update of one step over one sequence.
    pub total: u64,
}

impl FlopLedger {
    pub fn entry(&self, name: &str) -> Option<&FlopEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14} {:>6} {:>16} {:>16}\n", "op", "count", "forward", "backward");
        for e in &self.entries {
            s += &format!("{:<14} {:>6} {:>16} {:>16}\n", e.name, e.instances, e.instances * e.forward, e.instances * e.backward);
        }
        s += &format!("gemm        {:>18}\n", self.gemm);
        s += &format!("attention   {:>18}\n", self.attention);
        s += &format!("elementwise {:>18}\n", self.elementwise);
        s += &format!("forward     {:>18}\n", self.forward);
        s += &format!("backward    {:>18}\n", self.backward);
        s += &format!("update      {:>18}\n", self.update);
        s += &format!("total       {:>18} ({:.1} GFLOP)\n", self.total, self.total as f64 / 1e9);
        s
    }
}

/// The four per-layer projections and the logits head as `(name, in, out)`.
fn projections(c: &ModelConfig) -> Vec<(&'static str, usize, usize, u64)> {
    let (d, l) = (c.d_model, c.n_layers as u64);
    vec![
        ("qkv", d, 3 * d, l),
        ("attproj", d, d, l),
        ("fc", d, c.d_ff, l),
        ("fcproj", c.d_ff, d, l),
        ("lm_head", d, c.vocab_size, 1),
    ]
}

/// Every GEMM of one step with its multiplicity: for each projection the
/// forward product, the input gradient and the weight gradient.
pub fn gemm_calls(c: &ModelConfig) -> Vec<(ProblemSize, u64)> {
    let t = c.seq_len;
    let mut order = Vec::new();
    let mut counts: BTreeMap<ProblemSize, u64> = BTreeMap::new();
    let mut push = |s: ProblemSize, n: u64| {
        let e = counts.entry(s).or_insert(0);
        if *e == 0 {
            order.push(s);
        }
        *e += n;
    };
    let proj = projections(c);
    for &(_, i, o, n) in &proj {
        push(ProblemSize::new(t, i, o), n);
    }
    for &(_, i, o, n) in &proj {
        push(ProblemSize::new(t, o, i), n);
    }
    for &(_, i, o, n) in &proj {
        push(ProblemSize::new(o, t, i), n);
    }
    order.into_iter().map(|s| (s, counts[&s])).collect()
}

/// Distinct GEMM sizes of one training step, in first-use order.
pub fn extract_gemm_sizes(c: &ModelConfig) -> Vec<ProblemSize> {
    gemm_calls(c).into_iter().map(|(s, _)| s).collect()
}

pub fn count_flops(c: &ModelConfig) -> FlopLedger {
    let (t, d, v, l) = (c.seq_len as u64, c.d_model as u64, c.vocab_size as u64, c.n_layers as u64);
    let (nh, ff) = (c.n_heads as u64, c.d_ff as u64);
    let td = t * d;
    let mut e = Vec::new();
    let mut add = |name: &str, class, instances, forward, backward| {
        e.push(FlopEntry {
            name: name.to_string(),
            class,
            instances,
            forward,
            backward,
        })
    };
    add("encoder", FlopClass::Elementwise, 1, td, 2 * td);
    add("layernorm", FlopClass::Elementwise, 2 * l + 1, 8 * td, 16 * td);
    for (name, i, o, n) in projections(c) {
        let f = 2 * t * i as u64 * o as u64;
        add(name, FlopClass::Gemm, n, f, 2 * f);
        if name != "lm_head" {
            add(&format!("{name}_bias"), FlopClass::Elementwise, n, t * o as u64, t * o as u64);
        }
    }
    // scores and weighted values over the full T x T square per head
    add("attention", FlopClass::Attention, l, 4 * t * t * d, 8 * t * t * d);
    add("att_softmax", FlopClass::Elementwise, l, 5 * nh * t * t, 4 * nh * t * t);
    add("gelu", FlopClass::Elementwise, l, 10 * t * ff, 20 * t * ff);
    add("residual", FlopClass::Elementwise, 2 * l, td, td);
    add("crossentropy", FlopClass::Elementwise, 1, 4 * t * v, 2 * t * v);
    let update = 2 * c.param_count() as u64;
    add("sgd_update", FlopClass::Update, 1, 0, update);

    let sum = |f: &dyn Fn(&FlopEntry) -> u64| e.iter().map(f).sum::<u64>();
    let of = |class: FlopClass| sum(&|x: &FlopEntry| if x.class == class { x.total() } else { 0 });
    let forward = sum(&|x| x.instances * x.forward);
    let backward = sum(&|x| if x.class == FlopClass::Update { 0 } else { x.instances * x.backward });
    FlopLedger {
        config: *c,
        gemm: of(FlopClass::Gemm),
        attention: of(FlopClass::Attention),
        elementwise: of(FlopClass::Elementwise),
        update,
        forward,
        backward,
        total: forward + backward + update,
        entries: e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_gpt2_step_is_near_197_gflop() {
        let l = count_flops(&ModelConfig::gpt2_124m());
        let g = l.total as f64 / 1e9;
        assert!((g - 197.0).abs() / 197.0 < 0.05, "{g}");
        assert_eq!(l.total, l.gemm + l.attention + l.elementwise + l.update);
        assert_eq!(l.total, l.entries.iter().map(|e| e.total()).sum::<u64>());
    }

    #[test]
    fn twelve_distinct_sizes() {
        let s = extract_gemm_sizes(&ModelConfig::gpt2_124m());
        assert_eq!(s.len(), 12);
        for want in [(256, 768, 2304), (256, 50304, 768), (50304, 256, 768), (256, 768, 50304)] {
            assert!(s.contains(&ProblemSize::new(want.0, want.1, want.2)), "{want:?}");
        }
    }

    #[test]
    fn gemm_subtotal_equals_call_list() {
        for c in [ModelConfig::gpt2_124m(), ModelConfig::toy()] {
            let l = count_flops(&c);
            let calls: u64 = gemm_calls(&c).iter().map(|(s, n)| s.flops() * n).sum();
            assert_eq!(calls, l.gemm);
        }
    }

    #[test]
    fn backward_gemm_is_twice_forward() {
        let l = count_flops(&ModelConfig::toy());
        for e in l.entries.iter().filter(|e| e.class == FlopClass::Gemm) {
            assert_eq!(e.backward, 2 * e.forward);
        }
    }

    #[test]
    fn doubling_context_at_least_doubles_gemm() {
        let c = ModelConfig::gpt2_124m();
        let c2 = ModelConfig { seq_len: 512, ..c };
        let (a, b) = (count_flops(&c), count_flops(&c2));
        assert!(b.gemm >= 2 * a.gemm);
        assert!(b.attention >= 4 * a.attention);
    }

    #[test]
    fn per_step_calls() {
        let c = ModelConfig::toy();
        let n: u64 = gemm_calls(&c).iter().map(|(_, n)| n).sum();
        assert_eq!(n, 3 * (4 * c.n_layers as u64 + 1));
    }
}
