//! Parameter tensors, named as in llm.c. Weight matrices are `in x out`
//! and column-major, so each output feature's weights are contiguous.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::matrix::{LayoutTag, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1w: Vec<f32>,
    pub ln1b: Vec<f32>,
    /// `C x 3C`
    pub qkvw: Matrix<f32>,
    pub qkvb: Vec<f32>,
    /// `C x C`
    pub attprojw: Matrix<f32>,
    pub attprojb: Vec<f32>,
    pub ln2w: Vec<f32>,
    pub ln2b: Vec<f32>,
    /// `C x 4C`
    pub fcw: Matrix<f32>,
    pub fcb: Vec<f32>,
    /// `4C x C`
    pub fcprojw: Matrix<f32>,
    pub fcprojb: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    /// Token embeddings, `C x V` column-major: column `v` is the embedding
    /// of token `v`, and the same matrix is the logits weight.
    pub wte: Matrix<f32>,
    /// Position embeddings, `T x C` row-major.
    pub wpe: Matrix<f32>,
    pub layers: Vec<LayerParams>,
    pub lnfw: Vec<f32>,
    pub lnfb: Vec<f32>,
}

fn weight(rows: usize, cols: usize) -> Matrix<f32> {
    Matrix::zeros(rows, cols, LayoutTag::ColMajor)
}

impl ParamStore {
    /// Every tensor zero, layer-norm gains included.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (c, v, t) = (config.d_model, config.vocab_size, config.seq_len);
        let layer = LayerParams {
            ln1w: vec![0.0; c],
            ln1b: vec![0.0; c],
            qkvw: weight(c, 3 * c),
            qkvb: vec![0.0; 3 * c],
            attprojw: weight(c, c),
            attprojb: vec![0.0; c],
            ln2w: vec![0.0; c],
            ln2b: vec![0.0; c],
            fcw: weight(c, config.d_ff),
            fcb: vec![0.0; config.d_ff],
            fcprojw: weight(config.d_ff, c),
            fcprojb: vec![0.0; c],
        };
        ParamStore {
            config: *config,
            wte: weight(c, v),
            wpe: Matrix::zeros(t, c, LayoutTag::RowMajor),
            layers: vec![layer; config.n_layers],
            lnfw: vec![0.0; c],
            lnfb: vec![0.0; c],
        }
    }

    /// GPT-2 initialisation: weights `N(0, 0.02)`, position embeddings
    /// `N(0, 0.01)`, residual projections scaled by `1/sqrt(2L)`, layer-norm
    /// gains 1 and all biases 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let resid = std / (2.0 * config.n_layers as f32).sqrt();
        let mut fill = |x: &mut [f32], s: f32| {
            let d = Normal::new(0.0f32, s).expect("positive std");
            x.iter_mut().for_each(|v| *v = d.sample(&mut rng));
        };
        fill(p.wte.data_mut(), std);
        fill(p.wpe.data_mut(), 0.01);
        for l in &mut p.layers {
            l.ln1w.fill(1.0);
            l.ln2w.fill(1.0);
            fill(l.qkvw.data_mut(), std);
            fill(l.attprojw.data_mut(), resid);
            fill(l.fcw.data_mut(), std);
            fill(l.fcprojw.data_mut(), resid);
        }
        p.lnfw.fill(1.0);
        p
    }

    /// All tensors in a fixed order with their names.
    pub fn tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![("wte".into(), self.wte.data()), ("wpe".into(), self.wpe.data())];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("h{i}.ln1w"), &l.ln1w[..]),
                (format!("h{i}.ln1b"), &l.ln1b[..]),
                (format!("h{i}.qkvw"), l.qkvw.data()),
                (format!("h{i}.qkvb"), &l.qkvb[..]),
                (format!("h{i}.attprojw"), l.attprojw.data()),
                (format!("h{i}.attprojb"), &l.attprojb[..]),
                (format!("h{i}.ln2w"), &l.ln2w[..]),
                (format!("h{i}.ln2b"), &l.ln2b[..]),
                (format!("h{i}.fcw"), l.fcw.data()),
                (format!("h{i}.fcb"), &l.fcb[..]),
                (format!("h{i}.fcprojw"), l.fcprojw.data()),
                (format!("h{i}.fcprojb"), &l.fcprojb[..]),
            ]);
        }
        out.push(("lnfw".into(), &self.lnfw));
        out.push(("lnfb".into(), &self.lnfb));
        out
    }

    /// Mutable tensors in the same order as [`ParamStore::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.wte.data_mut(), self.wpe.data_mut()];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1w[..],
                &mut l.ln1b[..],
                l.qkvw.data_mut(),
                &mut l.qkvb[..],
                l.attprojw.data_mut(),
                &mut l.attprojb[..],
                &mut l.ln2w[..],
                &mut l.ln2b[..],
                l.fcw.data_mut(),
                &mut l.fcb[..],
                l.fcprojw.data_mut(),
                &mut l.fcprojb[..],
            ]);
        }
        out.push(&mut self.lnfw);
        out.push(&mut self.lnfb);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter `i` in the flattened order.
    pub fn get(&self, mut i: usize) -> f32 {
        for (_, t) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut i: usize, v: f32) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    /// Flattened copy of every parameter.
    pub fn flatten(&self) -> Vec<f32> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_layouts() {
        let c = ModelConfig::toy();
        let p = ParamStore::init(&c, 1);
        assert_eq!(p.len(), c.param_count());
        assert_eq!(p.layers[0].qkvw.layout(), LayoutTag::ColMajor);
        assert_eq!((p.layers[0].fcprojw.rows(), p.layers[0].fcprojw.cols()), (256, 64));
        assert_eq!(p.wpe.layout(), LayoutTag::RowMajor);
        assert_eq!(p.lnfw, vec![1.0; 64]);
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::toy();
        assert_eq!(ParamStore::init(&c, 3), ParamStore::init(&c, 3));
        assert_ne!(ParamStore::init(&c, 3).wte, ParamStore::init(&c, 4).wte);
    }

    #[test]
    fn init_std_is_close() {
        let c = ModelConfig::toy();
        let p = ParamStore::init(&c, 0);
        let w = p.wte.data();
        let var = w.iter().map(|x| (x * x) as f64).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.001, "{}", var.sqrt());
    }

    #[test]
    fn flat_indexing_round_trips() {
        let c = ModelConfig::toy();
        let mut p = ParamStore::init(&c, 0);
        let n = p.len();
        for i in [0, 1, 16384, 20000, n - 1] {
            p.set(i, 7.5);
            assert_eq!(p.get(i), 7.5);
        }
        assert_eq!(p.flatten().len(), n);
    }
}
