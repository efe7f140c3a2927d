//! Forward pass, backward pass and optimiser step. Every matrix product is
//! sent through an [`OffloadContext`]; everything else runs here in f32.

use std::collections::BTreeMap;

use super::ops::*;
use super::{Gpt2Error, Optimizer, ParamStore};
use crate::matrix::{LayoutTag, Matrix};
use crate::offload::{GemmRequest, OffloadContext, StageTimings};
use crate::plan::ProblemSize;

/// Bookkeeping over the GEMMs a model has issued.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GemmStats {
    pub calls: usize,
    /// Operands whose storage order did not match what the array expects.
    pub transposed_operands: usize,
    pub per_size: BTreeMap<ProblemSize, usize>,
    pub timings: StageTimings,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct LayerActs {
    pub ln1: Vec<f32>,
    pub ln1_mean: Vec<f32>,
    pub ln1_rstd: Vec<f32>,
    pub qkv: Vec<f32>,
    pub preatt: Vec<f32>,
    pub att: Vec<f32>,
    pub atty: Vec<f32>,
    pub residual2: Vec<f32>,
    pub ln2: Vec<f32>,
    pub ln2_mean: Vec<f32>,
    pub ln2_rstd: Vec<f32>,
    pub fch: Vec<f32>,
    pub fch_gelu: Vec<f32>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub tokens: Vec<usize>,
    /// Residual stream: entry 0 is the embedding sum, entry `l + 1` the
    /// output of layer `l`.
    pub residual: Vec<Vec<f32>>,
    pub layers: Vec<LayerActs>,
    pub lnf: Vec<f32>,
    pub lnf_mean: Vec<f32>,
    pub lnf_rstd: Vec<f32>,
    /// `T x V` row-major.
    pub logits: Matrix<f32>,
    pub probs: Vec<f32>,
}

impl Activations {
    pub fn loss(&self, targets: &[usize]) -> f32 {
        crossentropy_forward(&self.probs, targets, self.logits.cols())
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

pub struct Gpt2 {
    pub params: ParamStore,
    pub ctx: OffloadContext,
    pub stats: GemmStats,
    adam: Option<AdamState>,
}

fn row_major(rows: usize, cols: usize, data: Vec<f32>) -> Matrix<f32> {
    Matrix::new(rows, cols, LayoutTag::RowMajor, data).expect("shape")
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Gpt2 {
    pub fn new(params: ParamStore, ctx: OffloadContext) -> Self {
        Gpt2 {
            params,
            ctx,
            stats: GemmStats::default(),
            adam: None,
        }
    }

    pub fn config(&self) -> &super::ModelConfig {
        &self.params.config
    }

    fn gemm(&mut self, req: GemmRequest<'_>) -> Result<Matrix<f32>, Gpt2Error> {
        let row_major_op = |m: &Matrix<f32>, t: bool| (m.layout() == LayoutTag::RowMajor) != t;
        // the array wants row-major A and column-major B
        self.stats.transposed_operands += usize::from(!row_major_op(req.a, req.transpose_a)) + usize::from(row_major_op(req.b, req.transpose_b));
        let out = self.ctx.matmul(req)?;
        let (m, n) = (out.c.rows(), out.c.cols());
        let k = if req.transpose_a { req.a.rows() } else { req.a.cols() };
        let size = ProblemSize::new(m, k, n);
        self.stats.calls += 1;
        self.stats.flops += size.flops();
        *self.stats.per_size.entry(size).or_default() += 1;
        self.stats.timings.add(&out.timings);
        Ok(out.c)
    }

    /// `inp (T x C) * w (C x OC) + b`.
    fn linear(&mut self, inp: &[f32], t: usize, w: &Matrix<f32>, b: Option<&[f32]>) -> Result<Vec<f32>, Gpt2Error> {
        let x = row_major(t, w.rows(), inp.to_vec());
        let mut out = self.gemm(GemmRequest::new(&x, w))?.into_data();
        if let Some(b) = b {
            add_bias(&mut out, b);
        }
        Ok(out)
    }

    /// Accumulates `dinp += dout * w^T`, `dw += inp^T * dout` and the bias
    /// column sums.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn linear_backward(
        &mut self,
        dinp: &mut [f32],
        dw: &mut Matrix<f32>,
        db: Option<&mut [f32]>,
        dout: &[f32],
        inp: &[f32],
        w: &Matrix<f32>,
        t: usize,
    ) -> Result<(), Gpt2Error> {
        let (c, oc) = (w.rows(), w.cols());
        let d = row_major(t, oc, dout.to_vec());
        let x = row_major(t, c, inp.to_vec());
        let di = self.gemm(GemmRequest {
            a: &d,
            b: w,
            transpose_a: false,
            transpose_b: true,
        })?;
        add_into(dinp, di.data());
        // (dout^T inp) is OC x C row-major, the same bytes as C x OC column-major
        let gw = self.gemm(GemmRequest {
            a: &d,
            b: &x,
            transpose_a: true,
            transpose_b: false,
        })?;
        add_into(dw.data_mut(), gw.data());
        if let Some(db) = db {
            bias_backward(db, dout);
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), Gpt2Error> {
        let c = self.config();
        if tokens.len() != c.seq_len {
            return Err(Gpt2Error::SequenceLength {
                expected: c.seq_len,
                found: tokens.len(),
            });
        }
        if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= c.vocab_size) {
            return Err(Gpt2Error::TokenOutOfRange {
                position,
                token,
                vocab: c.vocab_size,
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, tokens: &[usize]) -> Result<Activations, Gpt2Error> {
        self.check_tokens(tokens)?;
        let cfg = *self.config();
        let (t, c, v, nh) = (cfg.seq_len, cfg.d_model, cfg.vocab_size, cfg.n_heads);
        let params = self.params.clone();

        let mut x = vec![0.0f32; t * c];
        for (i, &tok) in tokens.iter().enumerate() {
            let (e, p) = (&params.wte.data()[tok * c..][..c], &params.wpe.data()[i * c..][..c]);
            residual_forward(&mut x[i * c..(i + 1) * c], e, p);
        }
        let mut residual = vec![x];
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lp in &params.layers {
            let inp = residual.last().expect("non-empty");
            let (mut ln1, mut ln1_mean, mut ln1_rstd) = (vec![0.0; t * c], vec![0.0; t], vec![0.0; t]);
            layernorm_forward(&mut ln1, &mut ln1_mean, &mut ln1_rstd, inp, &lp.ln1w, &lp.ln1b, c);
            let qkv = self.linear(&ln1, t, &lp.qkvw, Some(&lp.qkvb))?;
            let (mut atty, mut preatt, mut att) = (vec![0.0; t * c], vec![0.0; nh * t * t], vec![0.0; nh * t * t]);
            attention_forward(&mut atty, &mut preatt, &mut att, &qkv, t, c, nh);
            let attproj = self.linear(&atty, t, &lp.attprojw, Some(&lp.attprojb))?;
            let mut residual2 = vec![0.0; t * c];
            residual_forward(&mut residual2, inp, &attproj);
            let (mut ln2, mut ln2_mean, mut ln2_rstd) = (vec![0.0; t * c], vec![0.0; t], vec![0.0; t]);
            layernorm_forward(&mut ln2, &mut ln2_mean, &mut ln2_rstd, &residual2, &lp.ln2w, &lp.ln2b, c);
            let fch = self.linear(&ln2, t, &lp.fcw, Some(&lp.fcb))?;
            let mut fch_gelu = vec![0.0; fch.len()];
            gelu_forward(&mut fch_gelu, &fch);
            let fcproj = self.linear(&fch_gelu, t, &lp.fcprojw, Some(&lp.fcprojb))?;
            let mut residual3 = vec![0.0; t * c];
            residual_forward(&mut residual3, &residual2, &fcproj);
            residual.push(residual3);
            layers.push(LayerActs {
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                preatt,
                att,
                atty,
                residual2,
                ln2,
                ln2_mean,
                ln2_rstd,
                fch,
                fch_gelu,
            });
        }
        let (mut lnf, mut lnf_mean, mut lnf_rstd) = (vec![0.0; t * c], vec![0.0; t], vec![0.0; t]);
        layernorm_forward(&mut lnf, &mut lnf_mean, &mut lnf_rstd, residual.last().expect("non-empty"), &params.lnfw, &params.lnfb, c);
        let logits = self.linear(&lnf, t, &params.wte, None)?;
        let mut probs = vec![0.0; t * v];
        softmax_forward(&mut probs, &logits, v);
        Ok(Activations {
            tokens: tokens.to_vec(),
            residual,
            layers,
            lnf,
            lnf_mean,
            lnf_rstd,
            logits: row_major(t, v, logits),
            probs,
        })
    }

    /// Gradients of the mean cross-entropy of `targets`.
    pub fn backward(&mut self, acts: &Activations, targets: &[usize]) -> Result<ParamStore, Gpt2Error> {
        self.check_tokens(targets)?;
        let cfg = *self.config();
        let (t, v) = (cfg.seq_len, cfg.vocab_size);
        let mut dlogits = vec![0.0; t * v];
        crossentropy_softmax_backward(&mut dlogits, &acts.probs, targets, v);
        self.backward_from(acts, &dlogits)
    }

    /// Backpropagate an arbitrary upstream gradient on the logits.
    pub fn backward_from(&mut self, acts: &Activations, dlogits: &[f32]) -> Result<ParamStore, Gpt2Error> {
        let cfg = *self.config();
        let (t, c, nh) = (cfg.seq_len, cfg.d_model, cfg.n_heads);
        let params = self.params.clone();
        let mut g = ParamStore::zeros(&cfg);

        let mut dlnf = vec![0.0; t * c];
        self.linear_backward(&mut dlnf, &mut g.wte, None, dlogits, &acts.lnf, &params.wte, t)?;
        let mut dres = vec![0.0; t * c];
        let last = acts.residual.last().expect("non-empty");
        layernorm_backward(&mut dres, &mut g.lnfw, &mut g.lnfb, &dlnf, last, &params.lnfw, &acts.lnf_mean, &acts.lnf_rstd, c);

        for l in (0..cfg.n_layers).rev() {
            let (lp, la, lg) = (&params.layers[l], &acts.layers[l], &mut g.layers[l]);
            let inp = &acts.residual[l];
            // residual3 = residual2 + fcproj, so both branches see dres
            let mut dfch_gelu = vec![0.0; t * cfg.d_ff];
            self.linear_backward(&mut dfch_gelu, &mut lg.fcprojw, Some(&mut lg.fcprojb), &dres, &la.fch_gelu, &lp.fcprojw, t)?;
            let mut dfch = vec![0.0; t * cfg.d_ff];
            gelu_backward(&mut dfch, &la.fch, &dfch_gelu);
            let mut dln2 = vec![0.0; t * c];
            self.linear_backward(&mut dln2, &mut lg.fcw, Some(&mut lg.fcb), &dfch, &la.ln2, &lp.fcw, t)?;
            let mut dres2 = dres.clone();
            layernorm_backward(&mut dres2, &mut lg.ln2w, &mut lg.ln2b, &dln2, &la.residual2, &lp.ln2w, &la.ln2_mean, &la.ln2_rstd, c);
            let mut datty = vec![0.0; t * c];
            self.linear_backward(&mut datty, &mut lg.attprojw, Some(&mut lg.attprojb), &dres2, &la.atty, &lp.attprojw, t)?;
            let mut dqkv = vec![0.0; t * 3 * c];
            attention_backward(&mut dqkv, &datty, &la.qkv, &la.att, t, c, nh);
            let mut dln1 = vec![0.0; t * c];
            self.linear_backward(&mut dln1, &mut lg.qkvw, Some(&mut lg.qkvb), &dqkv, &la.ln1, &lp.qkvw, t)?;
            let mut dinp = dres2;
            layernorm_backward(&mut dinp, &mut lg.ln1w, &mut lg.ln1b, &dln1, inp, &lp.ln1w, &la.ln1_mean, &la.ln1_rstd, c);
            dres = dinp;
        }
        for (i, &tok) in acts.tokens.iter().enumerate() {
            let d = &dres[i * c..(i + 1) * c];
            add_into(&mut g.wte.data_mut()[tok * c..][..c], d);
            add_into(&mut g.wpe.data_mut()[i * c..][..c], d);
        }
        Ok(g)
    }

    /// Plain SGD: `p -= lr * g`.
    pub fn sgd_update(&mut self, grads: &ParamStore, lr: f32) {
        for (p, g) in self.params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pi, gi) in p.iter_mut().zip(g.1) {
                *pi -= lr * gi;
            }
        }
    }

    /// AdamW with llm.c's constants.
    pub fn adamw_update(&mut self, grads: &ParamStore, lr: f32, weight_decay: f32) {
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let n = self.params.len();
        let st = self.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        st.t += 1;
        let (c1, c2) = (1.0 - b1.powi(st.t), 1.0 - b2.powi(st.t));
        let mut i = 0;
        for (p, g) in self.params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pi, &gi) in p.iter_mut().zip(g.1) {
                let m = b1 * st.m[i] + (1.0 - b1) * gi;
                let v = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                st.m[i] = m;
                st.v[i] = v;
                *pi -= lr * ((m / c1) / ((v / c2).sqrt() + eps) + weight_decay * *pi);
                i += 1;
            }
        }
    }

    /// Forward, backward and one optimiser step. Returns the loss before
    /// the update.
    pub fn train_step(&mut self, tokens: &[usize], targets: &[usize], lr: f32, optimizer: Optimizer, weight_decay: f32) -> Result<f32, Gpt2Error> {
        let acts = self.forward(tokens)?;
        let loss = acts.loss(targets);
        let grads = self.backward(&acts, targets)?;
        match optimizer {
            Optimizer::Sgd => self.sgd_update(&grads, lr),
            Optimizer::AdamW => self.adamw_update(&grads, lr, weight_decay),
        }
        Ok(loss)
    }
}
