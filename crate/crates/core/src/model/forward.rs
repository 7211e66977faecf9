// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, residual-stream trace, FFN decomposition and unembedding.

use super::{FfnKind, LayerWeights, Model, TransformerConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, matmul_nn, matmul_nt, RMS_EPS};
use crate::model::EditMask;

/// How much of the residual stream a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Record {
    /// Logits only.
    Logits,
    /// Per-layer `h_prev`, `attn_out`, `ffn_out`, `h_out`.
    Residual,
    /// Residual records plus every FFN coefficient.
    Coefficients,
}

/// Per-layer records, each a row-major `[seq, d_model]` matrix
/// (`coeffs` is `[seq, ffn_width]`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub h_prev: Vec<f32>,
    pub attn_out: Vec<f32>,
    pub ffn_out: Vec<f32>,
    pub h_out: Vec<f32>,
    pub coeffs: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    /// `[seq, vocab]`
    pub logits: Vec<f32>,
    pub layers: Vec<LayerTrace>,
    pub d_model: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn logits_at(&self, pos: usize) -> &[f32] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    /// Softmax of the logits at `pos`.
    pub fn probs_at(&self, pos: usize) -> Vec<f32> {
        let l: Vec<f64> = self.logits_at(pos).iter().map(|&v| v as f64).collect();
        let lse = linalg::log_sum_exp_f64(&l);
        l.iter().map(|v| (v - lse).exp() as f32).collect()
    }

    fn row(v: &[f32], pos: usize, width: usize) -> &[f32] {
        &v[pos * width..(pos + 1) * width]
    }

    pub fn h_prev(&self, layer: usize, pos: usize) -> &[f32] {
        Self::row(&self.layers[layer].h_prev, pos, self.d_model)
    }

    pub fn attn_out(&self, layer: usize, pos: usize) -> &[f32] {
        Self::row(&self.layers[layer].attn_out, pos, self.d_model)
    }

    pub fn ffn_out(&self, layer: usize, pos: usize) -> &[f32] {
        Self::row(&self.layers[layer].ffn_out, pos, self.d_model)
    }

    pub fn h_out(&self, layer: usize, pos: usize) -> &[f32] {
        Self::row(&self.layers[layer].h_out, pos, self.d_model)
    }

    pub fn coeffs(&self, layer: usize, pos: usize) -> Option<&[f32]> {
        self.layers[layer]
            .coeffs
            .as_deref()
            .map(|c| Self::row(c, pos, self.ffn_width))
    }

    pub fn has_coeffs(&self) -> bool {
        self.layers.first().is_some_and(|l| l.coeffs.is_some())
    }
}

// ---------------------------------------------------------------------------
// Shared kernels (also used by the training loop)
// ---------------------------------------------------------------------------

pub(crate) struct AttnCache {
    pub n1: Vec<f32>,
    pub inv1: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `[batch, heads, seq, seq]`, zero above the diagonal.
    pub probs: Vec<f32>,
    pub o: Vec<f32>,
}

/// Causal multi-head attention over `x[batch*seq, d]`; returns `A` and the
/// intermediates needed for backprop.
pub(crate) fn attention_forward(
    cfg: &TransformerConfig,
    w: &LayerWeights,
    x: &[f32],
    batch: usize,
    seq: usize,
) -> (Vec<f32>, AttnCache) {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let rows = batch * seq;
    let mut n1 = vec![0.0; rows * d];
    let inv1 = linalg::rms_norm_rows(x, &w.attn_norm, &mut n1);
    let mut q = vec![0.0; rows * d];
    let mut k = vec![0.0; rows * d];
    let mut v = vec![0.0; rows * d];
    matmul_nt(&n1, &w.wq, rows, d, d, &mut q, false);
    matmul_nt(&n1, &w.wk, rows, d, d, &mut k, false);
    matmul_nt(&n1, &w.wv, rows, d, d, &mut v, false);

    let scale = 1.0 / (hd as f32).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut o = vec![0.0; rows * d];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let qi = &q[(b * seq + i) * d + h * hd..][..hd];
                let row = &mut p[i * seq..(i + 1) * seq];
                for (j, s) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * seq + j) * d + h * hd..][..hd];
                    *s = linalg::dot(qi, kj) * scale;
                }
                linalg::softmax_in_place(&mut row[..=i]);
                let oi = &mut o[(b * seq + i) * d + h * hd..][..hd];
                for (j, &pij) in row.iter().enumerate().take(i + 1) {
                    let vj = &v[(b * seq + j) * d + h * hd..][..hd];
                    for (ov, vv) in oi.iter_mut().zip(vj) {
                        *ov += pij * vv;
                    }
                }
            }
        }
    }
    let mut a = vec![0.0; rows * d];
    matmul_nt(&o, &w.wo, rows, d, d, &mut a, false);
    (
        a,
        AttnCache {
            n1,
            inv1,
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

pub(crate) struct FfnCache {
    /// `fc1 · r`, `[rows, N]`
    pub z: Vec<f32>,
    /// `gate · r`, gated FFNs only
    pub g: Option<Vec<f32>>,
    /// coefficients after any intervention
    pub m: Vec<f32>,
}

/// FFN over `r[rows, d]`. `hook` sees the coefficient matrix `[rows, N]`
/// before it is multiplied into `fc2`.
pub(crate) fn ffn_forward(
    cfg: &TransformerConfig,
    w: &LayerWeights,
    r: &[f32],
    rows: usize,
    hook: &mut dyn FnMut(&mut [f32]),
) -> (Vec<f32>, FfnCache) {
    let d = cfg.d_model;
    let n = cfg.ffn_width;
    let mut z = vec![0.0; rows * n];
    matmul_nt(r, &w.fc1, rows, d, n, &mut z, false);
    let g = match (&w.gate, cfg.ffn_kind) {
        (Some(gw), FfnKind::Gated) => {
            let mut g = vec![0.0; rows * n];
            matmul_nt(r, gw, rows, d, n, &mut g, false);
            Some(g)
        }
        _ => None,
    };
    let act = cfg.activation;
    let mut m: Vec<f32> = match &g {
        Some(g) => z.iter().zip(g).map(|(zv, gv)| act.apply(*zv) * gv).collect(),
        None => z.iter().map(|zv| act.apply(*zv)).collect(),
    };
    hook(&mut m);
    let mut f = vec![0.0; rows * d];
    matmul_nt(&m, &w.fc2, rows, n, d, &mut f, false);
    (f, FfnCache { z, g, m })
}

pub(crate) fn embed(model: &Model, tokens: &[u32], batch: usize, seq: usize) -> Vec<f32> {
    let d = model.config.d_model;
    let w = &model.weights;
    let mut x = vec![0.0; batch * seq * d];
    for b in 0..batch {
        for t in 0..seq {
            let tok = tokens[b * seq + t] as usize;
            let row = &mut x[(b * seq + t) * d..(b * seq + t + 1) * d];
            let te = &w.token_embedding[tok * d..(tok + 1) * d];
            let pe = &w.position_embedding[t * d..(t + 1) * d];
            for ((o, a), p) in row.iter_mut().zip(te).zip(pe) {
                *o = a + p;
            }
        }
    }
    x
}

pub(crate) fn zero_masked(m: &mut [f32], width: usize, indices: &[usize]) {
    if indices.is_empty() {
        return;
    }
    for row in m.chunks_exact_mut(width) {
        for &i in indices {
            row[i] = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

impl Model {
    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidToken {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Run the model on one sequence, zeroing the coefficients in `mask`.
    pub fn forward(
        &self,
        tokens: &[u32],
        record: Record,
        mask: Option<&EditMask>,
    ) -> Result<ForwardTrace> {
        let per_layer = match mask {
            Some(m) => {
                m.validate(&self.config)?;
                m.per_layer(self.config.n_layers)
            }
            None => vec![Vec::new(); self.config.n_layers],
        };
        let width = self.config.ffn_width;
        self.forward_with_hook(tokens, record, &mut |layer, coeffs| {
            zero_masked(coeffs, width, &per_layer[layer]);
        })
    }

    /// Run the model with an arbitrary intervention on the FFN coefficients.
    ///
    /// `hook(layer, coeffs)` receives the `[seq, ffn_width]` coefficient
    /// matrix of each layer before it is multiplied into `fc2`; whatever it
    /// leaves there is what the layer uses.
    pub fn forward_with_hook(
        &self,
        tokens: &[u32],
        record: Record,
        hook: &mut dyn FnMut(usize, &mut [f32]),
    ) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let seq = tokens.len();
        let d = cfg.d_model;
        let mut x = embed(self, tokens, 1, seq);
        let mut layers = Vec::new();
        for (l, w) in self.weights.layers.iter().enumerate() {
            let (a, _) = attention_forward(cfg, w, &x, 1, seq);
            let r: Vec<f32> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let (f, cache) = ffn_forward(cfg, w, &r, seq, &mut |m| hook(l, m));
            let h: Vec<f32> = r.iter().zip(&f).map(|(p, q)| p + q).collect();
            if record >= Record::Residual {
                layers.push(LayerTrace {
                    h_prev: std::mem::take(&mut x),
                    attn_out: a,
                    ffn_out: f,
                    h_out: h.clone(),
                    coeffs: (record == Record::Coefficients).then_some(cache.m),
                });
            }
            x = h;
        }
        let logits: Vec<f32> = x.chunks_exact(d).flat_map(|h| self.head_logits(h)).collect();
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            logits,
            layers,
            d_model: d,
            ffn_width: cfg.ffn_width,
            vocab_size: cfg.vocab_size,
        })
    }

    /// Decompose layer `layer`'s FFN at `residual_in` into per-neuron
    /// coefficients and their reconstruction `Σ_k coeffs[k]·fc2_k`.
    pub fn ffn_decompose(&self, layer: usize, residual_in: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let cfg = &self.config;
        if layer >= cfg.n_layers {
            return Err(Error::InvalidInput(format!("layer {layer} out of range")));
        }
        if residual_in.len() != cfg.d_model || residual_in.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "residual_in must be a finite vector of length d_model".into(),
            ));
        }
        let w = &self.weights.layers[layer];
        let (d, n) = (cfg.d_model, cfg.ffn_width);
        let mut coeffs = vec![0.0; n];
        linalg::matvec(&w.fc1, residual_in, &mut coeffs);
        for c in coeffs.iter_mut() {
            *c = cfg.activation.apply(*c);
        }
        if let Some(g) = &w.gate {
            let mut gv = vec![0.0; n];
            linalg::matvec(g, residual_in, &mut gv);
            for (c, g) in coeffs.iter_mut().zip(&gv) {
                *c *= g;
            }
        }
        let mut recon = vec![0.0; d];
        for (k, &mk) in coeffs.iter().enumerate() {
            for (i, r) in recon.iter_mut().enumerate() {
                *r += mk * w.fc2[i * n + k];
            }
        }
        Ok((coeffs, recon))
    }

    /// Logits of `hidden` under the unembedding, accumulated in f64.
    pub fn logits_f64(&self, hidden: &[f64], apply_final_norm: bool) -> Vec<f64> {
        let d = self.config.d_model;
        let normed: Vec<f64> = if apply_final_norm {
            let ms = hidden.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
            hidden
                .iter()
                .zip(&self.weights.final_norm)
                .map(|(h, g)| h * inv * *g as f64)
                .collect()
        } else {
            hidden.to_vec()
        };
        self.weights
            .unembedding
            .chunks_exact(d)
            .map(|row| row.iter().zip(&normed).map(|(u, h)| *u as f64 * h).sum())
            .collect()
    }

    /// `log p(token | hidden)` through the (optionally final-normed) unembedding.
    pub fn log_prob_f64(&self, hidden: &[f64], token: u32, apply_final_norm: bool) -> f64 {
        let logits = self.logits_f64(hidden, apply_final_norm);
        logits[token as usize] - linalg::log_sum_exp_f64(&logits)
    }

    /// Output-head logits for a final hidden state; f64 accumulation, one rounding.
    pub(crate) fn head_logits(&self, hidden: &[f32]) -> Vec<f32> {
        let h: Vec<f64> = hidden.iter().map(|&v| v as f64).collect();
        self.logits_f64(&h, true).into_iter().map(|v| v as f32).collect()
    }

    /// Probability distribution over the vocabulary for `hidden`.
    pub fn unembed(&self, hidden: &[f32], apply_final_norm: bool) -> Vec<f32> {
        let h: Vec<f64> = hidden.iter().map(|&v| v as f64).collect();
        let logits = self.logits_f64(&h, apply_final_norm);
        let lse = linalg::log_sum_exp_f64(&logits);
        logits.iter().map(|l| (l - lse).exp() as f32).collect()
    }

    /// Start an incremental decoding session.
    pub fn decode_state(&self, mask: Option<&EditMask>) -> Result<DecodeState<'_>> {
        let per_layer = match mask {
            Some(m) => {
                m.validate(&self.config)?;
                m.per_layer(self.config.n_layers)
            }
            None => vec![Vec::new(); self.config.n_layers],
        };
        Ok(DecodeState {
            model: self,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            masked: per_layer,
            len: 0,
        })
    }
}

/// Key/value cache for token-at-a-time decoding.
pub struct DecodeState<'m> {
    model: &'m Model,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    masked: Vec<Vec<usize>>,
    len: usize,
}

impl DecodeState<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feed one token at the next position and return the logits there.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = &model.config;
        if self.len >= cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max: cfg.max_seq_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::InvalidToken {
                token,
                vocab: cfg.vocab_size,
            });
        }
        let (d, n, hd) = (cfg.d_model, cfg.ffn_width, cfg.head_dim());
        let pos = self.len;
        let w = &model.weights;
        let mut x: Vec<f32> = w.token_embedding[token as usize * d..][..d]
            .iter()
            .zip(&w.position_embedding[pos * d..][..d])
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (hd as f32).sqrt();
        for (l, lw) in w.layers.iter().enumerate() {
            let mut n1 = vec![0.0; d];
            linalg::rms_norm(&x, &lw.attn_norm, &mut n1);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            linalg::matvec(&lw.wq, &n1, &mut q);
            linalg::matvec(&lw.wk, &n1, &mut k);
            linalg::matvec(&lw.wv, &n1, &mut v);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let t = pos + 1;
            let mut o = vec![0.0; d];
            let mut scores = vec![0.0; t];
            for h in 0..cfg.n_heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = linalg::dot(qh, &self.keys[l][j * d + h * hd..][..hd]) * scale;
                }
                linalg::softmax_in_place(&mut scores);
                let oh = &mut o[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    for (ov, vv) in oh.iter_mut().zip(&self.values[l][j * d + h * hd..][..hd]) {
                        *ov += p * vv;
                    }
                }
            }
            let mut a = vec![0.0; d];
            linalg::matvec(&lw.wo, &o, &mut a);
            let r: Vec<f32> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
            let mut m = vec![0.0; n];
            linalg::matvec(&lw.fc1, &r, &mut m);
            for mv in m.iter_mut() {
                *mv = cfg.activation.apply(*mv);
            }
            if let Some(g) = &lw.gate {
                let mut gv = vec![0.0; n];
                linalg::matvec(g, &r, &mut gv);
                for (mv, gv) in m.iter_mut().zip(&gv) {
                    *mv *= gv;
                }
            }
            zero_masked(&mut m, n, &self.masked[l]);
            let mut f = vec![0.0; d];
            matmul_nn(&lw.fc2, &m, d, n, 1, &mut f, false);
            x = r.iter().zip(&f).map(|(p, q)| p + q).collect();
        }
        let logits = self.model.head_logits(&x);
        self.len += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelWeights, NeuronId};

    fn cfg(kind: FfnKind) -> TransformerConfig {
        TransformerConfig {
            n_layers: 3,
            d_model: 8,
            ffn_width: 12,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            activation: Activation::SigmoidWeightedLinear,
            ffn_kind: kind,
        }
    }

    /// Random init is tiny; scale weights up so the checks are not trivially satisfied.
    fn model(kind: FfnKind, seed: u64) -> Model {
        let m = Model::init(cfg(kind), seed, "t").unwrap();
        let mut w = m.weights().clone();
        let scale = |v: &mut Vec<f32>| v.iter_mut().for_each(|x| *x *= 25.0);
        scale(&mut w.token_embedding);
        scale(&mut w.unembedding);
        for l in &mut w.layers {
            scale(&mut l.fc1);
            scale(&mut l.fc2);
            scale(&mut l.wq);
            scale(&mut l.wk);
            scale(&mut l.wv);
            scale(&mut l.wo);
            if let Some(g) = &mut l.gate {
                scale(g);
            }
        }
        Model::new(cfg(kind), w, "t").unwrap()
    }

    #[test]
    fn residual_additivity_and_reconstruction() {
        for kind in [FfnKind::TwoMatrix, FfnKind::Gated] {
            let m = model(kind, 5);
            let toks = [1u32, 3, 9, 0, 4, 4, 2];
            let tr = m.forward(&toks, Record::Coefficients, None).unwrap();
            for l in 0..3 {
                for p in 0..toks.len() {
                    for i in 0..8 {
                        let sum = tr.h_prev(l, p)[i] + tr.attn_out(l, p)[i] + tr.ffn_out(l, p)[i];
                        assert!((tr.h_out(l, p)[i] - sum).abs() <= 1e-5);
                    }
                    let r: Vec<f32> = tr
                        .h_prev(l, p)
                        .iter()
                        .zip(tr.attn_out(l, p))
                        .map(|(a, b)| a + b)
                        .collect();
                    let (coeffs, recon) = m.ffn_decompose(l, &r).unwrap();
                    for (a, b) in coeffs.iter().zip(tr.coeffs(l, p).unwrap()) {
                        assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
                    }
                    let f = tr.ffn_out(l, p);
                    let num: f32 = recon.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
                    let den: f32 = f.iter().map(|b| b * b).sum();
                    if den.sqrt() > 1e-8 {
                        assert!(num.sqrt() / den.sqrt() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn masking_a_whole_layer_zeroes_its_ffn_output() {
        let m = model(FfnKind::TwoMatrix, 1);
        let mask = EditMask::from_neurons((0..12).map(|k| NeuronId::new(1, k)));
        let tr = m
            .forward(&[2, 5, 7], Record::Coefficients, Some(&mask))
            .unwrap();
        assert!(tr.layers[1].ffn_out.iter().all(|v| *v == 0.0));
        assert!(tr.layers[1].coeffs.as_ref().unwrap().iter().all(|v| *v == 0.0));
        assert!(tr.layers[0].ffn_out.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn mask_equals_literal_zeroing_hook() {
        let m = model(FfnKind::Gated, 2);
        let zeroed = [NeuronId::new(0, 3), NeuronId::new(2, 7), NeuronId::new(2, 0)];
        let mask = EditMask::from_neurons(zeroed);
        let toks = [1u32, 2, 3, 4, 5];
        let a = m.forward(&toks, Record::Coefficients, Some(&mask)).unwrap();
        let b = m
            .forward_with_hook(&toks, Record::Coefficients, &mut |layer, coeffs| {
                for row in coeffs.chunks_exact_mut(12) {
                    for n in &zeroed {
                        if n.layer == layer {
                            row[n.index] = 0.0;
                        }
                    }
                }
            })
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_mask_is_identity() {
        let m = model(FfnKind::TwoMatrix, 9);
        let toks = [3u32, 1, 4, 1, 5];
        let a = m.forward(&toks, Record::Coefficients, None).unwrap();
        let b = m
            .forward(&toks, Record::Coefficients, Some(&EditMask::new()))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unembed_matches_forward_output() {
        let m = model(FfnKind::TwoMatrix, 4);
        let toks = [3u32, 8, 1, 0];
        let tr = m.forward(&toks, Record::Residual, None).unwrap();
        for p in 0..toks.len() {
            let probs = m.unembed(tr.h_out(2, p), true);
            let want = tr.probs_at(p);
            let total: f32 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for (a, b) in probs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_unembedding_rows_give_uniform_distribution() {
        let c = cfg(FfnKind::TwoMatrix);
        let base = Model::init(c, 0, "u").unwrap();
        let mut w = base.weights().clone();
        w.unembedding = (0..c.vocab_size)
            .flat_map(|_| (0..c.d_model).map(|i| i as f32 * 0.1))
            .collect();
        let m = Model::new(c, w, "u").unwrap();
        let p = m.unembed(&[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 0.9], true);
        for v in p {
            assert!((v - 1.0 / 11.0).abs() < 1e-6);
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        for kind in [FfnKind::TwoMatrix, FfnKind::Gated] {
            let m = model(kind, 7);
            let toks = [0u32, 5, 9, 2, 2, 10, 1];
            let mask = EditMask::from_neurons([NeuronId::new(1, 4)]);
            let full = m.forward(&toks, Record::Logits, Some(&mask)).unwrap();
            let mut st = m.decode_state(Some(&mask)).unwrap();
            for (p, &t) in toks.iter().enumerate() {
                let l = st.step(t).unwrap();
                for (a, b) in l.iter().zip(full.logits_at(p)) {
                    assert!((a - b).abs() < 1e-4, "{kind:?} pos {p}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = model(FfnKind::TwoMatrix, 1);
        assert!(matches!(
            m.forward(&[], Record::Logits, None),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            m.forward(&[0; 17], Record::Logits, None),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(matches!(
            m.forward(&[11], Record::Logits, None),
            Err(Error::InvalidToken { .. })
        ));
        let bad = EditMask::from_neurons([NeuronId::new(3, 0)]);
        assert!(m.forward(&[1], Record::Logits, Some(&bad)).is_err());
    }

    #[test]
    fn weights_shape_validation() {
        let c = cfg(FfnKind::TwoMatrix);
        let mut w: ModelWeights = Model::init(c, 0, "x").unwrap().weights().clone();
        w.layers[1].fc1.pop();
        assert!(matches!(
            Model::new(c, w, "x"),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
