// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-threaded, seeded training loop for toy models (manual backprop + AdamW).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{attention_forward, embed, ffn_forward, AttnCache, FfnCache};
use super::{EditMask, FfnKind, LayerWeights, Model, ModelWeights, Record, TransformerConfig};
use crate::error::{Error, Result};
use crate::linalg::{self, matmul_nn, matmul_nt, matmul_tn};

/// One language's training and held-out token streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageStream {
    pub lang: String,
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
}

/// Token streams per language. The first language is "language A" for
/// the purposes of [`TrainHyper::mix_ratio`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCorpus {
    pub languages: Vec<LanguageStream>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    /// Training window length in tokens.
    pub seq_len: usize,
    pub seed: u64,
    /// Fraction of training windows drawn from the first language; the
    /// rest is split evenly over the others.
    pub mix_ratio: f64,
    pub warmup: usize,
    pub weight_decay: f32,
    /// Held-out windows evaluated per language for the final report.
    pub eval_windows: usize,
}

impl TrainHyper {
    /// Dominant-language recipe (95:5).
    pub fn biased() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch: 16,
            seq_len: 64,
            seed: 17,
            mix_ratio: 0.95,
            warmup: 50,
            weight_decay: 0.01,
            eval_windows: 32,
        }
    }

    /// Even mix (50:50), otherwise identical to [`TrainHyper::biased`].
    pub fn balanced() -> Self {
        Self {
            mix_ratio: 0.5,
            ..Self::biased()
        }
    }

    fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup {
            return self.lr * (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let t = (step - self.warmup) as f32 / span;
        let floor = 0.1 * self.lr;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_train_loss: f32,
    /// `(language, mean held-out cross-entropy in nats/token)`
    pub heldout_loss: Vec<(String, f32)>,
}

/// Train a fresh model from `Model::init(config, hyper.seed)`.
pub fn train_toy(
    config: TransformerConfig,
    corpus: &TrainCorpus,
    hyper: &TrainHyper,
    model_id: &str,
) -> Result<(Model, TrainReport)> {
    let init = Model::init(config, hyper.seed, model_id)?;
    continue_training(init, corpus, hyper)
}

/// Train starting from an existing model's weights.
pub fn continue_training(
    mut model: Model,
    corpus: &TrainCorpus,
    hyper: &TrainHyper,
) -> Result<(Model, TrainReport)> {
    validate(model.config(), corpus, hyper)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_da7a);
    let mut opt = AdamW::new(model.weights());
    let mut last_loss = f32::NAN;
    for step in 0..hyper.steps {
        let batch = sample_batch(corpus, hyper, &mut rng);
        let (loss, mut grads) = loss_and_grads(&model, &batch, hyper.batch, hyper.seq_len);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}"),
            });
        }
        clip_global_norm(&mut grads, 1.0);
        opt.step(model.weights_mut(), &grads, hyper.lr_at(step), hyper.weight_decay);
        last_loss = loss;
    }
    if model.weights().token_embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: hyper.steps,
            detail: "non-finite weights".into(),
        });
    }
    let mut heldout = Vec::new();
    for l in &corpus.languages {
        let loss = heldout_loss(&model, &l.heldout, hyper.seq_len, hyper.eval_windows, None)?;
        heldout.push((l.lang.clone(), loss));
    }
    Ok((
        model,
        TrainReport {
            steps: hyper.steps,
            final_train_loss: last_loss,
            heldout_loss: heldout,
        },
    ))
}

fn validate(cfg: &TransformerConfig, corpus: &TrainCorpus, hyper: &TrainHyper) -> Result<()> {
    if corpus.languages.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    if !(0.0..=1.0).contains(&hyper.mix_ratio) {
        return Err(Error::InvalidInput("mix_ratio must be in [0, 1]".into()));
    }
    if hyper.seq_len == 0 || hyper.seq_len > cfg.max_seq_len || hyper.batch == 0 {
        return Err(Error::InvalidInput(
            "seq_len must be in [1, max_seq_len] and batch >= 1".into(),
        ));
    }
    for l in &corpus.languages {
        if l.train.len() <= hyper.seq_len {
            return Err(Error::InvalidInput(format!(
                "training stream for `{}` is shorter than one window",
                l.lang
            )));
        }
        if let Some(&t) = l.train.iter().chain(&l.heldout).find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::InvalidToken {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// `batch` windows of `seq_len + 1` tokens, row-major.
fn sample_batch(corpus: &TrainCorpus, hyper: &TrainHyper, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n_lang = corpus.languages.len();
    let mut out = Vec::with_capacity(hyper.batch * (hyper.seq_len + 1));
    for _ in 0..hyper.batch {
        let u: f64 = rng.gen();
        let lang = if n_lang == 1 || u < hyper.mix_ratio {
            0
        } else {
            let rest = ((u - hyper.mix_ratio) / (1.0 - hyper.mix_ratio) * (n_lang - 1) as f64)
                as usize;
            1 + rest.min(n_lang - 2)
        };
        let stream = &corpus.languages[lang].train;
        let start = rng.gen_range(0..stream.len() - hyper.seq_len);
        out.extend_from_slice(&stream[start..start + hyper.seq_len + 1]);
    }
    out
}

/// Mean next-token cross-entropy over consecutive windows of `stream`.
pub fn heldout_loss(
    model: &Model,
    stream: &[u32],
    seq_len: usize,
    max_windows: usize,
    mask: Option<&EditMask>,
) -> Result<f32> {
    if stream.len() < 2 {
        return Err(Error::InvalidInput("held-out stream too short".into()));
    }
    let seq_len = seq_len.min(model.config().max_seq_len);
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut start = 0;
    let mut windows = 0;
    while start + 1 < stream.len() && windows < max_windows {
        let end = (start + seq_len + 1).min(stream.len());
        let window = &stream[start..end];
        let tr = model.forward(&window[..window.len() - 1], Record::Logits, mask)?;
        for (p, &target) in window[1..].iter().enumerate() {
            let logits: Vec<f64> = tr.logits_at(p).iter().map(|&v| v as f64).collect();
            total += linalg::log_sum_exp_f64(&logits) - logits[target as usize];
            count += 1;
        }
        start = end - 1;
        windows += 1;
    }
    Ok((total / count as f64) as f32)
}

// ---------------------------------------------------------------------------
// Backprop
// ---------------------------------------------------------------------------

struct LayerCache {
    x: Vec<f32>,
    attn: AttnCache,
    r: Vec<f32>,
    ffn: FfnCache,
}

fn zeros_like(w: &ModelWeights) -> ModelWeights {
    let z = |v: &Vec<f32>| vec![0.0; v.len()];
    ModelWeights {
        token_embedding: z(&w.token_embedding),
        position_embedding: z(&w.position_embedding),
        layers: w
            .layers
            .iter()
            .map(|l| LayerWeights {
                attn_norm: z(&l.attn_norm),
                wq: z(&l.wq),
                wk: z(&l.wk),
                wv: z(&l.wv),
                wo: z(&l.wo),
                fc1: z(&l.fc1),
                fc2: z(&l.fc2),
                gate: l.gate.as_ref().map(z),
            })
            .collect(),
        final_norm: z(&w.final_norm),
        unembedding: z(&w.unembedding),
    }
}

/// Every parameter tensor with its weight-decay flag, in a fixed order.
fn tensors_mut(w: &mut ModelWeights) -> Vec<(&mut Vec<f32>, bool)> {
    let mut out: Vec<(&mut Vec<f32>, bool)> = vec![
        (&mut w.token_embedding, false),
        (&mut w.position_embedding, false),
    ];
    for l in w.layers.iter_mut() {
        out.push((&mut l.attn_norm, false));
        out.push((&mut l.wq, true));
        out.push((&mut l.wk, true));
        out.push((&mut l.wv, true));
        out.push((&mut l.wo, true));
        out.push((&mut l.fc1, true));
        out.push((&mut l.fc2, true));
        if let Some(g) = l.gate.as_mut() {
            out.push((g, true));
        }
    }
    out.push((&mut w.final_norm, false));
    out.push((&mut w.unembedding, true));
    out
}

fn clip_global_norm(grads: &mut ModelWeights, max_norm: f32) {
    let mut tensors = tensors_mut(grads);
    let sq: f64 = tensors
        .iter()
        .flat_map(|(t, _)| t.iter())
        .map(|v| (*v as f64) * (*v as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        for (t, _) in tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct AdamW {
    m: ModelWeights,
    v: ModelWeights,
    t: i32,
}

impl AdamW {
    fn new(w: &ModelWeights) -> Self {
        Self {
            m: zeros_like(w),
            v: zeros_like(w),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelWeights, grads: &ModelWeights, lr: f32, wd: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.95;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        let mut grads = grads.clone();
        let p = tensors_mut(params);
        let g = tensors_mut(&mut grads);
        let m = tensors_mut(&mut self.m);
        let v = tensors_mut(&mut self.v);
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            let decay = p.1;
            for i in 0..p.0.len() {
                let gi = g.0[i];
                m.0[i] = B1 * m.0[i] + (1.0 - B1) * gi;
                v.0[i] = B2 * v.0[i] + (1.0 - B2) * gi * gi;
                let mhat = m.0[i] / c1;
                let vhat = v.0[i] / c2;
                if decay {
                    p.0[i] -= lr * wd * p.0[i];
                }
                p.0[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Mean cross-entropy of `windows` (`batch` rows of `seq + 1` tokens) and
/// its gradient with respect to every weight.
pub(crate) fn loss_and_grads(
    model: &Model,
    windows: &[u32],
    batch: usize,
    seq: usize,
) -> (f32, ModelWeights) {
    let cfg = *model.config();
    let w = model.weights();
    let (d, n, v) = (cfg.d_model, cfg.ffn_width, cfg.vocab_size);
    let rows = batch * seq;
    let mut inputs = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    for b in 0..batch {
        let win = &windows[b * (seq + 1)..(b + 1) * (seq + 1)];
        inputs.extend_from_slice(&win[..seq]);
        targets.extend_from_slice(&win[1..]);
    }

    // Forward with caches.
    let mut x = embed(model, &inputs, batch, seq);
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let (a, attn) = attention_forward(&cfg, lw, &x, batch, seq);
        let r: Vec<f32> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let (f, ffn) = ffn_forward(&cfg, lw, &r, rows, &mut |_| {});
        let h: Vec<f32> = r.iter().zip(&f).map(|(p, q)| p + q).collect();
        caches.push(LayerCache {
            x: std::mem::replace(&mut x, h),
            attn,
            r,
            ffn,
        });
    }
    let mut nf = vec![0.0; rows * d];
    let invf = linalg::rms_norm_rows(&x, &w.final_norm, &mut nf);
    let mut logits = vec![0.0; rows * v];
    matmul_nt(&nf, &w.unembedding, rows, d, v, &mut logits, false);

    let mut loss = 0.0f64;
    let scale = 1.0 / rows as f32;
    for (r, row) in logits.chunks_exact_mut(v).enumerate() {
        linalg::softmax_in_place(row);
        let t = targets[r] as usize;
        loss -= (row[t].max(1e-30) as f64).ln();
        row[t] -= 1.0;
        row.iter_mut().for_each(|g| *g *= scale);
    }
    let dlogits = logits;
    let loss = (loss / rows as f64) as f32;

    let mut g = zeros_like(w);
    matmul_tn(&dlogits, &nf, v, rows, d, &mut g.unembedding, false);
    let mut dnf = vec![0.0; rows * d];
    matmul_nn(&dlogits, &w.unembedding, rows, v, d, &mut dnf, false);
    let mut dx = vec![0.0; rows * d];
    linalg::rms_norm_rows_backward(&x, &w.final_norm, &invf, &dnf, &mut dx, &mut g.final_norm);

    let act = cfg.activation;
    for (l, cache) in caches.iter().enumerate().rev() {
        let lw = &w.layers[l];
        let gl = &mut g.layers[l];
        // h = r + F
        let df = &dx;
        let mut dr = dx.clone();
        matmul_tn(df, &cache.ffn.m, d, rows, n, &mut gl.fc2, false);
        let mut dm = vec![0.0; rows * n];
        matmul_nn(df, &lw.fc2, rows, d, n, &mut dm, false);
        let mut dz = vec![0.0; rows * n];
        match (&cache.ffn.g, cfg.ffn_kind) {
            (Some(gate_pre), FfnKind::Gated) => {
                let mut dg = vec![0.0; rows * n];
                for i in 0..rows * n {
                    let z = cache.ffn.z[i];
                    dz[i] = dm[i] * gate_pre[i] * act.derivative(z);
                    dg[i] = dm[i] * act.apply(z);
                }
                let gate_w = lw.gate.as_ref().expect("gated layer has gate weights");
                let gate_g = gl.gate.as_mut().expect("gated layer has gate grads");
                matmul_tn(&dg, &cache.r, n, rows, d, gate_g, false);
                matmul_nn(&dg, gate_w, rows, n, d, &mut dr, true);
            }
            _ => {
                for i in 0..rows * n {
                    dz[i] = dm[i] * act.derivative(cache.ffn.z[i]);
                }
            }
        }
        matmul_tn(&dz, &cache.r, n, rows, d, &mut gl.fc1, false);
        matmul_nn(&dz, &lw.fc1, rows, n, d, &mut dr, true);

        // r = x + A
        let da = &dr;
        let mut dx_prev = dr.clone();
        let ac = &cache.attn;
        matmul_tn(da, &ac.o, d, rows, d, &mut gl.wo, false);
        let mut d_o = vec![0.0; rows * d];
        matmul_nn(da, &lw.wo, rows, d, d, &mut d_o, false);
        let (dq, dk, dv) = attention_backward(&cfg, ac, &d_o, batch, seq);
        matmul_tn(&dq, &ac.n1, d, rows, d, &mut gl.wq, false);
        matmul_tn(&dk, &ac.n1, d, rows, d, &mut gl.wk, false);
        matmul_tn(&dv, &ac.n1, d, rows, d, &mut gl.wv, false);
        let mut dn1 = vec![0.0; rows * d];
        matmul_nn(&dq, &lw.wq, rows, d, d, &mut dn1, false);
        matmul_nn(&dk, &lw.wk, rows, d, d, &mut dn1, true);
        matmul_nn(&dv, &lw.wv, rows, d, d, &mut dn1, true);
        linalg::rms_norm_rows_backward(
            &cache.x,
            &lw.attn_norm,
            &ac.inv1,
            &dn1,
            &mut dx_prev,
            &mut gl.attn_norm,
        );
        dx = dx_prev;
    }

    for b in 0..batch {
        for t in 0..seq {
            let row = &dx[(b * seq + t) * d..(b * seq + t + 1) * d];
            let tok = inputs[b * seq + t] as usize;
            for (e, gv) in g.token_embedding[tok * d..(tok + 1) * d].iter_mut().zip(row) {
                *e += gv;
            }
            for (e, gv) in g.position_embedding[t * d..(t + 1) * d].iter_mut().zip(row) {
                *e += gv;
            }
        }
    }
    (loss, g)
}

fn attention_backward(
    cfg: &TransformerConfig,
    c: &AttnCache,
    d_o: &[f32],
    batch: usize,
    seq: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let rows = batch * seq;
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &c.probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                let ri = b * seq + i;
                let doi = &d_o[ri * d + h * hd..ri * d + (h + 1) * hd];
                let prow = &p[i * seq..i * seq + i + 1];
                let mut dot_pdp = 0.0f32;
                for j in 0..=i {
                    let rj = b * seq + j;
                    let vj = &c.v[rj * d + h * hd..rj * d + (h + 1) * hd];
                    dp[j] = linalg::dot(doi, vj);
                    dot_pdp += prow[j] * dp[j];
                    let dvj = &mut dv[rj * d + h * hd..rj * d + (h + 1) * hd];
                    for (a, bb) in dvj.iter_mut().zip(doi) {
                        *a += prow[j] * bb;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = b * seq + j;
                    for e in 0..hd {
                        dq[ri * d + h * hd + e] += ds * c.k[rj * d + h * hd + e];
                        dk[rj * d + h * hd + e] += ds * c.q[ri * d + h * hd + e];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, FfnKind};

    fn cfg(kind: FfnKind, act: Activation) -> TransformerConfig {
        TransformerConfig {
            n_layers: 2,
            d_model: 8,
            ffn_width: 10,
            n_heads: 2,
            vocab_size: 13,
            max_seq_len: 8,
            activation: act,
            ffn_kind: kind,
        }
    }

    fn batch_loss(model: &Model, windows: &[u32], batch: usize, seq: usize) -> f64 {
        let mut total = 0.0;
        for b in 0..batch {
            let win = &windows[b * (seq + 1)..(b + 1) * (seq + 1)];
            let tr = model.forward(&win[..seq], Record::Logits, None).unwrap();
            for p in 0..seq {
                let l: Vec<f64> = tr.logits_at(p).iter().map(|&v| v as f64).collect();
                total += linalg::log_sum_exp_f64(&l) - l[win[p + 1] as usize];
            }
        }
        total / (batch * seq) as f64
    }

    /// Directional derivative check of the full backward pass.
    #[test]
    fn gradients_match_finite_differences() {
        for (kind, act) in [
            (FfnKind::TwoMatrix, Activation::SigmoidWeightedLinear),
            (FfnKind::Gated, Activation::GaussianErrorLinear),
        ] {
            let c = cfg(kind, act);
            let base = Model::init(c, 1, "g").unwrap();
            let mut w = base.weights().clone();
            // Larger weights so every path carries signal.
            for (t, _) in tensors_mut(&mut w) {
                t.iter_mut().for_each(|v| *v *= 6.0);
            }
            let model = Model::new(c, w.clone(), "g").unwrap();
            let windows: Vec<u32> = (0..3 * 6).map(|i| (i * 7 % 13) as u32).collect();
            let (loss, mut grads) = loss_and_grads(&model, &windows, 3, 5);
            let direct = batch_loss(&model, &windows, 3, 5);
            assert!((loss as f64 - direct).abs() < 1e-4, "{loss} vs {direct}");

            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut dir = zeros_like(&w);
            for (t, _) in tensors_mut(&mut dir) {
                t.iter_mut().for_each(|v| *v = crate::model::gaussian(&mut rng));
            }
            let analytic: f64 = tensors_mut(&mut grads)
                .into_iter()
                .zip(tensors_mut(&mut dir.clone()))
                .flat_map(|((g, _), (u, _))| {
                    g.iter().zip(u.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).collect::<Vec<_>>()
                })
                .sum();
            let h = 1e-3f32;
            let shifted = |sign: f32| {
                let mut w2 = w.clone();
                let mut d2 = dir.clone();
                for ((p, _), (u, _)) in tensors_mut(&mut w2).into_iter().zip(tensors_mut(&mut d2)) {
                    p.iter_mut().zip(u.iter()).for_each(|(a, b)| *a += sign * h * b);
                }
                batch_loss(&Model::new(c, w2, "g").unwrap(), &windows, 3, 5)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
            let rel = (fd - analytic).abs() / fd.abs().max(1e-3);
            assert!(rel < 2e-2, "{kind:?}: fd {fd} vs analytic {analytic}");
        }
    }

    fn toy_corpus() -> TrainCorpus {
        let a: Vec<u32> = "abcabcabd ".repeat(60).bytes().map(u32::from).collect();
        let b: Vec<u32> = "xyzzyx ".repeat(80).bytes().map(u32::from).collect();
        TrainCorpus {
            languages: vec![
                LanguageStream {
                    lang: "A".into(),
                    train: a.clone(),
                    heldout: a[..100].to_vec(),
                },
                LanguageStream {
                    lang: "B".into(),
                    train: b.clone(),
                    heldout: b[..100].to_vec(),
                },
            ],
        }
    }

    fn small_hyper(steps: usize) -> TrainHyper {
        TrainHyper {
            steps,
            lr: 1e-2,
            batch: 4,
            seq_len: 16,
            seed: 3,
            mix_ratio: 0.5,
            warmup: 5,
            weight_decay: 0.0,
            eval_windows: 4,
        }
    }

    #[test]
    fn zero_steps_gives_uniform_entropy() {
        let c = TransformerConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 32,
            ..cfg(FfnKind::TwoMatrix, Activation::SigmoidWeightedLinear)
        };
        let (_, rep) = train_toy(c, &toy_corpus(), &small_hyper(0), "z").unwrap();
        let uniform = (c.vocab_size as f32).ln();
        for (_, l) in rep.heldout_loss {
            assert!((l - uniform).abs() < 0.05 * uniform, "{l} vs {uniform}");
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = TransformerConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 32,
            ..cfg(FfnKind::TwoMatrix, Activation::SigmoidWeightedLinear)
        };
        let (m1, r1) = train_toy(c, &toy_corpus(), &small_hyper(60), "d").unwrap();
        let (m2, _) = train_toy(c, &toy_corpus(), &small_hyper(60), "d").unwrap();
        assert_eq!(m1.digest(), m2.digest());
        for (_, l) in &r1.heldout_loss {
            assert!(*l < 3.0, "{r1:?}");
        }
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let c = TransformerConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 32,
            ..cfg(FfnKind::TwoMatrix, Activation::SigmoidWeightedLinear)
        };
        let mut h = small_hyper(5);
        h.lr = f32::INFINITY;
        match train_toy(c, &toy_corpus(), &h, "x") {
            Err(Error::Diverged { step, .. }) => assert!(step <= 5),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
