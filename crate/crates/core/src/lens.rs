// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens and tuned lens over the residual stream, and per-layer
//! language-mass curves.
//!
//! A lens maps the output `h` of layer `l` through an affine translator
//! `W_l·h + b_l` and then through the model's own final norm and
//! unembedding. The identity translator is the plain logit lens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{write_atomic, Container, NamedTensor};
use crate::error::{Error, Result};
use crate::langid::LangIdModel;
use crate::linalg;
use crate::metrics::ResponseDetail;
use crate::model::{ForwardTrace, Model, Record};
use crate::tokenizer;

const CHECKPOINT_KIND: &str = "lens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensKind {
    Identity,
    Tuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translator {
    /// `[d, d]`, row = output.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Translator {
    fn identity(d: usize) -> Self {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        Self {
            weight,
            bias: vec![0.0; d],
        }
    }

    fn apply(&self, h: &[f32]) -> Vec<f32> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(h.len())) {
            *o += linalg::dot(row, h);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensMeta {
    pub corpus_digest: String,
    pub steps: usize,
    /// Held-out KL per layer after fitting (empty for the identity lens).
    pub final_kl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensSet {
    kind: LensKind,
    model_id: String,
    d_model: usize,
    translators: Vec<Translator>,
    meta: LensMeta,
}

impl LensSet {
    /// Logit lens: exact identity translators.
    pub fn identity(model: &Model) -> Self {
        let cfg = model.config();
        Self {
            kind: LensKind::Identity,
            model_id: model.model_id().to_string(),
            d_model: cfg.d_model,
            translators: (0..cfg.n_layers)
                .map(|_| Translator::identity(cfg.d_model))
                .collect(),
            meta: LensMeta {
                corpus_digest: String::new(),
                steps: 0,
                final_kl: Vec::new(),
            },
        }
    }

    pub fn kind(&self) -> LensKind {
        self.kind
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn meta(&self) -> &LensMeta {
        &self.meta
    }

    pub fn n_layers(&self) -> usize {
        self.translators.len()
    }

    pub fn translator(&self, layer: usize) -> &Translator {
        &self.translators[layer]
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if cfg.n_layers != self.translators.len() || cfg.d_model != self.d_model {
            return Err(Error::ShapeMismatch {
                tensor: "lens".into(),
                detail: format!(
                    "lens has {} layers of width {}, model has {} of width {}",
                    self.translators.len(),
                    self.d_model,
                    cfg.n_layers,
                    cfg.d_model
                ),
            });
        }
        Ok(())
    }

    /// Vocabulary distribution read from `h` (output of `layer`).
    pub fn distribution(&self, model: &Model, layer: usize, h: &[f32]) -> Result<Vec<f32>> {
        self.check_model(model)?;
        if layer >= self.translators.len() {
            return Err(Error::InvalidInput(format!("layer {layer} out of range")));
        }
        Ok(model.unembed(&self.translators[layer].apply(h), true))
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "kind": self.kind,
            "model_id": self.model_id,
            "d_model": self.d_model,
            "n_layers": self.translators.len(),
            "training": self.meta,
        });
        let d = self.d_model;
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        for (l, t) in self.translators.iter().enumerate() {
            c.push(NamedTensor::new(format!("layers.{l}.weight"), vec![d, d], t.weight.clone()));
            c.push(NamedTensor::new(format!("layers.{l}.bias"), vec![d], t.bias.clone()));
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Meta {
            kind: LensKind,
            model_id: String,
            d_model: usize,
            n_layers: usize,
            training: LensMeta,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::CorruptHeader(format!("lens meta: {e}")))?;
        let d = meta.d_model;
        let translators = (0..meta.n_layers)
            .map(|l| {
                Ok(Translator {
                    weight: c.take(&format!("layers.{l}.weight"), &[d, d])?,
                    bias: c.take(&format!("layers.{l}.bias"), &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if meta.kind == LensKind::Identity
            && translators.iter().any(|t| *t != Translator::identity(d))
        {
            return Err(Error::CorruptHeader(
                "identity lens with non-identity translator".into(),
            ));
        }
        Ok(Self {
            kind: meta.kind,
            model_id: meta.model_id,
            d_model: d,
            translators,
            meta: meta.training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn digest(&self) -> String {
        let bytes = self.to_container().to_bytes().expect("lens serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Top-`k` tokens of the lens distribution at (`layer`, `position`);
/// descending probability, ties to the lower token id.
pub fn project_layer(
    model: &Model,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
    lens: &LensSet,
    k: usize,
) -> Result<Vec<(u32, f32)>> {
    if k > model.config().vocab_size {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds vocabulary size {}",
            model.config().vocab_size
        )));
    }
    if layer >= trace.layers.len() || position >= trace.seq_len() {
        return Err(Error::InvalidInput(format!(
            "(layer {layer}, position {position}) outside the trace"
        )));
    }
    let probs = lens.distribution(model, layer, trace.h_out(layer, position))?;
    Ok(linalg::top_k(&probs, k)
        .into_iter()
        .map(|(t, p)| (t as u32, p))
        .collect())
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LensHyper {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Windows drawn for fitting and for the held-out report.
    pub windows: usize,
    pub heldout_windows: usize,
    pub seq_len: usize,
    /// Positions per optimization step.
    pub batch: usize,
}

impl Default for LensHyper {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            seed: 5,
            windows: 48,
            heldout_windows: 16,
            seq_len: 64,
            batch: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerKl {
    pub layer: usize,
    pub logit_lens_kl: f64,
    pub tuned_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub layers: Vec<LayerKl>,
}

/// Hidden states of every layer plus final log-probabilities, position-major.
struct Pool {
    rows: usize,
    /// Per layer `[rows, d]`.
    hidden: Vec<Vec<f32>>,
    /// `[rows, vocab]`
    final_logp: Vec<f32>,
}

fn collect_pool(model: &Model, windows: &[Vec<u32>]) -> Result<Pool> {
    let cfg = model.config();
    let traces: Vec<ForwardTrace> = windows
        .par_iter()
        .map(|w| model.forward(w, Record::Residual, None))
        .collect::<Result<_>>()?;
    let mut hidden = vec![Vec::new(); cfg.n_layers];
    let mut final_logp = Vec::new();
    let mut rows = 0;
    for t in &traces {
        rows += t.seq_len();
        for (l, h) in hidden.iter_mut().enumerate() {
            h.extend_from_slice(&t.layers[l].h_out);
        }
        for p in 0..t.seq_len() {
            final_logp.extend(log_softmax(t.logits_at(p)));
        }
    }
    Ok(Pool {
        rows,
        hidden,
        final_logp,
    })
}

fn log_softmax(logits: &[f32]) -> impl Iterator<Item = f32> + '_ {
    let x: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let lse = linalg::log_sum_exp_f64(&x);
    logits.iter().map(move |&v| (v as f64 - lse) as f32)
}

/// Windows of `seq_len` from the `[lo, hi)` fraction of each stream.
fn draw_windows(
    streams: &[Vec<u32>],
    count: usize,
    seq_len: usize,
    range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u32>>> {
    (0..count)
        .map(|i| {
            let s = &streams[i % streams.len()];
            let lo = (s.len() as f64 * range.0) as usize;
            let hi = (s.len() as f64 * range.1) as usize;
            if hi < lo + seq_len + 1 {
                return Err(Error::InvalidInput(format!(
                    "stream of {} tokens too short for lens windows of {seq_len}",
                    s.len()
                )));
            }
            let start = rng.gen_range(lo..hi - seq_len);
            Ok(s[start..start + seq_len].to_vec())
        })
        .collect()
}

/// Logits of translated rows: returns (normed input, inv rms, logits).
fn lens_logits(
    model: &Model,
    t: &Translator,
    h: &[f32],
    rows: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let cfg = model.config();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut x = vec![0.0; rows * d];
    for r in 0..rows {
        x[r * d..(r + 1) * d].copy_from_slice(&t.bias);
    }
    linalg::matmul_nt(h, &t.weight, rows, d, d, &mut x, true);
    let mut n = vec![0.0; rows * d];
    let inv = linalg::rms_norm_rows(&x, &model.weights().final_norm, &mut n);
    let mut z = vec![0.0; rows * v];
    linalg::matmul_nt(&n, &model.weights().unembedding, rows, d, v, &mut z, false);
    (x, inv, z)
}

/// Mean `KL(final ‖ lens)` over pool rows, in f64.
fn mean_kl(model: &Model, t: &Translator, h: &[f32], final_logp: &[f32], rows: usize) -> f64 {
    let v = model.config().vocab_size;
    let (_, _, z) = lens_logits(model, t, h, rows);
    let mut total = 0.0;
    for r in 0..rows {
        let lq: Vec<f32> = log_softmax(&z[r * v..(r + 1) * v]).collect();
        let lp = &final_logp[r * v..(r + 1) * v];
        total += lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| (a as f64).exp() * (a as f64 - b as f64))
            .sum::<f64>();
    }
    total / rows as f64
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        let mut i = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, &gv) in p.iter_mut().zip(g.iter()) {
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * gv;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * gv * gv;
                *w -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                i += 1;
            }
        }
    }
}

/// Fit one affine translator per layer so that the lens distribution
/// matches the model's final distribution.
///
/// Translators start at identity. The last layer's translator stays the
/// identity, since its lens distribution already equals the model output.
/// A translator whose fitting-set KL ends above its identity start is
/// reset to identity.
pub fn fit_tuned_lens(
    model: &Model,
    streams: &[Vec<u32>],
    hyper: &LensHyper,
) -> Result<(LensSet, LensReport)> {
    if streams.is_empty() || streams.iter().all(|s| s.is_empty()) {
        return Err(Error::InvalidInput("lens corpus is empty".into()));
    }
    let streams: Vec<Vec<u32>> = streams.iter().filter(|s| !s.is_empty()).cloned().collect();
    if hyper.seq_len == 0 || hyper.seq_len > model.config().max_seq_len || hyper.batch == 0 {
        return Err(Error::InvalidInput(
            "lens seq_len must be in [1, max_seq_len] and batch >= 1".into(),
        ));
    }
    let cfg = *model.config();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let fit_windows = draw_windows(&streams, hyper.windows.max(1), hyper.seq_len, (0.0, 0.9), &mut rng)?;
    let held_windows = draw_windows(&streams, hyper.heldout_windows.max(1), hyper.seq_len, (0.9, 1.0), &mut rng)?;
    let fit = collect_pool(model, &fit_windows)?;
    let held = collect_pool(model, &held_windows)?;

    let mut digest = Sha256::new();
    for s in &streams {
        for t in s {
            digest.update(t.to_le_bytes());
        }
    }
    let corpus_digest = hex::encode(digest.finalize());

    let mut lens = LensSet::identity(model);
    let mut report = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let identity = Translator::identity(d);
        let h_fit = &fit.hidden[layer];
        let mut t = identity.clone();
        if layer + 1 < cfg.n_layers {
            let mut adam = Adam::new(d * d + d);
            let b = hyper.batch.min(fit.rows);
            let mut hb = vec![0.0; b * d];
            let mut pb = vec![0.0; b * v];
            for step in 0..hyper.steps {
                for i in 0..b {
                    let r = rng.gen_range(0..fit.rows);
                    hb[i * d..(i + 1) * d].copy_from_slice(&h_fit[r * d..(r + 1) * d]);
                    pb[i * v..(i + 1) * v].copy_from_slice(&fit.final_logp[r * v..(r + 1) * v]);
                }
                let (x, inv, z) = lens_logits(model, &t, &hb, b);
                // dL/dz = (q - p) / b
                let mut dz = vec![0.0; b * v];
                for i in 0..b {
                    let q: Vec<f32> = log_softmax(&z[i * v..(i + 1) * v]).collect();
                    for j in 0..v {
                        dz[i * v + j] = (q[j].exp() - pb[i * v + j].exp()) / b as f32;
                    }
                }
                let mut dn = vec![0.0; b * d];
                linalg::matmul_nn(&dz, &model.weights().unembedding, b, v, d, &mut dn, false);
                let mut dx = vec![0.0; b * d];
                let mut dgain = vec![0.0; d];
                linalg::rms_norm_rows_backward(&x, &model.weights().final_norm, &inv, &dn, &mut dx, &mut dgain);
                let mut dw = vec![0.0; d * d];
                linalg::matmul_tn(&dx, &hb, d, b, d, &mut dw, false);
                let mut db = vec![0.0; d];
                for row in dx.chunks_exact(d) {
                    for (g, x) in db.iter_mut().zip(row) {
                        *g += x;
                    }
                }
                if dw.iter().chain(&db).any(|g| !g.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("lens layer {layer}: non-finite gradient"),
                    });
                }
                adam.step(&mut [&mut t.weight, &mut t.bias], &[&dw, &db], hyper.lr);
            }
            let start = mean_kl(model, &identity, h_fit, &fit.final_logp, fit.rows);
            let end = mean_kl(model, &t, h_fit, &fit.final_logp, fit.rows);
            if !end.is_finite() {
                return Err(Error::Diverged {
                    step: hyper.steps,
                    detail: format!("lens layer {layer}: KL {end}"),
                });
            }
            if end > start {
                t = identity.clone();
            }
        }
        let h_held = &held.hidden[layer];
        report.push(LayerKl {
            layer,
            logit_lens_kl: mean_kl(model, &identity, h_held, &held.final_logp, held.rows),
            tuned_kl: mean_kl(model, &t, h_held, &held.final_logp, held.rows),
        });
        lens.translators[layer] = t;
    }
    lens.kind = LensKind::Tuned;
    lens.meta = LensMeta {
        corpus_digest,
        steps: hyper.steps,
        final_kl: report.iter().map(|r| r.tuned_kl).collect(),
    };
    Ok((lens, LensReport { layers: report }))
}

// ---------------------------------------------------------------------------
// Language-mass curves
// ---------------------------------------------------------------------------

/// Language of every vocabulary entry's detokenized text; `None` for
/// special, whitespace-only or otherwise unclassifiable tokens.
pub fn token_languages(langid: &LangIdModel, vocab_size: usize) -> Vec<Option<String>> {
    (0..vocab_size as u32)
        .map(|t| {
            if tokenizer::is_special(t) {
                return None;
            }
            langid.classify_line(&tokenizer::token_text(t)).map(|p| p.lang)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleGroup {
    Correct,
    Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensSample {
    pub sample_id: String,
    /// Prompt and response tokens up to at least `position`.
    pub tokens: Vec<u32>,
    /// Position whose next-token distribution is analysed.
    pub position: usize,
    pub target_lang: String,
    pub group: SampleGroup,
    /// Absolute confusion-point position; required for the confusion group.
    pub confusion_point: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerMass {
    pub dominant_count: f64,
    pub target_count: f64,
    pub other_count: f64,
    /// Summed raw probabilities over the top-k, not renormalized.
    pub dominant_prob: f64,
    pub target_prob: f64,
    pub other_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLanguageProfile {
    pub group: SampleGroup,
    pub k: usize,
    pub n_samples: usize,
    pub layers: Vec<LayerMass>,
}

/// Lens samples from benchmark details: the token before each confusion
/// point, and the last prompt token of every passing response.
pub fn lens_samples(details: &[ResponseDetail]) -> Vec<LensSample> {
    let mut out = Vec::new();
    for d in details {
        if let Some(cp) = &d.confusion_point {
            let tokens = d.full_tokens();
            out.push(LensSample {
                sample_id: d.id.clone(),
                tokens: tokens[..cp.token_position].to_vec(),
                position: cp.token_position - 1,
                target_lang: d.language.clone(),
                group: SampleGroup::Confusion,
                confusion_point: Some(cp.token_position),
            });
        } else if d.passed == Some(true) && !d.prompt_tokens.is_empty() {
            out.push(LensSample {
                sample_id: d.id.clone(),
                tokens: d.prompt_tokens.clone(),
                position: d.prompt_tokens.len() - 1,
                target_lang: d.language.clone(),
                group: SampleGroup::Correct,
                confusion_point: None,
            });
        }
    }
    out
}

/// Per-layer mean top-`k` language counts and masses, one profile per group
/// present in `samples` (ordered correct, confusion).
///
/// `dominant` names the model's majority training language; tokens of any
/// language that is neither dominant nor the sample's target count as other.
pub fn language_mass_curve(
    model: &Model,
    lens: &LensSet,
    samples: &[LensSample],
    langid: &LangIdModel,
    dominant: &str,
    k: usize,
) -> Result<Vec<LayerLanguageProfile>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no lens samples".into()));
    }
    lens.check_model(model)?;
    for s in samples {
        if s.position >= s.tokens.len() {
            return Err(Error::InvalidInput(format!(
                "sample `{}`: position {} outside its {} tokens",
                s.sample_id,
                s.position,
                s.tokens.len()
            )));
        }
        if s.group == SampleGroup::Confusion && s.confusion_point != Some(s.position + 1) {
            return Err(Error::InvalidInput(format!(
                "confusion sample `{}` must sit immediately before its confusion point",
                s.sample_id
            )));
        }
    }
    let langs = token_languages(langid, model.config().vocab_size);
    let n_layers = model.config().n_layers;
    let per_sample: Vec<Vec<LayerMass>> = samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&s.tokens[..=s.position], Record::Residual, None)?;
            (0..n_layers)
                .map(|l| {
                    let top = project_layer(model, &trace, l, s.position, lens, k)?;
                    let mut m = LayerMass::default();
                    for (t, p) in top {
                        let p = p as f64;
                        match langs[t as usize].as_deref() {
                            Some(x) if x == s.target_lang => {
                                m.target_count += 1.0;
                                m.target_prob += p;
                            }
                            Some(x) if x == dominant => {
                                m.dominant_count += 1.0;
                                m.dominant_prob += p;
                            }
                            _ => {
                                m.other_count += 1.0;
                                m.other_prob += p;
                            }
                        }
                    }
                    Ok(m)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<SampleGroup, Vec<&Vec<LayerMass>>> = BTreeMap::new();
    for (s, m) in samples.iter().zip(&per_sample) {
        groups.entry(s.group.clone()).or_default().push(m);
    }
    Ok(groups
        .into_iter()
        .map(|(group, rows)| {
            let n = rows.len() as f64;
            let layers = (0..n_layers)
                .map(|l| {
                    let mut acc = LayerMass::default();
                    for r in &rows {
                        let x = r[l];
                        acc.dominant_count += x.dominant_count;
                        acc.target_count += x.target_count;
                        acc.other_count += x.other_count;
                        acc.dominant_prob += x.dominant_prob;
                        acc.target_prob += x.target_prob;
                        acc.other_prob += x.other_prob;
                    }
                    LayerMass {
                        dominant_count: acc.dominant_count / n,
                        target_count: acc.target_count / n,
                        other_count: acc.other_count / n,
                        dominant_prob: acc.dominant_prob / n,
                        target_prob: acc.target_prob / n,
                        other_prob: acc.other_prob / n,
                    }
                })
                .collect();
            LayerLanguageProfile {
                group,
                k,
                n_samples: rows.len(),
                layers,
            }
        })
        .collect())
}

/// Rows `layer,group,lang,count,prob` with `lang` in {dominant, target, other}.
pub fn curves_to_csv(profiles: &[LayerLanguageProfile]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["layer", "group", "lang", "count", "prob"]).map_err(err)?;
    for p in profiles {
        let group = match p.group {
            SampleGroup::Correct => "correct",
            SampleGroup::Confusion => "confusion",
        };
        for (l, m) in p.layers.iter().enumerate() {
            for (lang, c, pr) in [
                ("dominant", m.dominant_count, m.dominant_prob),
                ("target", m.target_count, m.target_prob),
                ("other", m.other_count, m.other_prob),
            ] {
                w.write_record([l.to_string(), group.into(), lang.into(), format!("{c:.6}"), format!("{pr:.6}")])
                    .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_curves_csv(path: &Path, profiles: &[LayerLanguageProfile]) -> Result<()> {
    write_atomic(path, curves_to_csv(profiles)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, FfnKind, TransformerConfig};

    fn model() -> Model {
        let cfg = TransformerConfig {
            n_layers: 3,
            d_model: 8,
            ffn_width: 12,
            n_heads: 2,
            vocab_size: 258,
            max_seq_len: 32,
            activation: Activation::SigmoidWeightedLinear,
            ffn_kind: FfnKind::TwoMatrix,
        };
        let base = Model::init(cfg, 3, "lens-test").unwrap();
        let mut w = base.weights().clone();
        w.unembedding.iter_mut().for_each(|v| *v *= 40.0);
        Model::new(cfg, w, "lens-test").unwrap()
    }

    fn streams() -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        vec![(0..2000).map(|_| rng.gen_range(97..110)).collect()]
    }

    #[test]
    fn identity_lens_at_last_layer_matches_model() {
        let m = model();
        let lens = LensSet::identity(&m);
        let tr = m.forward(&[97, 98, 99, 100], Record::Residual, None).unwrap();
        for p in 0..4 {
            let top = project_layer(&m, &tr, 2, p, &lens, 258).unwrap();
            let mut model_top = linalg::top_k(&tr.probs_at(p), 258);
            model_top.truncate(5);
            for ((a, pa), (b, pb)) in top.iter().zip(&model_top) {
                assert_eq!(*a as usize, *b);
                assert!((pa - pb).abs() <= 1e-6);
            }
            let total: f64 = top.iter().map(|(_, p)| *p as f64).sum();
            assert!((total - 1.0).abs() <= 1e-6);
        }
        assert!(project_layer(&m, &tr, 2, 0, &lens, 259).is_err());
        assert!(project_layer(&m, &tr, 3, 0, &lens, 5).is_err());
    }

    #[test]
    fn tuned_lens_improves_and_keeps_last_layer_identity() {
        let m = model();
        let hyper = LensHyper {
            steps: 60,
            windows: 8,
            heldout_windows: 4,
            seq_len: 16,
            batch: 64,
            lr: 5e-3,
            ..LensHyper::default()
        };
        let (lens, rep) = fit_tuned_lens(&m, &streams(), &hyper).unwrap();
        assert_eq!(lens.kind(), LensKind::Tuned);
        assert_eq!(*lens.translator(2), Translator::identity(8));
        let last = rep.layers[2];
        assert!(last.tuned_kl.abs() <= 1e-6 && last.logit_lens_kl.abs() <= 1e-6);
        let better = rep.layers.iter().filter(|l| l.tuned_kl <= l.logit_lens_kl).count();
        assert!(better >= 3, "{rep:?}");
        let (again, _) = fit_tuned_lens(&m, &streams(), &hyper).unwrap();
        assert_eq!(again, lens);
        let back = LensSet::from_container(
            Container::from_bytes(&lens.to_container().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, lens);
    }

    #[test]
    fn zero_steps_equals_logit_lens() {
        let m = model();
        let hyper = LensHyper {
            steps: 0,
            windows: 4,
            heldout_windows: 2,
            seq_len: 16,
            ..LensHyper::default()
        };
        let (_, rep) = fit_tuned_lens(&m, &streams(), &hyper).unwrap();
        for l in rep.layers {
            assert_eq!(l.tuned_kl, l.logit_lens_kl);
        }
        assert!(fit_tuned_lens(&m, &[], &hyper).is_err());
    }
}
