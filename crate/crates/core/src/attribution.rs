// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron importance at a single position.
//!
//! For layer `l`, let `r = h_prev + attn_out` at the query position and
//! `v_k = m_k · fc2_k`. The importance of neuron `k` for target token `w` is
//! `log p(w | r + v_k) - log p(w | r)`, where `p` is the final norm followed
//! by the unembedding. Later layers are not re-run.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, RMS_EPS};
use crate::metrics::ResponseDetail;
use crate::model::{ForwardTrace, Model, NeuronId, Record};

pub const DEFAULT_TOP_N: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionQuery {
    pub sample_id: String,
    /// Tokens up to and including `position`.
    pub tokens: Vec<u32>,
    pub position: usize,
    /// Token that would be emitted at `position + 1`.
    pub target_token: u32,
}

impl AttributionQuery {
    /// Query at `position`, targeting `tokens[position + 1]`.
    pub fn at(sample_id: &str, tokens: &[u32], position: usize) -> Result<Self> {
        let target = *tokens.get(position + 1).ok_or_else(|| {
            Error::InvalidInput(format!(
                "query `{sample_id}`: no token after position {position}"
            ))
        })?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            tokens: tokens[..=position].to_vec(),
            position,
            target_token: target,
        })
    }

    fn key(&self) -> (&str, usize, u32, &[u32]) {
        (&self.sample_id, self.position, self.target_token, &self.tokens)
    }
}

/// Queries at the token before each confusion point.
pub fn confusion_queries(details: &[ResponseDetail]) -> Result<Vec<AttributionQuery>> {
    details
        .iter()
        .filter_map(|d| d.confusion_point.as_ref().map(|cp| (d, cp.token_position)))
        .map(|(d, cp)| AttributionQuery::at(&d.id, &d.full_tokens(), cp - 1))
        .collect()
}

/// Queries at the last prompt token of passing responses, targeting the
/// first generated token.
pub fn correct_queries(details: &[ResponseDetail]) -> Result<Vec<AttributionQuery>> {
    details
        .iter()
        .filter(|d| d.passed == Some(true) && !d.response_tokens.is_empty())
        .map(|d| AttributionQuery::at(&d.id, &d.full_tokens(), d.prompt_tokens.len() - 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    #[serde(flatten)]
    pub neuron: NeuronId,
    pub score: f64,
}

/// Every neuron's score for one query, flat in `(layer, index)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub position: usize,
    pub target_token: u32,
    pub ffn_width: usize,
    pub scores: Vec<f64>,
}

impl SampleScores {
    pub fn score(&self, n: NeuronId) -> f64 {
        self.scores[n.flat(self.ffn_width)]
    }

    pub fn records(&self) -> Vec<ImportanceRecord> {
        self.scores
            .iter()
            .enumerate()
            .map(|(i, &score)| ImportanceRecord {
                neuron: NeuronId::from_flat(i, self.ffn_width),
                score,
            })
            .collect()
    }

    pub fn top(&self, n: usize) -> Vec<NeuronId> {
        top_neurons(&self.scores, self.ffn_width, n)
    }
}

/// One JSONL row: `{sample_id, layer, index, score}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub sample_id: String,
    pub position: usize,
    pub target_token: u32,
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

pub fn to_rows(samples: &[SampleScores]) -> Vec<RecordRow> {
    samples
        .iter()
        .flat_map(|s| {
            s.records().into_iter().map(move |r| RecordRow {
                sample_id: s.sample_id.clone(),
                position: s.position,
                target_token: s.target_token,
                layer: r.neuron.layer,
                index: r.neuron.index,
                score: r.score,
            })
        })
        .collect()
}

/// Rebuild per-sample scores from rows; every sample must list every neuron once.
pub fn from_rows(rows: &[RecordRow]) -> Result<Vec<SampleScores>> {
    let mut by_sample: BTreeMap<&str, Vec<&RecordRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        if !r.score.is_finite() {
            return Err(Error::Parse(format!("non-finite score for `{}`", r.sample_id)));
        }
        by_sample
            .entry(&r.sample_id)
            .or_insert_with(|| {
                order.push(r.sample_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let rs = &by_sample[id];
            let width = rs.iter().map(|r| r.index + 1).max().unwrap_or(0);
            let layers = rs.iter().map(|r| r.layer + 1).max().unwrap_or(0);
            let mut scores = vec![f64::NAN; width * layers];
            for r in rs {
                let f = NeuronId::new(r.layer, r.index).flat(width);
                if !scores[f].is_nan() || r.position != rs[0].position || r.target_token != rs[0].target_token {
                    return Err(Error::Parse(format!("inconsistent records for sample `{id}`")));
                }
                scores[f] = r.score;
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(Error::Parse(format!("missing neurons for sample `{id}`")));
            }
            Ok(SampleScores {
                sample_id: id.to_string(),
                position: rs[0].position,
                target_token: rs[0].target_token,
                ffn_width: width,
                scores,
            })
        })
        .collect()
}

/// Scores every neuron of a model. Holds the unembedding projected onto
/// each neuron's output direction, so a score costs `O(vocab)`.
pub struct Attributor<'m> {
    model: &'m Model,
    /// Per layer `[vocab, ffn_width]`: `U · diag(final_norm) · fc2`.
    projected: Vec<Vec<f64>>,
    /// Per layer `[ffn_width]`: `|fc2_k|²`.
    col_norms: Vec<Vec<f64>>,
    /// `[vocab, d]`: `U · diag(final_norm)`.
    scaled_unembed: Vec<f64>,
}

impl<'m> Attributor<'m> {
    pub fn new(model: &'m Model) -> Self {
        let cfg = model.config();
        let (d, n, v) = (cfg.d_model, cfg.ffn_width, cfg.vocab_size);
        let w = model.weights();
        let scaled_unembed: Vec<f64> = w
            .unembedding
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&w.final_norm).map(|(u, g)| *u as f64 * *g as f64))
            .collect();
        let mut projected = Vec::with_capacity(cfg.n_layers);
        let mut col_norms = Vec::with_capacity(cfg.n_layers);
        for layer in &w.layers {
            let mut p = vec![0.0; v * n];
            for t in 0..v {
                let urow = &scaled_unembed[t * d..(t + 1) * d];
                for (i, u) in urow.iter().enumerate() {
                    let frow = &layer.fc2[i * n..(i + 1) * n];
                    for (k, f) in frow.iter().enumerate() {
                        p[t * n + k] += u * *f as f64;
                    }
                }
            }
            projected.push(p);
            let mut norms = vec![0.0; n];
            for i in 0..d {
                for (k, f) in layer.fc2[i * n..(i + 1) * n].iter().enumerate() {
                    norms[k] += (*f as f64) * (*f as f64);
                }
            }
            col_norms.push(norms);
        }
        Self {
            model,
            projected,
            col_norms,
            scaled_unembed,
        }
    }

    /// Scores of every neuron for `query`, using a trace recorded with
    /// coefficients on `query.tokens` (or any extension of them).
    pub fn scores(&self, trace: &ForwardTrace, query: &AttributionQuery) -> Result<SampleScores> {
        let cfg = self.model.config();
        let (d, n, v) = (cfg.d_model, cfg.ffn_width, cfg.vocab_size);
        let p = query.position;
        if !trace.has_coeffs() {
            return Err(Error::InvalidInput(
                "attribution needs a trace recorded with coefficients".into(),
            ));
        }
        if p >= trace.seq_len() || trace.tokens[..=p] != query.tokens[..] {
            return Err(Error::QueryMismatch(format!(
                "trace does not contain the tokens of query `{}`",
                query.sample_id
            )));
        }
        if query.target_token as usize >= v {
            return Err(Error::InvalidToken {
                token: query.target_token,
                vocab: v,
            });
        }
        let w_tok = query.target_token as usize;
        let mut scores = Vec::with_capacity(cfg.n_layers * n);
        for l in 0..cfg.n_layers {
            let r: Vec<f64> = trace
                .h_prev(l, p)
                .iter()
                .zip(trace.attn_out(l, p))
                .map(|(a, b)| *a as f64 + *b as f64)
                .collect();
            let coeffs = trace.coeffs(l, p).expect("checked above");
            let fc2 = &self.model.weights().layers[l].fc2;
            // Logits of r before normalization, and r·fc2_k.
            let base: Vec<f64> = self
                .scaled_unembed
                .chunks_exact(d)
                .map(|row| row.iter().zip(&r).map(|(u, x)| u * x).sum())
                .collect();
            let mut r_dot = vec![0.0; n];
            for (i, ri) in r.iter().enumerate() {
                for (k, f) in fc2[i * n..(i + 1) * n].iter().enumerate() {
                    r_dot[k] += ri * *f as f64;
                }
            }
            let r_sq: f64 = r.iter().map(|x| x * x).sum();
            let log_p = |sq: f64, logits: &mut dyn Iterator<Item = f64>| -> f64 {
                let inv = 1.0 / (sq / d as f64 + RMS_EPS as f64).sqrt();
                let z: Vec<f64> = logits.map(|x| x * inv).collect();
                z[w_tok] - linalg::log_sum_exp_f64(&z)
            };
            let without = log_p(r_sq, &mut base.iter().copied());
            let proj = &self.projected[l];
            for k in 0..n {
                let m = coeffs[k] as f64;
                if m == 0.0 {
                    scores.push(0.0);
                    continue;
                }
                let sq = r_sq + 2.0 * m * r_dot[k] + m * m * self.col_norms[l][k];
                let with = log_p(sq, &mut (0..v).map(|t| base[t] + m * proj[t * n + k]));
                scores.push(with - without);
            }
        }
        Ok(SampleScores {
            sample_id: query.sample_id.clone(),
            position: p,
            target_token: query.target_token,
            ffn_width: n,
            scores,
        })
    }
}

/// Score one query from scratch.
pub fn neuron_importance(model: &Model, query: &AttributionQuery) -> Result<SampleScores> {
    let trace = model.forward(&query.tokens, Record::Coefficients, None)?;
    Attributor::new(model).scores(&trace, query)
}

/// Score many queries; results keep the order of `queries`.
pub fn attribute_all(model: &Model, queries: &[AttributionQuery]) -> Result<Vec<SampleScores>> {
    let att = Attributor::new(model);
    queries
        .par_iter()
        .map(|q| {
            let trace = model.forward(&q.tokens, Record::Coefficients, None)?;
            att.scores(&trace, q)
        })
        .collect()
}

/// The `n` highest-scoring neurons; ties by `(layer, index)` ascending.
pub fn top_neurons(scores: &[f64], ffn_width: usize, n: usize) -> Vec<NeuronId> {
    rank(scores)
        .into_iter()
        .take(n)
        .map(|i| NeuronId::from_flat(i, ffn_width))
        .collect()
}

/// Flat indices sorted by score descending, ties by index.
pub(crate) fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionMode {
    /// Number of top-`n` memberships per layer.
    MembershipCount,
    /// Sum of the scores of each sample's top-`n` neurons per layer.
    ScoreSum,
}

/// Per-layer totals over every sample's top-`top_n` neurons.
pub fn layer_distribution(
    samples: &[SampleScores],
    mode: DistributionMode,
    top_n: usize,
) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no importance records".into()))?;
    let n_layers = first.scores.len() / first.ffn_width;
    let mut out = vec![0.0; n_layers];
    for s in samples {
        if s.ffn_width != first.ffn_width || s.scores.len() != first.scores.len() {
            return Err(Error::QueryMismatch("samples from different model shapes".into()));
        }
        for nid in s.top(top_n) {
            out[nid.layer] += match mode {
                DistributionMode::MembershipCount => 1.0,
                DistributionMode::ScoreSum => s.score(nid),
            };
        }
    }
    Ok(out)
}

/// Both sets must hold the same queries (same ids, positions, targets).
pub(crate) fn check_same_queries(a: &[SampleScores], b: &[SampleScores]) -> Result<()> {
    let key = |s: &SampleScores| (s.sample_id.clone(), s.position, s.target_token, s.scores.len());
    let ka: BTreeSet<_> = a.iter().map(key).collect();
    let kb: BTreeSet<_> = b.iter().map(key).collect();
    if ka.len() != a.len() || kb.len() != b.len() {
        return Err(Error::QueryMismatch("duplicate sample ids".into()));
    }
    if ka != kb {
        return Err(Error::QueryMismatch(
            "record sets were computed on different queries".into(),
        ));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("no importance records".into()));
    }
    Ok(())
}

/// Check that two query lists are identical.
pub fn check_queries_match(a: &[AttributionQuery], b: &[AttributionQuery]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.key() != y.key()) {
        return Err(Error::QueryMismatch("query lists differ".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronComparison {
    pub neuron: NeuronId,
    /// 1-based rank of the mean score in each model.
    pub rank_a: usize,
    pub rank_b: usize,
    pub score_a: f64,
    pub score_b: f64,
    pub delta: f64,
}

/// Mean score per neuron in each record set; sorted by `delta` descending,
/// ties by `(layer, index)`.
pub fn compare_models(a: &[SampleScores], b: &[SampleScores]) -> Result<Vec<NeuronComparison>> {
    check_same_queries(a, b)?;
    let width = a[0].ffn_width;
    let mean = |set: &[SampleScores]| -> Vec<f64> {
        let mut sorted: Vec<&SampleScores> = set.iter().collect();
        sorted.sort_by(|x, y| x.sample_id.cmp(&y.sample_id));
        let mut m = vec![0.0; sorted[0].scores.len()];
        for s in &sorted {
            for (acc, v) in m.iter_mut().zip(&s.scores) {
                *acc += v;
            }
        }
        m.iter().map(|v| v / set.len() as f64).collect()
    };
    let (ma, mb) = (mean(a), mean(b));
    let ranks = |m: &[f64]| {
        let mut r = vec![0; m.len()];
        for (pos, i) in rank(m).into_iter().enumerate() {
            r[i] = pos + 1;
        }
        r
    };
    let (ra, rb) = (ranks(&ma), ranks(&mb));
    let delta: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x - y).collect();
    Ok(rank(&delta)
        .into_iter()
        .map(|i| NeuronComparison {
            neuron: NeuronId::from_flat(i, width),
            rank_a: ra[i],
            rank_b: rb[i],
            score_a: ma[i],
            score_b: mb[i],
            delta: delta[i],
        })
        .collect())
}

/// SHA-256 over the canonical JSONL rows of `samples`, independent of sample order.
pub fn records_digest(samples: &[SampleScores]) -> String {
    let mut sorted: Vec<&SampleScores> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut h = Sha256::new();
    for s in sorted {
        h.update(serde_json::to_vec(s).expect("scores serialize"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, scores: Vec<f64>) -> SampleScores {
        SampleScores {
            sample_id: id.into(),
            position: 0,
            target_token: 0,
            ffn_width: 2,
            scores,
        }
    }

    #[test]
    fn top_neurons_order_and_ties() {
        // a = (0,0), b = (0,1), c = (1,0)
        let got = top_neurons(&[2.0, 1.0, 3.0, 0.0], 2, 2);
        assert_eq!(got, vec![NeuronId::new(1, 0), NeuronId::new(0, 0)]);
        let flat = top_neurons(&[0.5; 4], 2, 4);
        assert_eq!(
            flat,
            vec![NeuronId::new(0, 0), NeuronId::new(0, 1), NeuronId::new(1, 0), NeuronId::new(1, 1)]
        );
        let all: BTreeSet<_> = top_neurons(&[3.0, -1.0, 2.0, 7.0], 2, 4).into_iter().collect();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn layer_histograms() {
        let s1 = sample("1", vec![0.0, 0.0, 5.0, 4.0]);
        let h = layer_distribution(std::slice::from_ref(&s1), DistributionMode::MembershipCount, 2).unwrap();
        assert_eq!(h, vec![0.0, 2.0]);
        let s2 = sample("2", vec![3.0, 2.0, -1.0, -1.0]);
        let both = layer_distribution(&[s1.clone(), s2.clone()], DistributionMode::MembershipCount, 2).unwrap();
        assert_eq!(both, vec![2.0, 2.0]);
        assert_eq!(both.iter().sum::<f64>(), 4.0);
        let sums = layer_distribution(&[s1, s2], DistributionMode::ScoreSum, 2).unwrap();
        assert_eq!(sums, vec![5.0, 9.0]);
        assert!(layer_distribution(&[], DistributionMode::ScoreSum, 2).is_err());
    }

    #[test]
    fn compare_identity_and_halving() {
        let a = vec![sample("1", vec![1.0, 4.0, 2.0, 3.0]), sample("2", vec![1.0, 4.0, 2.0, 3.0])];
        let same = compare_models(&a, &a).unwrap();
        assert!(same.iter().all(|c| c.delta == 0.0 && c.rank_a == c.rank_b));
        let mut b = a.clone();
        for s in &mut b {
            s.scores[3] /= 2.0;
        }
        let cmp = compare_models(&a, &b).unwrap();
        assert_eq!(cmp[0].neuron, NeuronId::new(1, 1));
        assert!(cmp[0].delta > 0.0 && cmp[1].delta == 0.0);
        let mut other = a.clone();
        other[1].sample_id = "3".into();
        assert!(matches!(compare_models(&a, &other), Err(Error::QueryMismatch(_))));
    }

    #[test]
    fn rows_round_trip() {
        let s = vec![sample("1", vec![1.0, 4.0, 2.0, 3.0]), sample("2", vec![0.0, -4.0, 2.5, 3.0])];
        assert_eq!(from_rows(&to_rows(&s)).unwrap(), s);
        let mut rows = to_rows(&s);
        rows.pop();
        assert!(from_rows(&rows).is_err());
    }
}
