// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron selection, zero-activation editing, confusion-point replacement
//! and internal-preference statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{self, rank, records_digest, SampleScores};
use crate::error::{Error, Result};
use crate::langid::{ConfusionPoint, LangIdModel};
use crate::lens::token_languages;
use crate::metrics::{self, prompt_seed, BenchmarkRun, PromptRecord, ResponseDetail};
use crate::model::{heldout_loss, EditMask, GenerateParams, Model, NeuronId, TrainCorpus};
use crate::tokenizer;

pub const DEFAULT_EDIT_N: usize = 100;
pub const DEFAULT_PREFERENCE_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Frequency,
    Aggregate,
    Comparative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub record_digests: Vec<String>,
    pub n_samples: usize,
    /// Per-sample top-n used by frequency selection.
    pub per_sample_top: Option<usize>,
    /// Every ranking key was equal, so the order is the tie rule alone.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: Strategy,
    pub language: String,
    pub n: usize,
    pub neurons: Vec<NeuronId>,
    pub provenance: Provenance,
}

impl SelectionResult {
    pub fn mask(&self) -> EditMask {
        EditMask::from_neurons(self.neurons.iter().copied())
    }
}

fn shape_of(samples: &[SampleScores]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no importance records".into()))?;
    if samples
        .iter()
        .any(|s| s.ffn_width != first.ffn_width || s.scores.len() != first.scores.len())
    {
        return Err(Error::QueryMismatch("records from different model shapes".into()));
    }
    Ok((first.ffn_width, first.scores.len()))
}

/// Sum `f(sample)` per neuron in sample-id order so the result does not
/// depend on input order.
fn sum_by_neuron(samples: &[SampleScores], f: impl Fn(&SampleScores) -> Vec<f64>) -> Vec<f64> {
    let mut sorted: Vec<&SampleScores> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut acc = vec![0.0; samples[0].scores.len()];
    for s in sorted {
        for (a, v) in acc.iter_mut().zip(f(s)) {
            *a += v;
        }
    }
    acc
}

fn finish(
    strategy: Strategy,
    language: &str,
    key: &[f64],
    width: usize,
    n: usize,
    eligible: usize,
    provenance: Provenance,
) -> Result<SelectionResult> {
    if n == 0 || eligible < n {
        return Err(Error::InvalidInput(format!(
            "cannot select {n} neurons: only {eligible} are eligible"
        )));
    }
    let degenerate = key.iter().all(|k| *k == key[0]);
    Ok(SelectionResult {
        strategy,
        language: language.to_string(),
        n,
        neurons: rank(key)
            .into_iter()
            .take(n)
            .map(|i| NeuronId::from_flat(i, width))
            .collect(),
        provenance: Provenance {
            degenerate,
            ..provenance
        },
    })
}

/// Neurons that most often appear in a sample's top-`per_sample_top`.
pub fn select_frequency(
    samples: &[SampleScores],
    language: &str,
    per_sample_top: usize,
    n: usize,
) -> Result<SelectionResult> {
    let (width, total) = shape_of(samples)?;
    let counts = sum_by_neuron(samples, |s| {
        let mut c = vec![0.0; total];
        for nid in s.top(per_sample_top) {
            c[nid.flat(width)] = 1.0;
        }
        c
    });
    let eligible = counts.iter().filter(|c| **c > 0.0).count();
    finish(
        Strategy::Frequency,
        language,
        &counts,
        width,
        n,
        eligible,
        Provenance {
            record_digests: vec![records_digest(samples)],
            n_samples: samples.len(),
            per_sample_top: Some(per_sample_top),
            degenerate: false,
        },
    )
}

/// Neurons with the largest summed score over samples.
pub fn select_aggregate(samples: &[SampleScores], language: &str, n: usize) -> Result<SelectionResult> {
    let (width, total) = shape_of(samples)?;
    let sums = sum_by_neuron(samples, |s| s.scores.clone());
    finish(
        Strategy::Aggregate,
        language,
        &sums,
        width,
        n,
        total,
        Provenance {
            record_digests: vec![records_digest(samples)],
            n_samples: samples.len(),
            per_sample_top: None,
            degenerate: false,
        },
    )
}

/// Neurons whose summed score drops most from `original` to `reference`
/// on identical queries.
pub fn select_comparative(
    original: &[SampleScores],
    reference: &[SampleScores],
    language: &str,
    n: usize,
) -> Result<SelectionResult> {
    attribution::check_same_queries(original, reference)?;
    let (width, total) = shape_of(original)?;
    let a = sum_by_neuron(original, |s| s.scores.clone());
    let b = sum_by_neuron(reference, |s| s.scores.clone());
    let delta: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    finish(
        Strategy::Comparative,
        language,
        &delta,
        width,
        n,
        total,
        Provenance {
            record_digests: vec![records_digest(original), records_digest(reference)],
            n_samples: original.len(),
            per_sample_top: None,
            degenerate: false,
        },
    )
}

/// Benchmark with the selected neurons' coefficients forced to zero.
pub fn edited_benchmark(
    model: &Model,
    selection: &SelectionResult,
    prompts: &[PromptRecord],
    langid: &LangIdModel,
    params: &GenerateParams,
) -> Result<BenchmarkRun> {
    let mask = selection.mask();
    metrics::run_benchmark(model, prompts, langid, params, Some(&mask))
}

// ---------------------------------------------------------------------------
// Confusion-point replacement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpReplacement {
    pub id: String,
    pub original: ResponseDetail,
    pub confusion_point: Option<ConfusionPoint>,
    /// Token the reference model produced at the confusion point.
    pub reference_token: Option<u32>,
    /// False when the reference response ended before the confusion point.
    pub replaceable: bool,
    pub replaced: ResponseDetail,
}

fn generate_detail(
    model: &Model,
    prompt: &PromptRecord,
    langid: &LangIdModel,
    params: &GenerateParams,
    mask: Option<&EditMask>,
    forced: &BTreeMap<usize, u32>,
) -> Result<ResponseDetail> {
    let seed = prompt_seed(params.seed, &prompt.id);
    let tokens = tokenizer::encode_prompt(&prompt.prompt);
    let g = model.generate(&tokens, &GenerateParams { seed, ..*params }, mask, forced)?;
    let resp = g.response().to_vec();
    let (text, lines, passed, cp) =
        metrics::score_text(langid, &prompt.id, &prompt.language, &resp, g.prompt_len)?;
    let empty = text.trim().is_empty();
    Ok(ResponseDetail {
        id: prompt.id.clone(),
        language: prompt.language.clone(),
        source: prompt.source.clone(),
        seed,
        prompt_tokens: tokens,
        response_tokens: resp,
        text,
        lines: if empty { Vec::new() } else { lines },
        passed: (!empty).then_some(passed),
        confusion_point: if empty { None } else { cp },
        failure: empty.then(|| "empty response".into()),
    })
}

/// Replace the token at the first confusion point with the reference
/// model's token at the same position (under the same prompt and seed) and
/// let `model` continue from there. One replacement per response.
pub fn cp_replace(
    model: &Model,
    reference: &Model,
    prompt: &PromptRecord,
    langid: &LangIdModel,
    params: &GenerateParams,
) -> Result<CpReplacement> {
    if model.config().vocab_size != reference.config().vocab_size {
        return Err(Error::InvalidInput(
            "model and reference use different vocabularies".into(),
        ));
    }
    let original = generate_detail(model, prompt, langid, params, None, &BTreeMap::new())?;
    let Some(cp) = original.confusion_point.clone() else {
        return Ok(CpReplacement {
            id: prompt.id.clone(),
            replaced: original.clone(),
            original,
            confusion_point: None,
            reference_token: None,
            replaceable: true,
        });
    };
    let pos = cp.token_position;
    let start = original.prompt_tokens.len();
    let ref_params = GenerateParams {
        max_new: pos - start + 1,
        seed: prompt_seed(params.seed, &prompt.id),
        ..*params
    };
    let r = reference.generate(&original.prompt_tokens, &ref_params, None, &BTreeMap::new())?;
    let ref_token = r.tokens.get(pos).copied();
    let replaced = match ref_token {
        Some(t) => generate_detail(model, prompt, langid, params, None, &BTreeMap::from([(pos, t)]))?,
        None => original.clone(),
    };
    let replaceable = ref_token.is_some();
    Ok(CpReplacement {
        id: prompt.id.clone(),
        original,
        confusion_point: Some(cp),
        reference_token: ref_token,
        replaceable,
        replaced,
    })
}

/// Run [`cp_replace`] over prompts (in parallel, in prompt order).
pub fn cp_replace_all(
    model: &Model,
    reference: &Model,
    prompts: &[PromptRecord],
    langid: &LangIdModel,
    params: &GenerateParams,
) -> Result<Vec<CpReplacement>> {
    metrics::validate_prompts(prompts)?;
    prompts
        .par_iter()
        .map(|p| cp_replace(model, reference, p, langid, params))
        .collect()
}

// ---------------------------------------------------------------------------
// Internal preference
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceStats {
    pub k: usize,
    /// Mean number of target-language tokens in the top-k.
    pub mean_count: f64,
    /// Mean summed probability of those tokens (raw, not renormalized).
    pub mean_prob: f64,
    pub n_responses: usize,
    pub n_failed: usize,
}

/// Target-language share of the top-`k` candidates at each response's
/// final generated position.
pub fn internal_preference(
    model: &Model,
    prompts: &[PromptRecord],
    langid: &LangIdModel,
    k: usize,
    params: &GenerateParams,
    mask: Option<&EditMask>,
) -> Result<PreferenceStats> {
    metrics::validate_prompts(prompts)?;
    if k == 0 || k > model.config().vocab_size {
        return Err(Error::InvalidInput(format!("k = {k} outside [1, vocab]")));
    }
    if let Some(m) = mask {
        m.validate(model.config())?;
    }
    let langs = token_languages(langid, model.config().vocab_size);
    let per_prompt: Vec<Option<(f64, f64)>> = prompts
        .par_iter()
        .map(|p| {
            let seed = prompt_seed(params.seed, &p.id);
            let tokens = tokenizer::encode_prompt(&p.prompt);
            let gp = GenerateParams {
                seed,
                snapshot_k: k,
                ..*params
            };
            let g = model.generate(&tokens, &gp, mask, &BTreeMap::new()).ok()?;
            let last = g.steps.last()?;
            let (mut c, mut pr) = (0.0, 0.0);
            for (t, prob) in &last.top {
                if langs[*t as usize].as_deref() == Some(p.language.as_str()) {
                    c += 1.0;
                    pr += *prob as f64;
                }
            }
            Some((c, pr))
        })
        .collect();
    let ok: Vec<(f64, f64)> = per_prompt.iter().flatten().copied().collect();
    let n = ok.len().max(1) as f64;
    Ok(PreferenceStats {
        k,
        mean_count: ok.iter().map(|x| x.0).sum::<f64>() / n,
        mean_prob: ok.iter().map(|x| x.1).sum::<f64>() / n,
        n_responses: ok.len(),
        n_failed: prompts.len() - ok.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityDelta {
    pub language: String,
    pub unedited: f64,
    pub edited: f64,
}

/// Held-out perplexity per language with and without `mask`.
pub fn perplexity_delta(
    model: &Model,
    corpus: &TrainCorpus,
    mask: &EditMask,
    seq_len: usize,
    windows: usize,
) -> Result<Vec<PerplexityDelta>> {
    corpus
        .languages
        .iter()
        .map(|l| {
            Ok(PerplexityDelta {
                language: l.lang.clone(),
                unedited: (heldout_loss(model, &l.heldout, seq_len, windows, None)? as f64).exp(),
                edited: (heldout_loss(model, &l.heldout, seq_len, windows, Some(mask))? as f64).exp(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(id: &str, scores: Vec<f64>) -> SampleScores {
        SampleScores {
            sample_id: id.into(),
            position: 3,
            target_token: 7,
            ffn_width: 3,
            scores,
        }
    }

    #[test]
    fn frequency_counts_and_ties() {
        // Top-1 per sample: a=(0,0) three times, c=(0,2) twice, b=(0,1) once.
        let samples = vec![
            s("1", vec![9.0, 0.0, 0.0]),
            s("2", vec![9.0, 0.0, 0.0]),
            s("3", vec![9.0, 0.0, 0.0]),
            s("4", vec![0.0, 0.0, 9.0]),
            s("5", vec![0.0, 0.0, 9.0]),
            s("6", vec![0.0, 9.0, 0.0]),
        ];
        let r = select_frequency(&samples, "B", 1, 2).unwrap();
        assert_eq!(r.neurons, vec![NeuronId::new(0, 0), NeuronId::new(0, 2)]);
        let disjoint = vec![s("1", vec![0.0, 0.0, 1.0]), s("2", vec![1.0, 0.0, 0.0])];
        let r = select_frequency(&disjoint, "B", 1, 2).unwrap();
        assert_eq!(r.neurons, vec![NeuronId::new(0, 0), NeuronId::new(0, 2)]);
        assert!(select_frequency(&disjoint, "B", 1, 3).is_err());
    }

    #[test]
    fn aggregate_sums() {
        let one = vec![s("1", vec![0.2, 3.0, 1.0])];
        let r = select_aggregate(&one, "B", 2).unwrap();
        assert_eq!(r.neurons, one[0].top(2));
        let two = vec![s("1", vec![1.0, 1.5, 0.0]), s("2", vec![1.0, 0.0, 0.0])];
        let r = select_aggregate(&two, "B", 1).unwrap();
        assert_eq!(r.neurons, vec![NeuronId::new(0, 0)]);
        let rev: Vec<_> = two.iter().rev().cloned().collect();
        assert_eq!(select_aggregate(&rev, "B", 2).unwrap(), select_aggregate(&two, "B", 2).unwrap());
    }

    #[test]
    fn comparative_deltas() {
        let orig = vec![s("1", vec![1.0, 0.5, 1.0]), s("2", vec![1.0, 0.5, 1.0])];
        let same = select_comparative(&orig, &orig, "B", 2).unwrap();
        assert!(same.provenance.degenerate);
        assert_eq!(same.neurons, vec![NeuronId::new(0, 0), NeuronId::new(0, 1)]);
        let mut reference = orig.clone();
        for r in &mut reference {
            r.scores[2] = 0.0;
        }
        let sel = select_comparative(&orig, &reference, "B", 1).unwrap();
        assert_eq!(sel.neurons, vec![NeuronId::new(0, 2)]);
        assert!(!sel.provenance.degenerate);
        let mut shifted = orig.clone();
        shifted[0].position = 4;
        assert!(matches!(
            select_comparative(&orig, &shifted, "B", 1),
            Err(Error::QueryMismatch(_))
        ));
    }
}
