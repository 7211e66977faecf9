// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy / temperature sampling with a forced-token hook.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EditMask, Model};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tokenizer::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub max_new: usize,
    /// 0 means greedy.
    pub temperature: f32,
    pub seed: u64,
    pub stop_at_eos: bool,
    /// Size of the per-step top-k snapshot.
    pub snapshot_k: usize,
}

impl Default for GenerateParams {
    fn default() -> Self {
        Self {
            max_new: 64,
            temperature: 0.0,
            seed: 0,
            stop_at_eos: true,
            snapshot_k: 10,
        }
    }
}

/// Top-k of the output distribution that produced the token at `position`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub position: usize,
    pub token: u32,
    pub top: Vec<(u32, f32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Prompt followed by every generated token (including a final EOS).
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub steps: Vec<StepSnapshot>,
    pub stopped_at_eos: bool,
}

impl Generation {
    /// Generated tokens without a trailing EOS.
    pub fn response(&self) -> &[u32] {
        let resp = &self.tokens[self.prompt_len..];
        match resp.last() {
            Some(&EOS) if self.stopped_at_eos => &resp[..resp.len() - 1],
            _ => resp,
        }
    }
}

impl Model {
    /// Generate up to `params.max_new` tokens after `prompt`.
    ///
    /// `forced` maps absolute positions to tokens that replace whatever the
    /// model would have produced there; decoding continues from the forced
    /// token. Every forced position must lie in
    /// `[prompt.len(), prompt.len() + max_new)` and must be reached.
    pub fn generate(
        &self,
        prompt: &[u32],
        params: &GenerateParams,
        mask: Option<&EditMask>,
        forced: &BTreeMap<usize, u32>,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::EmptySequence);
        }
        if params.temperature.is_nan() || params.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be >= 0".into()));
        }
        self.check_tokens(prompt)?;
        let start = prompt.len();
        let end = start + params.max_new;
        if let Some((&p, _)) = forced.iter().find(|(&p, _)| p < start || p >= end) {
            return Err(Error::ForcedOutOfRange {
                position: p,
                start,
                end,
            });
        }
        let max_len = end.min(self.config.max_seq_len);
        let mut state = self.decode_state(mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut tokens = prompt.to_vec();
        let mut logits = Vec::new();
        for &t in prompt {
            logits = state.step(t)?;
        }
        let mut steps = Vec::new();
        let mut stopped_at_eos = false;
        while tokens.len() < max_len {
            let position = tokens.len();
            let mut probs = logits.clone();
            linalg::softmax_in_place(&mut probs);
            let sampled = if params.temperature == 0.0 {
                linalg::argmax(&logits) as u32
            } else {
                sample(&logits, params.temperature, &mut rng)
            };
            let token = forced.get(&position).copied().unwrap_or(sampled);
            let top = linalg::top_k(&probs, params.snapshot_k)
                .into_iter()
                .map(|(i, p)| (i as u32, p))
                .collect();
            steps.push(StepSnapshot {
                position,
                token,
                top,
            });
            tokens.push(token);
            if params.stop_at_eos && token == EOS {
                stopped_at_eos = true;
                break;
            }
            if tokens.len() < max_len {
                logits = state.step(token)?;
            }
        }
        if let Some((&p, _)) = forced.range(tokens.len()..).next() {
            return Err(Error::ForcedOutOfRange {
                position: p,
                start,
                end: tokens.len(),
            });
        }
        Ok(Generation {
            tokens,
            prompt_len: start,
            steps,
            stopped_at_eos,
        })
    }
}

fn sample(logits: &[f32], temperature: f32, rng: &mut ChaCha8Rng) -> u32 {
    let t = temperature as f64;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / t).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    (weights.len() - 1) as u32
}
