// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-level pass rate, line accuracy and the benchmark driver.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::langid::{self, ConfusionPoint, LangIdModel, ResponseView};
use crate::model::{EditMask, GenerateParams, Model};
use crate::tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub language: String,
    pub prompt: String,
    pub source: String,
}

/// Ids must be unique within a prompt file.
pub fn validate_prompts(prompts: &[PromptRecord]) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompt list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for p in prompts {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate prompt id `{}`", p.id)));
        }
    }
    Ok(())
}

/// Expected language and the label of every line; `None` marks a skipped line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub expected: String,
    pub labels: Vec<Option<String>>,
}

impl ScoredResponse {
    pub fn new(expected: &str, labels: &[Option<&str>]) -> Self {
        Self {
            expected: expected.into(),
            labels: labels.iter().map(|l| l.map(String::from)).collect(),
        }
    }

    /// All scored lines match the expected language (vacuously true if none).
    pub fn passes(&self) -> bool {
        self.labels.iter().flatten().all(|l| *l == self.expected)
    }

    pub fn scored(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn correct(&self) -> usize {
        self.labels.iter().flatten().filter(|l| **l == self.expected).count()
    }
}

/// Percentage of responses whose every scored line is in the expected language.
pub fn line_pass_rate(responses: &[ScoredResponse]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::InvalidInput("line pass rate of zero responses".into()));
    }
    let pass = responses.iter().filter(|r| r.passes()).count();
    Ok(100.0 * pass as f64 / responses.len() as f64)
}

/// Percentage of scored lines in the expected language, pooled over responses.
pub fn line_accuracy(responses: &[ScoredResponse]) -> Result<f64> {
    let scored: usize = responses.iter().map(ScoredResponse::scored).sum();
    if scored == 0 {
        return Err(Error::InvalidInput("line accuracy with zero scored lines".into()));
    }
    let correct: usize = responses.iter().map(ScoredResponse::correct).sum();
    Ok(100.0 * correct as f64 / scored as f64)
}

// ---------------------------------------------------------------------------
// Per-response detail
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub span: (usize, usize),
    pub skipped: bool,
    pub lang: Option<String>,
    pub confidence: Option<f32>,
}

/// Everything produced for one prompt. A line of the detail JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDetail {
    pub id: String,
    pub language: String,
    pub source: String,
    pub seed: u64,
    pub prompt_tokens: Vec<u32>,
    /// Generated tokens, trailing EOS removed.
    pub response_tokens: Vec<u32>,
    pub text: String,
    pub lines: Vec<LineRecord>,
    /// `None` when generation failed.
    pub passed: Option<bool>,
    pub confusion_point: Option<ConfusionPoint>,
    pub failure: Option<String>,
}

impl ResponseDetail {
    /// Prompt followed by the response.
    pub fn full_tokens(&self) -> Vec<u32> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.response_tokens);
        t
    }

    pub fn scored(&self) -> Option<ScoredResponse> {
        self.failure.is_none().then(|| ScoredResponse {
            expected: self.language.clone(),
            labels: self
                .lines
                .iter()
                .map(|l| if l.skipped { None } else { l.lang.clone() })
                .collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: String,
    /// `None` when every response for the language failed to generate.
    pub lpr: Option<f64>,
    /// `None` when no line was scored.
    pub acc: Option<f64>,
    pub n_responses: usize,
    pub n_lines: usize,
    pub n_skipped_lines: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_id: String,
    pub mask_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub languages: Vec<LanguageMetrics>,
    /// Unweighted mean over languages with a value.
    pub avg_lpr: Option<f64>,
    pub avg_acc: Option<f64>,
    pub metadata: RunMetadata,
}

impl MetricsReport {
    pub fn language(&self, lang: &str) -> Option<&LanguageMetrics> {
        self.languages.iter().find(|l| l.language == lang)
    }

    /// One row per language plus an `avg` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["language", "lpr", "acc", "n_responses", "n_lines", "n_skipped_lines", "n_failed"])
            .map_err(csv_err)?;
        for l in &self.languages {
            w.write_record([
                l.language.clone(),
                f(l.lpr),
                f(l.acc),
                l.n_responses.to_string(),
                l.n_lines.to_string(),
                l.n_skipped_lines.to_string(),
                l.n_failed.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let sum = |g: fn(&LanguageMetrics) -> usize| self.languages.iter().map(g).sum::<usize>().to_string();
        w.write_record([
            "avg".to_string(),
            f(self.avg_lpr),
            f(self.avg_acc),
            sum(|l| l.n_responses),
            sum(|l| l.n_lines),
            sum(|l| l.n_skipped_lines),
            sum(|l| l.n_failed),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregate a report from per-response detail. Order of `details` is irrelevant.
pub fn report_from_details(details: &[ResponseDetail], metadata: RunMetadata) -> MetricsReport {
    let mut by_lang: BTreeMap<&str, Vec<&ResponseDetail>> = BTreeMap::new();
    for d in details {
        by_lang.entry(d.language.as_str()).or_default().push(d);
    }
    let languages: Vec<LanguageMetrics> = by_lang
        .into_iter()
        .map(|(lang, ds)| {
            let scored: Vec<ScoredResponse> = ds.iter().filter_map(|d| d.scored()).collect();
            LanguageMetrics {
                language: lang.to_string(),
                lpr: line_pass_rate(&scored).ok(),
                acc: line_accuracy(&scored).ok(),
                n_responses: scored.len(),
                n_lines: scored.iter().map(ScoredResponse::scored).sum(),
                n_skipped_lines: scored
                    .iter()
                    .map(|s| s.labels.iter().filter(|l| l.is_none()).count())
                    .sum(),
                n_failed: ds.len() - scored.len(),
            }
        })
        .collect();
    MetricsReport {
        avg_lpr: mean(languages.iter().filter_map(|l| l.lpr)),
        avg_acc: mean(languages.iter().filter_map(|l| l.acc)),
        languages,
        metadata,
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub report: MetricsReport,
    /// In prompt order.
    pub details: Vec<ResponseDetail>,
}

/// Per-prompt sampling seed: independent of prompt order and thread count.
pub fn prompt_seed(run_seed: u64, prompt_id: &str) -> u64 {
    langid::fnv1a64(prompt_id.as_bytes()) ^ run_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Score an already-generated response text.
pub fn score_text(
    langid: &LangIdModel,
    id: &str,
    expected: &str,
    tokens: &[u32],
    start_position: usize,
) -> Result<(String, Vec<LineRecord>, bool, Option<ConfusionPoint>)> {
    let detok = tokenizer::detokenize(tokens);
    let lines: Vec<LineRecord> = langid
        .label_lines(&detok.text)
        .into_iter()
        .map(|l| {
            let skipped = l.line.skipped || l.label.is_none();
            LineRecord {
                span: l.line.span,
                skipped,
                lang: l.label.as_ref().map(|p| p.lang.clone()),
                confidence: l.label.map(|p| p.confidence),
            }
        })
        .collect();
    let passed = lines
        .iter()
        .filter(|l| !l.skipped)
        .all(|l| l.lang.as_deref() == Some(expected));
    let cp = langid::detect_confusion_point(
        &ResponseView {
            sample_id: id,
            tokens,
            text: &detok.text,
            token_chars: &detok.token_chars,
            start_position,
        },
        expected,
        langid,
    )?;
    Ok((detok.text, lines, passed, cp))
}

fn run_one(
    model: &Model,
    prompt: &PromptRecord,
    langid: &LangIdModel,
    params: &GenerateParams,
    mask: Option<&EditMask>,
) -> ResponseDetail {
    let seed = prompt_seed(params.seed, &prompt.id);
    let tokens = tokenizer::encode_prompt(&prompt.prompt);
    let mut detail = ResponseDetail {
        id: prompt.id.clone(),
        language: prompt.language.clone(),
        source: prompt.source.clone(),
        seed,
        prompt_tokens: tokens.clone(),
        response_tokens: Vec::new(),
        text: String::new(),
        lines: Vec::new(),
        passed: None,
        confusion_point: None,
        failure: None,
    };
    let p = GenerateParams { seed, ..*params };
    let outcome = model
        .generate(&tokens, &p, mask, &BTreeMap::new())
        .and_then(|g| {
            let resp = g.response().to_vec();
            let scored = score_text(langid, &prompt.id, &prompt.language, &resp, g.prompt_len)?;
            Ok((resp, scored))
        });
    match outcome {
        Ok((resp, (text, lines, passed, cp))) => {
            detail.response_tokens = resp;
            if text.trim().is_empty() {
                detail.text = text;
                detail.failure = Some("empty response".into());
            } else {
                detail.text = text;
                detail.lines = lines;
                detail.passed = Some(passed);
                detail.confusion_point = cp;
            }
        }
        Err(e) => detail.failure = Some(format!("{}: {e}", e.category())),
    }
    detail
}

/// Generate a response for every prompt and score it line by line.
///
/// Prompts run in parallel on the current rayon pool; results are identical
/// for any thread count.
pub fn run_benchmark(
    model: &Model,
    prompts: &[PromptRecord],
    langid: &LangIdModel,
    params: &GenerateParams,
    mask: Option<&EditMask>,
) -> Result<BenchmarkRun> {
    validate_prompts(prompts)?;
    if let Some(p) = prompts.iter().find(|p| !langid.has_label(&p.language)) {
        return Err(Error::InvalidInput(format!(
            "language `{}` of prompt `{}` is not covered by the language identifier",
            p.language, p.id
        )));
    }
    if let Some(m) = mask {
        m.validate(model.config())?;
    }
    let details: Vec<ResponseDetail> = prompts
        .par_iter()
        .map(|p| run_one(model, p, langid, params, mask))
        .collect();
    let metadata = RunMetadata {
        model_id: model.model_id().to_string(),
        mask_digest: mask.map_or_else(|| EditMask::new().digest(), EditMask::digest),
        seed: params.seed,
    };
    Ok(BenchmarkRun {
        report: report_from_details(&details, metadata),
        details,
    })
}
