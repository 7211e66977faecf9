// SPDX-License-Identifier: MIT OR Apache-2.0

//! Character n-gram linear language identifier, line segmentation and
//! confusion-point detection.
//!
//! The classifier is a bag of hashed character n-grams: each n-gram indexes
//! a row of `embedding`, the rows are averaged, and a linear layer produces
//! one logit per language. N-grams are hashed with 64-bit FNV-1a over their
//! UTF-8 bytes, modulo `bucket_count`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::linalg;

const CHECKPOINT_KIND: &str = "langid";

/// Lines with fewer non-whitespace characters than this are skipped.
pub const MIN_LINE_CHARS: usize = 5;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangIdParams {
    /// Inclusive character n-gram length range.
    pub ngram_range: (usize, usize),
    pub buckets: usize,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    /// Fraction of lines held out for the accuracy report.
    pub heldout_fraction: f64,
    pub min_line_chars: usize,
}

impl Default for LangIdParams {
    fn default() -> Self {
        Self {
            ngram_range: (1, 3),
            buckets: 1 << 14,
            dim: 16,
            epochs: 5,
            lr: 0.5,
            seed: 1,
            heldout_fraction: 0.1,
            min_line_chars: MIN_LINE_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangIdModel {
    ngram_range: (usize, usize),
    bucket_count: usize,
    dim: usize,
    min_line_chars: usize,
    /// `[bucket_count, dim]`
    embedding: Vec<f32>,
    /// `[labels, dim]`
    classifier: Vec<f32>,
    labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub lang: String,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangIdReport {
    pub n_train: usize,
    pub n_heldout: usize,
    pub heldout_accuracy: f64,
}

/// Train a classifier on `(lang, text)` pairs.
pub fn train_langid(
    corpus: &[(String, String)],
    params: &LangIdParams,
) -> Result<(LangIdModel, LangIdReport)> {
    let (lo, hi) = params.ngram_range;
    if lo == 0 || lo > hi || params.buckets == 0 || params.dim == 0 {
        return Err(Error::InvalidInput(
            "need 1 <= min n-gram <= max n-gram, buckets >= 1, dim >= 1".into(),
        ));
    }
    let mut labels: Vec<String> = corpus.iter().map(|(l, _)| l.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::InvalidInput(
            "language ID needs at least two languages".into(),
        ));
    }
    for l in &labels {
        let n = corpus.iter().filter(|(x, _)| x == l).count();
        if n < 100 {
            return Err(Error::InvalidInput(format!(
                "language `{l}` has {n} lines; at least 100 are required"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let bound = 1.0 / params.dim as f32;
    let embedding = (0..params.buckets * params.dim)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    let mut model = LangIdModel {
        ngram_range: params.ngram_range,
        bucket_count: params.buckets,
        dim: params.dim,
        min_line_chars: params.min_line_chars,
        embedding,
        classifier: vec![0.0; labels.len() * params.dim],
        labels,
    };

    let mut examples: Vec<(usize, Vec<usize>)> = corpus
        .iter()
        .filter_map(|(l, text)| {
            let feats = model.features(text);
            let y = model.labels.binary_search(l).expect("label collected above");
            (!feats.is_empty()).then_some((y, feats))
        })
        .collect();
    examples.shuffle(&mut rng);
    let n_heldout = ((examples.len() as f64) * params.heldout_fraction).round() as usize;
    let (heldout, train) = examples.split_at(n_heldout);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let total = (params.epochs * train.len()).max(1) as f32;
    let mut seen = 0usize;
    let mut hidden = vec![0.0; params.dim];
    let mut grad_hidden = vec![0.0; params.dim];
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let lr = params.lr * (1.0 - seen as f32 / total);
            seen += 1;
            let (y, feats) = &train[i];
            let probs = model.probs_into(feats, &mut hidden);
            grad_hidden.iter_mut().for_each(|g| *g = 0.0);
            for (j, p) in probs.iter().enumerate() {
                let g = p - if j == *y { 1.0 } else { 0.0 };
                let row = &mut model.classifier[j * params.dim..(j + 1) * params.dim];
                for (e, (w, h)) in row.iter_mut().zip(&hidden).enumerate() {
                    grad_hidden[e] += g * *w;
                    *w -= lr * g * h;
                }
            }
            let scale = lr / feats.len() as f32;
            for &f in feats {
                let row = &mut model.embedding[f * params.dim..(f + 1) * params.dim];
                for (w, g) in row.iter_mut().zip(&grad_hidden) {
                    *w -= scale * g;
                }
            }
        }
    }

    let correct = heldout
        .iter()
        .filter(|(y, feats)| linalg::argmax(&model.probs_into(feats, &mut hidden)) == *y)
        .count();
    let report = LangIdReport {
        n_train: train.len(),
        n_heldout: heldout.len(),
        heldout_accuracy: if heldout.is_empty() {
            f64::NAN
        } else {
            correct as f64 / heldout.len() as f64
        },
    };
    Ok((model, report))
}

impl LangIdModel {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn ngram_range(&self) -> (usize, usize) {
        self.ngram_range
    }

    pub fn min_line_chars(&self) -> usize {
        self.min_line_chars
    }

    pub fn has_label(&self, lang: &str) -> bool {
        self.labels.iter().any(|l| l == lang)
    }

    /// Bucket indices of every n-gram of the trimmed text.
    pub fn features(&self, text: &str) -> Vec<usize> {
        let chars: Vec<char> = text.trim().chars().collect();
        let (lo, hi) = self.ngram_range;
        let mut out = Vec::new();
        let mut buf = String::new();
        for n in lo..=hi {
            if n > chars.len() {
                break;
            }
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                out.push((fnv1a64(buf.as_bytes()) % self.bucket_count as u64) as usize);
            }
        }
        out
    }

    fn probs_into(&self, feats: &[usize], hidden: &mut [f32]) -> Vec<f32> {
        hidden.iter_mut().for_each(|h| *h = 0.0);
        for &f in feats {
            for (h, e) in hidden
                .iter_mut()
                .zip(&self.embedding[f * self.dim..(f + 1) * self.dim])
            {
                *h += e;
            }
        }
        let inv = 1.0 / feats.len() as f32;
        hidden.iter_mut().for_each(|h| *h *= inv);
        let mut logits = vec![0.0; self.labels.len()];
        linalg::matvec(&self.classifier, hidden, &mut logits);
        linalg::softmax_in_place(&mut logits);
        logits
    }

    /// Most likely language of `text`, or `None` when the text has no
    /// n-gram features (empty, whitespace-only, or shorter than the minimum
    /// n-gram length).
    pub fn classify_line(&self, text: &str) -> Option<Prediction> {
        let feats = self.features(text);
        if feats.is_empty() {
            return None;
        }
        let mut hidden = vec![0.0; self.dim];
        let probs = self.probs_into(&feats, &mut hidden);
        let best = linalg::argmax(&probs);
        Some(Prediction {
            lang: self.labels[best].clone(),
            confidence: probs[best],
        })
    }

    /// Segment `text` and classify every line that is not skipped.
    pub fn label_lines(&self, text: &str) -> Vec<LabeledLine> {
        segment_lines_with(text, self.min_line_chars)
            .into_iter()
            .map(|line| {
                let label = if line.skipped {
                    None
                } else {
                    self.classify_line(&line.text)
                };
                LabeledLine { line, label }
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "ngram_range": [self.ngram_range.0, self.ngram_range.1],
            "bucket_count": self.bucket_count,
            "dim": self.dim,
            "min_line_chars": self.min_line_chars,
            "labels": self.labels,
        });
        let mut c = Container::new(CHECKPOINT_KIND, meta);
        c.push(NamedTensor::new(
            "embedding",
            vec![self.bucket_count, self.dim],
            self.embedding.clone(),
        ));
        c.push(NamedTensor::new(
            "classifier",
            vec![self.labels.len(), self.dim],
            self.classifier.clone(),
        ));
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Meta {
            ngram_range: (usize, usize),
            bucket_count: usize,
            dim: usize,
            min_line_chars: usize,
            labels: Vec<String>,
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::CorruptHeader(format!("langid meta: {e}")))?;
        let mut sorted = meta.labels.clone();
        sorted.sort();
        sorted.dedup();
        if meta.bucket_count == 0 || sorted != meta.labels || meta.labels.len() < 2 {
            return Err(Error::CorruptHeader(
                "langid needs bucket_count >= 1 and >= 2 unique sorted labels".into(),
            ));
        }
        let embedding = c.take("embedding", &[meta.bucket_count, meta.dim])?;
        let classifier = c.take("classifier", &[meta.labels.len(), meta.dim])?;
        Ok(Self {
            ngram_range: meta.ngram_range,
            bucket_count: meta.bucket_count,
            dim: meta.dim,
            min_line_chars: meta.min_line_chars,
            embedding,
            classifier,
            labels: meta.labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn digest(&self) -> String {
        let bytes = self.to_container().to_bytes().expect("langid serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

// ---------------------------------------------------------------------------
// Lines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Line {
    pub text: String,
    /// Half-open character span `[start, end)` in the segmented text.
    pub span: (usize, usize),
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledLine {
    pub line: Line,
    /// `None` for skipped or unclassifiable lines.
    pub label: Option<Prediction>,
}

/// Split on `\n` with the default minimum line length.
pub fn segment_lines(text: &str) -> Vec<Line> {
    segment_lines_with(text, MIN_LINE_CHARS)
}

/// Split on `\n`; lines with fewer than `min_chars` non-whitespace
/// characters are flagged `skipped`. The empty string has no lines.
pub fn segment_lines_with(text: &str, min_chars: usize) -> Vec<Line> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut start = 0usize;
    for piece in text.split('\n') {
        let len = piece.chars().count();
        let visible = piece.chars().filter(|c| !c.is_whitespace()).count();
        out.push(Line {
            text: piece.to_string(),
            span: (start, start + len),
            skipped: visible < min_chars.max(1),
        });
        start += len + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Confusion points
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPoint {
    pub sample_id: String,
    pub line_index: usize,
    /// Absolute index (prompt included) of the first token of the offending line.
    pub token_position: usize,
    pub detected_lang: String,
    pub expected_lang: String,
    pub confidence: f32,
}

/// A generated response and how its tokens map onto its text.
#[derive(Debug, Clone, Copy)]
pub struct ResponseView<'a> {
    pub sample_id: &'a str,
    pub tokens: &'a [u32],
    pub text: &'a str,
    /// Character index each token starts at (see [`crate::tokenizer::detokenize`]).
    pub token_chars: &'a [usize],
    /// Absolute position of `tokens[0]` in the full sequence.
    pub start_position: usize,
}

/// First line (in order) whose language differs from `expected`, located at
/// the first token overlapping that line. Skipped lines neither pass nor fail.
pub fn detect_confusion_point(
    response: &ResponseView<'_>,
    expected: &str,
    model: &LangIdModel,
) -> Result<Option<ConfusionPoint>> {
    let n_chars = response.text.chars().count();
    if response.token_chars.len() != response.tokens.len() {
        return Err(Error::InvalidInput(format!(
            "token→char map has {} entries for {} tokens",
            response.token_chars.len(),
            response.tokens.len()
        )));
    }
    if response.token_chars.windows(2).any(|w| w[0] > w[1])
        || response.token_chars.iter().any(|&c| c > n_chars)
    {
        return Err(Error::InvalidInput(
            "token→char map is not monotone within the text".into(),
        ));
    }
    for (line_index, labeled) in model.label_lines(response.text).into_iter().enumerate() {
        let Some(pred) = labeled.label else { continue };
        if pred.lang == expected {
            continue;
        }
        let (start, end) = labeled.line.span;
        let first = response
            .token_chars
            .iter()
            .position(|&c| c >= start && c < end)
            .ok_or_else(|| {
                Error::InvalidInput(format!("no token overlaps line {line_index}"))
            })?;
        return Ok(Some(ConfusionPoint {
            sample_id: response.sample_id.to_string(),
            line_index,
            token_position: response.start_position + first,
            detected_lang: pred.lang,
            expected_lang: expected.to_string(),
            confidence: pred.confidence,
        }));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer;

    fn corpus() -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut out = Vec::new();
        for (lang, alpha) in [("A", "abcdefghijklm"), ("B", "nopqrstuvwxyz")] {
            let chars: Vec<char> = alpha.chars().collect();
            for _ in 0..150 {
                let words: Vec<String> = (0..rng.gen_range(2..6))
                    .map(|_| {
                        (0..rng.gen_range(2..6))
                            .map(|_| chars[rng.gen_range(0..chars.len())])
                            .collect()
                    })
                    .collect();
                out.push((lang.to_string(), words.join(" ") + "."));
            }
        }
        out
    }

    fn small_params() -> LangIdParams {
        LangIdParams {
            buckets: 4096,
            ..LangIdParams::default()
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn separates_disjoint_alphabets() {
        let (m, rep) = train_langid(&corpus(), &small_params()).unwrap();
        assert!(rep.heldout_accuracy >= 0.99, "{rep:?}");
        let p = m.classify_line("abc dek lmag.").unwrap();
        assert_eq!(p.lang, "A");
        assert!(p.confidence >= 0.9);
    }

    #[test]
    fn unclassifiable_inputs() {
        let (m, _) = train_langid(&corpus(), &small_params()).unwrap();
        assert_eq!(m.classify_line(""), None);
        assert_eq!(m.classify_line("   \t "), None);
        let params = LangIdParams {
            ngram_range: (2, 4),
            ..small_params()
        };
        let (m2, _) = train_langid(&corpus(), &params).unwrap();
        assert_eq!(m2.classify_line("x"), None);
        assert!(m2.classify_line("xy").is_some());
    }

    #[test]
    fn rejects_single_language_and_small_corpora() {
        let only_a: Vec<_> = corpus().into_iter().filter(|(l, _)| l == "A").collect();
        assert!(train_langid(&only_a, &small_params()).is_err());
        let tiny: Vec<_> = corpus().into_iter().step_by(3).collect();
        assert!(train_langid(&tiny, &small_params()).is_err());
    }

    #[test]
    fn deterministic_and_round_trips() {
        let (a, _) = train_langid(&corpus(), &small_params()).unwrap();
        let (b, _) = train_langid(&corpus(), &small_params()).unwrap();
        let bytes = a.to_container().to_bytes().unwrap();
        assert_eq!(bytes, b.to_container().to_bytes().unwrap());
        let back = LangIdModel::from_container(Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn segmentation_contract() {
        let l = segment_lines_with("a\nb", 1);
        assert_eq!(l.len(), 2);
        assert_eq!((l[0].span, l[1].span), ((0, 1), (2, 3)));
        assert!(segment_lines("").is_empty());

        let l = segment_lines_with("x\n\ny", 1);
        let texts: Vec<_> = l.iter().map(|x| x.text.as_str()).collect();
        assert_eq!(texts, ["x", "", "y"]);
        assert_eq!(l.iter().map(|x| x.skipped).collect::<Vec<_>>(), [false, true, false]);
        // Default minimum of 5 visible characters skips all three.
        assert!(segment_lines("x\n\ny").iter().all(|x| x.skipped));
        assert!(!segment_lines("ab cde")[0].skipped);
        assert!(segment_lines("ab cd")[0].skipped);
        assert!(segment_lines("ab c ")[0].skipped);
    }

    #[test]
    fn spans_cover_input_with_multibyte_chars() {
        let text = "héllo wörld\nsecond line\n";
        let lines = segment_lines(text);
        assert_eq!(lines.len(), 3);
        let total = text.chars().count();
        assert_eq!(lines.last().unwrap().span.1, total);
        for w in lines.windows(2) {
            assert_eq!(w[0].span.1 + 1, w[1].span.0);
        }
    }

    fn view<'a>(d: &'a tokenizer::Detokenized, toks: &'a [u32], start: usize) -> ResponseView<'a> {
        ResponseView {
            sample_id: "s",
            tokens: toks,
            text: &d.text,
            token_chars: &d.token_chars,
            start_position: start,
        }
    }

    #[test]
    fn confusion_point_detection() {
        let (m, _) = train_langid(&corpus(), &small_params()).unwrap();

        let toks = tokenizer::encode("abc deg hij.\nkalm fed.");
        let d = tokenizer::detokenize(&toks);
        assert_eq!(detect_confusion_point(&view(&d, &toks, 7), "A", &m).unwrap(), None);

        let toks = tokenizer::encode("abc deg hij.\nnopq rstu.");
        let d = tokenizer::detokenize(&toks);
        let cp = detect_confusion_point(&view(&d, &toks, 7), "A", &m)
            .unwrap()
            .unwrap();
        assert_eq!(cp.line_index, 1);
        assert_eq!(cp.token_position, 7 + 13);
        assert_eq!(cp.detected_lang, "B");

        let toks = tokenizer::encode("nopq rstu.\nabc deg.");
        let d = tokenizer::detokenize(&toks);
        let cp = detect_confusion_point(&view(&d, &toks, 3), "A", &m)
            .unwrap()
            .unwrap();
        assert_eq!(cp.token_position, 3);
    }

    #[test]
    fn skipped_lines_never_trigger() {
        let (m, _) = train_langid(&corpus(), &small_params()).unwrap();
        let toks = tokenizer::encode("abc deg hij.\nnop\nkalm fed.");
        let d = tokenizer::detokenize(&toks);
        assert_eq!(detect_confusion_point(&view(&d, &toks, 0), "A", &m).unwrap(), None);
    }

    #[test]
    fn inconsistent_token_map_is_error() {
        let (m, _) = train_langid(&corpus(), &small_params()).unwrap();
        let toks = tokenizer::encode("abc deg");
        let chars = [0usize, 1, 3, 2, 4, 5, 6];
        let v = ResponseView {
            sample_id: "s",
            tokens: &toks,
            text: "abc deg",
            token_chars: &chars,
            start_position: 0,
        };
        assert!(detect_confusion_point(&v, "A", &m).is_err());
        let short = [0usize, 1];
        let v = ResponseView {
            token_chars: &short,
            ..v
        };
        assert!(detect_confusion_point(&v, "A", &m).is_err());
    }
}
