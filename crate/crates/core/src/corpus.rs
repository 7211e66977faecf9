// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic bilingual corpora and prompt files.
//!
//! Each synthetic language owns a character set, a Zipf-weighted lexicon
//! built from it, and simple sentence/line/document length rules. Languages
//! share only whitespace and the sentence punctuation `.`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PromptRecord;
use crate::model::{LanguageStream, TrainCorpus};
use crate::tokenizer::{BOS, EOS};

/// Characters every language may use besides its own alphabet.
pub const SHARED_CHARS: &[char] = &[' ', '\n', '.'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    /// Language code used in labels and prompt records.
    pub name: String,
    pub alphabet: Vec<char>,
    pub lexicon_size: usize,
    /// Inclusive word length range, in characters.
    pub word_len: (usize, usize),
    /// Inclusive words-per-sentence range.
    pub sentence_len: (usize, usize),
    /// Inclusive lines-per-document range.
    pub doc_lines: (usize, usize),
    /// Probability of a line break after each sentence (otherwise a space).
    pub line_break_rate: f64,
    pub seed: u64,
}

impl SyntheticLanguageSpec {
    fn preset(name: &str, alphabet: std::ops::RangeInclusive<char>, seed: u64) -> Self {
        Self {
            name: name.into(),
            alphabet: alphabet.collect(),
            lexicon_size: 120,
            word_len: (2, 5),
            sentence_len: (2, 5),
            doc_lines: (4, 8),
            line_break_rate: 0.8,
            seed,
        }
    }

    /// Language `A`: letters `a`–`m`.
    pub fn language_a() -> Self {
        Self::preset("A", 'a'..='m', 101)
    }

    /// Language `B`: letters `n`–`z`.
    pub fn language_b() -> Self {
        Self::preset("B", 'n'..='z', 202)
    }

    fn validate(&self) -> Result<()> {
        if self.alphabet.is_empty() {
            return Err(Error::InvalidInput(format!(
                "language `{}` has an empty alphabet",
                self.name
            )));
        }
        if let Some(c) = self.alphabet.iter().find(|c| SHARED_CHARS.contains(c)) {
            return Err(Error::InvalidInput(format!(
                "alphabet of `{}` contains shared character {c:?}",
                self.name
            )));
        }
        let ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !ok(self.word_len) || !ok(self.sentence_len) || !ok(self.doc_lines) {
            return Err(Error::InvalidInput(
                "length ranges must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.lexicon_size == 0 || !(0.0..=1.0).contains(&self.line_break_rate) {
            return Err(Error::InvalidInput(
                "lexicon_size must be >= 1 and line_break_rate in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic lexicon; may hold fewer than `lexicon_size` words when
    /// the alphabet and length range admit fewer distinct strings.
    pub fn lexicon(&self) -> Result<Vec<String>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(self.lexicon_size);
        let mut attempts = 0;
        while words.len() < self.lexicon_size && attempts < 50 * self.lexicon_size {
            attempts += 1;
            let len = rng.gen_range(self.word_len.0..=self.word_len.1);
            let w: String = (0..len)
                .map(|_| self.alphabet[rng.gen_range(0..self.alphabet.len())])
                .collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Ok(words)
    }
}

struct Sampler {
    words: Vec<String>,
    cumulative: Vec<f64>,
}

impl Sampler {
    fn new(spec: &SyntheticLanguageSpec) -> Result<Self> {
        let words = spec.lexicon()?;
        let mut acc = 0.0;
        let cumulative = (0..words.len())
            .map(|r| {
                acc += 1.0 / (r + 1) as f64;
                acc
            })
            .collect();
        Ok(Self { words, cumulative })
    }

    fn word(&self, rng: &mut ChaCha8Rng) -> &str {
        let total = *self.cumulative.last().expect("non-empty lexicon");
        let u = rng.gen::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        &self.words[i.min(self.words.len() - 1)]
    }

    fn sentence(&self, spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
        let mut s = String::new();
        for i in 0..n {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(self.word(rng));
        }
        s.push('.');
        s
    }

    fn document(&self, spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> String {
        let lines = rng.gen_range(spec.doc_lines.0..=spec.doc_lines.1);
        let mut doc = String::new();
        let mut done = 0;
        while done < lines {
            doc.push_str(&self.sentence(spec, rng));
            if rng.gen::<f64>() < spec.line_break_rate {
                done += 1;
                if done < lines {
                    doc.push('\n');
                }
            } else {
                doc.push(' ');
            }
        }
        doc
    }
}

/// `n_docs` documents, deterministic in `spec.seed`.
pub fn gen_corpus(spec: &SyntheticLanguageSpec, n_docs: usize) -> Result<Vec<String>> {
    if n_docs == 0 {
        return Err(Error::InvalidInput("n_docs must be >= 1".into()));
    }
    let sampler = Sampler::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    Ok((0..n_docs).map(|_| sampler.document(spec, &mut rng)).collect())
}

/// How prompts are framed and labelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Fixed text every prompt starts with.
    pub prefix: String,
    /// Value of the `source` field; also salts the prompt RNG so different
    /// sources yield different prompts.
    pub source: String,
    /// Sentences in the prompt's single line.
    pub sentences: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: String::new(),
            source: "toy".into(),
            sentences: 2,
        }
    }
}

/// `n` single-line prompts ending in a newline, so the model continues with
/// a fresh line in the same language.
pub fn gen_prompts(
    spec: &SyntheticLanguageSpec,
    n: usize,
    template: &PromptTemplate,
) -> Result<Vec<PromptRecord>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be >= 1".into()));
    }
    let sampler = Sampler::new(spec)?;
    let salt = crate::langid::fnv1a64(template.source.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ salt);
    Ok((0..n)
        .map(|i| {
            let mut prompt = template.prefix.clone();
            for s in 0..template.sentences.max(1) {
                if s > 0 {
                    prompt.push(' ');
                }
                prompt.push_str(&sampler.sentence(spec, &mut rng));
            }
            prompt.push('\n');
            PromptRecord {
                id: format!("{}-{}-{:03}", spec.name, template.source, i),
                language: spec.name.clone(),
                prompt,
                source: template.source.clone(),
            }
        })
        .collect())
}

/// Documents as one token stream: `BOS doc EOS BOS doc EOS ...`.
pub fn to_stream(docs: &[String]) -> Vec<u32> {
    let mut out = Vec::new();
    for d in docs {
        out.push(BOS);
        out.extend(d.bytes().map(u32::from));
        out.push(EOS);
    }
    out
}

/// Every non-empty line of `docs` labelled with `lang`.
pub fn labeled_lines(docs: &[String], lang: &str) -> Vec<(String, String)> {
    docs.iter()
        .flat_map(|d| d.lines())
        .filter(|l| !l.trim().is_empty())
        .map(|l| (lang.to_string(), l.to_string()))
        .collect()
}

/// Sizes and mixing rules of a multi-language training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecipe {
    /// Training documents per language.
    pub train_docs: usize,
    /// Held-out documents per language (never quoted).
    pub heldout_docs: usize,
    /// Probability that a line of a first-language training document is
    /// preceded by one line quoted from the second language.
    pub quoted_line_rate: f64,
    pub seed: u64,
}

impl Default for CorpusRecipe {
    fn default() -> Self {
        Self {
            train_docs: 400,
            heldout_docs: 40,
            quoted_line_rate: 0.085,
            seed: 9,
        }
    }
}

/// One language's documents, split into training and held-out parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageDocs {
    pub lang: String,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

/// Documents per spec, in spec order.
///
/// The first spec is the dominant language for `TrainHyper::mix_ratio`.
/// Lines of its training documents may be preceded by a quoted line of the
/// second language (see [`CorpusRecipe::quoted_line_rate`]); the quoted lines come
/// from a separately seeded draw, so they do not repeat the second
/// language's own documents.
pub fn bilingual_train_docs(
    specs: &[SyntheticLanguageSpec],
    recipe: &CorpusRecipe,
) -> Result<Vec<LanguageDocs>> {
    if recipe.train_docs == 0 || !(0.0..=1.0).contains(&recipe.quoted_line_rate) {
        return Err(Error::InvalidInput(
            "train_docs must be >= 1 and quoted_line_rate in [0, 1]".into(),
        ));
    }
    let mut out = Vec::with_capacity(specs.len());
    for (i, s) in specs.iter().enumerate() {
        let mut docs = gen_corpus(s, recipe.train_docs + recipe.heldout_docs.max(1))?;
        let heldout = docs.split_off(recipe.train_docs);
        let mut train = docs;
        if i == 0 && specs.len() > 1 && recipe.quoted_line_rate > 0.0 {
            let source = SyntheticLanguageSpec {
                seed: specs[1].seed ^ recipe.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..specs[1].clone()
            };
            let quotes = gen_corpus(&source, recipe.train_docs)?;
            let mut pool = quotes.iter().flat_map(|q| q.lines()).cycle();
            let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
            for doc in train.iter_mut() {
                let mut quoted = Vec::new();
                for line in doc.lines() {
                    if rng.gen::<f64>() < recipe.quoted_line_rate {
                        quoted.push(pool.next().unwrap_or_default());
                    }
                    quoted.push(line);
                }
                *doc = quoted.join("\n");
            }
        }
        out.push(LanguageDocs {
            lang: s.name.clone(),
            train,
            heldout,
        });
    }
    Ok(out)
}

/// Token streams for documents produced by [`bilingual_train_docs`].
pub fn docs_to_corpus(docs: &[LanguageDocs]) -> TrainCorpus {
    TrainCorpus {
        languages: docs
            .iter()
            .map(|d| LanguageStream {
                lang: d.lang.clone(),
                train: to_stream(&d.train),
                heldout: to_stream(&d.heldout),
            })
            .collect(),
    }
}

/// [`bilingual_train_docs`] followed by [`docs_to_corpus`].
pub fn bilingual_train_corpus(
    specs: &[SyntheticLanguageSpec],
    recipe: &CorpusRecipe,
) -> Result<TrainCorpus> {
    Ok(docs_to_corpus(&bilingual_train_docs(specs, recipe)?))
}

/// Documents joined by blank lines. Generated documents never contain an
/// empty line, so [`split_documents`] inverts this.
pub fn join_documents(docs: &[String]) -> String {
    docs.join("\n\n")
}

pub fn split_documents(text: &str) -> Vec<String> {
    text.split("\n\n")
        .filter(|d| !d.is_empty())
        .map(str::to_string)
        .collect()
}
