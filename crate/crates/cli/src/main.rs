// SPDX-License-Identifier: MIT OR Apache-2.0

//! `langconf`: command-line driver for the language-confusion experiments.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "langconf", version, about = "Language-confusion experiments on toy transformers")]
pub struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "LANGCONF_OUT", default_value = "langconf-out")]
    pub out: PathBuf,
    /// Worker threads for prompt-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON object of flag overrides; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Stem of every file this invocation writes.
    #[arg(long, global = true)]
    pub name: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic bilingual corpus, langid lines and prompts.
    GenCorpus(GenCorpusArgs),
    /// Train a toy model on a generated corpus.
    TrainToy(TrainToyArgs),
    /// Train the line-level language identifier.
    TrainLangid(TrainLangidArgs),
    /// Fit a tuned lens (or write the identity lens).
    FitLens(FitLensArgs),
    /// Generate responses and score LPR / Acc.
    Benchmark(BenchmarkArgs),
    /// Per-layer language mass of lens projections at confusion points.
    LensCurves(LensCurvesArgs),
    /// Neuron importance scores for confusion (or correct) samples.
    Attribute(AttributeArgs),
    /// Select neurons to edit from importance records.
    Select(SelectArgs),
    /// Benchmark with selected neurons zeroed.
    EditBenchmark(EditBenchmarkArgs),
    /// Replace each confusion-point token with a reference model's token.
    CpReplace(CpReplaceArgs),
    /// Target-language share of the final top-k candidates.
    Preference(PreferenceArgs),
    /// Collate benchmark reports into one summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Preset languages, first one dominant.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// JSON list of language specs, used instead of the presets.
    #[arg(long)]
    pub specs: Option<PathBuf>,
    #[arg(long)]
    pub train_docs: Option<usize>,
    #[arg(long)]
    pub heldout_docs: Option<usize>,
    #[arg(long)]
    pub quoted_line_rate: Option<f64>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    /// Documents per language for the langid line files.
    #[arg(long)]
    pub langid_docs: Option<usize>,
    /// Prompts per language.
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub prompt_source: Option<String>,
    #[arg(long)]
    pub prompt_prefix: Option<String>,
    #[arg(long)]
    pub prompt_sentences: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelShape {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub ffn_width: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// `sigmoid-weighted-linear` or `gaussian-error-linear`.
    #[arg(long)]
    pub activation: Option<String>,
    /// `two-matrix` or `gated`.
    #[arg(long)]
    pub ffn_kind: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Directory written by gen-corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// `biased` (95:5) or `balanced` (50:50).
    #[arg(long)]
    pub recipe: Option<String>,
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    /// Continue training from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub shape: ModelShape,
}

#[derive(Debug, Args)]
pub struct TrainLangidArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Labelled `lang<TAB>line` files, used instead of --corpus.
    #[arg(long, value_delimiter = ',')]
    pub tsv: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub ngram_min: Option<usize>,
    #[arg(long)]
    pub ngram_max: Option<usize>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitLensArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Write the identity (logit) lens without fitting.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub heldout_windows: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// 0 is greedy.
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub max_new: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub prompts: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub langid: Option<PathBuf>,
    /// Selection JSON whose neurons are zeroed.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct LensCurvesArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Lens checkpoint; the identity lens when absent.
    #[arg(long)]
    pub lens: Option<PathBuf>,
    /// Benchmark details JSONL.
    #[arg(long)]
    pub details: Option<PathBuf>,
    #[arg(long)]
    pub langid: Option<PathBuf>,
    /// Majority training language.
    #[arg(long)]
    pub dominant: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Benchmark details JSONL the queries come from.
    #[arg(long)]
    pub details: Option<PathBuf>,
    /// `confusion` or `correct`.
    #[arg(long)]
    pub group: Option<String>,
    /// Per-sample top-n for the layer histogram.
    #[arg(long)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectionFlags {
    /// `frequency`, `aggregate` or `comparative`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub ref_records: Option<PathBuf>,
    #[arg(long)]
    pub language: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub per_sample_top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub sel: SelectionFlags,
}

#[derive(Debug, Args)]
pub struct EditBenchmarkArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Selection JSON written by `select`.
    #[arg(long, conflicts_with = "select_from")]
    pub selection: Option<PathBuf>,
    /// Importance records to select from (selection happens inline).
    #[arg(long)]
    pub select_from: Option<PathBuf>,
    /// Prompt files to evaluate on.
    #[arg(long, value_delimiter = ',', alias = "prompts")]
    pub eval_on: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub langid: Option<PathBuf>,
    /// Corpus index (`*.corpus.json`) for the held-out perplexity delta.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    #[command(flatten)]
    pub sel: SelectionFlags,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct CpReplaceArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub prompts: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub langid: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct PreferenceArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub prompts: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub langid: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub gen: GenFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON of the unedited run.
    #[arg(long)]
    pub original: Option<PathBuf>,
    /// Report JSON of the edited run.
    #[arg(long)]
    pub edited: Option<PathBuf>,
    /// Report JSON of the CP-replaced run.
    #[arg(long)]
    pub cp_replaced: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
