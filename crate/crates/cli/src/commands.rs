// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use langconf::attribution::{
    self, attribute_all, confusion_queries, correct_queries, layer_distribution,
    DistributionMode, SampleScores, DEFAULT_TOP_N,
};
use langconf::corpus::{
    bilingual_train_docs, docs_to_corpus, gen_corpus, gen_prompts, join_documents, labeled_lines,
    split_documents, CorpusRecipe, LanguageDocs, PromptTemplate, SyntheticLanguageSpec,
};
use langconf::editing::{
    cp_replace_all, edited_benchmark, internal_preference, perplexity_delta, select_aggregate,
    select_comparative, select_frequency, SelectionResult, DEFAULT_EDIT_N,
    DEFAULT_PREFERENCE_K,
};
use langconf::io::{read_json, read_jsonl, read_text};
use langconf::langid::{train_langid, LangIdModel, LangIdParams};
use langconf::lens::{
    curves_to_csv, fit_tuned_lens, language_mass_curve, lens_samples, LensHyper, LensSet,
};
use langconf::metrics::{
    report_from_details, run_benchmark, BenchmarkRun, MetricsReport, PromptRecord, ResponseDetail,
    RunMetadata,
};
use langconf::model::{
    continue_training, train_toy, EditMask, GenerateParams, Model, TrainCorpus, TrainHyper,
    TransformerConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::Resolver;
use crate::error::{usage, CliError, CliResult};
use crate::manifest::Run;
use crate::{
    AttributeArgs, BenchmarkArgs, Cli, Command, CpReplaceArgs, EditBenchmarkArgs, FitLensArgs,
    GenCorpusArgs, GenFlags, LensCurvesArgs, ModelShape, PreferenceArgs, ReportArgs, SelectArgs,
    SelectionFlags, TrainLangidArgs, TrainToyArgs,
};

/// Defaults shared by every generating subcommand.
pub const DEFAULT_GEN_SEED: u64 = 7;
pub const DEFAULT_TEMPERATURE: f32 = 0.8;
pub const DEFAULT_MAX_NEW: usize = 64;

/// Index written by `gen-corpus`; file names are relative to the index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub recipe: CorpusRecipe,
    pub specs: Vec<SyntheticLanguageSpec>,
    pub languages: Vec<CorpusFiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusFiles {
    pub lang: String,
    pub train: String,
    pub heldout: String,
    pub langid: String,
    pub prompts: String,
}

struct Ctx {
    out: PathBuf,
    name: Option<String>,
    cfg: Resolver,
}

impl Ctx {
    fn start(&self, subcommand: &str, default_name: &str) -> CliResult<Run> {
        let name = self.name.as_deref().unwrap_or(default_name);
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(usage(format!("--name `{name}` must be a plain file stem")));
        }
        Run::start(subcommand, &self.out, name)
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut ctx = Ctx {
        out: cli.out,
        name: cli.name,
        cfg: Resolver::load(cli.config.as_deref())?,
    };
    match cli.command {
        Command::GenCorpus(a) => gen_corpus_cmd(&mut ctx, a),
        Command::TrainToy(a) => train_toy_cmd(&mut ctx, a),
        Command::TrainLangid(a) => train_langid_cmd(&mut ctx, a),
        Command::FitLens(a) => fit_lens_cmd(&mut ctx, a),
        Command::Benchmark(a) => benchmark_cmd(&mut ctx, a),
        Command::LensCurves(a) => lens_curves_cmd(&mut ctx, a),
        Command::Attribute(a) => attribute_cmd(&mut ctx, a),
        Command::Select(a) => select_cmd(&mut ctx, a),
        Command::EditBenchmark(a) => edit_benchmark_cmd(&mut ctx, a),
        Command::CpReplace(a) => cp_replace_cmd(&mut ctx, a),
        Command::Preference(a) => preference_cmd(&mut ctx, a),
        Command::Report(a) => report_cmd(&mut ctx, a),
    }
}

// ---------------------------------------------------------------------------
// Shared loaders
// ---------------------------------------------------------------------------

fn preset(name: &str) -> CliResult<SyntheticLanguageSpec> {
    match name {
        "A" => Ok(SyntheticLanguageSpec::language_a()),
        "B" => Ok(SyntheticLanguageSpec::language_b()),
        other => Err(usage(format!("unknown preset language `{other}` (expected A or B)"))),
    }
}

fn load_index(run: &mut Run, path: &Path) -> CliResult<(CorpusIndex, PathBuf)> {
    run.input(path)?;
    let index: CorpusIndex = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((index, dir))
}

/// Corpus files in `languages` order (index order when `None`).
fn pick_languages(index: &CorpusIndex, languages: Option<&[String]>) -> CliResult<Vec<CorpusFiles>> {
    match languages {
        None => Ok(index.languages.clone()),
        Some(ls) => ls
            .iter()
            .map(|l| {
                index
                    .languages
                    .iter()
                    .find(|f| &f.lang == l)
                    .cloned()
                    .ok_or_else(|| usage(format!("language `{l}` not in corpus index")))
            })
            .collect(),
    }
}

fn load_docs(run: &mut Run, dir: &Path, files: &[CorpusFiles]) -> CliResult<Vec<LanguageDocs>> {
    files
        .iter()
        .map(|f| {
            let train = run.input(&dir.join(&f.train))?;
            let heldout = run.input(&dir.join(&f.heldout))?;
            Ok(LanguageDocs {
                lang: f.lang.clone(),
                train: split_documents(&read_text(&train)?),
                heldout: split_documents(&read_text(&heldout)?),
            })
        })
        .collect()
}

fn load_corpus(
    run: &mut Run,
    cfg: &mut Resolver,
    corpus: Option<PathBuf>,
    languages: Option<Vec<String>>,
) -> CliResult<TrainCorpus> {
    let path: PathBuf = cfg.req("corpus", corpus)?;
    let languages: Option<Vec<String>> = cfg.opt("languages", languages)?;
    let (index, dir) = load_index(run, &path)?;
    let files = pick_languages(&index, languages.as_deref())?;
    Ok(docs_to_corpus(&load_docs(run, &dir, &files)?))
}

fn load_model(run: &mut Run, cfg: &mut Resolver, key: &str, flag: Option<PathBuf>) -> CliResult<Model> {
    let path: PathBuf = cfg.req(key, flag)?;
    run.input(&path)?;
    Ok(Model::load(&path)?)
}

fn load_langid(run: &mut Run, cfg: &mut Resolver, flag: Option<PathBuf>) -> CliResult<LangIdModel> {
    let path: PathBuf = cfg.req("langid", flag)?;
    run.input(&path)?;
    Ok(LangIdModel::load(&path)?)
}

fn load_prompts(run: &mut Run, cfg: &mut Resolver, key: &str, flag: Option<Vec<PathBuf>>) -> CliResult<Vec<PromptRecord>> {
    let paths: Vec<PathBuf> = cfg.req(key, flag)?;
    let mut out = Vec::new();
    for p in paths {
        run.input(&p)?;
        out.extend(read_jsonl::<PromptRecord>(&p)?);
    }
    Ok(out)
}

fn load_details(run: &mut Run, cfg: &mut Resolver, flag: Option<PathBuf>) -> CliResult<Vec<ResponseDetail>> {
    let path: PathBuf = cfg.req("details", flag)?;
    run.input(&path)?;
    Ok(read_jsonl(&path)?)
}

fn load_records(run: &mut Run, path: &Path) -> CliResult<Vec<SampleScores>> {
    run.input(path)?;
    Ok(read_jsonl(path)?)
}

fn load_selection(run: &mut Run, path: &Path) -> CliResult<SelectionResult> {
    run.input(path)?;
    Ok(read_json(path)?)
}

fn gen_params(cfg: &mut Resolver, g: GenFlags) -> CliResult<GenerateParams> {
    Ok(GenerateParams {
        seed: cfg.get("seed", g.seed, DEFAULT_GEN_SEED)?,
        temperature: cfg.get("temperature", g.temperature, DEFAULT_TEMPERATURE)?,
        max_new: cfg.get("max_new", g.max_new, DEFAULT_MAX_NEW)?,
        ..GenerateParams::default()
    })
}

fn parse_enum<T: for<'de> Deserialize<'de>>(what: &str, value: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| usage(format!("invalid {what} `{value}`")))
}

fn write_benchmark(run: &mut Run, b: &BenchmarkRun) -> CliResult<()> {
    run.write_json("report.json", &b.report)?;
    run.write_text("report.csv", &b.report.to_csv()?)?;
    run.write_jsonl("details.jsonl", &b.details)?;
    Ok(())
}

fn finish(run: Run, cfg: &Resolver, seed: Option<u64>) -> CliResult<()> {
    run.finish(cfg.resolved(), seed)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn gen_corpus_cmd(ctx: &mut Ctx, a: GenCorpusArgs) -> CliResult<()> {
    let mut run = ctx.start("gen-corpus", "corpus")?;
    let cfg = &mut ctx.cfg;
    let specs_path: Option<PathBuf> = cfg.opt("specs", a.specs)?;
    let specs: Vec<SyntheticLanguageSpec> = match specs_path {
        Some(p) => {
            run.input(&p)?;
            read_json(&p)?
        }
        None => cfg
            .get("languages", a.languages, vec!["A".to_string(), "B".to_string()])?
            .iter()
            .map(|n| preset(n))
            .collect::<CliResult<_>>()?,
    };
    if specs.is_empty() {
        return Err(usage("at least one language is required"));
    }
    let d = CorpusRecipe::default();
    let recipe = CorpusRecipe {
        train_docs: cfg.get("train_docs", a.train_docs, d.train_docs)?,
        heldout_docs: cfg.get("heldout_docs", a.heldout_docs, d.heldout_docs)?,
        quoted_line_rate: cfg.get("quoted_line_rate", a.quoted_line_rate, d.quoted_line_rate)?,
        seed: cfg.get("corpus_seed", a.corpus_seed, d.seed)?,
    };
    let langid_docs = cfg.get("langid_docs", a.langid_docs, 200usize)?;
    let n_prompts = cfg.get("prompts", a.prompts, 100usize)?;
    let pd = PromptTemplate::default();
    let template = PromptTemplate {
        prefix: cfg.get("prompt_prefix", a.prompt_prefix, pd.prefix)?,
        source: cfg.get("prompt_source", a.prompt_source, pd.source)?,
        sentences: cfg.get("prompt_sentences", a.prompt_sentences, pd.sentences)?,
    };

    let docs = bilingual_train_docs(&specs, &recipe)?;
    let mut files = Vec::new();
    for (spec, d) in specs.iter().zip(&docs) {
        let l = &spec.name;
        let f = CorpusFiles {
            lang: l.clone(),
            train: file_name(run.write_text(&format!("{l}.train.txt"), &join_documents(&d.train))?),
            heldout: file_name(
                run.write_text(&format!("{l}.heldout.txt"), &join_documents(&d.heldout))?,
            ),
            langid: file_name(run.write_text(
                &format!("{l}.langid.tsv"),
                &langconf::io::to_labeled_tsv(&labeled_lines(&gen_corpus(spec, langid_docs)?, l)),
            )?),
            prompts: file_name(run.write_jsonl(
                &format!("{l}.{}.prompts.jsonl", template.source),
                &gen_prompts(spec, n_prompts, &template)?,
            )?),
        };
        files.push(f);
    }
    let index = CorpusIndex {
        recipe,
        specs,
        languages: files,
    };
    run.write_json("corpus.json", &index)?;
    finish(run, &ctx.cfg, Some(recipe.seed))
}

fn file_name(p: PathBuf) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn model_config(cfg: &mut Resolver, s: ModelShape) -> CliResult<TransformerConfig> {
    let d = TransformerConfig::default();
    let activation = match cfg.opt::<String>("activation", s.activation)? {
        Some(v) => parse_enum("activation", &v)?,
        None => d.activation,
    };
    let ffn_kind = match cfg.opt::<String>("ffn_kind", s.ffn_kind)? {
        Some(v) => parse_enum("ffn kind", &v)?,
        None => d.ffn_kind,
    };
    let c = TransformerConfig {
        n_layers: cfg.get("n_layers", s.n_layers, d.n_layers)?,
        d_model: cfg.get("d_model", s.d_model, d.d_model)?,
        ffn_width: cfg.get("ffn_width", s.ffn_width, d.ffn_width)?,
        n_heads: cfg.get("n_heads", s.n_heads, d.n_heads)?,
        max_seq_len: cfg.get("max_seq_len", s.max_seq_len, d.max_seq_len)?,
        activation,
        ffn_kind,
        ..d
    };
    c.validate()?;
    Ok(c)
}

fn train_toy_cmd(ctx: &mut Ctx, a: TrainToyArgs) -> CliResult<()> {
    let recipe_name = ctx.cfg.get("recipe", a.recipe, "biased".to_string())?;
    let mut run = ctx.start("train-toy", &recipe_name)?;
    let cfg = &mut ctx.cfg;
    let base = match recipe_name.as_str() {
        "biased" => TrainHyper::biased(),
        "balanced" => TrainHyper::balanced(),
        other => return Err(usage(format!("unknown recipe `{other}` (biased or balanced)"))),
    };
    let corpus = load_corpus(&mut run, cfg, a.corpus, a.languages)?;
    let hyper = TrainHyper {
        mix_ratio: cfg.get("mix_ratio", a.mix_ratio, base.mix_ratio)?,
        steps: cfg.get("steps", a.steps, base.steps)?,
        lr: cfg.get("lr", a.lr, base.lr)?,
        batch: cfg.get("batch", a.batch, base.batch)?,
        seq_len: cfg.get("seq_len", a.seq_len, base.seq_len)?,
        seed: cfg.get("seed", a.seed, base.seed)?,
        warmup: cfg.get("warmup", a.warmup, base.warmup)?,
        weight_decay: cfg.get("weight_decay", a.weight_decay, base.weight_decay)?,
        ..base
    };
    let model_id = run.path("model").file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let init_from: Option<PathBuf> = cfg.opt("init_from", a.init_from)?;
    let (model, report) = match init_from {
        Some(p) => {
            run.input(&p)?;
            let init = Model::load(&p)?.with_model_id(model_id);
            continue_training(init, &corpus, &hyper)?
        }
        None => {
            let config = model_config(cfg, a.shape)?;
            train_toy(config, &corpus, &hyper, &model_id)?
        }
    };
    let path = run.path("model");
    model.save(&path)?;
    run.record(&path)?;
    run.write_json("train.json", &report)?;
    finish(run, &ctx.cfg, Some(hyper.seed))
}

fn train_langid_cmd(ctx: &mut Ctx, a: TrainLangidArgs) -> CliResult<()> {
    let mut run = ctx.start("train-langid", "langid")?;
    let cfg = &mut ctx.cfg;
    let tsv: Option<Vec<PathBuf>> = cfg.opt("tsv", a.tsv)?;
    let paths = match tsv {
        Some(p) => p,
        None => {
            let path: PathBuf = cfg
                .req("corpus", a.corpus)
                .map_err(|_| usage("one of --corpus or --tsv is required"))?;
            let languages: Option<Vec<String>> = cfg.opt("languages", a.languages)?;
            let (index, dir) = load_index(&mut run, &path)?;
            pick_languages(&index, languages.as_deref())?
                .iter()
                .map(|f| dir.join(&f.langid))
                .collect()
        }
    };
    let mut rows = Vec::new();
    for p in paths {
        run.input(&p)?;
        rows.extend(langconf::io::parse_labeled_tsv(&read_text(&p)?)?);
    }
    let d = LangIdParams::default();
    let params = LangIdParams {
        ngram_range: (
            cfg.get("ngram_min", a.ngram_min, d.ngram_range.0)?,
            cfg.get("ngram_max", a.ngram_max, d.ngram_range.1)?,
        ),
        buckets: cfg.get("buckets", a.buckets, d.buckets)?,
        dim: cfg.get("dim", a.dim, d.dim)?,
        epochs: cfg.get("epochs", a.epochs, d.epochs)?,
        lr: cfg.get("lr", a.lr, d.lr)?,
        seed: cfg.get("seed", a.seed, d.seed)?,
        ..d
    };
    let (model, report) = train_langid(&rows, &params)?;
    let path = run.path("langid");
    model.save(&path)?;
    run.record(&path)?;
    run.write_json("langid-report.json", &report)?;
    finish(run, &ctx.cfg, Some(params.seed))
}

fn fit_lens_cmd(ctx: &mut Ctx, a: FitLensArgs) -> CliResult<()> {
    let mut run = ctx.start("fit-lens", "lens")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let path = run.path("lens");
    if a.identity {
        let lens = LensSet::identity(&model);
        lens.save(&path)?;
        run.record(&path)?;
        return finish(run, &ctx.cfg, None);
    }
    let corpus = load_corpus(&mut run, cfg, a.corpus, a.languages)?;
    let d = LensHyper::default();
    let hyper = LensHyper {
        steps: cfg.get("steps", a.steps, d.steps)?,
        lr: cfg.get("lr", a.lr, d.lr)?,
        seed: cfg.get("seed", a.seed, d.seed)?,
        windows: cfg.get("windows", a.windows, d.windows)?,
        heldout_windows: cfg.get("heldout_windows", a.heldout_windows, d.heldout_windows)?,
        seq_len: cfg.get("seq_len", a.seq_len, d.seq_len)?,
        ..d
    };
    let streams: Vec<Vec<u32>> = corpus.languages.iter().map(|l| l.heldout.clone()).collect();
    let (lens, report) = fit_tuned_lens(&model, &streams, &hyper)?;
    lens.save(&path)?;
    run.record(&path)?;
    run.write_json("lens-report.json", &report)?;
    let mut csv = String::from("layer,logit_lens_kl,tuned_kl\n");
    for l in &report.layers {
        csv.push_str(&format!("{},{:.6},{:.6}\n", l.layer, l.logit_lens_kl, l.tuned_kl));
    }
    run.write_text("lens-report.csv", &csv)?;
    finish(run, &ctx.cfg, Some(hyper.seed))
}

fn load_mask(run: &mut Run, cfg: &mut Resolver, flag: Option<PathBuf>) -> CliResult<Option<EditMask>> {
    let path: Option<PathBuf> = cfg.opt("mask", flag)?;
    path.map(|p| load_selection(run, &p).map(|s| s.mask())).transpose()
}

fn benchmark_cmd(ctx: &mut Ctx, a: BenchmarkArgs) -> CliResult<()> {
    let mut run = ctx.start("benchmark", "benchmark")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let prompts = load_prompts(&mut run, cfg, "prompts", a.prompts)?;
    let langid = load_langid(&mut run, cfg, a.langid)?;
    let mask = load_mask(&mut run, cfg, a.mask)?;
    let params = gen_params(cfg, a.gen)?;
    let b = run_benchmark(&model, &prompts, &langid, &params, mask.as_ref())?;
    write_benchmark(&mut run, &b)?;
    finish(run, &ctx.cfg, Some(params.seed))
}

fn lens_curves_cmd(ctx: &mut Ctx, a: LensCurvesArgs) -> CliResult<()> {
    let mut run = ctx.start("lens-curves", "curves")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let lens_path: Option<PathBuf> = cfg.opt("lens", a.lens)?;
    let lens = match lens_path {
        Some(p) => {
            run.input(&p)?;
            LensSet::load(&p)?
        }
        None => LensSet::identity(&model),
    };
    let details = load_details(&mut run, cfg, a.details)?;
    let langid = load_langid(&mut run, cfg, a.langid)?;
    let dominant: String = cfg.get("dominant", a.dominant, "A".to_string())?;
    let k = cfg.get("k", a.k, 10usize)?;
    let samples = lens_samples(&details);
    let profiles = language_mass_curve(&model, &lens, &samples, &langid, &dominant, k)?;
    run.write_text("curves.csv", &curves_to_csv(&profiles)?)?;
    run.write_json("curves.json", &profiles)?;
    finish(run, &ctx.cfg, None)
}

fn attribute_cmd(ctx: &mut Ctx, a: AttributeArgs) -> CliResult<()> {
    let mut run = ctx.start("attribute", "records")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let details = load_details(&mut run, cfg, a.details)?;
    let group: String = cfg.get("group", a.group, "confusion".to_string())?;
    let top_n = cfg.get("top_n", a.top_n, DEFAULT_TOP_N)?;
    let queries = match group.as_str() {
        "confusion" => confusion_queries(&details)?,
        "correct" => correct_queries(&details)?,
        other => return Err(usage(format!("unknown group `{other}` (confusion or correct)"))),
    };
    if queries.is_empty() {
        return Err(CliError::Core(langconf::Error::InvalidInput(format!(
            "no {group} samples in the details file"
        ))));
    }
    let samples = attribute_all(&model, &queries)?;
    run.write_jsonl("records.jsonl", &samples)?;
    let count = layer_distribution(&samples, DistributionMode::MembershipCount, top_n)?;
    let sum = layer_distribution(&samples, DistributionMode::ScoreSum, top_n)?;
    let mut csv = String::from("layer,top_n_count,top_n_score_sum\n");
    for (l, (c, s)) in count.iter().zip(&sum).enumerate() {
        csv.push_str(&format!("{l},{c},{s:.6}\n"));
    }
    run.write_text("layers.csv", &csv)?;
    let digest = attribution::records_digest(&samples);
    run.write_json("records-digest.json", &serde_json::json!({ "records_digest": digest }))?;
    finish(run, &ctx.cfg, None)
}

/// Selection from `records`, with `sel` flags resolved through the config.
fn select_from(
    run: &mut Run,
    cfg: &mut Resolver,
    records: &Path,
    sel: SelectionFlags,
) -> CliResult<SelectionResult> {
    let strategy: String = cfg.req("strategy", sel.strategy)?;
    let language: String = cfg.req("language", sel.language)?;
    let n = cfg.get("n", sel.n, DEFAULT_EDIT_N)?;
    let ref_records: Option<PathBuf> = cfg.opt("ref_records", sel.ref_records)?;
    if strategy == "comparative" && ref_records.is_none() {
        return Err(usage("--strategy comparative requires --ref-records"));
    }
    let orig = load_records(run, records)?;
    match strategy.as_str() {
        "frequency" => {
            let top = cfg.get("per_sample_top", sel.per_sample_top, DEFAULT_TOP_N)?;
            Ok(select_frequency(&orig, &language, top, n)?)
        }
        "aggregate" => Ok(select_aggregate(&orig, &language, n)?),
        "comparative" => {
            let r = ref_records.expect("checked above");
            let reference = load_records(run, &r)?;
            Ok(select_comparative(&orig, &reference, &language, n)?)
        }
        other => Err(usage(format!(
            "unknown strategy `{other}` (frequency, aggregate or comparative)"
        ))),
    }
}

fn select_cmd(ctx: &mut Ctx, a: SelectArgs) -> CliResult<()> {
    let mut run = ctx.start("select", "selection")?;
    let cfg = &mut ctx.cfg;
    let records: PathBuf = cfg.req("records", a.records)?;
    let sel = select_from(&mut run, cfg, &records, a.sel)?;
    run.write_json("selection.json", &sel)?;
    finish(run, &ctx.cfg, None)
}

fn edit_benchmark_cmd(ctx: &mut Ctx, a: EditBenchmarkArgs) -> CliResult<()> {
    let mut run = ctx.start("edit-benchmark", "edited")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let selection_path: Option<PathBuf> = cfg.opt("selection", a.selection)?;
    let records: Option<PathBuf> = cfg.opt("select_from", a.select_from)?;
    let selection = match (selection_path, records) {
        (Some(p), None) => load_selection(&mut run, &p)?,
        (None, Some(r)) => {
            let s = select_from(&mut run, cfg, &r, a.sel)?;
            run.write_json("selection.json", &s)?;
            s
        }
        (Some(_), Some(_)) => return Err(usage("use either --selection or --select-from")),
        (None, None) => return Err(usage("one of --selection or --select-from is required")),
    };
    let prompts = load_prompts(&mut run, cfg, "eval_on", a.eval_on)?;
    let langid = load_langid(&mut run, cfg, a.langid)?;
    let params = gen_params(cfg, a.gen)?;
    let b = edited_benchmark(&model, &selection, &prompts, &langid, &params)?;
    write_benchmark(&mut run, &b)?;
    let corpus_path: Option<PathBuf> = cfg.opt("corpus", a.corpus)?;
    if corpus_path.is_some() {
        let corpus = load_corpus(&mut run, cfg, corpus_path, a.languages)?;
        let ppl = perplexity_delta(&model, &corpus, &selection.mask(), 64, 16)?;
        run.write_json("perplexity.json", &ppl)?;
    }
    finish(run, &ctx.cfg, Some(params.seed))
}

fn cp_replace_cmd(ctx: &mut Ctx, a: CpReplaceArgs) -> CliResult<()> {
    let mut run = ctx.start("cp-replace", "cp")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let reference = load_model(&mut run, cfg, "reference", a.reference)?;
    let prompts = load_prompts(&mut run, cfg, "prompts", a.prompts)?;
    let langid = load_langid(&mut run, cfg, a.langid)?;
    let params = gen_params(cfg, a.gen)?;
    let rows = cp_replace_all(&model, &reference, &prompts, &langid, &params)?;
    run.write_jsonl("cp.jsonl", &rows)?;
    let meta = RunMetadata {
        model_id: model.model_id().to_string(),
        mask_digest: EditMask::new().digest(),
        seed: params.seed,
    };
    let original: Vec<ResponseDetail> = rows.iter().map(|r| r.original.clone()).collect();
    let replaced: Vec<ResponseDetail> = rows.iter().map(|r| r.replaced.clone()).collect();
    let before = report_from_details(&original, meta.clone());
    let after = report_from_details(&replaced, meta);
    run.write_json("original.report.json", &before)?;
    run.write_text("original.report.csv", &before.to_csv()?)?;
    run.write_json("replaced.report.json", &after)?;
    run.write_text("replaced.report.csv", &after.to_csv()?)?;
    finish(run, &ctx.cfg, Some(params.seed))
}

fn preference_cmd(ctx: &mut Ctx, a: PreferenceArgs) -> CliResult<()> {
    let mut run = ctx.start("preference", "preference")?;
    let cfg = &mut ctx.cfg;
    let model = load_model(&mut run, cfg, "model", a.model)?;
    let prompts = load_prompts(&mut run, cfg, "prompts", a.prompts)?;
    let langid = load_langid(&mut run, cfg, a.langid)?;
    let mask = load_mask(&mut run, cfg, a.mask)?;
    let k = cfg.get("k", a.k, DEFAULT_PREFERENCE_K)?;
    let params = gen_params(cfg, a.gen)?;
    let stats = internal_preference(&model, &prompts, &langid, k, &params, mask.as_ref())?;
    run.write_json("preference.json", &stats)?;
    finish(run, &ctx.cfg, Some(params.seed))
}

/// One row of the collated summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub language: String,
    pub lpr: Option<f64>,
    pub acc: Option<f64>,
    pub n_responses: usize,
}

fn report_cmd(ctx: &mut Ctx, a: ReportArgs) -> CliResult<()> {
    let mut run = ctx.start("report", "summary")?;
    let cfg = &mut ctx.cfg;
    let inputs = [
        ("original", cfg.opt::<PathBuf>("original", a.original)?),
        ("edited", cfg.opt::<PathBuf>("edited", a.edited)?),
        ("cp-replaced", cfg.opt::<PathBuf>("cp_replaced", a.cp_replaced)?),
    ];
    let mut rows = Vec::new();
    for (condition, path) in inputs {
        let Some(path) = path else { continue };
        run.input(&path)?;
        let report: MetricsReport = read_json(&path)?;
        for l in &report.languages {
            rows.push(SummaryRow {
                condition: condition.to_string(),
                language: l.language.clone(),
                lpr: l.lpr,
                acc: l.acc,
                n_responses: l.n_responses,
            });
        }
    }
    if rows.is_empty() {
        return Err(usage("give at least one of --original, --edited, --cp-replaced"));
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
    let mut csv = String::from("language,condition,lpr,acc,n_responses\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.language,
            r.condition,
            fmt(r.lpr),
            fmt(r.acc),
            r.n_responses
        ));
    }
    run.write_text("summary.csv", &csv)?;
    run.write_json("summary.json", &rows)?;
    finish(run, &ctx.cfg, None)
}
