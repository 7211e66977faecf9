// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Builds the biased/balanced toy pair once, then checks
//! every criterion and prints one PASS/FAIL line for each. Exits non-zero
//! if any criterion fails.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use langconf::attribution::{
    attribute_all, confusion_queries, layer_distribution, neuron_importance, records_digest,
    AttributionQuery, Attributor, DistributionMode, SampleScores, DEFAULT_TOP_N,
};
use langconf::corpus::{
    bilingual_train_corpus, gen_corpus, gen_prompts, labeled_lines, CorpusRecipe,
    PromptTemplate, SyntheticLanguageSpec,
};
use langconf::editing::{
    cp_replace_all, edited_benchmark, internal_preference, select_comparative, select_frequency,
    SelectionResult, DEFAULT_EDIT_N, DEFAULT_PREFERENCE_K,
};
use langconf::io::{parse_jsonl, to_jsonl};
use langconf::langid::{train_langid, LangIdModel, LangIdParams, LangIdReport};
use langconf::lens::{fit_tuned_lens, project_layer, LensHyper, LensSet};
use langconf::metrics::{
    line_accuracy, line_pass_rate, report_from_details, run_benchmark, BenchmarkRun,
    PromptRecord, ResponseDetail, ScoredResponse,
};
use langconf::model::{
    train_toy, EditMask, GenerateParams, Model, NeuronId, Record, TrainCorpus, TrainHyper,
    TransformerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MINORITY: &str = "B";

struct Fixture {
    corpus: TrainCorpus,
    langid_rows: Vec<(String, String)>,
    langid: LangIdModel,
    langid_report: LangIdReport,
    biased: Model,
    balanced: Model,
    prompts: Vec<PromptRecord>,
    select_prompts: Vec<PromptRecord>,
    gen: GenerateParams,
    orig: BenchmarkRun,
    reference_run: BenchmarkRun,
    confusion: Vec<AttributionQuery>,
    scores_biased: Vec<SampleScores>,
    scores_balanced: Vec<SampleScores>,
    comparative: SelectionResult,
    frequency: SelectionResult,
}

fn build_fixture() -> Fixture {
    let a = SyntheticLanguageSpec::language_a();
    let b = SyntheticLanguageSpec::language_b();
    let corpus = bilingual_train_corpus(&[a.clone(), b.clone()], &CorpusRecipe::default()).unwrap();
    let mut langid_rows = labeled_lines(&gen_corpus(&a, 200).unwrap(), "A");
    langid_rows.extend(labeled_lines(&gen_corpus(&b, 200).unwrap(), "B"));
    let (langid, langid_report) = train_langid(&langid_rows, &LangIdParams::default()).unwrap();

    let cfg = TransformerConfig::default();
    let (biased, _) = train_toy(cfg, &corpus, &TrainHyper::biased(), "biased").unwrap();
    let (balanced, _) = train_toy(cfg, &corpus, &TrainHyper::balanced(), "balanced").unwrap();

    let prompts = gen_prompts(&b, 100, &PromptTemplate::default()).unwrap();
    let select_prompts = gen_prompts(
        &b,
        300,
        &PromptTemplate {
            source: "select".into(),
            ..PromptTemplate::default()
        },
    )
    .unwrap();
    let gen = GenerateParams {
        max_new: 64,
        temperature: 0.8,
        seed: 7,
        ..GenerateParams::default()
    };
    let orig = run_benchmark(&biased, &prompts, &langid, &gen, None).unwrap();
    let reference_run = run_benchmark(&balanced, &prompts, &langid, &gen, None).unwrap();

    // Neurons are selected on a separate prompt set from the one evaluated.
    let select_run = run_benchmark(&biased, &select_prompts, &langid, &gen, None).unwrap();
    let confusion = confusion_queries(&select_run.details).unwrap();
    let scores_biased = attribute_all(&biased, &confusion).unwrap();
    let scores_balanced = attribute_all(&balanced, &confusion).unwrap();
    let comparative =
        select_comparative(&scores_biased, &scores_balanced, MINORITY, DEFAULT_EDIT_N).unwrap();
    let frequency =
        select_frequency(&scores_biased, MINORITY, DEFAULT_TOP_N, DEFAULT_EDIT_N).unwrap();
    Fixture {
        corpus,
        langid_rows,
        langid,
        langid_report,
        biased,
        balanced,
        prompts,
        select_prompts,
        gen,
        orig,
        reference_run,
        confusion,
        scores_biased,
        scores_balanced,
        comparative,
        frequency,
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn lpr(r: &BenchmarkRun) -> f64 {
    r.report.language(MINORITY).and_then(|l| l.lpr).unwrap_or(f64::NAN)
}

fn acc(r: &BenchmarkRun) -> f64 {
    r.report.language(MINORITY).and_then(|l| l.acc).unwrap_or(f64::NAN)
}

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u32> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..258)).collect()
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn structural(f: &Fixture) -> Outcome {
    let m = &f.biased;
    let n_layers = m.config().n_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_add = 0.0f64;
    let mut worst_ffn = 0.0f64;
    let within = |got: f32, want: f32| {
        let err = (got - want).abs() as f64;
        let allowed = 1e-5 + 1e-5 * want.abs() as f64;
        err / allowed
    };
    for _ in 0..100 {
        let t = random_tokens(&mut rng, 64);
        let tr = m.forward(&t, Record::Coefficients, None).unwrap();
        for l in 0..n_layers {
            for p in 0..t.len() {
                let (h, a, ffn, o) = (tr.h_prev(l, p), tr.attn_out(l, p), tr.ffn_out(l, p), tr.h_out(l, p));
                for i in 0..h.len() {
                    worst_add = worst_add.max(within(h[i] + a[i] + ffn[i], o[i]));
                }
                let r: Vec<f32> = h.iter().zip(a).map(|(x, y)| x + y).collect();
                let (_, recon) = m.ffn_decompose(l, &r).unwrap();
                for (x, y) in recon.iter().zip(ffn) {
                    worst_ffn = worst_ffn.max(within(*x, *y));
                }
            }
        }
    }
    outcome(
        worst_add <= 1.0 && worst_ffn <= 1.0,
        format!(
            "100 inputs; worst error / tolerance: additivity {worst_add:.3}, FFN reconstruction {worst_ffn:.3}"
        ),
    )
}

/// Scores recomputed neuron by neuron through `log_prob_f64`.
fn brute_force(m: &Model, q: &AttributionQuery, mask: Option<&EditMask>) -> Vec<f64> {
    let cfg = m.config();
    let (d, n) = (cfg.d_model, cfg.ffn_width);
    let tr = m.forward(&q.tokens, Record::Coefficients, mask).unwrap();
    let p = q.position;
    let mut out = Vec::with_capacity(cfg.n_layers * n);
    for l in 0..cfg.n_layers {
        let r: Vec<f64> = tr
            .h_prev(l, p)
            .iter()
            .zip(tr.attn_out(l, p))
            .map(|(a, b)| *a as f64 + *b as f64)
            .collect();
        let base = m.log_prob_f64(&r, q.target_token, true);
        let fc2 = &m.weights().layers[l].fc2;
        for (k, &c) in tr.coeffs(l, p).unwrap().iter().enumerate() {
            let v: Vec<f64> = (0..d).map(|i| r[i] + c as f64 * fc2[i * n + k] as f64).collect();
            out.push(m.log_prob_f64(&v, q.target_token, true) - base);
        }
    }
    out
}

fn attribution_oracle(f: &Fixture) -> Outcome {
    let m = &f.biased;
    let mut queries: Vec<AttributionQuery> = f.confusion.iter().take(20).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    while queries.len() < 20 {
        let t = random_tokens(&mut rng, 40);
        if t.len() >= 2 {
            queries.push(AttributionQuery::at("random", &t, t.len() - 2).unwrap());
        }
    }
    let mut worst = 0.0f64;
    for q in &queries {
        let fast = neuron_importance(m, q).unwrap();
        for (a, b) in fast.scores.iter().zip(brute_force(m, q, None)) {
            worst = worst.max((a - b).abs());
        }
    }
    // Zeroed coefficients (through a mask) must score exactly 0.
    let zeroed = f.comparative.mask();
    let attributor = Attributor::new(m);
    let mut zero_ok = true;
    let mut n_zero = 0;
    for q in queries.iter().take(5) {
        let tr = m.forward(&q.tokens, Record::Coefficients, Some(&zeroed)).unwrap();
        let s = attributor.scores(&tr, q).unwrap();
        for l in 0..m.config().n_layers {
            for (k, &c) in tr.coeffs(l, q.position).unwrap().iter().enumerate() {
                if c == 0.0 {
                    n_zero += 1;
                    zero_ok &= s.score(NeuronId::new(l, k)) == 0.0;
                }
            }
        }
    }
    outcome(
        worst < 1e-6 && zero_ok && n_zero > 0,
        format!(
            "{} queries x {} neurons; max |fast - brute force| = {worst:.2e}; {n_zero} zero-coefficient neurons score 0: {zero_ok}",
            queries.len(),
            m.config().total_neurons()
        ),
    )
}

fn lens_fidelity(f: &Fixture) -> Outcome {
    let m = &f.biased;
    let last = m.config().n_layers - 1;
    let vocab = m.config().vocab_size;
    let identity = LensSet::identity(m);
    let mut worst = 0.0f64;
    let mut positions = 0;
    for d in f.orig.details.iter().take(10) {
        let tokens = d.full_tokens();
        let tokens = &tokens[..tokens.len().min(m.config().max_seq_len)];
        let tr = m.forward(tokens, Record::Residual, None).unwrap();
        for p in (0..tokens.len()).step_by(tokens.len().div_ceil(10).max(1)).take(10) {
            let probs = tr.probs_at(p);
            for (t, pr) in project_layer(m, &tr, last, p, &identity, vocab).unwrap() {
                worst = worst.max((pr - probs[t as usize]).abs() as f64);
            }
            positions += 1;
        }
    }
    let streams: Vec<Vec<u32>> = f.corpus.languages.iter().map(|l| l.heldout.clone()).collect();
    let (_, report) = fit_tuned_lens(m, &streams, &LensHyper::default()).unwrap();
    let better = report
        .layers
        .iter()
        .filter(|l| l.tuned_kl <= l.logit_lens_kl)
        .count();
    let share = better as f64 / report.layers.len() as f64;
    let kls: Vec<String> = report
        .layers
        .iter()
        .map(|l| format!("{:.3}/{:.3}", l.tuned_kl, l.logit_lens_kl))
        .collect();
    outcome(
        worst <= 1e-6 && positions >= 100 && share >= 0.8,
        format!(
            "identity lens max |dp| = {worst:.2e} over {positions} positions; tuned <= logit-lens KL on {better}/{} layers (tuned/logit: {})",
            report.layers.len(),
            kls.join(", ")
        ),
    )
}

fn langid_accuracy(f: &Fixture) -> Outcome {
    let r = &f.langid_report;
    outcome(
        r.heldout_accuracy >= 0.99,
        format!(
            "held-out line accuracy {:.4} on {} lines ({} training lines, {} rows total)",
            r.heldout_accuracy,
            r.n_heldout,
            r.n_train,
            f.langid_rows.len()
        ),
    )
}

fn metrics_fixtures(f: &Fixture) -> Outcome {
    let fixture = [
        ScoredResponse::new("A", &[Some("A"), Some("B"), Some("A")]),
        ScoredResponse::new("A", &[Some("A"), Some("A")]),
    ];
    let (fl, fa) = (line_pass_rate(&fixture).unwrap(), line_accuracy(&fixture).unwrap());
    let skipped = [
        ScoredResponse::new("B", &[None, Some("B")]),
        ScoredResponse::new("B", &[None]),
        ScoredResponse::new("B", &[Some("A"), None, Some("B")]),
    ];
    let (sl, sa) = (line_pass_rate(&skipped).unwrap(), line_accuracy(&skipped).unwrap());
    let hand = fl == 50.0 && fa == 80.0 && sl == 200.0 / 3.0 && sa == 200.0 / 3.0;

    let jsonl = to_jsonl(&f.orig.details).unwrap();
    let back: Vec<ResponseDetail> = parse_jsonl(&jsonl).unwrap();
    let recomputed = report_from_details(&back, f.orig.report.metadata.clone());
    let same = recomputed == f.orig.report;
    outcome(
        hand && same,
        format!(
            "[A,B,A]+[A,A]: LPR {fl}, Acc {fa}; skipped-line fixture: LPR {sl:.4}, Acc {sa:.4}; report recomputed from JSONL identical: {same}"
        ),
    )
}

fn confusion_contrast(f: &Fixture) -> Outcome {
    let (b, r) = (lpr(&f.orig), lpr(&f.reference_run));
    outcome(
        b < 80.0 && r >= 95.0,
        format!("minority LPR: biased {b:.1} (< 80), balanced {r:.1} (>= 95), same {} prompts", f.prompts.len()),
    )
}

fn mitigation(f: &Fixture, comp: &BenchmarkRun, freq: &BenchmarkRun) -> Outcome {
    let base = acc(&f.orig);
    let (dc, df) = (acc(comp) - base, acc(freq) - base);
    let layers = |s: &SelectionResult| {
        let mut per = vec![0; f.biased.config().n_layers];
        for n in &s.neurons {
            per[n.layer] += 1;
        }
        per
    };
    outcome(
        dc >= 10.0 && dc > df,
        format!(
            "minority Acc {base:.1} unedited; comparative {:+.1} (layers {:?}); frequency {:+.1} (layers {:?}); {} selection samples",
            dc,
            layers(&f.comparative),
            df,
            layers(&f.frequency),
            f.confusion.len()
        ),
    )
}

fn cp_replacement(f: &Fixture) -> Outcome {
    let rows = cp_replace_all(&f.biased, &f.balanced, &f.prompts, &f.langid, &f.gen).unwrap();
    let meta = f.orig.report.metadata.clone();
    let original: Vec<ResponseDetail> = rows.iter().map(|r| r.original.clone()).collect();
    let replaced: Vec<ResponseDetail> = rows.iter().map(|r| r.replaced.clone()).collect();
    let before = report_from_details(&original, meta.clone());
    let after = report_from_details(&replaced, meta);
    let (lb, la) = (
        before.language(MINORITY).and_then(|l| l.lpr).unwrap_or(f64::NAN),
        after.language(MINORITY).and_then(|l| l.lpr).unwrap_or(f64::NAN),
    );
    let n_cp = rows.iter().filter(|r| r.confusion_point.is_some()).count();
    let n_rep = rows.iter().filter(|r| r.replaceable).count();
    outcome(
        la >= lb + 5.0,
        format!("minority LPR {lb:.1} -> {la:.1} after replacement ({n_cp} confusion points, {n_rep} replaceable)"),
    )
}

fn preference(f: &Fixture) -> Outcome {
    let k = DEFAULT_PREFERENCE_K;
    let before = internal_preference(&f.biased, &f.prompts, &f.langid, k, &f.gen, None).unwrap();
    let mask = f.comparative.mask();
    let after =
        internal_preference(&f.biased, &f.prompts, &f.langid, k, &f.gen, Some(&mask)).unwrap();
    outcome(
        after.mean_count >= before.mean_count,
        format!(
            "target tokens in top-{k}: {:.2} -> {:.2} (prob {:.3} -> {:.3})",
            before.mean_count, after.mean_count, before.mean_prob, after.mean_prob
        ),
    )
}

fn editing_identity(f: &Fixture) -> Outcome {
    let empty = EditMask::new();
    let masked = run_benchmark(&f.biased, &f.prompts, &f.langid, &f.gen, Some(&empty)).unwrap();
    let identical = to_jsonl(&masked.details).unwrap() == to_jsonl(&f.orig.details).unwrap()
        && serde_json::to_string(&masked.report).unwrap()
            == serde_json::to_string(&f.orig.report).unwrap();

    let mask = f.comparative.mask();
    let mut exact = true;
    let mut others_equal = true;
    for d in f.orig.details.iter().take(10) {
        let t = d.full_tokens();
        let t = &t[..t.len().min(f.biased.config().max_seq_len)];
        let edited = f.biased.forward(t, Record::Coefficients, Some(&mask)).unwrap();
        let plain = f.biased.forward(t, Record::Coefficients, None).unwrap();
        for n in &f.comparative.neurons {
            for p in 0..t.len() {
                exact &= edited.coeffs(n.layer, p).unwrap()[n.index].to_bits() == 0;
            }
        }
        // Before the first edited layer nothing may change.
        let first = f.comparative.neurons.iter().map(|n| n.layer).min().unwrap_or(0);
        for p in 0..t.len() {
            others_equal &= edited.coeffs(first, p).unwrap().iter().zip(plain.coeffs(first, p).unwrap())
                .enumerate()
                .all(|(k, (a, b))| mask.per_layer(f.biased.config().n_layers)[first].contains(&k) || a == b);
        }
    }
    outcome(
        identical && exact && others_equal,
        format!(
            "empty-mask run byte-identical: {identical}; masked coefficients exactly 0: {exact}; unmasked coefficients of the first edited layer unchanged: {others_equal}"
        ),
    )
}

fn determinism(f: &Fixture) -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let a = SyntheticLanguageSpec::language_a();
    let b = SyntheticLanguageSpec::language_b();
    let specs = [a, b];
    let c2 = bilingual_train_corpus(&specs, &CorpusRecipe::default()).unwrap();
    checks.push(("corpus", c2 == f.corpus));

    let (l2, _) = train_langid(&f.langid_rows, &LangIdParams::default()).unwrap();
    checks.push(("langid", l2.digest() == f.langid.digest()));

    let short = TrainHyper {
        steps: 40,
        warmup: 5,
        ..TrainHyper::biased()
    };
    let cfg = TransformerConfig::default();
    let t1 = train_toy(cfg, &f.corpus, &short, "d").unwrap().0;
    let t2 = train_toy(cfg, &f.corpus, &short, "d").unwrap().0;
    checks.push(("training", t1.digest() == t2.digest()));

    let streams: Vec<Vec<u32>> = f.corpus.languages.iter().map(|l| l.heldout.clone()).collect();
    let lh = LensHyper {
        steps: 20,
        ..LensHyper::default()
    };
    let (lens1, _) = fit_tuned_lens(&f.biased, &streams, &lh).unwrap();
    let (lens2, _) = fit_tuned_lens(&f.biased, &streams, &lh).unwrap();
    checks.push(("lens", lens1.digest() == lens2.digest()));

    // Re-run generation-heavy stages on a differently sized thread pool.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (bench, attr, sel, cp, pref) = pool.install(|| {
        let bench = run_benchmark(&f.biased, &f.prompts, &f.langid, &f.gen, None).unwrap();
        let attr = attribute_all(&f.biased, &f.confusion).unwrap();
        let sel = select_comparative(&attr, &f.scores_balanced, MINORITY, DEFAULT_EDIT_N).unwrap();
        let few = &f.prompts[..20];
        let cp = (
            cp_replace_all(&f.biased, &f.balanced, few, &f.langid, &f.gen).unwrap(),
            cp_replace_all(&f.biased, &f.balanced, few, &f.langid, &f.gen).unwrap(),
        );
        let pref = internal_preference(&f.biased, few, &f.langid, 10, &f.gen, None).unwrap();
        (bench, attr, sel, cp, pref)
    });
    checks.push(("benchmark", to_jsonl(&bench.details).unwrap() == to_jsonl(&f.orig.details).unwrap()));
    checks.push(("attribution", records_digest(&attr) == records_digest(&f.scores_biased)));
    checks.push(("selection", sel == f.comparative));
    checks.push(("cp-replace", to_jsonl(&cp.0).unwrap() == to_jsonl(&cp.1).unwrap()));
    let pref2 = internal_preference(&f.biased, &f.prompts[..20], &f.langid, 10, &f.gen, None).unwrap();
    checks.push(("preference", pref == pref2));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let names: Vec<&str> = checks.iter().map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("identical hashes on rerun for {}", names.join(", "))
        } else {
            format!("differs on rerun: {}", failed.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn main() -> ExitCode {
    let start = Instant::now();
    let f = build_fixture();
    report(&format!(
        "fixture: corpus, langid, biased + balanced models, {} + {} prompts, {} confusion samples ({:.0} s)",
        f.prompts.len(),
        f.select_prompts.len(),
        f.confusion.len(),
        start.elapsed().as_secs_f64()
    ));
    let layer_mass = layer_distribution(&f.scores_biased, DistributionMode::MembershipCount, DEFAULT_TOP_N)
        .map(|v| format!("{v:?}"))
        .unwrap_or_else(|e| e.to_string());
    report(&format!("top-{DEFAULT_TOP_N} importance membership per layer at confusion points: {layer_mass}"));

    let edited = Instant::now();
    let comp = edited_benchmark(&f.biased, &f.comparative, &f.prompts, &f.langid, &f.gen).unwrap();
    let freq = edited_benchmark(&f.biased, &f.frequency, &f.prompts, &f.langid, &f.gen).unwrap();
    let edit_secs = edited.elapsed().as_secs_f64();

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("structural suite", Box::new(|| structural(&f))),
        ("attribution oracle", Box::new(|| attribution_oracle(&f))),
        ("lens fidelity", Box::new(|| lens_fidelity(&f))),
        ("langid accuracy", Box::new(|| langid_accuracy(&f))),
        ("metrics fixtures", Box::new(|| metrics_fixtures(&f))),
        ("confusion reproduction", Box::new(|| confusion_contrast(&f))),
        ("mitigation direction", Box::new(|| mitigation(&f, &comp, &freq))),
        ("CP replacement direction", Box::new(|| cp_replacement(&f))),
        ("internal preference direction", Box::new(|| preference(&f))),
        ("editing exactness and identity", Box::new(|| editing_identity(&f))),
        ("determinism", Box::new(|| determinism(&f))),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        let mut secs = t.elapsed().as_secs_f64();
        if i == 6 {
            secs += edit_secs;
        }
        if !o.pass {
            failures += 1;
        }
        report(&format!(
            "criterion {:>2} [{}] {name}: {} ({secs:.1} s)",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
    }
    report(&format!(
        "acceptance: {}/{} criteria passed in {:.0} s",
        criteria.len() - failures,
        criteria.len(),
        start.elapsed().as_secs_f64()
    ));
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
