//! Subcommand implementations.
//!
//! Every data file written here depends only on the inputs and seeds; wall
//! times go to stdout or to the bench files that exist to hold them.

use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ralm_core::analysis::reconciliation_run;
use ralm_core::generation::{generate, generate_ensemble, ContextPattern, GenerationConfig, GenerationReport, Sampling, StepReport};
use ralm_core::model::{ByteTokenizer, Model, ModelConfig};
use ralm_core::retrieval::{Bm25Index, Bm25Params, EvidenceSource, FixedEvidence, RetrievalConfig, Retriever};
use ralm_core::tuneval::{
    build_training_set, grad_check, make_chunks, perplexity_continuous, perplexity_oracle, DatasetConfig, EvalConfig,
    TrainConfig, Trainer,
};
use ralm_core::{Real, SeededRng, TokenId};
use serde::Serialize;

use crate::bench::{self, BenchScenario, Meta, StdClock};
use crate::cli::{BenchArgs, EvalArgs, FinetuneArgs, GenerateArgs, IndexArgs, ModelArgs, ReconcileArgs, RetrievalArgs};
use crate::config::{parse_list, ModelOverrides, Preset};
use crate::error::{CliError, CliResult};
use crate::{checkpoint, corpus, dataset, plot, report};

/// Largest per-step logit deviation tolerated by `--verify-oracle`.
pub const ORACLE_TOLERANCE: f64 = 1e-5;
/// Largest relative perplexity difference tolerated by `eval --oracle`.
pub const PERPLEXITY_TOLERANCE: f64 = 1e-4;
/// Relative tolerance of `finetune --grad-check`.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn parse_pattern(s: &str) -> CliResult<ContextPattern> {
    ContextPattern::parse(s).ok_or_else(|| CliError::Usage(format!("unknown pattern {s:?} (none, prepend, append)")))
}

/// Loads a checkpoint or initialises a preset; returns the model and its seed.
fn load_model(args: &ModelArgs, default: Preset) -> CliResult<(Model<f32>, u64)> {
    let overrides = ModelOverrides {
        layers: args.layers,
        hidden: args.hidden,
        heads: args.heads,
        mlp_dim: args.mlp_dim,
        max_seq: args.max_seq,
        lora_rank: args.lora_rank,
        lora_targets: args.lora_targets.clone(),
        position: args.position.clone(),
    };
    if let Some(path) = &args.checkpoint {
        if args.preset.is_some() || !overrides.is_empty() {
            return Err(CliError::Usage("--checkpoint fixes the architecture; drop the preset and size flags".into()));
        }
        return checkpoint::load(path);
    }
    let preset = args.preset.as_deref().map_or(Ok(default), Preset::parse)?;
    let cfg = overrides.apply(preset)?;
    Ok((Model::init(cfg, args.model_seed)?, args.model_seed))
}

/// Where evidence comes from, with the names of the documents fetched.
struct Evidence {
    index: Option<Bm25Index>,
    fixed: Option<FixedEvidence>,
    max_evidence: usize,
    log: Vec<Vec<String>>,
}

impl Evidence {
    fn open(r: &RetrievalArgs, pattern: ContextPattern, cfg: &ModelConfig, seed: u64) -> CliResult<Option<Self>> {
        let mut ev = Evidence { index: None, fixed: None, max_evidence: r.max_evidence, log: Vec::new() };
        match (&r.index, r.fixed_evidence) {
            (Some(path), _) => ev.index = Some(corpus::load_index(path)?),
            (None, Some(len)) => {
                let mut rng = SeededRng::new(seed ^ 0xE71D_E4CE);
                ev.fixed = Some(FixedEvidence::random(len.min(r.max_evidence), cfg.vocab_base, &mut rng));
            }
            (None, None) if pattern.retrieves() => {
                return Err(CliError::Usage(format!("pattern {} needs --index or --fixed-evidence", pattern.name())));
            }
            (None, None) => return Ok(None),
        }
        Ok(Some(ev))
    }
}

impl EvidenceSource for Evidence {
    fn fetch(&mut self, query: &[TokenId], k: usize) -> ralm_core::Result<Vec<Vec<TokenId>>> {
        let cap = self.max_evidence;
        let (names, docs) = if let Some(index) = &self.index {
            let hits = index.retrieve(query, k);
            let names = hits.iter().map(|h| index.corpus().get(h.doc).map_or(String::new(), |d| d.name.clone())).collect();
            let docs = hits
                .iter()
                .map(|h| index.document(h.doc).map_or(Vec::new(), |d| d[..d.len().min(cap)].to_vec()))
                .collect();
            (names, docs)
        } else if let Some(fixed) = &mut self.fixed {
            let docs = fixed.fetch(query, k)?;
            ((0..docs.len()).map(|j| format!("fixed-{j}")).collect(), docs)
        } else {
            (Vec::new(), Vec::new())
        };
        self.log.push(names);
        Ok(docs)
    }
}

fn retrieval_config(r: &RetrievalArgs) -> RetrievalConfig {
    RetrievalConfig { stride: r.stride, query_len: r.query_len, top_k: 1, max_evidence: r.max_evidence }
}

#[derive(Serialize)]
struct StepJson {
    step: usize,
    seq_len: usize,
    recomputed: usize,
    retrieved: bool,
    docs: Vec<String>,
    flops_kv: u64,
    flops_lora: u64,
    flops_other: u64,
    oracle_deviation: Option<f64>,
}

#[derive(Serialize)]
struct GenerationJson {
    pattern: &'static str,
    ensemble: Option<usize>,
    prompt_len: usize,
    prompt: Vec<TokenId>,
    tokens: Vec<TokenId>,
    text: String,
    prefill_recomputed: usize,
    total_recomputed: usize,
    retrievals: usize,
    flops_kv: u64,
    flops_lora: u64,
    flops_other: u64,
    max_oracle_deviation: Option<f64>,
    steps: Vec<StepJson>,
}

fn step_json(i: usize, s: &StepReport, docs: Vec<String>) -> StepJson {
    StepJson {
        step: i,
        seq_len: s.seq_len,
        recomputed: s.recomputed,
        retrieved: s.retrieved,
        docs,
        flops_kv: s.flops.kv_projection(),
        flops_lora: s.flops.lora(),
        flops_other: s.flops.other(),
        oracle_deviation: s.oracle_deviation,
    }
}

fn read_prompt(a: &GenerateArgs, vocab_base: usize) -> CliResult<Vec<TokenId>> {
    if let Some(text) = &a.prompt {
        return Ok(ByteTokenizer.encode(text));
    }
    if let Some(path) = &a.prompt_file {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        return Ok(bytes.into_iter().map(TokenId::from).collect());
    }
    let n = a.prompt_random.unwrap_or(0);
    let mut rng = SeededRng::new(a.seed ^ 0x005E_ED0F_F00D);
    Ok((0..n).map(|_| rng.range_inclusive(0, vocab_base - 1) as TokenId).collect())
}

pub fn generate_cmd(a: GenerateArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    let (model, _) = load_model(&a.model, Preset::Tiny)?;
    let pattern = parse_pattern(&a.retrieval.pattern)?;
    let prompt = read_prompt(&a, model.cfg.vocab_base)?;
    if prompt.is_empty() {
        return Err(CliError::data("prompt is empty"));
    }
    if !(a.temperature >= 0.0 && a.temperature.is_finite()) {
        return Err(CliError::data(format!("temperature {} must be finite and non-negative", a.temperature)));
    }
    let cfg = GenerationConfig {
        pattern,
        retrieval: retrieval_config(&a.retrieval),
        use_marks: a.retrieval.marks,
        max_new: a.max_new,
        sampling: if a.temperature == 0.0 {
            Sampling::Greedy
        } else {
            Sampling::Temperature { temperature: a.temperature, seed: a.seed }
        },
        prefill: true,
        verify_oracle: a.verify_oracle,
    };
    let mut source = Evidence::open(&a.retrieval, pattern, &model.cfg, a.seed)?;
    let clock = StdClock::new();
    let started = Instant::now();
    let rep: GenerationReport = match a.ensemble {
        Some(k) => {
            if pattern != ContextPattern::Append {
                return Err(CliError::Usage("--ensemble requires --pattern append".into()));
            }
            let src = source.as_mut().ok_or_else(|| CliError::Usage("--ensemble needs evidence".into()))?;
            generate_ensemble(&model, &cfg, src, &prompt, k, &clock)?
        }
        None => generate(&model, &cfg, source.as_mut().map(|s| s as &mut dyn EvidenceSource), &prompt, &clock)?,
    };
    let elapsed = started.elapsed().as_secs_f64();

    let mut log = source.map(|s| s.log).unwrap_or_default().into_iter();
    let mut steps = Vec::with_capacity(rep.steps.len());
    for (i, s) in rep.steps.iter().enumerate() {
        let docs = if s.retrieved { log.next().unwrap_or_default() } else { Vec::new() };
        let mut line = format!("step {i:>4}  len {:>5}  recomputed {:>5}", s.seq_len, s.recomputed);
        if s.retrieved {
            line += &format!("  retrieved [{}]", docs.join(", "));
        }
        if let Some(d) = s.oracle_deviation {
            line += &format!("  oracle {d:.2e}");
        }
        println!("{line}");
        steps.push(step_json(i, s, docs));
    }
    let flops = rep.total_flops();
    let json = GenerationJson {
        pattern: pattern.name(),
        ensemble: a.ensemble,
        prompt_len: prompt.len(),
        tokens: rep.tokens.clone(),
        text: String::from_utf8_lossy(&ByteTokenizer.decode(&rep.tokens)).into_owned(),
        prompt,
        prefill_recomputed: rep.prefill.as_ref().map_or(0, |p| p.recomputed),
        total_recomputed: rep.total_recomputed(),
        retrievals: rep.retrievals(),
        flops_kv: flops.kv_projection(),
        flops_lora: flops.lora(),
        flops_other: flops.other(),
        max_oracle_deviation: rep.max_oracle_deviation(),
        steps,
    };
    write_json(&out_dir.join("generation.json"), &json)?;
    println!("generated {} tokens in {elapsed:.3}s: {:?}", json.tokens.len(), json.text);
    if let Some(dev) = json.max_oracle_deviation {
        if dev > ORACLE_TOLERANCE {
            return Err(CliError::Invariant(format!("cached logits deviate from recomputation by {dev:.3e}")));
        }
    }
    Ok(())
}

pub fn index_cmd(a: IndexArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    if !(a.k1 >= 0.0 && (0.0..=1.0).contains(&a.b)) {
        return Err(CliError::data(format!("need k1 >= 0 and 0 <= b <= 1, got k1={} b={}", a.k1, a.b)));
    }
    let corpus = corpus::ingest(&a.corpus, a.exclude.as_deref())?;
    let index = Bm25Index::build(corpus, Bm25Params { k1: a.k1, b: a.b })?;
    let path = a.output.clone().unwrap_or_else(|| out_dir.join("index.bin"));
    corpus::save_index(&path, &index)?;
    println!(
        "indexed {} documents, {} tokens, {} distinct terms, mean length {:.1} -> {}",
        index.corpus().len(),
        index.corpus().total_tokens(),
        index.vocabulary_size(),
        index.avgdl(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradCheckJson {
    checked: usize,
    passed: usize,
    worst_relative_error: f64,
    tolerance: f64,
}

#[derive(Serialize)]
struct FinetuneJson {
    pattern: &'static str,
    examples: usize,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    trainable_values: usize,
    frozen_tensors_unchanged: bool,
    grad_check: Option<GradCheckJson>,
}

/// Names of frozen parameters that differ between `before` and `after`.
/// The marking-token rows of the embedding and the adapters are trainable.
pub fn frozen_changes<T: Real>(before: &Model<T>, after: &Model<T>) -> Vec<String> {
    let marks = [before.vocab().mark_l() as usize, before.vocab().mark_r() as usize];
    let mut changed = Vec::new();
    for ((name, x), (_, y)) in before.params.named_tensors().into_iter().zip(after.params.named_tensors()) {
        if name.contains(".lora.") {
            continue;
        }
        let same_row = |r: usize| x.row(r).iter().zip(y.row(r)).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits());
        let differs = x.rows() != y.rows()
            || x.cols() != y.cols()
            || (0..x.rows()).any(|r| !(name == "embed" && marks.contains(&r)) && !same_row(r));
        if differs {
            changed.push(name);
        }
    }
    changed
}

pub fn finetune_cmd(a: FinetuneArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    let (base, seed) = load_model(&a.model, Preset::Tiny)?;
    let pattern = parse_pattern(&a.retrieval.pattern)?;
    let vocab = base.vocab();
    let examples = match (&a.dataset, &a.train) {
        (Some(path), _) => dataset::load(path, vocab)?,
        (None, Some(path)) => {
            let stream = corpus::read_stream(path)?;
            let mut source = Evidence::open(&a.retrieval, pattern, &base.cfg, a.seed)?;
            let cfg = DatasetConfig {
                pattern,
                stride: a.retrieval.stride,
                window: a.window,
                query_len: a.retrieval.query_len,
                max_evidence: a.retrieval.max_evidence,
                use_marks: a.retrieval.marks,
                max_examples: a.max_examples,
            };
            build_training_set(&stream, &cfg, source.as_mut().map(|s| s as &mut dyn EvidenceSource), vocab, a.seed)?
        }
        (None, None) => return Err(CliError::Usage("finetune needs --train or --dataset".into())),
    };
    if let Some(ex) = examples.iter().find(|e| e.tokens.len() > base.cfg.max_seq) {
        return Err(CliError::data(format!("example of {} tokens exceeds the model's {} positions", ex.tokens.len(), base.cfg.max_seq)));
    }
    dataset::save(&out_dir.join("dataset.jsonl"), &examples)?;

    let cfg = TrainConfig { lr: a.lr, steps: a.steps, warmup: a.warmup, batch_size: a.batch_size, ..TrainConfig::default() };
    let mut trainer = Trainer::new(base.cast::<f64>(), cfg)?;
    let trainable_values: usize = trainer
        .model
        .params
        .trainable_mask()
        .into_iter()
        .map(|id| trainer.model.params.trainable_slice(id).map_or(0, <[f64]>::len))
        .sum();
    let started = Instant::now();
    let history = trainer.fit(&examples, |m| {
        if m.step % 10 == 0 || m.step + 1 == a.steps {
            println!("step {:>5}  lr {:.3e}  loss {:.5}", m.step, m.lr, m.loss);
        }
    })?;
    println!("trained {} steps in {:.2}s", history.len(), started.elapsed().as_secs_f64());

    let metrics_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path).map_err(|e| CliError::data(e.to_string()))?;
    w.write_record(["step", "lr", "loss"]).map_err(|e| CliError::data(e.to_string()))?;
    for m in &history {
        w.write_record([m.step.to_string(), format!("{:e}", m.lr), format!("{:e}", m.loss)])
            .map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&metrics_path, e))?;

    let grad = if a.grad_check > 0 {
        let r = grad_check(&trainer.model, &examples[0], a.grad_check, GRAD_CHECK_TOLERANCE, a.seed)?;
        println!("gradient check: {}/{} within {:.0e}, worst {:.3e}", r.passed, r.checked, r.tolerance, r.worst);
        Some(GradCheckJson { checked: r.checked, passed: r.passed, worst_relative_error: r.worst, tolerance: r.tolerance })
    } else {
        None
    };

    let tuned: Model<f32> = trainer.model.cast();
    let changed = frozen_changes(&base, &tuned);
    checkpoint::save(&out_dir.join("checkpoint.ralm"), &tuned, seed)?;
    let summary = FinetuneJson {
        pattern: pattern.name(),
        examples: examples.len(),
        steps: history.len(),
        initial_loss: history.first().map_or(f64::NAN, |m| m.loss),
        final_loss: history.last().map_or(f64::NAN, |m| m.loss),
        trainable_values,
        frozen_tensors_unchanged: changed.is_empty(),
        grad_check: grad,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    if !changed.is_empty() {
        return Err(CliError::Invariant(format!("frozen tensors changed during training: {}", changed.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleJson {
    nll: f64,
    perplexity: f64,
    relative_difference: f64,
}

#[derive(Serialize)]
struct EvalJson {
    pattern: &'static str,
    chunks: usize,
    scored_tokens: usize,
    nll: f64,
    perplexity: f64,
    oracle: Option<OracleJson>,
}

pub fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    let (model, _) = load_model(&a.model, Preset::Tiny)?;
    let pattern = parse_pattern(&a.retrieval.pattern)?;
    let stream = corpus::read_stream(&a.text)?;
    let chunks = make_chunks(&stream, a.chunk_len, a.retrieval.stride);
    if chunks.is_empty() {
        return Err(CliError::data(format!("{}: too short for one chunk of two strides", a.text.display())));
    }
    let cfg = EvalConfig {
        pattern,
        retrieval: retrieval_config(&a.retrieval),
        use_marks: a.retrieval.marks,
        include_marks: a.include_marks,
    };
    let mut source = Evidence::open(&a.retrieval, pattern, &model.cfg, 0)?;
    let r = perplexity_continuous(&model, &cfg, source.as_mut().map(|s| s as &mut dyn EvidenceSource), &chunks)?;
    println!("{} chunks, {} tokens scored, perplexity {:.6}", chunks.len(), r.count, r.perplexity);
    let oracle = if a.oracle {
        let mut source = Evidence::open(&a.retrieval, pattern, &model.cfg, 0)?;
        let o = perplexity_oracle(&model, &cfg, source.as_mut().map(|s| s as &mut dyn EvidenceSource), &chunks)?;
        let rel = (r.perplexity - o.perplexity).abs() / o.perplexity.abs().max(f64::MIN_POSITIVE);
        println!("oracle perplexity {:.6}, relative difference {rel:.3e}", o.perplexity);
        Some(OracleJson { nll: o.nll, perplexity: o.perplexity, relative_difference: rel })
    } else {
        None
    };
    let json = EvalJson { pattern: pattern.name(), chunks: chunks.len(), scored_tokens: r.count, nll: r.nll, perplexity: r.perplexity, oracle };
    write_json(&out_dir.join("eval.json"), &json)?;
    if let Some(o) = &json.oracle {
        if o.relative_difference.is_nan() || o.relative_difference > PERPLEXITY_TOLERANCE {
            return Err(CliError::Invariant(format!("cached perplexity differs from recomputation by {:.3e}", o.relative_difference)));
        }
    }
    Ok(())
}

pub fn reconcile_cmd(a: ReconcileArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    let patterns = if a.pattern == "all" { ContextPattern::ALL.to_vec() } else { vec![parse_pattern(&a.pattern)?] };
    let cfg = ModelConfig {
        lora_rank: a.lora_rank,
        max_seq: a.t + a.evidence + 4,
        ..ModelConfig::tiny(a.layers, a.hidden, a.heads)
    };
    cfg.validate()?;
    let model: Model<f32> = Model::init(cfg, a.seed)?;
    let mut json = Vec::new();
    let mut text = String::new();
    let (mut mismatch, mut incomparable) = (Vec::new(), Vec::new());
    for p in patterns {
        let o = reconciliation_run(&model, p, a.t, a.stride, a.evidence, a.marks, a.seed)?;
        let t = report::to_text(&o);
        print!("{t}");
        text += &t;
        if !o.report.comparable() {
            incomparable.push(p.name());
        } else if !o.report.exact() {
            mismatch.push(p.name());
        }
        json.push(report::to_json(&o));
    }
    write_json(&out_dir.join("reconcile.json"), &json)?;
    std::fs::write(out_dir.join("reconcile.txt"), text).map_err(|e| CliError::io(&out_dir.join("reconcile.txt"), e))?;
    if !mismatch.is_empty() {
        return Err(CliError::Invariant(format!("measured FLOPs differ from the cost model for {}", mismatch.join(", "))));
    }
    if !incomparable.is_empty() {
        return Err(CliError::data(format!("run shape outside the cost model's assumptions for {}", incomparable.join(", "))));
    }
    Ok(())
}

fn scenario(a: &BenchArgs, model: &ModelConfig) -> CliResult<BenchScenario> {
    let patterns = a
        .patterns
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(parse_pattern)
        .collect::<CliResult<Vec<_>>>()?;
    let sc = BenchScenario {
        model: model.clone(),
        model_seed: a.model.model_seed,
        patterns,
        prompt_len: a.prompt_len,
        prompt_len_max: a.prompt_len_max,
        evidence_len: a.evidence,
        strides: parse_list(&a.strides, "stride")?,
        lengths: parse_list(&a.lengths, "length")?,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
        use_marks: a.marks,
        query_len: a.query_len,
    };
    sc.validate()?;
    Ok(sc)
}

fn write_plot(path: &Path, rows: &[bench::BenchRow]) -> CliResult<()> {
    let svg = plot::render_svg(rows, "Generation wall time by context pattern");
    std::fs::write(path, svg).map_err(|e| CliError::io(path, e))
}

pub fn bench_cmd(a: BenchArgs) -> CliResult<()> {
    let out_dir = a.out.resolve()?;
    if let Some(csv) = &a.replot {
        let rows = bench::read_rows(csv)?;
        let path = out_dir.join("bench.svg");
        write_plot(&path, &rows)?;
        println!("redrew {} rows -> {}", rows.len(), path.display());
        return Ok(());
    }
    let (model, _) = load_model(&a.model, Preset::Bench)?;
    let sc = scenario(&a, &model.cfg)?;
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let started = Instant::now();
    let rows = bench::run_bench(&model, &sc, |r| {
        if r.error.is_empty() {
            println!(
                "{:<8} s={:<4} L={:<6} rep {}  {:>9.3}s  recomputed {:>7}",
                r.pattern, r.stride, r.target_len, r.rep, r.wall_s, r.recomputed_tokens
            );
        } else {
            println!("{:<8} s={:<4} L={:<6} skipped: {}", r.pattern, r.stride, r.target_len, r.error);
        }
        let _ = std::io::stdout().flush();
    })?;
    let elapsed_s = started.elapsed().as_secs_f64();
    let summary = bench::summarize(&rows);
    bench::write_rows(&out_dir.join("bench.csv"), &rows)?;
    bench::write_counts(&out_dir.join("counts.csv"), &rows)?;
    bench::write_summary(&out_dir.join("summary.csv"), &summary)?;
    write_plot(&out_dir.join("bench.svg"), &rows)?;
    let meta = Meta {
        csv_schema: bench::CSV_SCHEMA,
        started_unix_s,
        elapsed_s,
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        available_parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        scenario: &sc,
    };
    bench::write_meta(&out_dir.join("meta.json"), &meta)?;
    for s in &summary {
        println!(
            "{:<8} s={:<4} L={:<6} mean {:>9.3}s  median {:>9.3}s{}",
            s.pattern,
            s.stride,
            s.target_len,
            s.mean_s,
            s.median_s,
            s.ratio_vs_append.map_or(String::new(), |r| format!("  x{r:.2} vs append"))
        );
    }
    println!("total {elapsed_s:.1}s -> {}", out_dir.display());
    Ok(())
}
