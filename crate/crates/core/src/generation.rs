//! Decoding with retrieved evidence placed before the input (prepend) or
//! after it (append), plus plain decoding and a multi-document ensemble.
//!
//! Every pattern keeps a logical context and a key/value cache that must
//! encode exactly that context with contiguous positions. Writing `L` for
//! the current sequence length (prompt plus generated tokens), `m` for the
//! merge point and `e` for the current wrapped evidence:
//!
//! | pattern | logical context | retrieval step | other steps |
//! |---|---|---|---|
//! | none | `x[..L]` | n/a | encode `x[L-1]` |
//! | prepend | `e ++ x[..L]` | drop the cache, encode everything | encode `x[L-1]` |
//! | append | `x[..m] ++ e ++ x[m..L]` | cut the cache to `m`, encode `x[m..L] ++ e'`, then `m = L` | encode `x[L-1]` |
//!
//! A retrieval fires when `(L - t) % s == 0` for prompt length `t` and
//! stride `s`, so the very first step always retrieves. The prompt (minus
//! its last token) can be encoded evidence-free before decoding starts, so
//! the append pattern never encodes a prompt token twice.

use alloc::vec::Vec;

use crate::model::{Model, OutputRows, Vocabulary};
use crate::numerics::{FlopsLedger, Real, RowRole, Tensor2};
use crate::retrieval::{should_retrieve, EvidenceSource, RetrievalConfig};
use crate::{Error, KvCache, Result, SeededRng, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextPattern {
    NoRetrieval,
    Prepend,
    Append,
}

impl ContextPattern {
    pub const ALL: [ContextPattern; 3] = [ContextPattern::NoRetrieval, ContextPattern::Prepend, ContextPattern::Append];

    pub fn name(self) -> &'static str {
        match self {
            ContextPattern::NoRetrieval => "none",
            ContextPattern::Prepend => "prepend",
            ContextPattern::Append => "append",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "no-retrieval" => Some(ContextPattern::NoRetrieval),
            "prepend" => Some(ContextPattern::Prepend),
            "append" => Some(ContextPattern::Append),
            _ => None,
        }
    }

    pub fn retrieves(self) -> bool {
        self != ContextPattern::NoRetrieval
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub pattern: ContextPattern,
    pub retrieval: RetrievalConfig,
    pub use_marks: bool,
    pub max_new: usize,
    pub sampling: Sampling,
    /// Encode `prompt[..t-1]` once before decoding (ignored for prepend,
    /// whose first retrieval discards it anyway).
    pub prefill: bool,
    /// Compare every step against a fresh full forward pass.
    pub verify_oracle: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            pattern: ContextPattern::Append,
            retrieval: RetrievalConfig::default(),
            use_marks: true,
            max_new: 32,
            sampling: Sampling::Greedy,
            prefill: true,
            verify_oracle: false,
        }
    }
}

/// Monotonic nanosecond source; the core crate has no clock of its own.
pub trait Clock {
    fn now_ns(&self) -> u64;
}

/// Reports zero elapsed time.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now_ns(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Sequence length `L` when the step ran.
    pub seq_len: usize,
    /// Rows pushed through the model, evidence included.
    pub recomputed: usize,
    pub retrieved: bool,
    pub flops: FlopsLedger,
    pub wall_ns: u64,
    /// Max-abs logit deviation from a fresh full pass, when verified.
    pub oracle_deviation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    /// Newly generated tokens only.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepReport>,
    pub prefill: Option<StepReport>,
}

impl GenerationReport {
    /// Every row encoded, prefill included.
    pub fn total_recomputed(&self) -> usize {
        self.steps.iter().map(|s| s.recomputed).sum::<usize>() + self.prefill.as_ref().map_or(0, |p| p.recomputed)
    }

    pub fn total_flops(&self) -> FlopsLedger {
        self.steps.iter().map(|s| s.flops).sum::<FlopsLedger>() + self.prefill.as_ref().map_or_else(FlopsLedger::new, |p| p.flops)
    }

    pub fn retrievals(&self) -> usize {
        self.steps.iter().filter(|s| s.retrieved).count()
    }

    pub fn wall_ns(&self) -> u64 {
        self.steps.iter().map(|s| s.wall_ns).sum::<u64>() + self.prefill.as_ref().map_or(0, |p| p.wall_ns)
    }

    pub fn max_oracle_deviation(&self) -> Option<f64> {
        self.steps.iter().filter_map(|s| s.oracle_deviation).reduce(f64::max)
    }
}

/// Brackets a document with the marking tokens when `use_marks` is set.
pub fn wrap_evidence(doc: &[TokenId], use_marks: bool, vocab: Vocabulary) -> Result<Vec<TokenId>> {
    if let Some(offset) = doc.iter().position(|&t| vocab.is_mark(t)) {
        return Err(Error::MarkInEvidence { offset });
    }
    if !use_marks {
        return Ok(doc.to_vec());
    }
    let mut out = Vec::with_capacity(doc.len() + 2);
    out.push(vocab.mark_l());
    out.extend_from_slice(doc);
    out.push(vocab.mark_r());
    Ok(out)
}

/// Last-position logits of a fresh pass over `context`.
pub fn full_recompute_oracle<T: Real>(model: &Model<T>, context: &[TokenId]) -> Result<Vec<T>> {
    if context.is_empty() {
        return Err(Error::Config("oracle needs a non-empty context".into()));
    }
    let mut cache = model.new_cache();
    let logits = model.forward(&mut cache, context, 0, None, OutputRows::Last, &mut FlopsLedger::new())?;
    Ok(logits.into_vec())
}

/// Next-token distribution in `f64` with the marking tokens excluded.
pub fn next_token_probs<T: Real>(logits: &[T], vocab: Vocabulary, temperature: f64) -> Vec<f64> {
    let base = vocab.base_size().min(logits.len());
    let inv_t = 1.0 / temperature;
    let max = logits[..base].iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, v)| if i < base { num_traits::Float::exp((v.as_f64() - max) * inv_t) } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

/// Picks a token from a distribution: argmax (lowest id on ties) for
/// greedy decoding, inverse-CDF sampling otherwise.
pub fn sample(probs: &[f64], sampling: Sampling, rng: &mut SeededRng) -> TokenId {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best as TokenId
        }
        Sampling::Temperature { .. } => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last = i;
                    if u < acc {
                        return i as TokenId;
                    }
                }
            }
            last as TokenId
        }
    }
}

fn temperature_of(sampling: Sampling) -> f64 {
    match sampling {
        Sampling::Greedy => 1.0,
        Sampling::Temperature { temperature, .. } => temperature,
    }
}

fn sampler_rng(sampling: Sampling) -> SeededRng {
    match sampling {
        Sampling::Greedy => SeededRng::new(0),
        Sampling::Temperature { seed, .. } => SeededRng::new(seed),
    }
}

/// Output of one decoding step.
pub struct StepOutput<T> {
    /// Next-token logits for the current sequence.
    pub logits: Vec<T>,
    pub report: StepReport,
    /// Every row of the pass, when requested.
    pub pass: Option<PassLogits<T>>,
}

/// Tokens encoded by one pass and the logits at each of their positions.
pub struct PassLogits<T> {
    pub tokens: Vec<TokenId>,
    pub logits: Tensor2<T>,
}

/// One decoding stream: the sequence so far, its cache and its evidence.
#[derive(Clone, Debug)]
pub struct Session<'m, T: Real> {
    model: &'m Model<T>,
    pattern: ContextPattern,
    retrieval: RetrievalConfig,
    use_marks: bool,
    cache: KvCache<T>,
    seq: Vec<TokenId>,
    prompt_len: usize,
    /// Sequence tokens that precede the evidence in the cache.
    merge: usize,
    /// Sequence tokens encoded at least once.
    encoded: usize,
    evidence: Vec<TokenId>,
    ledger: FlopsLedger,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(
        model: &'m Model<T>,
        pattern: ContextPattern,
        retrieval: RetrievalConfig,
        use_marks: bool,
        prompt: &[TokenId],
    ) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must not be empty".into()));
        }
        if pattern.retrieves() {
            retrieval.validate()?;
        }
        Ok(Self {
            model,
            pattern,
            retrieval,
            use_marks,
            cache: model.new_cache(),
            seq: prompt.to_vec(),
            prompt_len: prompt.len(),
            merge: 0,
            encoded: 0,
            evidence: Vec::new(),
            ledger: FlopsLedger::new(),
        })
    }

    pub fn pattern(&self) -> ContextPattern {
        self.pattern
    }

    pub fn seq(&self) -> &[TokenId] {
        &self.seq
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn evidence(&self) -> &[TokenId] {
        &self.evidence
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn merge_point(&self) -> usize {
        self.merge
    }

    /// FLOPs of every pass this session has run.
    pub fn ledger(&self) -> FlopsLedger {
        self.ledger
    }

    /// Whether the next [`Session::step`] is a retrieval boundary.
    pub fn needs_retrieval(&self) -> bool {
        self.pattern.retrieves() && should_retrieve(self.seq.len(), self.prompt_len, self.retrieval.stride)
    }

    /// Retrieval query for the current sequence.
    pub fn query(&self) -> &[TokenId] {
        self.retrieval.query(&self.seq)
    }

    pub fn push(&mut self, token: TokenId) {
        self.seq.push(token);
    }

    /// The token layout the cache represents (after a step: including the
    /// row whose logits were returned).
    pub fn logical_context(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.seq.len() + self.evidence.len());
        match self.pattern {
            ContextPattern::NoRetrieval => out.extend_from_slice(&self.seq),
            ContextPattern::Prepend => {
                out.extend_from_slice(&self.evidence);
                out.extend_from_slice(&self.seq);
            }
            ContextPattern::Append => {
                out.extend_from_slice(&self.seq[..self.merge]);
                out.extend_from_slice(&self.evidence);
                out.extend_from_slice(&self.seq[self.merge..]);
            }
        }
        out
    }

    /// Encodes `prompt[..t-1]` with no evidence. Only valid before the
    /// first step; a no-op for prepend.
    pub fn prefill(&mut self) -> Result<Option<StepReport>> {
        if self.pattern == ContextPattern::Prepend || self.encoded > 0 {
            return Ok(None);
        }
        let n = self.prompt_len - 1;
        let before = self.ledger;
        if n > 0 {
            self.model.forward(&mut self.cache, &self.seq[..n], 0, None, OutputRows::Last, &mut self.ledger)?;
        }
        self.encoded = n;
        self.merge = n;
        Ok(Some(StepReport { seq_len: n, recomputed: n, flops: self.ledger - before, ..Default::default() }))
    }

    fn role_of(&self, i: usize) -> RowRole {
        if i >= self.encoded {
            RowRole::Fresh
        } else if i >= self.merge {
            RowRole::StrideReencode
        } else {
            RowRole::PrefixReencode
        }
    }

    /// Runs one step and returns next-token logits for the current
    /// sequence. `doc` is the raw retrieved document and must be supplied
    /// exactly when [`Session::needs_retrieval`] holds.
    pub fn step(&mut self, doc: Option<&[TokenId]>) -> Result<StepOutput<T>> {
        self.step_rows(doc, OutputRows::Last)
    }

    /// [`Session::step`], optionally keeping the logits of every row.
    pub fn step_rows(&mut self, doc: Option<&[TokenId]>, rows: OutputRows) -> Result<StepOutput<T>> {
        let len = self.seq.len();
        let boundary = self.needs_retrieval();
        let before = self.ledger;
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut roles: Vec<RowRole> = Vec::new();
        let start;
        if boundary {
            let doc = doc.ok_or(Error::NoEvidenceSource)?;
            let wrapped = wrap_evidence(doc, self.use_marks, self.model.vocab())?;
            let from = if self.pattern == ContextPattern::Prepend { 0 } else { self.merge };
            if self.pattern == ContextPattern::Prepend {
                tokens.extend_from_slice(&wrapped);
                roles.resize(wrapped.len(), RowRole::Evidence);
            }
            for i in from..len {
                tokens.push(self.seq[i]);
                roles.push(self.role_of(i));
            }
            if self.pattern == ContextPattern::Append {
                tokens.extend_from_slice(&wrapped);
                roles.resize(tokens.len(), RowRole::Evidence);
            }
            self.cache.truncate(from)?;
            start = from;
            self.evidence = wrapped;
            self.merge = len;
        } else {
            if doc.is_some() {
                return Err(Error::Invariant("evidence supplied off a retrieval boundary".into()));
            }
            let held = self.cache.len().checked_sub(self.evidence.len()).ok_or_else(|| {
                Error::Invariant(alloc::format!("cache {} shorter than evidence", self.cache.len()))
            })?;
            if held >= len {
                return Err(Error::Invariant(alloc::format!("step at length {len} with {held} tokens cached")));
            }
            for i in held..len {
                tokens.push(self.seq[i]);
                roles.push(self.role_of(i));
            }
            start = self.cache.len();
        }
        let logits = self.model.forward(&mut self.cache, &tokens, start, Some(&roles), rows, &mut self.ledger)?;
        self.encoded = self.encoded.max(len);
        let recomputed = tokens.len();
        let (last, pass) = match rows {
            OutputRows::Last => (logits.into_vec(), None),
            OutputRows::All => (logits.row(logits.rows() - 1).to_vec(), Some(PassLogits { tokens, logits })),
        };
        Ok(StepOutput {
            logits: last,
            pass,
            report: StepReport {
                seq_len: len,
                recomputed,
                retrieved: boundary,
                flops: self.ledger - before,
                ..Default::default()
            },
        })
    }

    /// Max-abs difference between `logits` and a fresh pass over the
    /// current logical context.
    pub fn oracle_deviation(&self, logits: &[T]) -> Result<f64> {
        let ctx = self.logical_context();
        if ctx.len() != self.cache.len() {
            return Err(Error::Invariant(alloc::format!(
                "logical context {} rows, cache {}",
                ctx.len(),
                self.cache.len()
            )));
        }
        let oracle = full_recompute_oracle(self.model, &ctx)?;
        Ok(oracle.iter().zip(logits).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max))
    }
}

fn check_capacity<T: Real>(model: &Model<T>, cfg: &GenerationConfig, prompt_len: usize) -> Result<()> {
    let evidence = if cfg.pattern.retrieves() { cfg.retrieval.max_evidence + if cfg.use_marks { 2 } else { 0 } } else { 0 };
    let need = prompt_len + cfg.max_new + evidence;
    if need > model.cfg.max_seq {
        return Err(Error::Capacity { requested: need, capacity: model.cfg.max_seq });
    }
    Ok(())
}

fn fetch_docs(
    source: &mut Option<&mut dyn EvidenceSource>,
    query: &[TokenId],
    k: usize,
) -> Result<Vec<Vec<TokenId>>> {
    source.as_deref_mut().ok_or(Error::NoEvidenceSource)?.fetch(query, k)
}

/// Generates `cfg.max_new` tokens after `prompt`. Retrieval patterns use
/// the best document `source` returns for each query (empty evidence when
/// it returns none).
pub fn generate<T: Real>(
    model: &Model<T>,
    cfg: &GenerationConfig,
    mut source: Option<&mut dyn EvidenceSource>,
    prompt: &[TokenId],
    clock: &dyn Clock,
) -> Result<GenerationReport> {
    check_capacity(model, cfg, prompt.len())?;
    let mut session = Session::new(model, cfg.pattern, cfg.retrieval, cfg.use_marks, prompt)?;
    let mut report = GenerationReport::default();
    if cfg.prefill {
        let t0 = clock.now_ns();
        report.prefill = session.prefill()?.map(|mut p| {
            p.wall_ns = clock.now_ns().saturating_sub(t0);
            p
        });
    }
    let mut rng = sampler_rng(cfg.sampling);
    let temperature = temperature_of(cfg.sampling);
    for _ in 0..cfg.max_new {
        let t0 = clock.now_ns();
        let doc = if session.needs_retrieval() {
            Some(fetch_docs(&mut source, session.query(), 1)?.into_iter().next().unwrap_or_default())
        } else {
            None
        };
        let mut out = session.step(doc.as_deref())?;
        let probs = next_token_probs(&out.logits, model.vocab(), temperature);
        let token = sample(&probs, cfg.sampling, &mut rng);
        out.report.wall_ns = clock.now_ns().saturating_sub(t0);
        if cfg.verify_oracle {
            out.report.oracle_deviation = Some(session.oracle_deviation(&out.logits)?);
        }
        session.push(token);
        report.tokens.push(token);
        report.steps.push(out.report);
    }
    Ok(report)
}

/// Append-pattern branches, one per retrieved document, advanced in
/// lockstep. Branch `j` always holds the `j`-th ranked document; fewer
/// documents than requested at the first retrieval shrink the ensemble to
/// what is available.
#[derive(Clone, Debug)]
pub struct Ensemble<'m, T: Real> {
    branches: Vec<Session<'m, T>>,
    started: bool,
    verify_oracle: bool,
}

/// One ensemble step: the uniform average of the branch distributions and
/// the summed per-branch work.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStep {
    pub probs: Vec<f64>,
    pub report: StepReport,
}

impl<'m, T: Real> Ensemble<'m, T> {
    pub fn new(model: &'m Model<T>, cfg: &GenerationConfig, prompt: &[TokenId], k_docs: usize) -> Result<Self> {
        if k_docs == 0 {
            return Err(Error::Config("ensemble needs at least one document".into()));
        }
        let first = Session::new(model, ContextPattern::Append, cfg.retrieval, cfg.use_marks, prompt)?;
        Ok(Self { branches: alloc::vec![first; k_docs], started: false, verify_oracle: cfg.verify_oracle })
    }

    /// Encodes the prompt minus its last token once and shares it with
    /// every branch.
    pub fn prefill(&mut self) -> Result<Option<StepReport>> {
        let report = self.branches[0].prefill()?;
        let first = self.branches[0].clone();
        self.branches.iter_mut().skip(1).for_each(|b| *b = first.clone());
        Ok(report)
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    /// Averaged next-token distribution at `temperature`, retrieving from
    /// `source` on stride boundaries.
    pub fn step(&mut self, source: &mut dyn EvidenceSource, temperature: f64) -> Result<EnsembleStep> {
        let docs = if self.branches[0].needs_retrieval() {
            let docs = source.fetch(self.branches[0].query(), self.branches.len())?;
            if !self.started {
                self.branches.truncate(docs.len().max(1));
            }
            Some(docs)
        } else {
            None
        };
        self.started = true;
        let vocab = self.branches[0].model.vocab();
        let mut probs = alloc::vec![0.0f64; vocab.size()];
        let mut report = StepReport { seq_len: self.branches[0].seq().len(), ..Default::default() };
        for (j, branch) in self.branches.iter_mut().enumerate() {
            let doc = docs.as_ref().map(|d| d.get(j).map_or(&[][..], Vec::as_slice));
            let out = branch.step(doc)?;
            for (a, p) in probs.iter_mut().zip(next_token_probs(&out.logits, vocab, temperature)) {
                *a += p;
            }
            if self.verify_oracle {
                let dev = branch.oracle_deviation(&out.logits)?;
                report.oracle_deviation = Some(report.oracle_deviation.map_or(dev, |d: f64| d.max(dev)));
            }
            report.recomputed += out.report.recomputed;
            report.retrieved |= out.report.retrieved;
            report.flops = report.flops + out.report.flops;
        }
        let k = self.branches.len() as f64;
        probs.iter_mut().for_each(|a| *a /= k);
        Ok(EnsembleStep { probs, report })
    }

    /// Appends the chosen token to every branch.
    pub fn push(&mut self, token: TokenId) {
        for branch in &mut self.branches {
            branch.push(token);
        }
    }
}

/// Append-pattern decoding with one branch per retrieved document; each
/// step samples from the uniform average of the branch distributions
/// (see [`Ensemble`]).
pub fn generate_ensemble<T: Real>(
    model: &Model<T>,
    cfg: &GenerationConfig,
    source: &mut dyn EvidenceSource,
    prompt: &[TokenId],
    k_docs: usize,
    clock: &dyn Clock,
) -> Result<GenerationReport> {
    check_capacity(model, cfg, prompt.len())?;
    let mut ens = Ensemble::new(model, cfg, prompt, k_docs)?;
    let mut report = GenerationReport::default();
    if cfg.prefill {
        let t0 = clock.now_ns();
        report.prefill = ens.prefill()?.map(|mut p| {
            p.wall_ns = clock.now_ns().saturating_sub(t0);
            p
        });
    }
    let mut rng = sampler_rng(cfg.sampling);
    let temperature = temperature_of(cfg.sampling);
    for _ in 0..cfg.max_new {
        let t0 = clock.now_ns();
        let mut step = ens.step(source, temperature)?;
        let token = sample(&step.probs, cfg.sampling, &mut rng);
        ens.push(token);
        step.report.wall_ns = clock.now_ns().saturating_sub(t0);
        report.tokens.push(token);
        report.steps.push(step.report);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::retrieval::{build_index, Corpus, Document, FixedEvidence, RetrieverSource};
    use alloc::vec;

    fn model() -> Model<f32> {
        Model::init(ModelConfig::tiny(2, 32, 4), 11).unwrap()
    }

    fn prompt(n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| rng.range_inclusive(0, 255) as TokenId).collect()
    }

    fn cfg(pattern: ContextPattern, stride: usize, max_new: usize) -> GenerationConfig {
        GenerationConfig {
            pattern,
            retrieval: RetrievalConfig { stride, query_len: 4, top_k: 1, max_evidence: 12 },
            max_new,
            verify_oracle: true,
            ..Default::default()
        }
    }

    fn fixed(len: usize, seed: u64) -> FixedEvidence {
        FixedEvidence::random(len, 256, &mut SeededRng::new(seed))
    }

    /// Plain incremental decoding, written independently of `Session`.
    fn plain_decode(m: &Model<f32>, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
        let mut cache = m.new_cache();
        let mut ledger = FlopsLedger::new();
        let mut logits = m.forward(&mut cache, prompt, 0, None, OutputRows::Last, &mut ledger).unwrap();
        let mut out = vec![];
        for _ in 0..n {
            let probs = next_token_probs(logits.data(), m.vocab(), 1.0);
            let tok = sample(&probs, Sampling::Greedy, &mut SeededRng::new(0));
            out.push(tok);
            let at = cache.len();
            logits = m.forward(&mut cache, &[tok], at, None, OutputRows::Last, &mut ledger).unwrap();
        }
        out
    }

    #[test]
    fn wrap_evidence_cases() {
        let v = Vocabulary::new(256);
        assert_eq!(wrap_evidence(&[], true, v).unwrap(), vec![256, 257]);
        assert_eq!(wrap_evidence(&[1; 128], true, v).unwrap().len(), 130);
        assert_eq!(wrap_evidence(&[4, 5], false, v).unwrap(), vec![4, 5]);
        assert_eq!(wrap_evidence(&[4, 257], true, v).unwrap_err(), Error::MarkInEvidence { offset: 1 });
    }

    #[test]
    fn no_retrieval_matches_plain_decode() {
        let m = model();
        let p = prompt(6, 1);
        let rep = generate(&m, &cfg(ContextPattern::NoRetrieval, 4, 10), None, &p, &NullClock).unwrap();
        assert_eq!(rep.tokens, plain_decode(&m, &p, 10));
        assert!(rep.steps.iter().all(|s| s.recomputed == 1 && !s.retrieved));
        assert!(rep.max_oracle_deviation().unwrap() < 1e-5);
    }

    #[test]
    fn append_with_one_retrieval_matches_oracle() {
        let m = model();
        let mut src = fixed(12, 2);
        let rep = generate(&m, &cfg(ContextPattern::Append, 16, 10), Some(&mut src), &prompt(5, 2), &NullClock).unwrap();
        assert_eq!(rep.retrievals(), 1);
        assert!(rep.max_oracle_deviation().unwrap() < 1e-5);
    }

    #[test]
    fn every_pattern_matches_oracle_across_retrievals() {
        let m = model();
        for pattern in ContextPattern::ALL {
            for prefill in [true, false] {
                let mut c = cfg(pattern, 3, 14);
                c.prefill = prefill;
                let mut src = fixed(7, 3);
                let rep = generate(&m, &c, Some(&mut src), &prompt(5, 3), &NullClock).unwrap();
                let dev = rep.max_oracle_deviation().unwrap();
                assert!(dev < 1e-5, "{pattern:?} prefill={prefill}: {dev}");
            }
        }
    }

    #[test]
    fn append_recompute_counts() {
        let m = model();
        let s = 4;
        let mut src = fixed(12, 4);
        let rep = generate(&m, &cfg(ContextPattern::Append, s, 13), Some(&mut src), &prompt(6, 4), &NullClock).unwrap();
        let le = 14;
        assert_eq!(rep.prefill.as_ref().unwrap().recomputed, 5);
        for (i, st) in rep.steps.iter().enumerate() {
            let expect = match (i % s, i) {
                (0, 0) => 1 + le,
                (0, _) => s + le,
                _ => 1,
            };
            assert_eq!(st.recomputed, expect, "step {i}");
            assert_eq!(st.retrieved, i % s == 0);
            assert_eq!(st.flops.kv_by_role().get(RowRole::PrefixReencode), 0);
        }
    }

    #[test]
    fn prepend_recomputes_full_context() {
        let m = model();
        let mut src = fixed(12, 5);
        let t = 6;
        let rep = generate(&m, &cfg(ContextPattern::Prepend, 4, 9), Some(&mut src), &prompt(t, 5), &NullClock).unwrap();
        assert!(rep.prefill.is_none());
        for st in &rep.steps {
            if st.retrieved {
                assert_eq!(st.recomputed, st.seq_len + 14);
            } else {
                assert_eq!(st.recomputed, 1);
            }
        }
    }

    #[test]
    fn empty_evidence_without_marks_degenerates_to_plain() {
        let m = model();
        let p = prompt(5, 6);
        let mut outs = vec![];
        for pattern in [ContextPattern::Prepend, ContextPattern::Append] {
            let mut c = cfg(pattern, 3, 8);
            c.use_marks = false;
            let mut src = FixedEvidence::new(vec![]);
            outs.push(generate(&m, &c, Some(&mut src), &p, &NullClock).unwrap().tokens);
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], plain_decode(&m, &p, 8));
    }

    #[test]
    fn deterministic_with_sampling() {
        let m = model();
        for pattern in ContextPattern::ALL {
            let mut c = cfg(pattern, 3, 10);
            c.sampling = Sampling::Temperature { temperature: 0.8, seed: 9 };
            let run = || {
                let mut src = fixed(5, 1);
                generate(&m, &c, Some(&mut src), &prompt(4, 7), &NullClock).unwrap().tokens
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn sampling_never_emits_marks() {
        let v = Vocabulary::new(4);
        let logits = [0.0f32, 0.0, 0.0, 0.0, 50.0, 50.0];
        let probs = next_token_probs(&logits, v, 1.0);
        assert_eq!(&probs[4..], &[0.0, 0.0]);
        let mut rng = SeededRng::new(3);
        for _ in 0..100 {
            assert!(sample(&probs, Sampling::Temperature { temperature: 1.0, seed: 0 }, &mut rng) < 4);
        }
        assert_eq!(sample(&probs, Sampling::Greedy, &mut rng), 0);
    }

    #[test]
    fn retrieval_without_source_fails() {
        let m = model();
        let err = generate(&m, &cfg(ContextPattern::Append, 3, 2), None, &prompt(3, 1), &NullClock).unwrap_err();
        assert_eq!(err, Error::NoEvidenceSource);
    }

    #[test]
    fn capacity_is_checked_up_front() {
        let m = model();
        let c = cfg(ContextPattern::Append, 3, 600);
        let mut src = fixed(5, 1);
        assert!(matches!(generate(&m, &c, Some(&mut src), &prompt(3, 1), &NullClock), Err(Error::Capacity { .. })));
    }

    #[test]
    fn ensemble_of_one_is_append() {
        let m = model();
        let c = cfg(ContextPattern::Append, 3, 10);
        let p = prompt(5, 8);
        let a = generate(&m, &c, Some(&mut fixed(6, 8)), &p, &NullClock).unwrap();
        let e = generate_ensemble(&m, &c, &mut fixed(6, 8), &p, 1, &NullClock).unwrap();
        assert_eq!(a.tokens, e.tokens);
        assert_eq!(a.total_recomputed(), e.total_recomputed());
    }

    #[test]
    fn ensemble_of_identical_documents() {
        let m = model();
        let c = cfg(ContextPattern::Append, 3, 8);
        let p = prompt(5, 9);
        let doc = fixed(6, 9).docs[0].clone();
        let single = generate(&m, &c, Some(&mut FixedEvidence::new(vec![doc.clone()])), &p, &NullClock).unwrap();
        let mut three = FixedEvidence::new(vec![doc.clone(), doc.clone(), doc]);
        let ens = generate_ensemble(&m, &c, &mut three, &p, 3, &NullClock).unwrap();
        assert_eq!(single.tokens, ens.tokens);
    }

    #[test]
    fn identical_branches_average_to_one_branch() {
        let m = model();
        let c = cfg(ContextPattern::Append, 3, 7);
        let p = prompt(5, 12);
        let doc = fixed(6, 3).docs[0].clone();
        let mut one = Ensemble::new(&m, &c, &p, 1).unwrap();
        let mut four = Ensemble::new(&m, &c, &p, 4).unwrap();
        one.prefill().unwrap();
        four.prefill().unwrap();
        let mut src1 = FixedEvidence::new(vec![doc.clone()]);
        let mut src4 = FixedEvidence::new(vec![doc; 4]);
        for _ in 0..7 {
            let a = one.step(&mut src1, 1.0).unwrap();
            let b = four.step(&mut src4, 1.0).unwrap();
            assert_eq!(four.len(), 4);
            let dev = a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(dev <= 1e-12, "{dev}");
            let t = sample(&a.probs, Sampling::Greedy, &mut SeededRng::new(0));
            one.push(t);
            four.push(t);
        }
    }

    #[test]
    fn ensemble_matches_two_pass_average() {
        let m = model();
        let c = GenerationConfig { max_new: 1, ..cfg(ContextPattern::Append, 3, 1) };
        let p = prompt(5, 10);
        let docs = vec![fixed(6, 1).docs[0].clone(), fixed(4, 2).docs[0].clone()];
        let ens = generate_ensemble(&m, &c, &mut FixedEvidence::new(docs.clone()), &p, 2, &NullClock).unwrap();
        let mut avg = vec![0.0; m.vocab().size()];
        for d in &docs {
            let mut ctx = p.clone();
            ctx.extend(wrap_evidence(d, true, m.vocab()).unwrap());
            let logits = full_recompute_oracle(&m, &ctx).unwrap();
            for (a, q) in avg.iter_mut().zip(next_token_probs(&logits, m.vocab(), 1.0)) {
                *a += q / 2.0;
            }
        }
        let best = sample(&avg, Sampling::Greedy, &mut SeededRng::new(0));
        assert_eq!(ens.tokens[0], best);
    }

    #[test]
    fn ensemble_shrinks_to_available_documents() {
        let m = model();
        let corpus = Corpus::from_documents([Document { name: "a".into(), source: "".into(), tokens: vec![1, 2, 3] }])
            .unwrap();
        let idx = build_index(corpus).unwrap();
        let c = cfg(ContextPattern::Append, 3, 4);
        let p = prompt(4, 1);
        let ens = generate_ensemble(&m, &c, &mut RetrieverSource::new(&idx, 12), &p, 3, &NullClock).unwrap();
        let single = generate(&m, &c, Some(&mut RetrieverSource::new(&idx, 12)), &p, &NullClock).unwrap();
        assert_eq!(ens.tokens, single.tokens);
    }

    #[test]
    fn oracle_single_token_is_exact() {
        let m = model();
        let mut cache = m.new_cache();
        let direct = m.forward(&mut cache, &[42], 0, None, OutputRows::All, &mut FlopsLedger::new()).unwrap();
        assert_eq!(full_recompute_oracle(&m, &[42]).unwrap(), direct.into_vec());
    }

    #[test]
    fn pattern_names_round_trip() {
        for p in ContextPattern::ALL {
            assert_eq!(ContextPattern::parse(p.name()), Some(p));
        }
        assert_eq!(ContextPattern::parse("sideways"), None);
    }
}
