//! Continuous-retrieval perplexity.
//!
//! A chunk is split into stride-long prefixes; each prefix retrieves
//! evidence with its last `query_len` tokens and the next `s` tokens are
//! scored under teacher forcing. The first stride of every chunk is
//! context only.

use alloc::vec::Vec;

use crate::generation::{full_recompute_oracle, wrap_evidence, ContextPattern, Session};
use crate::model::{Model, OutputRows};
use crate::numerics::{log_sum_exp, Real};
use crate::retrieval::{EvidenceSource, RetrievalConfig};
use crate::{Error, Result, TokenId};

/// Evaluation tokens whose length is a multiple of the stride.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalChunk {
    pub tokens: Vec<TokenId>,
}

/// Splits `stream` into chunks of `chunk_len` tokens, each truncated to a
/// multiple of `stride`; chunks too short to score anything are dropped.
pub fn make_chunks(stream: &[TokenId], chunk_len: usize, stride: usize) -> Vec<EvalChunk> {
    if stride == 0 || chunk_len == 0 {
        return Vec::new();
    }
    stream
        .chunks(chunk_len)
        .map(|c| &c[..c.len() - c.len() % stride])
        .filter(|c| c.len() >= 2 * stride)
        .map(|c| EvalChunk { tokens: c.to_vec() })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub pattern: ContextPattern,
    pub retrieval: RetrievalConfig,
    pub use_marks: bool,
    /// Also score the marking tokens of every appended evidence block.
    pub include_marks: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerplexityReport {
    pub nll: f64,
    pub count: usize,
    pub perplexity: f64,
}

fn nll_of<T: Real>(logits: &[T], target: TokenId) -> f64 {
    log_sum_exp(logits) - logits[target as usize].as_f64()
}

/// Sums per-chunk `(nll, count)` pairs in a fixed order so the result does
/// not depend on chunk order.
fn reduce(mut parts: Vec<(f64, usize)>) -> Result<PerplexityReport> {
    parts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(PerplexityReport { nll, count, perplexity: num_traits::Float::exp(nll / count as f64) })
}

fn check(cfg: &EvalConfig, chunks: &[EvalChunk]) -> Result<()> {
    cfg.retrieval.validate()?;
    if chunks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if cfg.include_marks && cfg.pattern == ContextPattern::Prepend && cfg.use_marks {
        return Err(Error::Config("marking tokens at position 0 have no predictor under prepend".into()));
    }
    let s = cfg.retrieval.stride;
    if let Some(c) = chunks.iter().find(|c| c.tokens.len() % s != 0) {
        return Err(Error::Config(alloc::format!("chunk of {} tokens is not a multiple of s={s}", c.tokens.len())));
    }
    Ok(())
}

fn fetch(source: &mut Option<&mut dyn EvidenceSource>, query: &[TokenId]) -> Result<Vec<TokenId>> {
    let src = source.as_deref_mut().ok_or(Error::NoEvidenceSource)?;
    Ok(src.fetch(query, 1)?.into_iter().next().unwrap_or_default())
}

fn truncate(doc: Vec<TokenId>, cfg: &EvalConfig) -> Vec<TokenId> {
    let mut doc = doc;
    doc.truncate(cfg.retrieval.max_evidence);
    doc
}

/// Perplexity with cache reuse, driven through a decoding [`Session`].
pub fn perplexity_continuous<T: Real>(
    model: &Model<T>,
    cfg: &EvalConfig,
    mut source: Option<&mut dyn EvidenceSource>,
    chunks: &[EvalChunk],
) -> Result<PerplexityReport> {
    check(cfg, chunks)?;
    let s = cfg.retrieval.stride;
    let vocab = model.vocab();
    let mut parts = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let toks = &chunk.tokens;
        if toks.len() < 2 * s {
            continue;
        }
        let mut session = Session::new(model, cfg.pattern, cfg.retrieval, cfg.use_marks, &toks[..s])?;
        session.prefill()?;
        let (mut nll, mut count) = (0.0, 0usize);
        for &target in &toks[s..] {
            let doc = if session.needs_retrieval() {
                Some(truncate(fetch(&mut source, session.query())?, cfg))
            } else {
                None
            };
            let rows = if cfg.include_marks && doc.is_some() { OutputRows::All } else { OutputRows::Last };
            let out = session.step_rows(doc.as_deref(), rows)?;
            if let Some(pass) = &out.pass {
                for j in 1..pass.tokens.len() {
                    if vocab.is_mark(pass.tokens[j]) {
                        nll += nll_of(pass.logits.row(j - 1), pass.tokens[j]);
                        count += 1;
                    }
                }
            }
            nll += nll_of(&out.logits, target);
            count += 1;
            session.push(target);
        }
        parts.push((nll, count));
    }
    reduce(parts)
}

/// Same quantity with a fresh full forward pass for every scored token.
pub fn perplexity_oracle<T: Real>(
    model: &Model<T>,
    cfg: &EvalConfig,
    mut source: Option<&mut dyn EvidenceSource>,
    chunks: &[EvalChunk],
) -> Result<PerplexityReport> {
    check(cfg, chunks)?;
    let s = cfg.retrieval.stride;
    let vocab = model.vocab();
    let mut parts = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let toks = &chunk.tokens;
        if toks.len() < 2 * s {
            continue;
        }
        let (mut nll, mut count) = (0.0, 0usize);
        let mut evidence: Vec<TokenId> = Vec::new();
        let mut merge = 0;
        for n in s..toks.len() {
            if cfg.pattern.retrieves() && (n - s).is_multiple_of(s) {
                let query = cfg.retrieval.query(&toks[..n]);
                evidence = wrap_evidence(&truncate(fetch(&mut source, query)?, cfg), cfg.use_marks, vocab)?;
                merge = n;
                if cfg.include_marks && cfg.pattern == ContextPattern::Append {
                    let mut ctx = toks[..n].to_vec();
                    for &e in &evidence {
                        if vocab.is_mark(e) {
                            nll += nll_of(&full_recompute_oracle(model, &ctx)?, e);
                            count += 1;
                        }
                        ctx.push(e);
                    }
                }
            }
            let ctx: Vec<TokenId> = match cfg.pattern {
                ContextPattern::NoRetrieval => toks[..n].to_vec(),
                ContextPattern::Prepend => evidence.iter().chain(&toks[..n]).copied().collect(),
                ContextPattern::Append => {
                    toks[..merge].iter().chain(&evidence).chain(&toks[merge..n]).copied().collect()
                }
            };
            nll += nll_of(&full_recompute_oracle(model, &ctx)?, toks[n]);
            count += 1;
        }
        parts.push((nll, count));
    }
    reduce(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::retrieval::FixedEvidence;
    use crate::SeededRng;

    fn model() -> Model<f32> {
        let mut cfg = ModelConfig::tiny(2, 32, 4);
        cfg.max_seq = 256;
        Model::init(cfg, 4).unwrap()
    }

    fn chunks(seed: u64) -> Vec<EvalChunk> {
        let mut rng = SeededRng::new(seed);
        let stream: Vec<TokenId> = (0..130).map(|_| rng.range_inclusive(0, 255) as TokenId).collect();
        make_chunks(&stream, 40, 8)
    }

    fn cfg(pattern: ContextPattern, include_marks: bool) -> EvalConfig {
        EvalConfig {
            pattern,
            retrieval: RetrievalConfig { stride: 8, query_len: 4, top_k: 1, max_evidence: 10 },
            use_marks: true,
            include_marks,
        }
    }

    fn evidence() -> FixedEvidence {
        FixedEvidence::random(10, 256, &mut SeededRng::new(2))
    }

    #[test]
    fn chunking_truncates_to_stride() {
        let c = chunks(1);
        assert_eq!(c.iter().map(|c| c.tokens.len()).collect::<Vec<_>>(), vec![40, 40, 40]);
        assert_eq!(make_chunks(&[1; 21], 100, 8)[0].tokens.len(), 16);
        assert!(make_chunks(&[1; 15], 100, 8).is_empty());
    }

    #[test]
    fn cached_equals_oracle() {
        let m = model();
        for pattern in ContextPattern::ALL {
            for include in [false, true] {
                if include && pattern == ContextPattern::Prepend {
                    continue;
                }
                let c = cfg(pattern, include);
                let a = perplexity_continuous(&m, &c, Some(&mut evidence()), &chunks(3)).unwrap();
                let b = perplexity_oracle(&m, &c, Some(&mut evidence()), &chunks(3)).unwrap();
                assert_eq!(a.count, b.count);
                assert!((a.perplexity - b.perplexity).abs() <= 1e-4 * b.perplexity, "{pattern:?}: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn marks_add_two_per_evidence_block() {
        let m = model();
        let ch = chunks(4);
        let off = perplexity_continuous(&m, &cfg(ContextPattern::Append, false), Some(&mut evidence()), &ch).unwrap();
        let on = perplexity_continuous(&m, &cfg(ContextPattern::Append, true), Some(&mut evidence()), &ch).unwrap();
        // Three 40-token chunks, four retrievals each.
        assert_eq!(off.count, 3 * 32);
        assert_eq!(on.count, off.count + 2 * 3 * 4);
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut m = model();
        m.params.head.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let r = perplexity_continuous(&m, &cfg(ContextPattern::Append, false), Some(&mut evidence()), &chunks(5))
            .unwrap();
        assert!((r.perplexity - 260.0).abs() < 1e-3);
    }

    #[test]
    fn chunk_order_does_not_matter() {
        let m = model();
        let c = cfg(ContextPattern::Append, false);
        let ch = chunks(6);
        let mut rev = ch.clone();
        rev.reverse();
        let a = perplexity_continuous(&m, &c, Some(&mut evidence()), &ch).unwrap();
        let b = perplexity_continuous(&m, &c, Some(&mut evidence()), &rev).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_and_ragged_input() {
        let m = model();
        let c = cfg(ContextPattern::NoRetrieval, false);
        assert_eq!(perplexity_continuous(&m, &c, None, &[]).unwrap_err(), Error::EmptyEvaluation);
        let ragged = [EvalChunk { tokens: alloc::vec![1; 20] }];
        assert!(matches!(perplexity_continuous(&m, &c, None, &ragged), Err(Error::Config(_))));
        let prepend_marks = cfg(ContextPattern::Prepend, true);
        assert!(perplexity_continuous(&m, &prepend_marks, None, &chunks(1)).is_err());
    }
}
