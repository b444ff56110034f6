//! Analytic FLOPs for context re-encoding (prepend) and adapter overhead
//! (append), and their reconciliation against instrumented runs.
//!
//! With batch `b`, hidden `h`, layers `l`, length `T`, stride `s`, adapter
//! rank `r` and evidence length `d`:
//!
//! * re-encoding: `C0 = 2l Σ_{i=1}^{T/s} 2b·i·s·h² = 2T(T+s)bh²l / s`
//! * adapters: `C1 = 2l(4bThr + bTh) + 2l Σ_{i=1}^{T/s} [4b(d+s)hr + b(d+s)h]
//!   = 2l(4r+1)bhT(d+2s) / s`
//! * decrement: `C0 − C1 = 2lTbh[(T+s)h − (4r+1)(d+2s)] / s`
//!
//! The `bTh` and `b(d+s)h` terms have no counterpart in the engine's
//! adapter arithmetic; they are kept verbatim and reported as
//! unattributed-linear. All arithmetic is exact in 128-bit integers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::generation::{generate, ContextPattern, GenerationConfig, GenerationReport, NullClock, Sampling};
use crate::model::{LoraTargets, Model};
use crate::numerics::{Real, RowRole};
use crate::retrieval::{FixedEvidence, RetrievalConfig};
use crate::{Error, Result, SeededRng, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopsParams {
    pub b: u64,
    pub h: u64,
    pub l: u64,
    /// Maximum sequence length `T`.
    pub t: u64,
    pub s: u64,
    pub r: u64,
    /// Evidence tokens per retrieval, excluding the marking tokens unless
    /// `marks_included` is set.
    pub d: u64,
    pub marks_included: bool,
}

impl FlopsParams {
    pub fn validate(&self) -> Result<()> {
        if [self.b, self.h, self.l, self.t, self.s].contains(&0) {
            return Err(Error::Config(alloc::format!("FLOPs parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `d` as the formulas see it.
    pub fn effective_d(&self) -> u64 {
        self.d + if self.marks_included { 2 } else { 0 }
    }

    pub fn divisible(&self) -> bool {
        self.t.is_multiple_of(self.s)
    }

    /// Number of retrievals, `⌊T/s⌋`.
    pub fn retrievals(&self) -> u64 {
        self.t / self.s
    }
}

/// Re-encoding FLOPs by direct summation over retrievals.
pub fn c0_sum(p: &FlopsParams) -> u128 {
    let (b, h, l, s) = (p.b as u128, p.h as u128, p.l as u128, p.s as u128);
    (1..=p.retrievals() as u128).map(|i| 2 * l * (2 * b * i * s * h * h)).sum()
}

/// Re-encoding FLOPs in closed form. Returns the summation form and `true`
/// when `T` is not a multiple of `s`.
pub fn c0_closed(p: &FlopsParams) -> (u128, bool) {
    if !p.divisible() {
        return (c0_sum(p), true);
    }
    let (b, h, l, t, s) = (p.b as u128, p.h as u128, p.l as u128, p.t as u128, p.s as u128);
    (2 * t * (t + s) * b * h * h * l / s, false)
}

/// Terms of the adapter FLOPs summation form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct C1Terms {
    /// `2l·4bThr`
    pub lora_per_token: u128,
    /// `2l·bTh`
    pub linear_per_token: u128,
    /// `2l Σ 4b(d+s)hr`
    pub lora_per_retrieval: u128,
    /// `2l Σ b(d+s)h`
    pub linear_per_retrieval: u128,
}

impl C1Terms {
    pub fn total(&self) -> u128 {
        self.lora_per_token + self.linear_per_token + self.lora_per_retrieval + self.linear_per_retrieval
    }

    /// The adapter products the engine actually performs.
    pub fn lora(&self) -> u128 {
        self.lora_per_token + self.lora_per_retrieval
    }

    pub fn unattributed_linear(&self) -> u128 {
        self.linear_per_token + self.linear_per_retrieval
    }
}

pub fn c1_terms(p: &FlopsParams) -> C1Terms {
    let (b, h, l, t, s, r) = (p.b as u128, p.h as u128, p.l as u128, p.t as u128, p.s as u128, p.r as u128);
    let d = p.effective_d() as u128;
    let mut terms = C1Terms {
        lora_per_token: 2 * l * (4 * b * t * h * r),
        linear_per_token: 2 * l * (b * t * h),
        ..Default::default()
    };
    for _ in 1..=p.retrievals() {
        terms.lora_per_retrieval += 2 * l * (4 * b * (d + s) * h * r);
        terms.linear_per_retrieval += 2 * l * (b * (d + s) * h);
    }
    terms
}

pub fn c1_sum(p: &FlopsParams) -> u128 {
    c1_terms(p).total()
}

/// Adapter FLOPs in closed form, with the same fallback as [`c0_closed`].
pub fn c1_closed(p: &FlopsParams) -> (u128, bool) {
    if !p.divisible() {
        return (c1_sum(p), true);
    }
    let (b, h, l, t, s, r) = (p.b as u128, p.h as u128, p.l as u128, p.t as u128, p.s as u128, p.r as u128);
    let d = p.effective_d() as u128;
    (2 * l * (4 * r + 1) * b * h * t * (d + 2 * s) / s, false)
}

/// Net saving of append over prepend; negative when adapters cost more.
pub fn c_decrement(p: &FlopsParams) -> (i128, bool) {
    if !p.divisible() {
        return (c0_sum(p) as i128 - c1_sum(p) as i128, true);
    }
    let (b, h, l, t, s, r) = (p.b as i128, p.h as i128, p.l as i128, p.t as i128, p.s as i128, p.r as i128);
    let d = p.effective_d() as i128;
    (2 * l * t * b * h * ((t + s) * h - (4 * r + 1) * (d + 2 * s)) / s, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub c0_recompute: u128,
    pub c1_lora_append: u128,
    pub c_decrement: i128,
    pub c1_terms: C1Terms,
    /// Closed forms unavailable (`T` not a multiple of `s`).
    pub used_summation: bool,
}

pub fn cost_breakdown(p: &FlopsParams) -> CostBreakdown {
    let (c0, f0) = c0_closed(p);
    let (c1, f1) = c1_closed(p);
    let (dec, f2) = c_decrement(p);
    CostBreakdown { c0_recompute: c0, c1_lora_append: c1, c_decrement: dec, c1_terms: c1_terms(p), used_summation: f0 || f1 || f2 }
}

/// How an instrumented run was configured; reconciliation only compares
/// runs that match the analytic idealization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunShape {
    pub pattern: ContextPattern,
    pub prompt_len: usize,
    pub max_new: usize,
    pub prefill: bool,
    pub lora_targets: LoraTargets,
    /// Wrapped evidence length per retrieval.
    pub evidence_len: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconRow {
    pub name: &'static str,
    pub measured: u128,
    pub analytic: u128,
}

impl ReconRow {
    pub fn delta(&self) -> i128 {
        self.measured as i128 - self.analytic as i128
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconciliationReport {
    pub params: FlopsParams,
    pub pattern: ContextPattern,
    pub breakdown: CostBreakdown,
    /// `None` when the run matches the idealization, otherwise the reason.
    pub not_comparable: Option<String>,
    pub rows: Vec<ReconRow>,
}

impl ReconciliationReport {
    pub fn comparable(&self) -> bool {
        self.not_comparable.is_none()
    }

    /// Comparable and every row matches to the FLOP.
    pub fn exact(&self) -> bool {
        self.comparable() && self.rows.iter().all(|r| r.delta() == 0)
    }
}

fn shape_mismatch(p: &FlopsParams, shape: &RunShape) -> Option<String> {
    let s = p.s as usize;
    let t = p.t as usize;
    let mut why = Vec::new();
    if !p.divisible() {
        why.push(alloc::format!("T={t} is not a multiple of s={s}"));
    }
    if shape.prompt_len != s {
        why.push(alloc::format!("prompt length {} != s", shape.prompt_len));
    }
    if shape.max_new + s != t + 1 {
        why.push(alloc::format!("max_new {} != T - s + 1", shape.max_new));
    }
    if shape.prefill {
        why.push("prompt prefill enabled".into());
    }
    if shape.batch != p.b as usize || shape.batch != 1 {
        why.push(alloc::format!("batch {} (engine decodes one stream)", shape.batch));
    }
    if shape.pattern == ContextPattern::Append {
        if shape.lora_targets != LoraTargets::Kv {
            why.push("adapters not limited to key/value".into());
        }
        if shape.evidence_len as u64 != p.effective_d() {
            why.push(alloc::format!("evidence length {} != d={}", shape.evidence_len, p.effective_d()));
        }
    }
    if why.is_empty() {
        None
    } else {
        Some(why.join("; "))
    }
}

/// Compares a run's ledger with the analytic terms for its pattern.
///
/// * prepend: key/value FLOPs of non-evidence rows in retrieval passes
///   against `C0`;
/// * append: first-encoding adapter FLOPs against `2l·4bThr`, adapter FLOPs
///   of retrieval passes against `2l Σ 4b(d+s)hr`, prefix re-encoding
///   against zero;
/// * none: any re-encoding against zero.
///
/// The fresh token of each append retrieval pass is in both adapter
/// figures, exactly as the analytic terms count it twice.
pub fn reconcile(report: &GenerationReport, p: &FlopsParams, shape: &RunShape) -> ReconciliationReport {
    let total = report.total_flops();
    let boundary = report.steps.iter().filter(|s| s.retrieved);
    let mut rows = Vec::new();
    match shape.pattern {
        ContextPattern::Prepend => {
            let measured: u64 = boundary.map(|s| s.flops.kv_by_role().context()).sum();
            rows.push(ReconRow { name: "kv_context_recompute", measured: measured as u128, analytic: c0_sum(p) });
        }
        ContextPattern::Append => {
            let terms = c1_terms(p);
            let per_retrieval: u64 = boundary.map(|s| s.flops.lora()).sum();
            rows.push(ReconRow {
                name: "lora_per_token",
                measured: total.lora_by_role().get(RowRole::Fresh) as u128,
                analytic: terms.lora_per_token,
            });
            rows.push(ReconRow { name: "lora_per_retrieval", measured: per_retrieval as u128, analytic: terms.lora_per_retrieval });
            rows.push(ReconRow {
                name: "prefix_recompute",
                measured: (total.kv_by_role().get(RowRole::PrefixReencode) + total.lora_by_role().get(RowRole::PrefixReencode))
                    as u128,
                analytic: 0,
            });
        }
        ContextPattern::NoRetrieval => {
            let kv = total.kv_by_role();
            rows.push(ReconRow {
                name: "recompute",
                measured: (kv.get(RowRole::StrideReencode) + kv.get(RowRole::PrefixReencode)) as u128,
                analytic: 0,
            });
        }
    }
    ReconciliationReport {
        params: *p,
        pattern: shape.pattern,
        breakdown: cost_breakdown(p),
        not_comparable: shape_mismatch(p, shape),
        rows,
    }
}

/// Result of [`reconciliation_run`].
pub struct ReconciliationOutcome {
    pub params: FlopsParams,
    pub shape: RunShape,
    pub generation: GenerationReport,
    pub report: ReconciliationReport,
}

/// Decodes under the analytic idealization and reconciles the ledger:
/// the prompt is one stride of random tokens folded into the first
/// retrieval, generation runs to exactly `T` tokens and every retrieval
/// returns `evidence_len` random tokens.
pub fn reconciliation_run<T: Real>(
    model: &Model<T>,
    pattern: ContextPattern,
    t_max: usize,
    stride: usize,
    evidence_len: usize,
    use_marks: bool,
    seed: u64,
) -> Result<ReconciliationOutcome> {
    if stride == 0 || t_max < stride {
        return Err(Error::Config(alloc::format!("need 1 <= s <= T, got s={stride} T={t_max}")));
    }
    let mut rng = SeededRng::new(seed);
    let base = model.cfg.vocab_base;
    let prompt: Vec<TokenId> = (0..stride).map(|_| rng.range_inclusive(0, base - 1) as TokenId).collect();
    let mut source = FixedEvidence::random(evidence_len, base, &mut rng);
    let cfg = GenerationConfig {
        pattern,
        retrieval: RetrievalConfig { stride, query_len: 16, top_k: 1, max_evidence: evidence_len },
        use_marks,
        max_new: t_max - stride + 1,
        sampling: Sampling::Greedy,
        prefill: false,
        verify_oracle: false,
    };
    let generation = generate(model, &cfg, Some(&mut source), &prompt, &NullClock)?;
    let params = FlopsParams {
        b: 1,
        h: model.cfg.hidden as u64,
        l: model.cfg.layers as u64,
        t: t_max as u64,
        s: stride as u64,
        r: model.cfg.lora_rank as u64,
        d: evidence_len as u64,
        marks_included: use_marks,
    };
    let shape = RunShape {
        pattern,
        prompt_len: prompt.len(),
        max_new: cfg.max_new,
        prefill: cfg.prefill,
        lora_targets: model.cfg.lora_targets,
        evidence_len: evidence_len + if use_marks { 2 } else { 0 },
        batch: 1,
    };
    let report = reconcile(&generation, &params, &shape);
    Ok(ReconciliationOutcome { params, shape, generation, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params(b: u64, h: u64, l: u64, t: u64, s: u64, r: u64, d: u64) -> FlopsParams {
        FlopsParams { b, h, l, t, s, r, d, marks_included: false }
    }

    #[test]
    fn c0_single_retrieval() {
        let p = params(1, 64, 2, 16, 16, 16, 0);
        assert_eq!(c0_closed(&p), (524_288, false));
        assert_eq!(c0_sum(&p), 524_288);
        assert_eq!(c0_sum(&params(1, 1, 1, 9, 9, 1, 0)), 36);
    }

    #[test]
    fn c0_scales_with_h_squared() {
        let p = params(2, 32, 3, 128, 16, 8, 64);
        let q = FlopsParams { h: 64, ..p };
        assert_eq!(c0_closed(&q).0, 4 * c0_closed(&p).0);
    }

    #[test]
    fn c1_worked_value() {
        // 2·2·65·64·32·160/16; by terms 4·(131072 + 2048) + 2·4·(589824 + 9216).
        let p = params(1, 64, 2, 32, 16, 16, 128);
        assert_eq!(c1_closed(&p), (5_324_800, false));
        assert_eq!(c1_sum(&p), 532_480 + 4_792_320);
    }

    #[test]
    fn c1_reduces_without_evidence() {
        let (l, r, b, h, t) = (3u64, 5u64, 2u64, 16u64, 40u64);
        let p = params(b, h, l, t, t, r, 0);
        assert_eq!(c1_closed(&p).0, (4 * l * (4 * r + 1) * b * h * t) as u128);
    }

    #[test]
    fn decrement_sign_and_growth() {
        let cheap = params(1, 4, 1, 32, 16, 64, 128);
        assert!(c_decrement(&cheap).0 < 0);
        let p = params(1, 512, 8, 1024, 16, 16, 128);
        assert!(c_decrement(&p).0 > 0);
        let c = |t| c0_closed(&FlopsParams { t, ..p }).0 as f64;
        let (r1, r2) = (c(2048) / c(1024), c(4096) / c(2048));
        assert!(r1 > 3.9 && r1 < 4.1 && r2 > 3.9 && r2 < 4.1);
    }

    #[test]
    fn closed_forms_equal_sums_over_random_params() {
        let mut rng = SeededRng::new(99);
        for _ in 0..2000 {
            let s = rng.range_inclusive(1, 64) as u64;
            let p = FlopsParams {
                b: rng.range_inclusive(1, 8) as u64,
                h: rng.range_inclusive(1, 4096) as u64,
                l: rng.range_inclusive(1, 48) as u64,
                t: s * rng.range_inclusive(1, 256) as u64,
                s,
                r: rng.range_inclusive(0, 128) as u64,
                d: rng.range_inclusive(0, 512) as u64,
                marks_included: rng.uniform() < 0.5,
            };
            let (c0, f0) = c0_closed(&p);
            let (c1, f1) = c1_closed(&p);
            let (dec, f2) = c_decrement(&p);
            assert!(!f0 && !f1 && !f2);
            assert_eq!(c0, c0_sum(&p), "{p:?}");
            assert_eq!(c1, c1_sum(&p), "{p:?}");
            assert_eq!(dec, c0 as i128 - c1 as i128, "{p:?}");
        }
    }

    #[test]
    fn c0_decreases_with_stride() {
        let mut prev = u128::MAX;
        for s in [1, 2, 4, 8, 16, 32, 64] {
            let c = c0_closed(&params(1, 64, 2, 256, s, 4, 10)).0;
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn non_divisible_falls_back() {
        let p = params(1, 8, 1, 50, 16, 2, 4);
        let (c0, flag) = c0_closed(&p);
        assert!(flag);
        assert_eq!(c0, c0_sum(&p));
        assert!(cost_breakdown(&p).used_summation);
    }

    fn recon_model() -> Model<f32> {
        let mut cfg = ModelConfig::tiny(2, 64, 4);
        cfg.max_seq = 256;
        Model::init(cfg, 5).unwrap()
    }

    #[test]
    fn prepend_run_reconciles_exactly() {
        let out = reconciliation_run(&recon_model(), ContextPattern::Prepend, 64, 16, 20, true, 1).unwrap();
        assert!(out.report.comparable(), "{:?}", out.report.not_comparable);
        assert_eq!(out.report.rows[0].measured, c0_sum(&out.params));
        assert!(out.report.exact());
    }

    #[test]
    fn append_run_reconciles_exactly() {
        for marks in [true, false] {
            let out = reconciliation_run(&recon_model(), ContextPattern::Append, 64, 16, 20, marks, 2).unwrap();
            assert!(out.report.exact(), "{:?}", out.report.rows);
            assert_eq!(out.report.rows[2].measured, 0);
        }
    }

    #[test]
    fn no_retrieval_run_has_no_recompute() {
        let out = reconciliation_run(&recon_model(), ContextPattern::NoRetrieval, 48, 16, 20, true, 3).unwrap();
        assert!(out.report.exact());
    }

    #[test]
    fn mismatched_runs_are_flagged() {
        let p = params(1, 64, 2, 64, 16, 16, 20);
        let shape = RunShape {
            pattern: ContextPattern::Append,
            prompt_len: 10,
            max_new: 49,
            prefill: true,
            lora_targets: LoraTargets::Qkvo,
            evidence_len: 22,
            batch: 1,
        };
        let rep = reconcile(&GenerationReport::default(), &p, &shape);
        assert!(!rep.comparable());
        assert!(!rep.exact());
    }
}
