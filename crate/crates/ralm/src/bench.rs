//! Wall-clock comparison of the context patterns.
//!
//! Every configuration decodes from a pseudo prompt of token ids drawn
//! uniformly from the base vocabulary, with fixed-length pseudo evidence
//! that bypasses the retriever, so only generation is timed. A target
//! length `L` means the final context holds `L` tokens counting the prompt
//! and `evidence_len` evidence tokens: `L - prompt - evidence_len` tokens
//! are generated under every pattern. Runs are strictly sequential; each
//! configuration gets `warmup` discarded runs before `reps` timed ones.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ralm_core::generation::{generate, Clock, ContextPattern, GenerationConfig, NullClock, Sampling};
use ralm_core::model::Model;
use ralm_core::retrieval::{FixedEvidence, RetrievalConfig};
use ralm_core::{SeededRng, TokenId};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Version tag of the CSV layouts written here, recorded in the sidecar.
pub const CSV_SCHEMA: &str = "ralm-bench-v1";

/// Monotonic clock for step reports.
pub struct StdClock {
    origin: Instant,
}

impl StdClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchScenario {
    #[serde(skip)]
    pub model: ralm_core::model::ModelConfig,
    pub model_seed: u64,
    #[serde(serialize_with = "pattern_names")]
    pub patterns: Vec<ContextPattern>,
    pub prompt_len: usize,
    /// When set, each prompt length is drawn from `U{prompt_len, prompt_len_max}`.
    pub prompt_len_max: Option<usize>,
    pub evidence_len: usize,
    pub strides: Vec<usize>,
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub use_marks: bool,
    pub query_len: usize,
}

fn pattern_names<S: serde::Serializer>(p: &[ContextPattern], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(p.iter().map(|p| p.name()))
}

impl BenchScenario {
    pub fn validate(&self) -> CliResult<()> {
        if self.patterns.is_empty() || self.lengths.is_empty() || self.strides.is_empty() {
            return Err(CliError::data("scenario needs at least one pattern, length and stride"));
        }
        if self.reps < 3 {
            return Err(CliError::data(format!("reps = {} but reported means need at least 3", self.reps)));
        }
        if self.strides.contains(&0) || self.query_len == 0 {
            return Err(CliError::data("stride and query length must be at least 1"));
        }
        if self.prompt_len == 0 || self.prompt_len_max.is_some_and(|m| m < self.prompt_len) {
            return Err(CliError::data("prompt length must be at least 1 and not above prompt_len_max"));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// One timed run (or one infeasible configuration).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pattern: String,
    pub target_len: usize,
    pub rep: usize,
    pub wall_s: f64,
    pub recomputed_tokens: u64,
    pub flops_kv: u64,
    pub flops_lora: u64,
    pub stride: usize,
    /// Empty on success.
    pub error: String,
}

/// [`BenchRow`] without the timing column; identical across runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountRow<'a> {
    pub pattern: &'a str,
    pub target_len: usize,
    pub rep: usize,
    pub recomputed_tokens: u64,
    pub flops_kv: u64,
    pub flops_lora: u64,
    pub stride: usize,
    pub error: &'a str,
}

/// Inputs shared by all patterns of one (stride, length, repetition).
pub struct Inputs {
    pub prompt: Vec<TokenId>,
    pub evidence: FixedEvidence,
}

/// Prompt and evidence of run `run` (warm-up runs first) at the given
/// stride and length indices of the scenario.
pub fn inputs(sc: &BenchScenario, stride_i: usize, len_i: usize, run: usize) -> Inputs {
    let key = ((stride_i as u64) << 40) ^ ((len_i as u64) << 20) ^ run as u64;
    let mut rng = SeededRng::new(sc.seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let base = sc.model.vocab_base;
    let len = match sc.prompt_len_max {
        Some(max) => rng.range_inclusive(sc.prompt_len, max),
        None => sc.prompt_len,
    };
    let prompt = (0..len).map(|_| rng.range_inclusive(0, base - 1) as TokenId).collect();
    let evidence = FixedEvidence::random(sc.evidence_len, base, &mut rng);
    Inputs { prompt, evidence }
}

/// Generation settings for one run, or why the length is infeasible.
pub fn run_config(
    sc: &BenchScenario,
    pattern: ContextPattern,
    stride: usize,
    target_len: usize,
    prompt_len: usize,
) -> Result<GenerationConfig, String> {
    let fixed = prompt_len + sc.evidence_len;
    if target_len <= fixed {
        return Err(format!("target length {target_len} leaves no room after {prompt_len} prompt + {} evidence tokens", sc.evidence_len));
    }
    let marks = if sc.use_marks && pattern.retrieves() { 2 } else { 0 };
    if target_len + marks > sc.model.max_seq {
        return Err(format!("target length {target_len} (+{marks} marks) exceeds the model's {} positions", sc.model.max_seq));
    }
    Ok(GenerationConfig {
        pattern,
        retrieval: RetrievalConfig { stride, query_len: sc.query_len, top_k: 1, max_evidence: sc.evidence_len },
        use_marks: sc.use_marks,
        max_new: target_len - fixed,
        sampling: Sampling::Greedy,
        prefill: true,
        verify_oracle: false,
    })
}

/// Runs the whole scenario, calling `progress` after every timed row.
pub fn run_bench(
    model: &Model<f32>,
    sc: &BenchScenario,
    mut progress: impl FnMut(&BenchRow),
) -> CliResult<Vec<BenchRow>> {
    sc.validate()?;
    let mut rows = Vec::new();
    for (si, &stride) in sc.strides.iter().enumerate() {
        for (li, &target_len) in sc.lengths.iter().enumerate() {
            for &pattern in &sc.patterns {
                for run in 0..sc.warmup + sc.reps {
                    let inp = inputs(sc, si, li, run);
                    let mut row = BenchRow {
                        pattern: pattern.name().into(),
                        target_len,
                        rep: run.saturating_sub(sc.warmup),
                        wall_s: 0.0,
                        recomputed_tokens: 0,
                        flops_kv: 0,
                        flops_lora: 0,
                        stride,
                        error: String::new(),
                    };
                    match run_config(sc, pattern, stride, target_len, inp.prompt.len()) {
                        Err(msg) => {
                            // One error row per configuration, then move on.
                            row.error = msg;
                            row.rep = 0;
                            progress(&row);
                            rows.push(row);
                            break;
                        }
                        Ok(cfg) => {
                            let mut source = inp.evidence;
                            let start = Instant::now();
                            let report = generate(model, &cfg, Some(&mut source), &inp.prompt, &NullClock)?;
                            let wall = start.elapsed().as_secs_f64();
                            if run < sc.warmup {
                                continue;
                            }
                            let flops = report.total_flops();
                            row.wall_s = wall;
                            row.recomputed_tokens = report.total_recomputed() as u64;
                            row.flops_kv = flops.kv_projection();
                            row.flops_lora = flops.lora();
                            progress(&row);
                            rows.push(row);
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Timing statistics of one (pattern, stride, length) configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub pattern: String,
    pub stride: usize,
    pub target_len: usize,
    pub reps: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    /// Mean wall time over the append mean at the same stride and length.
    pub ratio_vs_append: Option<f64>,
    pub median_ratio_vs_append: Option<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates successful rows in first-seen configuration order.
pub fn summarize(rows: &[BenchRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.error.is_empty()) {
        let k = (r.pattern.clone(), r.stride, r.target_len);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let times = |p: &str, s: usize, l: usize| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.error.is_empty() && r.pattern == p && r.stride == s && r.target_len == l)
            .map(|r| r.wall_s)
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    keys.iter()
        .map(|(p, s, l)| {
            let t = times(p, *s, *l);
            let append = times("append", *s, *l);
            let has_append = !append.is_empty();
            SummaryRow {
                pattern: p.clone(),
                stride: *s,
                target_len: *l,
                reps: t.len(),
                mean_s: mean(&t),
                median_s: median(&t),
                min_s: t.iter().copied().fold(f64::INFINITY, f64::min),
                max_s: t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ratio_vs_append: has_append.then(|| mean(&t) / mean(&append)),
                median_ratio_vs_append: has_append.then(|| median(&t) / median(&append)),
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_rows(path: &Path, rows: &[BenchRow]) -> CliResult<()> {
    write_csv(path, rows)
}

pub fn write_counts(path: &Path, rows: &[BenchRow]) -> CliResult<()> {
    write_csv(
        path,
        rows.iter().map(|r| CountRow {
            pattern: &r.pattern,
            target_len: r.target_len,
            rep: r.rep,
            recomputed_tokens: r.recomputed_tokens,
            flops_kv: r.flops_kv,
            flops_lora: r.flops_lora,
            stride: r.stride,
            error: &r.error,
        }),
    )
}

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> CliResult<()> {
    write_csv(path, summary)
}

pub fn read_rows(path: &Path) -> CliResult<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Run metadata that legitimately differs between runs.
#[derive(Serialize)]
pub struct Meta<'a> {
    pub csv_schema: &'static str,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
    pub os: &'static str,
    pub arch: &'static str,
    pub available_parallelism: usize,
    pub scenario: &'a BenchScenario,
}

pub fn write_meta(path: &Path, meta: &Meta<'_>) -> CliResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, meta).map_err(|e| CliError::data(e.to_string()))?;
    f.write_all(b"\n").map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ralm_core::model::ModelConfig;

    fn scenario() -> BenchScenario {
        BenchScenario {
            model: ModelConfig { max_seq: 256, ..ModelConfig::tiny(1, 16, 2) },
            model_seed: 0,
            patterns: vec![ContextPattern::Prepend, ContextPattern::Append],
            prompt_len: 10,
            prompt_len_max: None,
            evidence_len: 6,
            strides: vec![4],
            lengths: vec![40, 60, 300],
            reps: 3,
            warmup: 1,
            seed: 1,
            use_marks: true,
            query_len: 4,
        }
    }

    #[test]
    fn infeasible_lengths_become_error_rows() {
        let sc = scenario();
        let model = Model::init(sc.model.clone(), 0).unwrap();
        let rows = run_bench(&model, &sc, |_| {}).unwrap();
        let bad: Vec<_> = rows.iter().filter(|r| !r.error.is_empty()).collect();
        assert_eq!(bad.len(), 2);
        assert!(bad.iter().all(|r| r.target_len == 300));
        assert_eq!(rows.len(), 2 * 2 * 3 + 2);
        let s = summarize(&rows);
        assert_eq!(s.len(), 4);
        assert!(s.iter().filter(|r| r.pattern == "append").all(|r| r.ratio_vs_append == Some(1.0)));
    }

    #[test]
    fn counts_repeat_across_reps() {
        let sc = scenario();
        let model = Model::init(sc.model.clone(), 0).unwrap();
        let rows = run_bench(&model, &sc, |_| {}).unwrap();
        for r in rows.iter().filter(|r| r.error.is_empty()) {
            let first = rows.iter().find(|o| o.pattern == r.pattern && o.target_len == r.target_len).unwrap();
            assert_eq!((r.recomputed_tokens, r.flops_kv, r.flops_lora), (first.recomputed_tokens, first.flops_kv, first.flops_lora));
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn rejects_too_few_reps() {
        let sc = BenchScenario { reps: 2, ..scenario() };
        assert!(sc.validate().is_err());
    }
}
