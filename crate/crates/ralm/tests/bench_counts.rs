//! The benchmark's recorded counts agree with the generation reports of
//! the same runs.

use ralm::bench::{inputs, run_bench, run_config, BenchScenario};
use ralm_core::generation::{generate, ContextPattern, NullClock};
use ralm_core::model::{Model, ModelConfig};

fn scenario() -> BenchScenario {
    BenchScenario {
        model: ModelConfig { max_seq: 512, ..ModelConfig::tiny(2, 32, 4) },
        model_seed: 0,
        patterns: ContextPattern::ALL.to_vec(),
        prompt_len: 20,
        prompt_len_max: Some(40),
        evidence_len: 24,
        strides: vec![4, 16],
        lengths: vec![100, 180],
        reps: 3,
        warmup: 1,
        seed: 8,
        use_marks: true,
        query_len: 8,
    }
}

#[test]
fn recomputed_totals_match_step_reports() {
    let sc = scenario();
    let model: Model<f32> = Model::init(sc.model.clone(), sc.model_seed).unwrap();
    let rows = run_bench(&model, &sc, |_| {}).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2 * 3);
    for row in &rows {
        assert!(row.error.is_empty(), "{}", row.error);
        let si = sc.strides.iter().position(|&s| s == row.stride).unwrap();
        let li = sc.lengths.iter().position(|&l| l == row.target_len).unwrap();
        let inp = inputs(&sc, si, li, sc.warmup + row.rep);
        let pattern = ContextPattern::parse(&row.pattern).unwrap();
        let cfg = run_config(&sc, pattern, row.stride, row.target_len, inp.prompt.len()).unwrap();
        let mut src = inp.evidence;
        let report = generate(&model, &cfg, Some(&mut src), &inp.prompt, &NullClock).unwrap();
        let step_sum: usize = report.prefill.iter().chain(&report.steps).map(|s| s.recomputed).sum();
        assert_eq!(row.recomputed_tokens, step_sum as u64);
        let flops = report.total_flops();
        assert_eq!((row.flops_kv, row.flops_lora), (flops.kv_projection(), flops.lora()));
        // Target lengths count the evidence budget under every pattern.
        assert_eq!(inp.prompt.len() + sc.evidence_len + report.tokens.len(), row.target_len);
    }
}

/// Empty evidence without marks leaves Append one stride re-encode per
/// retrieval on top of plain decoding, which should be within timing
/// noise. On a single CPU core that re-encode is compute-bound (about three
/// single-token steps per boundary at this size), so the median ratio
/// lands near 0.8 and this check is opt-in: `cargo test -- --ignored`.
#[test]
#[ignore = "compute-bound stride re-encode on one core puts the ratio at the interval's edge"]
fn empty_evidence_append_times_like_no_retrieval() {
    let sc = BenchScenario {
        model: ModelConfig { layers: 8, hidden: 512, heads: 8, mlp_dim: 2048, ..ModelConfig::default() },
        patterns: vec![ContextPattern::NoRetrieval, ContextPattern::Append],
        prompt_len: 128,
        prompt_len_max: None,
        evidence_len: 0,
        strides: vec![16],
        lengths: vec![384],
        reps: 5,
        use_marks: false,
        ..scenario()
    };
    let model: Model<f32> = Model::init(sc.model.clone(), 0).unwrap();
    let rows = run_bench(&model, &sc, |_| {}).unwrap();
    let summary = ralm::bench::summarize(&rows);
    let none = summary.iter().find(|s| s.pattern == "none").unwrap();
    let ratio = none.median_ratio_vs_append.unwrap();
    println!("none/append median wall-time ratio {ratio:.3}");
    assert!((0.8..=1.25).contains(&ratio), "none/append median ratio {ratio}");
}
