//! Human-readable and JSON renderings of FLOP reconciliation results.

use ralm_core::analysis::{c0_closed, c0_sum, c1_closed, c1_sum, c_decrement, FlopsParams, ReconciliationOutcome};
use serde::Serialize;

#[derive(Serialize)]
pub struct ParamsJson {
    pub b: u64,
    pub h: u64,
    pub l: u64,
    pub t: u64,
    pub s: u64,
    pub r: u64,
    pub d: u64,
    pub marks_included: bool,
}

impl From<&FlopsParams> for ParamsJson {
    fn from(p: &FlopsParams) -> Self {
        Self { b: p.b, h: p.h, l: p.l, t: p.t, s: p.s, r: p.r, d: p.d, marks_included: p.marks_included }
    }
}

#[derive(Serialize)]
pub struct ModeJson {
    pub comparable: bool,
    pub not_comparable_reason: Option<String>,
    pub divisible: bool,
    pub used_summation: bool,
    pub exact: bool,
}

#[derive(Serialize)]
pub struct AnalyticJson {
    pub c0_sum: u128,
    pub c0_closed: u128,
    pub c1_sum: u128,
    pub c1_closed: u128,
    pub c_decrement: i128,
    pub c1_lora: u128,
    pub c1_unattributed_linear: u128,
}

#[derive(Serialize)]
pub struct RowJson {
    pub name: &'static str,
    pub measured: u128,
    pub analytic: u128,
    pub delta: i128,
}

#[derive(Serialize)]
pub struct RunJson {
    pub steps: usize,
    pub retrievals: usize,
    pub recomputed_tokens: usize,
    pub flops_kv: u64,
    pub flops_lora: u64,
    pub flops_other: u64,
}

#[derive(Serialize)]
pub struct ReconcileJson {
    pub pattern: &'static str,
    pub params: ParamsJson,
    pub mode: ModeJson,
    pub analytic: AnalyticJson,
    pub rows: Vec<RowJson>,
    pub run: RunJson,
}

pub fn to_json(o: &ReconciliationOutcome) -> ReconcileJson {
    let p = &o.params;
    let r = &o.report;
    let flops = o.generation.total_flops();
    let terms = &r.breakdown.c1_terms;
    ReconcileJson {
        pattern: r.pattern.name(),
        params: p.into(),
        mode: ModeJson {
            comparable: r.comparable(),
            not_comparable_reason: r.not_comparable.clone(),
            divisible: p.divisible(),
            used_summation: r.breakdown.used_summation,
            exact: r.exact(),
        },
        analytic: AnalyticJson {
            c0_sum: c0_sum(p),
            c0_closed: c0_closed(p).0,
            c1_sum: c1_sum(p),
            c1_closed: c1_closed(p).0,
            c_decrement: c_decrement(p).0,
            c1_lora: terms.lora(),
            c1_unattributed_linear: terms.unattributed_linear(),
        },
        rows: r
            .rows
            .iter()
            .map(|row| RowJson { name: row.name, measured: row.measured, analytic: row.analytic, delta: row.delta() })
            .collect(),
        run: RunJson {
            steps: o.generation.steps.len(),
            retrievals: o.generation.retrievals(),
            recomputed_tokens: o.generation.total_recomputed(),
            flops_kv: flops.kv_projection(),
            flops_lora: flops.lora(),
            flops_other: flops.other(),
        },
    }
}

pub fn to_text(o: &ReconciliationOutcome) -> String {
    let j = to_json(o);
    let p = &j.params;
    let mut s = format!(
        "reconciliation: {} pattern, b={} h={} l={} T={} s={} r={} d={}{}\n",
        j.pattern,
        p.b,
        p.h,
        p.l,
        p.t,
        p.s,
        p.r,
        p.d,
        if p.marks_included { " (+2 marks)" } else { "" }
    );
    s += &format!(
        "  run: {} steps, {} retrievals, {} rows encoded\n",
        j.run.steps, j.run.retrievals, j.run.recomputed_tokens
    );
    s += &format!(
        "  analytic: c0={} (closed {})  c1={} (closed {}; adapter {} + unattributed-linear {})  decrement={}\n",
        j.analytic.c0_sum,
        j.analytic.c0_closed,
        j.analytic.c1_sum,
        j.analytic.c1_closed,
        j.analytic.c1_lora,
        j.analytic.c1_unattributed_linear,
        j.analytic.c_decrement
    );
    if j.mode.used_summation {
        s += "  note: T is not a multiple of s; closed forms replaced by summation\n";
    }
    s += &format!("  {:<22} {:>20} {:>20} {:>12}\n", "quantity", "measured", "analytic", "delta");
    for r in &j.rows {
        s += &format!("  {:<22} {:>20} {:>20} {:>12}\n", r.name, r.measured, r.analytic, r.delta);
    }
    s += &match &j.mode.not_comparable_reason {
        Some(why) => format!("  result: NOT COMPARABLE ({why})\n"),
        None if j.mode.exact => "  result: EXACT MATCH\n".to_string(),
        None => "  result: MISMATCH\n".to_string(),
    };
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ralm_core::analysis::reconciliation_run;
    use ralm_core::generation::ContextPattern;
    use ralm_core::model::{Model, ModelConfig};

    #[test]
    fn prepend_report_is_exact() {
        let m: Model<f32> = Model::init(ModelConfig::tiny(1, 16, 2), 0).unwrap();
        let o = reconciliation_run(&m, ContextPattern::Prepend, 32, 16, 8, false, 3).unwrap();
        let text = to_text(&o);
        assert!(text.contains("EXACT MATCH"), "{text}");
        let json = serde_json::to_value(to_json(&o)).unwrap();
        assert_eq!(json["mode"]["exact"], true);
        assert_eq!(json["rows"][0]["delta"], 0);
        assert_eq!(json["rows"][0]["measured"], json["analytic"]["c0_sum"]);
    }
}
