//! End-to-end behaviour of the `ralm` binary: exit statuses, outputs,
//! config precedence and reproducibility.

mod common;

use std::path::Path;

use common::*;
use tempfile::TempDir;

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn build_index(dir: &Path) -> std::path::PathBuf {
    let corpus = write_corpus(dir);
    let out = dir.join("idx");
    let o = run(&["index", "--corpus", corpus.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_ok(&o);
    out.join("index.bin")
}

#[test]
fn exit_statuses() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = d.join("o");
    let out = out.to_str().unwrap();
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["reconcile", "--t", "many"])), 1);
    assert_eq!(code(&run(&["generate", "--prompt", "x", "--prompt-random", "3"])), 1);
    // Retrieval without any evidence source is a flag problem.
    assert_eq!(code(&run(&["generate", "--prompt", "x", "--out-dir", out])), 1);
    assert_eq!(code(&run(&["generate", "--prompt", "x", "--checkpoint", "c", "--layers", "3", "--out-dir", out])), 1);
    // Missing and malformed inputs are data errors.
    assert_eq!(code(&run(&["index", "--corpus", d.join("missing").to_str().unwrap(), "--out-dir", out])), 2);
    assert_eq!(code(&run(&["generate", "--prompt", "x", "--checkpoint", d.join("nope").to_str().unwrap(), "--out-dir", out])), 2);
    std::fs::write(d.join("junk.ralm"), "not a checkpoint").unwrap();
    assert_eq!(
        code(&run(&["generate", "--prompt", "x", "--pattern", "none", "--checkpoint", d.join("junk.ralm").to_str().unwrap(), "--out-dir", out])),
        2
    );
    assert_eq!(code(&run(&["bench", "--reps", "2", "--preset", "tiny", "--out-dir", out])), 2);
    assert_eq!(code(&run(&["reconcile", "--t", "40", "--stride", "16", "--evidence", "8", "--out-dir", out])), 2);
    assert_eq!(code(&run(&["reconcile", "--config", d.join("absent.conf").to_str().unwrap()])), 2);
}

#[test]
fn reconcile_reports_exact_match() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    let o = run(&["reconcile", "--t", "64", "--stride", "16", "--evidence", "32", "--out-dir", out.to_str().unwrap()]);
    assert_ok(&o);
    assert_eq!(stdout(&o).matches("result: EXACT MATCH").count(), 3);
    let j = json(&out.join("reconcile.json"));
    let runs = j.as_array().unwrap();
    assert_eq!(runs.len(), 3);
    for r in runs {
        assert_eq!(r["mode"]["exact"], true);
        assert!(r["rows"].as_array().unwrap().iter().all(|row| row["delta"] == 0));
    }
    let prepend = runs.iter().find(|r| r["pattern"] == "prepend").unwrap();
    assert_eq!(prepend["rows"][0]["measured"], prepend["analytic"]["c0_sum"]);
}

#[test]
fn generation_reports_retrieved_documents() {
    let tmp = TempDir::new().unwrap();
    let index = build_index(tmp.path());
    let out = tmp.path().join("g");
    let o = run(&[
        "generate",
        "--index",
        index.to_str().unwrap(),
        "--prompt",
        "we simmer the tomato sauce with garlic",
        "--max-new",
        "12",
        "--stride",
        "4",
        "--query-len",
        "12",
        "--verify-oracle",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("retrieved [cooking.txt]"), "{text}");
    let j = json(&out.join("generation.json"));
    let steps = j["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 12);
    assert_eq!(steps[0]["docs"][0], "cooking.txt");
    let retrieved: Vec<_> = steps.iter().filter(|s| s["retrieved"] == true).collect();
    assert_eq!(retrieved.len(), 3);
    assert!(retrieved.iter().all(|s| s["docs"].as_array().unwrap().len() == 1));
    assert!(steps.iter().filter(|s| s["retrieved"] == false).all(|s| s["docs"].as_array().unwrap().is_empty()));
    // Every step is checked against recomputation.
    for s in steps {
        assert!(s["oracle_deviation"].as_f64().unwrap() <= 1e-5);
    }
    assert!(j["max_oracle_deviation"].as_f64().unwrap() <= 1e-5);
    assert_eq!(j["tokens"].as_array().unwrap().len(), 12);
}

#[test]
fn ensemble_lists_every_branch_document() {
    let tmp = TempDir::new().unwrap();
    let index = build_index(tmp.path());
    let out = tmp.path().join("e");
    let o = run(&[
        "generate",
        "--index",
        index.to_str().unwrap(),
        "--prompt",
        "the crew trimmed the mainsail",
        "--max-new",
        "6",
        "--stride",
        "4",
        "--ensemble",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let j = json(&out.join("generation.json"));
    assert_eq!(j["steps"][0]["docs"][0], "sailing.txt");
    assert_eq!(j["ensemble"], 3);
    let prepend = run(&["generate", "--fixed-evidence", "8", "--prompt", "x", "--pattern", "prepend", "--ensemble", "2"]);
    assert_eq!(code(&prepend), 1);
}

#[test]
fn finetune_then_eval_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let index = build_index(d);
    let text = write_text(d, 600);
    let ft = d.join("ft");
    let o = run(&[
        "finetune",
        "--train",
        text.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--window",
        "64",
        "--stride",
        "8",
        "--query-len",
        "8",
        "--max-examples",
        "6",
        "--steps",
        "13",
        "--batch-size",
        "2",
        "--lr",
        "5e-3",
        "--grad-check",
        "30",
        "--out-dir",
        ft.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let summary = json(&ft.join("summary.json"));
    assert_eq!(summary["frozen_tensors_unchanged"], true);
    // Six examples in batches of two: step 12 sees the same batch as step 0.
    assert_eq!(summary["steps"], 13);
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
    assert_eq!(summary["grad_check"]["passed"], summary["grad_check"]["checked"]);
    let metrics = std::fs::read_to_string(ft.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,lr,loss"));
    assert_eq!(metrics.lines().count(), 14);

    // A dataset written by one run trains another.
    let again = d.join("ft2");
    let o = run(&[
        "finetune",
        "--dataset",
        ft.join("dataset.jsonl").to_str().unwrap(),
        "--steps",
        "2",
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert_ok(&o);
    assert_eq!(std::fs::read(ft.join("dataset.jsonl")).unwrap(), std::fs::read(again.join("dataset.jsonl")).unwrap());

    let ev = d.join("ev");
    let o = run(&[
        "eval",
        "--checkpoint",
        ft.join("checkpoint.ralm").to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
        "--chunk-len",
        "64",
        "--stride",
        "8",
        "--query-len",
        "8",
        "--oracle",
        "--out-dir",
        ev.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let e = json(&ev.join("eval.json"));
    assert!(e["oracle"]["relative_difference"].as_f64().unwrap() <= 1e-4);
    // Scored tokens exclude the first stride of each chunk and every mark.
    let len = std::fs::metadata(&text).unwrap().len();
    let tail = len % 64 - len % 64 % 8;
    let expected = len / 64 * (64 - 8) + if tail >= 16 { tail - 8 } else { 0 };
    assert_eq!(e["scored_tokens"].as_u64().unwrap(), expected);
    assert_eq!(e["chunks"].as_u64().unwrap(), len / 64 + u64::from(tail >= 16));
}

#[test]
fn config_file_and_environment_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("r.conf"), "# reconciliation settings\nt = 32\nstride = 16\nevidence = 8\npattern = prepend\nout-dir = from-config\n")
        .unwrap();
    let conf = d.join("r.conf");
    let conf = conf.to_str().unwrap();

    // Config values apply; its out-dir is used when nothing overrides it.
    let o = run_in(d, &["reconcile", "--config", conf]);
    assert_ok(&o);
    assert!(stdout(&o).contains("T=32 s=16"));
    assert!(d.join("from-config/reconcile.json").exists());

    // Command-line flags beat the file.
    let o = run_in(d, &["reconcile", "--config", conf, "--t", "48", "--out-dir", "from-flag"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("T=48 s=16"));
    assert!(d.join("from-flag/reconcile.json").exists());

    // The environment beats the file but not the flag.
    let env_run = |extra: &[&str]| {
        std::process::Command::new(BIN)
            .args(["reconcile", "--config", conf])
            .args(extra)
            .current_dir(d)
            .env("RALM_OUT_DIR", d.join("from-env"))
            .output()
            .unwrap()
    };
    assert_ok(&env_run(&[]));
    assert!(d.join("from-env/reconcile.json").exists());
    std::fs::remove_dir_all(d.join("from-flag")).unwrap();
    assert_ok(&env_run(&["--out-dir", "from-flag"]));
    assert!(d.join("from-flag/reconcile.json").exists());

    // Without a file or flag the environment decides, then `out`.
    let o = std::process::Command::new(BIN)
        .args(["reconcile", "--t", "32", "--evidence", "8", "--pattern", "none"])
        .current_dir(d)
        .env("RALM_OUT_DIR", d.join("env-only"))
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(d.join("env-only/reconcile.json").exists());
    assert_ok(&run_in(d, &["reconcile", "--t", "32", "--evidence", "8", "--pattern", "none"]));
    assert!(d.join("out/reconcile.json").exists());

    // Unknown keys, bad values and malformed lines are data errors.
    for (name, body) in [("a.conf", "colour = blue\n"), ("b.conf", "t = lots\n"), ("c.conf", "just words\n"), ("d.conf", "t = 1\nt = 2\n")] {
        std::fs::write(d.join(name), body).unwrap();
        let o = run_in(d, &["reconcile", "--config", name]);
        assert_eq!(code(&o), 2, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn bench_scenario_file_and_replot() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("scenario.conf"),
        "preset = tiny\nlengths = 120,160,5000\nprompt-len = 32\nevidence = 16\nreps = 3\nwarmup = 1\nmarks = false\n",
    )
    .unwrap();
    let o = run_in(d, &["bench", "--scenario", "scenario.conf", "--out-dir", "b"]);
    assert_ok(&o);
    let b = d.join("b");
    for f in ["bench.csv", "counts.csv", "summary.csv", "bench.svg", "meta.json"] {
        assert!(b.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(b.join("bench.csv")).unwrap();
    assert!(csv.starts_with("pattern,target_len,rep,wall_s,recomputed_tokens,flops_kv,flops_lora,stride,error\n"));
    // 2 patterns x 2 feasible lengths x 3 reps, plus one error row per pattern.
    assert_eq!(csv.lines().count(), 1 + 12 + 2);
    assert_eq!(csv.lines().filter(|l| l.contains("exceeds")).count(), 2);
    let meta = json(&b.join("meta.json"));
    assert_eq!(meta["csv_schema"], "ralm-bench-v1");
    assert_eq!(meta["scenario"]["reps"], 3);
    assert_eq!(meta["scenario"]["use_marks"], false);

    // Replotting reads only the CSV and reproduces the chart exactly.
    let o = run_in(d, &["bench", "--replot", "b/bench.csv", "--out-dir", "re"]);
    assert_ok(&o);
    assert_eq!(std::fs::read(b.join("bench.svg")).unwrap(), std::fs::read(d.join("re/bench.svg")).unwrap());
}

#[test]
fn every_subcommand_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let corpus = write_corpus(d);
    let text = write_text(d, 400);
    let index = build_index(d);
    let mut diffs = Vec::new();
    for (name, args, files) in subcommand_runs(&corpus, &text, &index) {
        diffs.extend(rerun_differences(d, name, &args, &files));
    }
    assert!(diffs.is_empty(), "{diffs:?}");
}
