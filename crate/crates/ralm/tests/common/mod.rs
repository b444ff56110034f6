//! Helpers shared by the integration tests: running the binary and small
//! on-disk fixtures.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_ralm");

/// Runs the binary with `args` in `cwd`, without an inherited output-dir
/// override.
pub fn run_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env_remove("RALM_OUT_DIR").output().expect("spawn ralm")
}

pub fn run(args: &[&str]) -> Output {
    run_in(Path::new("."), args)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Three small text documents whose words do not overlap.
pub fn write_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    let docs = [
        ("astronomy.txt", "telescopes observe distant galaxies nebulae and comets orbiting faraway stars"),
        ("cooking.txt", "simmer the tomato sauce with garlic basil and olive oil before serving pasta"),
        ("sailing.txt", "the crew trimmed the mainsail tacked upwind and dropped anchor in the harbour"),
    ];
    for (name, text) in docs {
        std::fs::write(corpus.join(name), text).unwrap();
    }
    corpus
}

/// A text long enough to cut a handful of training and evaluation windows.
pub fn write_text(dir: &Path, words: usize) -> PathBuf {
    let vocab = ["galaxies", "comets", "tomato", "garlic", "mainsail", "harbour", "the", "and", "with", "in"];
    let mut rng = ralm_core::SeededRng::new(7);
    let text: Vec<&str> = (0..words).map(|_| vocab[rng.range_inclusive(0, vocab.len() - 1)]).collect();
    let path = dir.join("text.txt");
    std::fs::write(&path, text.join(" ")).unwrap();
    path
}

/// Every regular file of `dir` with its contents, sorted by name.
pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

/// One invocation per subcommand plus the data files it must reproduce
/// byte for byte. `index` is an index file built beforehand.
pub fn subcommand_runs(corpus: &Path, text: &Path, index: &Path) -> Vec<(&'static str, Vec<String>, Vec<&'static str>)> {
    let p = |x: &Path| x.display().to_string();
    let args = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let with = |mut v: Vec<String>, extra: &[String]| {
        v.extend_from_slice(extra);
        v
    };
    vec![
        ("index", with(args("index --corpus"), &[p(corpus)]), vec!["index.bin"]),
        (
            "generate",
            with(
                args("generate --prompt-random 20 --max-new 24 --stride 8 --query-len 8 --temperature 0.8 --seed 3 --verify-oracle --index"),
                &[p(index)],
            ),
            vec!["generation.json"],
        ),
        (
            "finetune",
            with(
                args("finetune --window 64 --stride 8 --query-len 8 --max-examples 8 --steps 10 --batch-size 2 --grad-check 20 --seed 5 --train"),
                &[p(text), "--index".into(), p(index)],
            ),
            vec!["checkpoint.ralm", "dataset.jsonl", "metrics.csv", "summary.json"],
        ),
        (
            "eval",
            with(args("eval --chunk-len 64 --stride 8 --query-len 8 --oracle --text"), &[p(text), "--index".into(), p(index)]),
            vec!["eval.json"],
        ),
        ("reconcile", args("reconcile --t 32 --stride 16 --evidence 16"), vec!["reconcile.json", "reconcile.txt"]),
        (
            "bench",
            args("bench --preset tiny --lengths 160,200 --prompt-len 32 --evidence 16 --reps 3 --warmup 1 --seed 9"),
            vec!["counts.csv"],
        ),
    ]
}

/// Runs `args` twice into separate output directories and returns the
/// names of expected files that are missing or differ.
pub fn rerun_differences(work: &Path, name: &str, args: &[String], expected: &[&str]) -> Vec<String> {
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = work.join(format!("{name}-{run}"));
        let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
        let out_s = out.display().to_string();
        full.extend(["--out-dir", &out_s]);
        let o = run_in(work, &full);
        if code(&o) != 0 {
            return vec![format!("{name} exited {}: {}", code(&o), String::from_utf8_lossy(&o.stderr))];
        }
        outputs.push(out);
    }
    expected
        .iter()
        .filter(|f| match (std::fs::read(outputs[0].join(f)), std::fs::read(outputs[1].join(f))) {
            (Ok(a), Ok(b)) => a != b,
            _ => true,
        })
        .map(|f| format!("{name}/{f}"))
        .collect()
}
