//! Files written by one component read back unchanged by another.

mod common;

use ralm::bench::{self, BenchRow};
use ralm::{checkpoint, corpus, dataset};
use ralm_core::model::{LoraTargets, Model, ModelConfig, PositionScheme};
use ralm_core::retrieval::{Bm25Params, Retriever};
use ralm_core::tuneval::{build_training_set, DatasetConfig};
use ralm_core::generation::ContextPattern;
use ralm_core::retrieval::FixedEvidence;
use ralm_core::SeededRng;
use tempfile::TempDir;

#[test]
fn checkpoint_file_round_trip_is_bit_exact() {
    let tmp = TempDir::new().unwrap();
    let cfg = ModelConfig {
        position: PositionScheme::LearnedAbsolute,
        lora_targets: LoraTargets::Qkvo,
        lora_rank: 3,
        ..ModelConfig::tiny(2, 24, 3)
    };
    let mut model: Model<f32> = Model::init(cfg, 17).unwrap();
    let mut rng = SeededRng::new(2);
    for (_, t) in model.params.named_tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.normal() as f32 * 1e-3);
    }
    let path = tmp.path().join("m.ralm");
    checkpoint::save(&path, &model, 17).unwrap();
    let (back, seed) = checkpoint::load(&path).unwrap();
    assert_eq!(seed, 17);
    assert_eq!(back.cfg, model.cfg);
    for ((na, a), (nb, b)) in model.params.named_tensors().into_iter().zip(back.params.named_tensors()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
    // Same weights, same logits.
    let toks = [1, 2, 3, 250, 7];
    assert_eq!(model.forward_full(&toks).unwrap().data(), back.forward_full(&toks).unwrap().data());
}

#[test]
fn index_file_preserves_rankings() {
    let tmp = TempDir::new().unwrap();
    let dir = common::write_corpus(tmp.path());
    let built = ralm_core::retrieval::Bm25Index::build(corpus::ingest(&dir, None).unwrap(), Bm25Params { k1: 1.2, b: 0.6 }).unwrap();
    let path = tmp.path().join("i.bin");
    corpus::save_index(&path, &built).unwrap();
    let loaded = corpus::load_index(&path).unwrap();
    assert_eq!(loaded.params(), built.params());
    assert_eq!(loaded.corpus(), built.corpus());
    let mut rng = SeededRng::new(4);
    for _ in 0..50 {
        let q: Vec<u32> = (0..rng.range_inclusive(1, 12)).map(|_| rng.range_inclusive(32, 122) as u32).collect();
        assert_eq!(loaded.retrieve(&q, 3), built.retrieve(&q, 3));
    }
}

#[test]
fn exclusion_list_drops_documents() {
    let tmp = TempDir::new().unwrap();
    let dir = common::write_corpus(tmp.path());
    let ex = tmp.path().join("exclude.txt");
    std::fs::write(&ex, "cooking.txt\n").unwrap();
    let c = corpus::ingest(&dir, Some(&ex)).unwrap();
    let names: Vec<_> = c.documents().iter().map(|d| d.name.as_str()).collect();
    assert_eq!(names, ["astronomy.txt", "sailing.txt"]);
}

#[test]
fn dataset_file_round_trip() {
    let tmp = TempDir::new().unwrap();
    let text = common::write_text(tmp.path(), 300);
    let stream = corpus::read_stream(&text).unwrap();
    let vocab = ralm_core::model::Vocabulary::new(258);
    let cfg = DatasetConfig {
        pattern: ContextPattern::Append,
        stride: 8,
        window: 64,
        query_len: 8,
        max_evidence: 20,
        use_marks: true,
        max_examples: Some(5),
    };
    let mut src = FixedEvidence::random(20, 256, &mut SeededRng::new(1));
    let examples = build_training_set(&stream, &cfg, Some(&mut src), vocab, 3).unwrap();
    let path = tmp.path().join("d.jsonl");
    dataset::save(&path, &examples).unwrap();
    assert_eq!(dataset::load(&path, vocab).unwrap(), examples);
}

#[test]
fn bench_csv_round_trip() {
    let tmp = TempDir::new().unwrap();
    let rows = vec![
        BenchRow {
            pattern: "prepend".into(),
            target_len: 1024,
            rep: 0,
            wall_s: 0.125,
            recomputed_tokens: 12345,
            flops_kv: 1 << 40,
            flops_lora: 7,
            stride: 16,
            error: String::new(),
        },
        BenchRow {
            pattern: "append".into(),
            target_len: 9999,
            rep: 0,
            wall_s: 0.0,
            recomputed_tokens: 0,
            flops_kv: 0,
            flops_lora: 0,
            stride: 16,
            error: "target length 9999, too long".into(),
        },
    ];
    let path = tmp.path().join("bench.csv");
    bench::write_rows(&path, &rows).unwrap();
    assert_eq!(bench::read_rows(&path).unwrap(), rows);
}
