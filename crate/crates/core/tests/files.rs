//! Corpus and model directories on disk.

use amsh_core::code_learning::{CrossTerm, Hyperparams};
use amsh_core::data_model::{synth_raw, synth_with_queries, Pairing, RawCorpus, SynthConfig};
use amsh_core::evaluation::Task;
use amsh_core::kv::KeyValues;
use amsh_core::pipeline::{evaluate_task, train, TrainedModel, Variant};

fn config() -> SynthConfig {
    SynthConfig {
        classes: 3,
        sizes: vec![80, 70],
        dims: vec![6, 9],
        noise: 0.3,
        multilabel_p: 0.2,
        seed: 12,
        paired: false,
    }
}

#[test]
fn corpus_directory_round_trip() {
    let raw = synth_raw(&config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    raw.write_dir(dir.path()).unwrap();
    let back = RawCorpus::read_dir(dir.path()).unwrap();
    assert_eq!(back, raw);
    assert_eq!(back.pairing, Pairing::Unpaired);
    let kv = KeyValues::load(dir.path().join("corpus.kv")).unwrap();
    assert_eq!(kv.get("modalities"), Some("2"));
    assert_eq!(kv.get("paired"), Some("false"));
}

#[test]
fn train_save_load_evaluate() {
    let (train_raw, queries) = synth_with_queries(&config(), 20).unwrap();
    let corpus_dir = tempfile::tempdir().unwrap();
    train_raw.write_dir(corpus_dir.path()).unwrap();
    let corpus = RawCorpus::read_dir(corpus_dir.path()).unwrap().center().unwrap();

    let h = Hyperparams {
        bits: 8,
        seed: 3,
        cross_term: CrossTerm::Exact,
        ..Default::default()
    };
    let model = train(&corpus, &h, Variant::Full).unwrap();
    let model_dir = tempfile::tempdir().unwrap();
    model.save(model_dir.path()).unwrap();
    let loaded = TrainedModel::load(model_dir.path()).unwrap();

    for task in Task::BOTH {
        let a = evaluate_task(&model, &queries, task, None).unwrap();
        let b = evaluate_task(&loaded, &queries, task, None).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.aps, b.aps);
        assert_eq!(a.pr_points, b.pr_points);

        let out = tempfile::tempdir().unwrap();
        a.write(out.path()).unwrap();
        let kv = KeyValues::load(out.path().join(format!("report_{}.kv", task.tag()))).unwrap();
        for key in ["map", "queries_excluded", "K"] {
            assert!(kv.get(key).is_some(), "{key}");
        }
        assert_eq!(kv.parse_value::<f64>("map").unwrap(), a.map);
        assert!(out.path().join(format!("pr_{}.dmt", task.tag())).exists());
    }
}
