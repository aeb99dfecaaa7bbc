use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use demoselect::corpus::{apply_annotations, load_corpus, save_corpus, synth_corpus_with_test};
use demoselect::encoder::{load_vectors, save_vectors};
use demoselect::{synth_corpus, DialogueCase, EmbeddingTable, Error, SplitRole};

fn table1_case() -> DialogueCase {
    DialogueCase {
        id: "t1".into(),
        context: vec![
            "I am looking for a restaurant in the south part of town.".into(),
            "There are several. What type of food would you like?".into(),
        ],
        incomplete: "How about Mediterranean food?".into(),
        rewrite: Some("How about Mediterranean food in expensive price range?".into()),
        omission_type: Some("dropped-attribute".into()),
        annotations: Some(BTreeMap::from([("pos_type_count".to_string(), 4)])),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = synth_corpus(3, 20, 1, 1).candidates;
    cases.push(table1_case());
    let path = dir.path().join("c.jsonl");
    save_corpus(&path, &cases).unwrap();
    assert_eq!(load_corpus(&path, SplitRole::Candidates).unwrap(), cases);
    // Unicode and embedded newlines survive.
    let mut odd = table1_case();
    odd.id = "zh".into();
    odd.incomplete = "那里呢？\n第二行".into();
    save_corpus(&path, std::slice::from_ref(&odd)).unwrap();
    assert_eq!(load_corpus(&path, SplitRole::Dev).unwrap(), vec![odd]);
}

#[test]
fn load_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let ok = r#"{"id":"a","context":["x"],"incomplete":"y","rewrite":"z"}"#;

    let p = write(dir.path(), "norw.jsonl", &format!("{ok}\n{}\n", r#"{"id":"b","context":[],"incomplete":"y"}"#));
    let err = load_corpus(&p, SplitRole::Train).unwrap_err().to_string();
    assert!(err.contains("rewrite") && err.contains(":2"), "{err}");
    assert_eq!(load_corpus(&p, SplitRole::Inference).unwrap().len(), 2);

    let p = write(dir.path(), "dup.jsonl", &format!("{ok}\n\n{ok}\n"));
    match load_corpus(&p, SplitRole::Train).unwrap_err() {
        Error::DuplicateId { id, line } => assert_eq!((id.as_str(), line), ("a", 3)),
        e => panic!("{e}"),
    }

    let p = write(dir.path(), "bad.jsonl", &format!("{ok}\n{{not json\n"));
    let err = load_corpus(&p, SplitRole::Train).unwrap_err().to_string();
    assert!(err.contains(":2"), "{err}");

    let p = write(dir.path(), "empty.jsonl", r#"{"id":"a","context":[],"incomplete":"  ","rewrite":"z"}"#);
    assert!(load_corpus(&p, SplitRole::Train).is_err());

    let missing = dir.path().join("nope.jsonl");
    let err = load_corpus(&missing, SplitRole::Train).unwrap_err().to_string();
    assert!(err.contains("nope.jsonl"), "{err}");
}

#[test]
fn synth_splits_are_disjoint_for_many_seeds() {
    for seed in 0..50 {
        let split = synth_corpus_with_test(seed, 40, 30, 20, 10);
        split.check_disjoint().unwrap();
        let ids: HashSet<&str> = split.all_cases().map(|c| c.id.as_str()).collect();
        assert_eq!(ids.len(), 100);
        let texts: HashSet<(Vec<String>, String)> = split
            .all_cases()
            .map(|c| (c.context.clone(), c.incomplete.clone()))
            .collect();
        assert_eq!(texts.len(), 100, "seed {seed}");
    }
}

#[test]
fn annotations_merge_and_report_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = vec![table1_case()];
    let p = write(
        dir.path(),
        "ann.jsonl",
        "{\"id\":\"t1\",\"pos_type_count\":5,\"chunk_count\":3}\n{\"id\":\"ghost\",\"chunk_count\":1}\n",
    );
    let report = apply_annotations(&mut cases, &p).unwrap();
    assert_eq!(report.applied, 1);
    assert_eq!(report.unknown_ids, vec!["ghost".to_string()]);
    assert_eq!(cases[0].annotation("pos_type_count"), Some(5));
    assert_eq!(cases[0].annotation("chunk_count"), Some(3));

    let p = write(dir.path(), "neg.jsonl", "{\"id\":\"t1\",\"chunk_count\":-1}\n");
    assert!(apply_annotations(&mut cases, &p).is_err());
}

#[test]
fn vectors_round_trip_and_cover_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let split = synth_corpus(1, 10, 5, 5);
    let table = EmbeddingTable::from_cases(split.all_cases(), 32, 1);
    let path = dir.path().join("v.jsonl");
    save_vectors(&path, &table).unwrap();
    let ids: HashSet<String> = split.all_cases().map(|c| c.id.clone()).collect();
    let (back, report) = load_vectors(&path, &ids).unwrap();
    assert_eq!(report.records, 20);
    assert_eq!(report.duplicate_ids, 0);
    for id in &ids {
        assert_eq!(back.vector(id).unwrap(), table.vector(id).unwrap());
        let v = back.vector(id).unwrap();
        let self_cos = demoselect::encoder::cosine(v, v);
        assert!((self_cos - 1.0).abs() < 1e-6);
    }
    let mut more = ids.clone();
    more.insert("zzz".into());
    match load_vectors(&path, &more).unwrap_err() {
        Error::MissingEmbedding(id) => assert_eq!(id, "zzz"),
        e => panic!("{e}"),
    }
}
