//! INB ranking over the published ImageNet accuracies of a 49-model hub.

use std::collections::BTreeMap;
use std::sync::Arc;

use mll_core::graph::{SampleMap, SemanticGraph, SynsetRecord};
use mll_core::harness::{inb_ranking, inb_select};
use mll_core::labeling::{compute_label, ModelHub, ModelRecord};
use mll_core::store::EmbeddingMatrix;
use mll_core::MllError;

fn table() -> Vec<(String, f64)> {
    include_str!("data/hub_models.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (id, acc) = l.split_once('\t').unwrap();
            (id.to_string(), acc.parse().unwrap())
        })
        .collect()
}

fn hub(rows: &[(String, f64)]) -> ModelHub {
    let records = vec![SynsetRecord {
        synset_id: "v".into(),
        name: "thing".into(),
        definition: "anything at all".into(),
        hypernym_ids: vec![],
    }];
    let samples: SampleMap = BTreeMap::from([("v".to_string(), vec!["s".to_string()])]);
    let graph = SemanticGraph::build(&records, &samples).unwrap();
    let one = |id: &str| Arc::new(EmbeddingMatrix::from_rows(vec![id.into()], vec![vec![1.0, 0.0]]).unwrap());
    let mut hub = ModelHub::new();
    for (id, acc) in rows {
        let record = ModelRecord::new(id.clone(), 2).with_imagenet_acc(*acc);
        let label = compute_label(&record, one("s"), one("v"), &graph).unwrap();
        hub.register_in_place(record, label).unwrap();
    }
    hub
}

#[test]
fn table_has_49_models() {
    assert_eq!(table().len(), 49);
}

#[test]
fn best_imagenet_model_tops_inb() {
    let hub = hub(&table());
    let ranked = inb_ranking(&hub).unwrap();
    assert_eq!(ranked[0].model_id, "ViT-H-14-378-quickgelu:dfn5b");
    assert_eq!(ranked[0].score, 0.8437);
    assert_eq!(inb_select(&hub, 1).unwrap(), vec!["ViT-H-14-378-quickgelu:dfn5b"]);
    assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn equal_accuracy_breaks_toward_smaller_id() {
    let ranked = inb_ranking(&hub(&table())).unwrap();
    let pos = |id: &str| ranked.iter().position(|r| r.model_id == id).unwrap();
    assert_eq!(pos("RN101-quickgelu:openai") + 1, pos("RN101:openai"));
}

#[test]
fn missing_accuracy_is_reported() {
    let mut rows = table();
    rows.truncate(3);
    let mut hub = hub(&rows);
    let record = ModelRecord::new("no-acc", 2);
    let mut label = hub.get("RN50:openai").unwrap().label.clone();
    label.model_id = "no-acc".into();
    hub.register_in_place(record, label).unwrap();
    match inb_ranking(&hub) {
        Err(MllError::IncompleteMetadata { models, .. }) => assert_eq!(models, vec!["no-acc"]),
        other => panic!("unexpected {other:?}"),
    }
}
