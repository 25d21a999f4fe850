mod common;

use std::collections::HashSet;
use std::path::Path;

use iser_core::data::{
    dataset_stats, load_chddi_json, load_span_json, parse_span_json, sample_negatives, to_span_json, EntitySpan,
    RelationTriple, Sentence,
};
use iser_core::span::{enumerate_spans, Span};
use iser_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{write_chddi_like, CHDDI_HISTOGRAM};

fn arb_sentence() -> impl Strategy<Value = Sentence> {
    (1usize..=12, "[a-z0-9]{1,6}")
        .prop_flat_map(|(n, id)| {
            let tokens = prop::collection::vec("[a-zA-Z,.\u{4e00}-\u{4e10}]{1,4}", n);
            let entity = (0..n).prop_flat_map(move |s| (Just(s), s + 1..=n, "[A-Z][a-z]{1,4}"));
            let entities = prop::collection::vec(entity, 0..6);
            (Just(id), tokens, entities)
        })
        .prop_flat_map(|(id, tokens, entities)| {
            let m = entities.len();
            let rels = if m >= 2 {
                prop::collection::vec((0..m, 0..m, "[A-Z][a-z_]{1,6}"), 0..5).boxed()
            } else {
                Just(vec![]).boxed()
            };
            (Just(id), Just(tokens), Just(entities), rels)
        })
        .prop_map(|(id, tokens, entities, rels)| Sentence {
            id,
            tokens,
            entities: entities
                .into_iter()
                .map(|(start, end, label)| EntitySpan { start, end, label })
                .collect(),
            relations: rels
                .into_iter()
                .filter(|(h, t, _)| h != t)
                .map(|(head, tail, label)| RelationTriple { head, tail, label })
                .collect(),
        })
}

proptest! {
    #[test]
    fn span_json_round_trips(sentences in prop::collection::vec(arb_sentence(), 0..6)) {
        let text = to_span_json(&sentences);
        let back = parse_span_json(&text, Path::new("<mem>")).unwrap();
        prop_assert_eq!(&back.sentences, &sentences);
        let again = parse_span_json(&to_span_json(&back.sentences), Path::new("<mem>")).unwrap();
        prop_assert_eq!(again, back);
    }

    #[test]
    fn negatives_avoid_gold(s in arb_sentence(), k in 1usize..=5, cap_s in 0usize..40, cap_p in 0usize..10, seed in any::<u64>()) {
        let neg = sample_negatives(&s, k, cap_s, cap_p, &mut ChaCha8Rng::seed_from_u64(seed));
        let gold: HashSet<Span> = s.entities.iter().map(EntitySpan::span).collect();
        let pool = enumerate_spans(s.len(), k).into_iter().filter(|sp| !gold.contains(sp)).count();
        prop_assert_eq!(neg.spans.len(), cap_s.min(pool));
        prop_assert_eq!(neg.spans.iter().collect::<HashSet<_>>().len(), neg.spans.len());
        for sp in &neg.spans {
            prop_assert!(!gold.contains(sp));
            prop_assert!(sp.width() <= k && sp.end <= s.len());
        }
        let linked: HashSet<(Span, Span)> = s.relations.iter()
            .map(|r| (s.entities[r.head].span(), s.entities[r.tail].span()))
            .collect();
        prop_assert!(neg.pairs.len() <= cap_p);
        let mut seen = HashSet::new();
        for &(h, t) in &neg.pairs {
            let key = (s.entities[h].span(), s.entities[t].span());
            prop_assert!(key.0 != key.1);
            prop_assert!(!linked.contains(&key));
            prop_assert!(seen.insert(key));
        }
    }
}

#[test]
fn span_json_file_with_extra_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.json");
    std::fs::write(
        &path,
        r#"[{"tokens":["John","lives","in","Rome"],"entities":[{"type":"Peop","start":0,"end":1},{"type":"Loc","start":3,"end":4}],
            "relations":[{"type":"Live_in","head":0,"tail":1}],"orig_id":5},
            {"tokens":["Hi"],"entities":[],"relations":[]}]"#,
    )
    .unwrap();
    let ds = load_span_json(&path).unwrap();
    assert_eq!(ds.sentences[0].id, "5");
    assert_eq!(ds.sentences[1].id, "1");
    let st = dataset_stats(&ds.sentences);
    assert_eq!((st.sentences, st.entities, st.relations), (2, 2, 1));
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(load_span_json("/nonexistent/x.json"), Err(Error::Io { .. })));
}

#[test]
fn generated_spo_file_reproduces_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chddi.json");
    write_chddi_like(&path);
    let ds = load_chddi_json(&path).unwrap();
    let st = dataset_stats(&ds.sentences);
    assert_eq!((st.sentences, st.entities, st.relations), (585, 1830, 1276));
    for (p, _, n) in CHDDI_HISTOGRAM {
        assert_eq!(st.relation_types[p], n, "{p}");
    }
    assert_eq!(ds.catalog.entity_types, vec!["none", "drug"]);
    assert_eq!(ds.catalog.relation_types.len(), 7);
    assert!(st.to_string().contains("1276"));
}

#[test]
fn spo_record_with_bad_json_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"text\":\"甲乙\",\"spo_list\":[]}\n{not json}\n").unwrap();
    match load_chddi_json(&path) {
        Err(Error::Load { record, .. }) => assert_eq!(record, 1),
        other => panic!("{other:?}"),
    }
}
