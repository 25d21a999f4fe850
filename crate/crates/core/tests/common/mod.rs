#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use iser_core::classifiers::{predict_sentence, Prediction};
use iser_core::data::{EntitySpan, LabelCatalog, RelationTriple, Sentence};
use iser_core::encoder::{EncoderConfig, Vocab};
use iser_core::evaluation::{evaluate, EvalReport, MatchMode};
use iser_core::model::{Model, ModelConfig};
use iser_core::training::TrainConfig;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn sentence(tokens: &str, entities: &[(usize, usize, &str)], relations: &[(usize, usize, &str)]) -> Sentence {
    Sentence {
        id: "t".into(),
        tokens: toks(tokens),
        entities: entities
            .iter()
            .map(|&(start, end, label)| EntitySpan {
                start,
                end,
                label: label.into(),
            })
            .collect(),
        relations: relations
            .iter()
            .map(|&(head, tail, label)| RelationTriple {
                head,
                tail,
                label: label.into(),
            })
            .collect(),
    }
}

pub fn small_config(dim: usize, k: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            dim,
            layers: 2,
            heads: 2,
            dropout: 0.0,
        },
        max_span_width: k,
        width_dim: 4,
        context_heads: 2,
        ..Default::default()
    }
}

pub fn model_for(sentences: &[Sentence], config: ModelConfig, seed: u64) -> Model {
    let vocab = Vocab::build(sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)));
    Model::new(config, vocab, LabelCatalog::from_sentences(sentences), seed).unwrap()
}

/// Settings under which the 20-sentence toy corpus is memorised.
pub fn overfit_setup() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        encoder: EncoderConfig {
            dim: 32,
            layers: 2,
            heads: 2,
            dropout: 0.0,
        },
        max_span_width: 3,
        width_dim: 8,
        context_heads: 2,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 200,
        batch_size: 2,
        learning_rate: 1e-3,
        neg_entities: 1000,
        neg_relations: 1000,
        seed: 7,
        ..Default::default()
    };
    (model, train)
}

pub fn score(model: &Model, data: &[Sentence], threshold: f64) -> EvalReport {
    let gold: Vec<Prediction> = data.iter().map(Prediction::from).collect();
    let pred: Vec<Prediction> = data
        .iter()
        .map(|s| predict_sentence(model, &s.tokens, threshold).unwrap())
        .collect();
    evaluate(&gold, &pred, MatchMode::ReBoundaries).unwrap()
}

pub const CHDDI_HISTOGRAM: [(&str, &str, usize); 7] = [
    ("协同", "Synergy", 319),
    ("禁忌", "Taboo", 279),
    ("拮抗", "Antagonism", 252),
    ("无关", "Irrelevance", 187),
    ("抑制", "Inhibition", 120),
    ("促进", "Promotion", 95),
    ("相加", "Addition", 24),
];

const DRUGS: [&str; 8] = ["阿司匹林", "布美他尼片", "多巴胺", "华法林", "地高辛", "胺碘酮", "呋塞米", "硝苯地平"];

/// Writes a spo_list file with 585 sentences, 1830 drug mentions and the
/// 1276-relation histogram above.
pub fn write_chddi_like(path: &Path) {
    let mut labels: Vec<&str> = CHDDI_HISTOGRAM
        .iter()
        .flat_map(|&(p, _, n)| std::iter::repeat_n(p, n))
        .collect();
    labels.reverse();
    let mut out = String::new();
    for i in 0..585 {
        let four = i < 75;
        let three_rel = (75..181).contains(&i);
        let n_ent = if four { 4 } else { 3 };
        let names: Vec<&str> = (0..n_ent).map(|j| DRUGS[(i + 3 * j) % DRUGS.len()]).collect();
        let pairs: Vec<(usize, usize)> = match (four, three_rel) {
            (true, _) => vec![(0, 1), (2, 3)],
            (false, true) => vec![(0, 1), (1, 2), (0, 2)],
            (false, false) => vec![(0, 1), (1, 2)],
        };
        let text = format!("{}合用，需注意。", names.join("与"));
        let spo: Vec<String> = pairs
            .iter()
            .map(|&(s, o)| {
                format!(
                    r#"{{"predicate":"{}","subject":"{}","object":{{"@value":"{}"}},"subject_type":"药物","object_type":{{"@value":"药物"}}}}"#,
                    labels.pop().unwrap(),
                    names[s],
                    names[o]
                )
            })
            .collect();
        writeln!(out, r#"{{"text":"{text}","spo_list":[{}]}}"#, spo.join(",")).unwrap();
    }
    assert!(labels.is_empty());
    std::fs::write(path, out).unwrap();
}
