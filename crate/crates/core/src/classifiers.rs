//! Entity classification over span features, directional multi-label relation
//! scoring over span pairs, and sentence-level decoding.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EntitySpan, RelationTriple, Sentence};
use crate::error::{Error, Result};
use crate::model::{Model, SpanFeatures};
use crate::numerics::tensor::{sigmoid, softmax};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::span::{enumerate_spans, Span};

/// Default relation decision threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Ok(Self {
            weight: store.register(
                format!("{prefix}.weight"),
                Tensor::uniform(input_dim, output_dim, bound, rng),
            )?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(1, output_dim))?,
            input_dim,
            output_dim,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.input_dim {
            return Err(Error::shape(
                "linear",
                format!("input width {cols}, expected {}", self.input_dim),
            ));
        }
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let z = g.matmul(x, w)?;
        g.add_row(z, b)
    }
}

/// Entity logits over `s ⊕ w ⊕ c` (`1 × C`).
pub fn entity_logits(g: &mut Graph, layer: &Linear, s: Var, w: Var, c: Var) -> Result<Var> {
    let z = g.concat_cols(&[s, w, c])?;
    layer.apply(g, z)
}

/// Max-pool over the rows strictly between two spans, or a zero row when they
/// are adjacent or overlap.
pub fn local_context(g: &mut Graph, h: Var, a: Span, b: Span) -> Result<Var> {
    let (first, second) = if (a.start, a.end) <= (b.start, b.end) { (a, b) } else { (b, a) };
    let d = g.shape(h).1;
    if second.start <= first.end {
        return Ok(g.zeros(1, d));
    }
    let gap = g.slice_rows(h, first.end, second.start - first.end)?;
    g.max_pool_rows(gap)
}

/// Relation logits for `head → tail`: `(s_h ⊕ w_h) ⊕ ctx ⊕ (s_t ⊕ w_t)`.
pub fn directed_relation_logits(
    g: &mut Graph,
    layer: &Linear,
    head: &SpanFeatures,
    tail: &SpanFeatures,
    ctx: Var,
) -> Result<Var> {
    let z = g.concat_cols(&[head.internal, head.width, ctx, tail.internal, tail.width])?;
    layer.apply(g, z)
}

/// Logits for both directions, `(first → second, second → first)`.
pub fn relation_logits(
    g: &mut Graph,
    layer: &Linear,
    first: &SpanFeatures,
    second: &SpanFeatures,
    ctx: Var,
) -> Result<(Var, Var)> {
    let forward = directed_relation_logits(g, layer, first, second, ctx)?;
    let backward = directed_relation_logits(g, layer, second, first, ctx)?;
    Ok((forward, backward))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityScores {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl EntityScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        Self {
            logits,
            probabilities,
        }
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        self.logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub probabilities: Vec<f64>,
}

impl RelationScores {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            probabilities: logits.iter().map(|&x| sigmoid(x)).collect(),
        }
    }

    /// Relation type indices with probability at least `threshold`.
    pub fn predicted(&self, threshold: f64) -> Vec<usize> {
        (0..self.probabilities.len())
            .filter(|&i| self.probabilities[i] >= threshold)
            .collect()
    }
}

/// Scores for one ordered pair of predicted entities.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub head: usize,
    pub tail: usize,
    pub scores: RelationScores,
}

/// Extraction output. Relation endpoints index into `entities`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationTriple>,
}

impl From<&Sentence> for Prediction {
    fn from(s: &Sentence) -> Self {
        Self {
            entities: s.entities.clone(),
            relations: s.relations.clone(),
        }
    }
}

/// Emits a triple for every pair and type scored at or above `threshold`.
pub fn decode_relations(pairs: &[PairScores], relation_types: &[String], threshold: f64) -> Vec<RelationTriple> {
    pairs
        .iter()
        .flat_map(|p| {
            p.scores.predicted(threshold).into_iter().map(move |t| RelationTriple {
                head: p.head,
                tail: p.tail,
                label: relation_types[t].clone(),
            })
        })
        .collect()
}

/// Per-sentence scores before thresholding.
#[derive(Debug, Clone)]
pub struct SentenceScores {
    pub entities: Vec<EntitySpan>,
    pub pairs: Vec<PairScores>,
}

/// Classifies every candidate span and scores all ordered pairs of kept entities.
pub fn score_sentence(model: &Model, tokens: &[String]) -> Result<SentenceScores> {
    let mut g = Graph::new(&model.params);
    let net = &model.net;
    let enc = net.encode(&mut g, &model.vocab, tokens)?;

    let mut kept: Vec<SpanFeatures> = Vec::new();
    let mut entities = Vec::new();
    for span in enumerate_spans(tokens.len(), model.config.max_span_width) {
        let f = net.span_features(&mut g, enc.h, span)?;
        let logits = entity_logits(&mut g, &net.entity, f.internal, f.width, f.context)?;
        let label = EntityScores::from_logits(g.value(logits).data().to_vec()).predicted();
        if label != 0 {
            kept.push(f);
            entities.push(EntitySpan {
                start: span.start,
                end: span.end,
                label: model.catalog.entity_types[label].clone(),
            });
        }
    }

    let mut pairs = Vec::new();
    if model.catalog.num_relation_types() > 0 {
        let mut scored: HashMap<(usize, usize), RelationScores> = HashMap::new();
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                let ctx = local_context(&mut g, enc.h, kept[i].span, kept[j].span)?;
                let (ij, ji) = relation_logits(&mut g, &net.relation, &kept[i], &kept[j], ctx)?;
                scored.insert((i, j), RelationScores::from_logits(g.value(ij).data()));
                scored.insert((j, i), RelationScores::from_logits(g.value(ji).data()));
            }
        }
        for i in 0..kept.len() {
            for j in 0..kept.len() {
                if let Some(scores) = scored.remove(&(i, j)) {
                    pairs.push(PairScores { head: i, tail: j, scores });
                }
            }
        }
    }
    Ok(SentenceScores { entities, pairs })
}

pub fn predict_sentence(model: &Model, tokens: &[String], threshold: f64) -> Result<Prediction> {
    let scores = score_sentence(model, tokens)?;
    let relations = decode_relations(&scores.pairs, &model.catalog.relation_types, threshold);
    Ok(Prediction {
        entities: scores.entities,
        relations,
    })
}
