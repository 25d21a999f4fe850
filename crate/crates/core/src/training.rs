//! Joint loss over sampled spans and pairs, and the optimisation loop.

use std::collections::{BTreeMap, HashMap};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{directed_relation_logits, entity_logits, local_context};
use crate::data::{sample_negatives, Sentence};
use crate::error::{Error, Result};
use crate::model::{Model, SpanFeatures};
use crate::numerics::{AdamConfig, AdamState, Graph, LinearDecay, ParamGrads, Var};
use crate::span::Span;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub neg_entities: usize,
    pub neg_relations: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Run the sentences of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 2,
            learning_rate: 1e-3,
            neg_entities: 100,
            neg_relations: 100,
            seed: 0,
            adam: AdamConfig::default(),
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Graph nodes of the joint loss.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub entity: Var,
    /// `None` when the sentence has no relation samples.
    pub relation: Option<Var>,
    pub total: Var,
}

/// `L = L_e + L_r`.
///
/// `L_e` is the mean cross-entropy over `entities` (logits, label) and `L_r` the
/// mean binary cross-entropy over every pair × type cell of `relations`
/// (logits, multi-hot targets). Without relation samples `L = L_e`.
pub fn joint_loss(g: &mut Graph, entities: &[(Var, usize)], relations: &[(Var, Vec<f64>)]) -> Result<JointLoss> {
    if entities.is_empty() {
        return Err(Error::InvalidArgument("joint loss over an empty entity batch".into()));
    }
    let ce = entities
        .iter()
        .map(|&(logits, label)| g.cross_entropy(logits, label))
        .collect::<Result<Vec<_>>>()?;
    let ce_sum = g.sum(&ce)?;
    let entity = g.scale(ce_sum, 1.0 / entities.len() as f64);
    if relations.is_empty() {
        return Ok(JointLoss {
            entity,
            relation: None,
            total: entity,
        });
    }
    let mut cells = 0;
    let mut bce = Vec::with_capacity(relations.len());
    for (logits, targets) in relations {
        cells += targets.len();
        bce.push(g.bce_with_logits_sum(*logits, targets)?);
    }
    let bce_sum = g.sum(&bce)?;
    let relation = g.scale(bce_sum, 1.0 / cells.max(1) as f64);
    let total = g.add(entity, relation)?;
    Ok(JointLoss {
        entity,
        relation: Some(relation),
        total,
    })
}

/// Builds the loss graph for one sentence: gold spans, sampled negative spans,
/// gold directed pairs and sampled negative pairs.
pub fn sentence_loss(
    g: &mut Graph,
    model: &Model,
    sentence: &Sentence,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointLoss> {
    let k = model.config.max_span_width;
    let net = &model.net;
    let enc = net.encode(g, &model.vocab, &sentence.tokens)?;

    let mut labels: Vec<(Span, usize)> = Vec::new();
    for e in &sentence.entities {
        if e.width() > k || labels.iter().any(|(s, _)| *s == e.span()) {
            continue;
        }
        let label = model.catalog.entity_index(&e.label).ok_or_else(|| {
            Error::Config(format!("entity type {:?} missing from the label catalog", e.label))
        })?;
        labels.push((e.span(), label));
    }
    let negatives = sample_negatives(sentence, k, config.neg_entities, config.neg_relations, rng);
    labels.extend(negatives.spans.iter().map(|&s| (s, 0)));

    let mut features: HashMap<Span, SpanFeatures> = HashMap::new();
    let mut entity_samples = Vec::with_capacity(labels.len());
    for &(span, label) in &labels {
        let f = net.span_features(g, enc.h, span)?;
        features.insert(span, f);
        let logits = entity_logits(g, &net.entity, f.internal, f.width, f.context)?;
        entity_samples.push((logits, label));
    }

    let r = model.catalog.num_relation_types();
    let mut relation_samples = Vec::new();
    if r > 0 {
        let mut targets: BTreeMap<(Span, Span), Vec<f64>> = BTreeMap::new();
        for rel in &sentence.relations {
            let (h, t) = (&sentence.entities[rel.head], &sentence.entities[rel.tail]);
            if h.width() > k || t.width() > k || h.span() == t.span() {
                continue;
            }
            let idx = model.catalog.relation_index(&rel.label).ok_or_else(|| {
                Error::Config(format!("relation type {:?} missing from the label catalog", rel.label))
            })?;
            targets.entry((h.span(), t.span())).or_insert_with(|| vec![0.0; r])[idx] = 1.0;
        }
        for &(hi, ti) in &negatives.pairs {
            let key = (sentence.entities[hi].span(), sentence.entities[ti].span());
            targets.entry(key).or_insert_with(|| vec![0.0; r]);
        }
        for ((hs, ts), target) in targets {
            let head = features[&hs];
            let tail = features[&ts];
            let ctx = local_context(g, enc.h, hs, ts)?;
            let logits = directed_relation_logits(g, &net.relation, &head, &tail, ctx)?;
            relation_samples.push((logits, target));
        }
    }
    joint_loss(g, &entity_samples, &relation_samples)
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub entity_loss: f64,
    pub relation_loss: f64,
    /// Learning rate of the last step in the epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub steps: u64,
    /// Learning rate the schedule would give after the last step.
    pub final_learning_rate: f64,
}

/// Independent generator for one `(seed, stream)` combination.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sentence_stream(epoch: usize, index: usize) -> u64 {
    ((epoch as u64 + 1) << 32) | index as u64
}

fn shuffle_stream(epoch: usize) -> u64 {
    ((epoch as u64 + 1) << 32) | u32::MAX as u64
}

struct SentenceOutcome {
    total: f64,
    entity: f64,
    relation: f64,
    grads: ParamGrads,
}

fn run_sentence(model: &Model, sentence: &Sentence, config: &TrainConfig, epoch: usize, index: usize) -> Result<SentenceOutcome> {
    let mut rng = derived_rng(config.seed, sentence_stream(epoch, index));
    let dropout_rng = derived_rng(rand::Rng::gen(&mut rng), 0);
    let mut g = Graph::training(&model.params, dropout_rng);
    let loss = sentence_loss(&mut g, model, sentence, config, &mut rng)?;
    let total = g.value(loss.total).data()[0];
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(sentence.id.clone()));
    }
    let entity = g.value(loss.entity).data()[0];
    let relation = loss.relation.map_or(0.0, |v| g.value(v).data()[0]);
    let grads = g.backward(loss.total)?.params;
    Ok(SentenceOutcome {
        total,
        entity,
        relation,
        grads,
    })
}

/// Trains `model` in place. `on_epoch` runs after every epoch.
pub fn train<F>(model: &mut Model, config: &TrainConfig, sentences: &[Sentence], mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(&EpochLoss, &Model) -> Result<()>,
{
    config.validate()?;
    if sentences.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = model.config.max_span_width;
    let too_wide = sentences
        .iter()
        .flat_map(|s| &s.entities)
        .filter(|e| e.width() > k)
        .count();
    if too_wide > 0 {
        warn!("{too_wide} gold entities are wider than the span limit {k} and cannot be learned");
    }

    let batches_per_epoch = sentences.len().div_ceil(config.batch_size);
    let schedule = LinearDecay {
        base_lr: config.learning_rate,
        total_steps: (config.epochs * batches_per_epoch) as u64,
    };
    let mut adam = AdamState::new(&model.params, config.adam, schedule);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        steps: 0,
        final_learning_rate: config.learning_rate,
    };

    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(config.seed, shuffle_stream(epoch)));
        let (mut total, mut entity, mut relation, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let work = |&i: &usize| run_sentence(model, &sentences[i], config, epoch, i);
            let outcomes: Vec<Result<SentenceOutcome>> = if config.parallel {
                batch.par_iter().map(work).collect()
            } else {
                batch.iter().map(work).collect()
            };
            let mut grads = ParamGrads::for_store(&model.params);
            for o in outcomes {
                let o = o?;
                total += o.total;
                entity += o.entity;
                relation += o.relation;
                grads.accumulate(&o.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            lr = adam.step(&mut model.params, &grads)?;
        }
        let n = sentences.len() as f64;
        let row = EpochLoss {
            epoch: epoch + 1,
            loss: total / n,
            entity_loss: entity / n,
            relation_loss: relation / n,
            learning_rate: lr,
        };
        info!(
            "epoch {}: loss {:.6} (entity {:.6}, relation {:.6}), lr {:.3e}",
            row.epoch, row.loss, row.entity_loss, row.relation_loss, row.learning_rate
        );
        report.epochs.push(row);
        on_epoch(&row, model)?;
    }
    report.steps = adam.step_count();
    report.final_learning_rate = schedule.lr_at(report.steps);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tensor};

    #[test]
    fn uniform_two_class_entity_loss() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let l = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let loss = joint_loss(&mut g, &[(l, 1)], &[]).unwrap();
        assert!((g.value(loss.total).data()[0] - 2f64.ln()).abs() < 1e-12);
        assert!(loss.relation.is_none());
        assert_eq!(loss.total, loss.entity);
    }

    #[test]
    fn duplicating_samples_keeps_mean() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::row_vector(vec![0.3, -1.0, 2.0]));
        let b = g.constant(Tensor::row_vector(vec![1.5, 0.0, 0.2]));
        let r = g.constant(Tensor::row_vector(vec![0.7, -0.4]));
        let ents = vec![(a, 0), (b, 2)];
        let rels = vec![(r, vec![1.0, 0.0])];
        let once = joint_loss(&mut g, &ents, &rels).unwrap();
        let ents2: Vec<_> = ents.iter().chain(&ents).cloned().collect();
        let rels2: Vec<_> = rels.iter().chain(&rels).cloned().collect();
        let twice = joint_loss(&mut g, &ents2, &rels2).unwrap();
        let (x, y) = (g.value(once.total).data()[0], g.value(twice.total).data()[0]);
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn total_is_exact_sum() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::row_vector(vec![0.3, -1.0, 2.0]));
        let r = g.constant(Tensor::row_vector(vec![0.7, -0.4, 3.0]));
        let l = joint_loss(&mut g, &[(a, 1)], &[(r, vec![0.0, 1.0, 1.0])]).unwrap();
        let le = g.value(l.entity).data()[0];
        let lr = g.value(l.relation.unwrap()).data()[0];
        assert_eq!(g.value(l.total).data()[0].to_bits(), (le + lr).to_bits());
    }

    #[test]
    fn empty_entity_batch_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        assert!(joint_loss(&mut g, &[], &[]).is_err());
    }

    #[test]
    fn rng_streams_differ() {
        use rand::Rng;
        let a: u64 = derived_rng(1, sentence_stream(0, 0)).gen();
        let b: u64 = derived_rng(1, sentence_stream(0, 1)).gen();
        let c: u64 = derived_rng(1, sentence_stream(0, 0)).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
