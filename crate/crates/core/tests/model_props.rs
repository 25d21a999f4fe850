mod common;

use iser_core::classifiers::{
    decode_relations, predict_sentence, score_sentence, EntityScores, PairScores, RelationScores,
};
use iser_core::fusion::{cross_attend, Fusion};
use iser_core::model::Model;
use iser_core::numerics::{finite_diff_grad_check, CellKind, GradCheckOptions, Graph, ParamStore, Tensor};
use iser_core::span::{enumerate_spans, Span};
use iser_core::training::{derived_rng, sentence_loss, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn corpus() -> Vec<iser_core::data::Sentence> {
    vec![sentence(
        "A kills B in C",
        &[(0, 1, "Peop"), (2, 3, "Peop"), (4, 5, "Loc")],
        &[(0, 1, "Kill"), (1, 2, "Live_in")],
    )]
}

#[test]
fn entity_head_gradient_check() {
    let model = model_for(&corpus(), small_config(8, 2), 1);
    let head = model.net.encoder.entity_head.clone();
    let tokens = toks("A kills B");
    let opts = GradCheckOptions {
        only: Some(head.param_ids()),
        ..Default::default()
    };
    let report = finite_diff_grad_check(
        &model.params,
        |g| {
            let base = model.net.encoder.encode_tokens(g, &model.vocab, &tokens)?;
            let (xe, _) = model.net.encoder.task_heads(g, base)?;
            let t = g.tanh(xe);
            Ok(g.sum_all(t))
        },
        &opts,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn cls_row_is_never_read() {
    let data = corpus();
    let model = model_for(&data, small_config(8, 2), 2);
    let mut g = Graph::new(&model.params);
    let loss = sentence_loss(&mut g, &model, &data[0], &TrainConfig::default(), &mut derived_rng(0, 0)).unwrap();
    assert!(g.value(loss.total).get(0, 0).is_finite());

    let mut g = Graph::new(&model.params);
    let enc = model.net.encode(&mut g, &model.vocab, &data[0].tokens).unwrap();
    let f = model.net.span_features(&mut g, enc.h, Span::new(0, 1)).unwrap();
    let z = iser_core::classifiers::entity_logits(&mut g, &model.net.entity, f.internal, f.width, f.context).unwrap();
    let l = g.cross_entropy(z, 1).unwrap();
    let grads = g.backward(l).unwrap();
    let gb = grads.grad(enc.base);
    let n = data[0].tokens.len();
    assert!(gb.row(n).iter().all(|&v| v == 0.0), "CLS row received gradient");
    assert!(gb.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn fused_path_gradient_check() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..4 {
        let d = 2 * r.gen_range(1..=4);
        let n = r.gen_range(1..=4);
        let mut s = ParamStore::new();
        let fusion = Fusion::register(&mut s, d, CellKind::Lstm, &mut r).unwrap();
        let xe = s.register("xe", Tensor::uniform(n, d, 1.0, &mut r)).unwrap();
        let xr = s.register("xr", Tensor::uniform(n, d, 1.0, &mut r)).unwrap();
        let w: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let report = finite_diff_grad_check(
            &s,
            |g| {
                let (a, b) = (g.param(xe), g.param(xr));
                let c = cross_attend(g, a, b)?;
                let h = fusion.fuse(g, c.xe, c.xr)?;
                let m = g.mul_const(h, w.clone())?;
                Ok(g.sum_all(m))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "trial {trial} d={d} n={n}: {report:?}");
    }
}

proptest! {
    #[test]
    fn cross_attention_is_row_stochastic(n in 1usize..=6, d in 1usize..=8, scale in 0.1f64..20.0, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::uniform(n, d, 1.0, &mut r);
        a.scale_in_place(scale);
        let b = Tensor::uniform(n, d, 1.0, &mut r);
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let (av, bv) = (g.constant(a), g.constant(b));
        let c = cross_attend(&mut g, av, bv).unwrap();
        for m in [c.attn_e, c.attn_r] {
            for i in 0..n {
                let row = g.value(m).row(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn argmax_ignores_logit_shift(logits in prop::collection::vec(-20.0f64..20.0, 2..8), shift in -100.0f64..100.0) {
        let a = EntityScores::from_logits(logits.clone());
        let b = EntityScores::from_logits(logits.iter().map(|v| v + shift).collect());
        prop_assert_eq!(a.predicted(), b.predicted());
        prop_assert!((a.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn raising_threshold_never_adds_relations(
        probs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 0..12),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let types: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let pairs: Vec<PairScores> = probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| PairScores { head: i, tail: i + 1, scores: RelationScores { probabilities: p } })
            .collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(decode_relations(&pairs, &types, hi).len() <= decode_relations(&pairs, &types, lo).len());
    }
}

#[test]
fn predictions_are_structurally_sound() {
    let data = corpus();
    for seed in 0..4 {
        let model = model_for(&data, small_config(8, 3), seed);
        let tokens = toks("A kills B in C today");
        let scores = score_sentence(&model, &tokens).unwrap();
        let m = scores.entities.len();
        assert_eq!(scores.pairs.len(), m * m.saturating_sub(1));
        let p = predict_sentence(&model, &tokens, 0.4).unwrap();
        for r in &p.relations {
            assert!(r.head < p.entities.len() && r.tail < p.entities.len() && r.head != r.tail);
        }
        assert!(p.entities.iter().all(|e| e.label != "none"));
    }
}

fn force_entities(model: &mut Model, keep: &[Span]) -> Vec<Span> {
    // bias every span to "none" except `keep`, which gets the first real type
    let tokens_n = 3;
    let spans = enumerate_spans(tokens_n, model.config.max_span_width);
    let tokens = toks("A r B");
    let mut g = Graph::new(&model.params);
    let enc = model.net.encode(&mut g, &model.vocab, &tokens).unwrap();
    let mut rows = Vec::new();
    for &s in &spans {
        let f = model.net.span_features(&mut g, enc.h, s).unwrap();
        let z = g.concat_cols(&[f.internal, f.width, f.context]).unwrap();
        rows.push(g.value(z).data().to_vec());
    }
    let c = model.catalog.num_entity_types();
    let targets: Vec<Vec<f64>> = spans
        .iter()
        .map(|s| {
            let mut t = vec![0.0; c];
            t[if keep.contains(s) { 1 } else { 0 }] = 10.0;
            t
        })
        .collect();
    let w = min_norm_solve(&rows, &targets);
    let (wid, bid) = (model.net.entity.weight, model.net.entity.bias);
    model.params.set(wid, w).unwrap();
    model.params.set(bid, Tensor::zeros(1, c)).unwrap();
    spans
}

/// Minimum-norm `W` with `rows · W = targets`.
fn min_norm_solve(rows: &[Vec<f64>], targets: &[Vec<f64>]) -> Tensor {
    let m = rows.len();
    let dim = rows[0].len();
    let out = targets[0].len();
    let mut gram: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let mut rhs: Vec<Vec<f64>> = targets.to_vec();
    for col in 0..m {
        let pivot = (col..m).max_by(|&a, &b| gram[a][col].abs().total_cmp(&gram[b][col].abs())).unwrap();
        gram.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in 0..m {
            if r != col {
                let f = gram[r][col] / gram[col][col];
                for k in 0..m {
                    gram[r][k] -= f * gram[col][k];
                }
                for k in 0..out {
                    rhs[r][k] -= f * rhs[col][k];
                }
            }
        }
    }
    let alpha: Vec<Vec<f64>> = (0..m).map(|i| rhs[i].iter().map(|v| v / gram[i][i]).collect()).collect();
    let mut w = Tensor::zeros(dim, out);
    for i in 0..m {
        for a in 0..dim {
            for k in 0..out {
                w.row_mut(a)[k] += rows[i][a] * alpha[i][k];
            }
        }
    }
    w
}

#[test]
fn crafted_parameters_give_one_triplet() {
    let data = vec![sentence("A r B", &[(0, 1, "X"), (2, 3, "X")], &[(0, 1, "R"), (1, 0, "S")])];
    let mut model = model_for(&data, small_config(8, 3), 5);
    let keep = [Span::new(0, 1), Span::new(2, 3)];
    force_entities(&mut model, &keep);

    let tokens = toks("A r B");
    let before = predict_sentence(&model, &tokens, 0.4).unwrap();
    let kept: Vec<Span> = before.entities.iter().map(|e| e.span()).collect();
    assert_eq!(kept, keep);

    // relation rows for A→B and B→A; ask for type 0 on A→B only
    let mut g = Graph::new(&model.params);
    let enc = model.net.encode(&mut g, &model.vocab, &tokens).unwrap();
    let a = model.net.span_features(&mut g, enc.h, keep[0]).unwrap();
    let b = model.net.span_features(&mut g, enc.h, keep[1]).unwrap();
    let ctx = iser_core::classifiers::local_context(&mut g, enc.h, a.span, b.span).unwrap();
    let zab = g.concat_cols(&[a.internal, a.width, ctx, b.internal, b.width]).unwrap();
    let zba = g.concat_cols(&[b.internal, b.width, ctx, a.internal, a.width]).unwrap();
    let rows = vec![g.value(zab).data().to_vec(), g.value(zba).data().to_vec()];
    let r = model.catalog.num_relation_types();
    let mut t_ab = vec![-10.0; r];
    t_ab[0] = 10.0;
    let w = min_norm_solve(&rows, &[t_ab, vec![-10.0; r]]);
    drop(g);
    let (wid, bid) = (model.net.relation.weight, model.net.relation.bias);
    model.params.set(wid, w).unwrap();
    model.params.set(bid, Tensor::zeros(1, r)).unwrap();

    let p = predict_sentence(&model, &tokens, 0.4).unwrap();
    assert_eq!(p.relations.len(), 1);
    let rel = &p.relations[0];
    assert_eq!((p.entities[rel.head].span(), p.entities[rel.tail].span()), (keep[0], keep[1]));
    assert_eq!(rel.label, model.catalog.relation_types[0]);
}

#[test]
fn no_entities_or_one_entity_means_no_relations() {
    let data = vec![sentence("A r B", &[(0, 1, "X"), (2, 3, "X")], &[(0, 1, "R")])];
    let mut model = model_for(&data, small_config(8, 3), 6);
    force_entities(&mut model, &[]);
    let p = predict_sentence(&model, &toks("A r B"), 0.0).unwrap();
    assert!(p.entities.is_empty() && p.relations.is_empty());

    force_entities(&mut model, &[Span::new(1, 2)]);
    let p = predict_sentence(&model, &toks("A r B"), 0.0).unwrap();
    assert_eq!(p.entities.len(), 1);
    assert!(p.relations.is_empty());
}
