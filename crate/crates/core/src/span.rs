//! Candidate spans, dual masks and the three span features: the max-pooled
//! internal vector, the width embedding and the masked-context vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{multi_head_self_attention, BiRnn, CellKind, Graph, ParamId, ParamStore, Tensor, Var};

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty span {start}..{end}");
        Self { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// All spans of width `1..=min(k, n)`, ordered by width and then start.
pub fn enumerate_spans(n: usize, k: usize) -> Vec<Span> {
    let mut out = Vec::new();
    for w in 1..=k.min(n) {
        for start in 0..=n - w {
            out.push(Span::new(start, start + w));
        }
    }
    out
}

/// `(span_mask, context_mask)` for a span of `width` tokens at `start` in a sentence of `n`.
pub fn build_masks(start: usize, width: usize, n: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if width == 0 || start + width > n {
        return Err(Error::InvalidArgument(format!(
            "span start {start} width {width} outside sentence of {n}"
        )));
    }
    let span: Vec<u8> = (0..n)
        .map(|i| u8::from((start..start + width).contains(&i)))
        .collect();
    let context = span.iter().map(|&m| 1 - m).collect();
    Ok((span, context))
}

/// Max-pool over the rows of `h` covered by `span`.
pub fn span_internal(g: &mut Graph, h: Var, span: Span) -> Result<Var> {
    let rows = g.slice_rows(h, span.start, span.width())?;
    g.max_pool_rows(rows)
}

/// Trainable lookup from span width (`1..=k`) to a `dim`-vector.
#[derive(Debug, Clone)]
pub struct WidthTable {
    pub table: ParamId,
    pub max_width: usize,
    pub dim: usize,
}

impl WidthTable {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        max_width: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_width == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "width table needs k ≥ 1 and dim ≥ 1, got {max_width} and {dim}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let table = store.register(name, Tensor::uniform(max_width, dim, bound, rng))?;
        Ok(Self {
            table,
            max_width,
            dim,
        })
    }

    pub fn embed(&self, g: &mut Graph, width: usize) -> Result<Var> {
        if width == 0 || width > self.max_width {
            return Err(Error::InvalidArgument(format!(
                "span width {width} outside 1..={}",
                self.max_width
            )));
        }
        g.gather(self.table, &[width - 1])
    }
}

/// How the per-token recurrent states of the context module become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPooling {
    /// Final forward state followed by final backward state.
    #[default]
    FinalStates,
    /// Elementwise max over all bidirectional states.
    MaxPool,
}

impl std::str::FromStr for ContextPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_states" => Ok(Self::FinalStates),
            "max_pool" => Ok(Self::MaxPool),
            other => Err(Error::Config(format!("unknown context pooling {other:?}"))),
        }
    }
}

/// Parameters of the span-masked context module.
#[derive(Debug, Clone)]
pub struct SeaParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub mask_fill: ParamId,
    pub gru: BiRnn,
    pub heads: usize,
    pub dim: usize,
    pub pooling: ContextPooling,
}

#[derive(Debug, Clone)]
pub struct SeaOutput {
    /// `1 × d` context vector.
    pub context: Var,
    /// One row-stochastic `n × n` matrix per head.
    pub weights: Vec<Var>,
}

impl SeaParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        pooling: ContextPooling,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "context dim {dim} not divisible by {heads} heads"
            )));
        }
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("context dim {dim} must be even")));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let mut proj = |name: &str, rng: &mut R| {
            store.register(format!("{prefix}.{name}"), Tensor::uniform(dim, dim, bound, rng))
        };
        let w_q = proj("w_q", rng)?;
        let w_k = proj("w_k", rng)?;
        let w_v = proj("w_v", rng)?;
        let mask_fill = store.register(
            format!("{prefix}.mask_fill"),
            Tensor::uniform(1, dim, bound, rng),
        )?;
        let gru = BiRnn::register(store, &format!("{prefix}.gru"), CellKind::Gru, dim, dim / 2, rng)?;
        Ok(Self {
            w_q,
            w_k,
            w_v,
            mask_fill,
            gru,
            heads,
            dim,
            pooling,
        })
    }

    /// Context vector for `span` over `h` (`n × d`).
    pub fn context(&self, g: &mut Graph, h: Var, span: Span) -> Result<SeaOutput> {
        let (n, d) = g.shape(h);
        if d != self.dim {
            return Err(Error::shape("sea_context", format!("H width {d}, expected {}", self.dim)));
        }
        if span.end > n {
            return Err(Error::InvalidArgument(format!(
                "span {}..{} outside sentence of {n}",
                span.start, span.end
            )));
        }
        let fill = g.param(self.mask_fill);
        let mut parts = Vec::with_capacity(3);
        if span.start > 0 {
            parts.push(g.slice_rows(h, 0, span.start)?);
        }
        let filled = if span.width() == 1 {
            fill
        } else {
            g.concat_rows(&vec![fill; span.width()])?
        };
        parts.push(filled);
        if span.end < n {
            parts.push(g.slice_rows(h, span.end, n - span.end)?);
        }
        let masked = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };

        let (w_q, w_k, w_v) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v));
        let (attended, weights) = multi_head_self_attention(g, masked, w_q, w_k, w_v, self.heads)?;
        let residual = g.add(attended, masked)?;
        let out = self.gru.encode(g, residual)?;
        let context = match self.pooling {
            ContextPooling::FinalStates => g.concat_cols(&[out.last_forward, out.last_backward])?,
            ContextPooling::MaxPool => g.max_pool_rows(out.states)?,
        };
        Ok(SeaOutput { context, weights })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_q, self.w_k, self.w_v, self.mask_fill];
        ids.extend(self.gru.param_ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn span_counts() {
        assert_eq!(enumerate_spans(5, 3).len(), 12);
        assert_eq!(enumerate_spans(6, 10).len(), 21);
        assert_eq!(enumerate_spans(1, 4), vec![Span::new(0, 1)]);
    }

    #[test]
    fn order_is_width_then_start() {
        let spans = enumerate_spans(3, 2);
        let expect = [(0, 1), (1, 2), (2, 3), (0, 2), (1, 3)];
        let got: Vec<_> = spans.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn masks() {
        assert_eq!(
            build_masks(1, 3, 5).unwrap(),
            (vec![0, 1, 1, 1, 0], vec![1, 0, 0, 0, 1])
        );
        assert_eq!(build_masks(0, 4, 4).unwrap().1, vec![0; 4]);
        assert_eq!(build_masks(0, 1, 3).unwrap(), (vec![1, 0, 0], vec![0, 1, 1]));
        assert!(build_masks(3, 2, 4).is_err());
        assert!(build_masks(0, 0, 4).is_err());
    }

    #[test]
    fn internal_feature_is_max_pool() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 0.0]]).unwrap());
        let v = span_internal(&mut g, h, Span::new(0, 2)).unwrap();
        assert_eq!(g.value(v).data(), &[3.0, 5.0]);
        let one = span_internal(&mut g, h, Span::new(1, 2)).unwrap();
        assert_eq!(g.value(one).data(), &[3.0, 2.0]);
    }

    #[test]
    fn width_lookup() {
        let mut s = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let wt = WidthTable::register(&mut s, "width", 3, 4, &mut r).unwrap();
        let mut g = Graph::new(&s);
        let a = wt.embed(&mut g, 2).unwrap();
        let b = wt.embed(&mut g, 2).unwrap();
        let c = wt.embed(&mut g, 3).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_ne!(g.value(a), g.value(c));
        assert!(wt.embed(&mut g, 4).is_err());
        assert!(wt.embed(&mut g, 0).is_err());
    }

    fn sea(dim: usize, heads: usize, pooling: ContextPooling) -> (ParamStore, SeaParams) {
        let mut s = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let p = SeaParams::register(&mut s, "sea", dim, heads, pooling, &mut r).unwrap();
        (s, p)
    }

    #[test]
    fn context_shape_and_weights() {
        for pooling in [ContextPooling::FinalStates, ContextPooling::MaxPool] {
            let (s, p) = sea(8, 2, pooling);
            let mut r = ChaCha8Rng::seed_from_u64(1);
            let mut g = Graph::new(&s);
            let h = g.constant(Tensor::uniform(5, 8, 1.0, &mut r));
            for span in enumerate_spans(5, 3) {
                let out = p.context(&mut g, h, span).unwrap();
                assert_eq!(g.shape(out.context), (1, 8));
                assert_eq!(out.weights.len(), 2);
                for w in &out.weights {
                    for i in 0..5 {
                        let sum: f64 = g.value(*w).row(i).iter().sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn full_cover_context_ignores_sentence() {
        let (s, p) = sea(8, 2, ContextPooling::FinalStates);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::uniform(4, 8, 1.0, &mut r));
        let b = g.constant(Tensor::uniform(4, 8, 1.0, &mut r));
        let ca = p.context(&mut g, a, Span::new(0, 4)).unwrap().context;
        let cb = p.context(&mut g, b, Span::new(0, 4)).unwrap().context;
        assert_eq!(g.value(ca), g.value(cb));
    }

    #[test]
    fn odd_or_indivisible_dims_rejected() {
        let mut s = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(SeaParams::register(&mut s, "a", 6, 4, ContextPooling::FinalStates, &mut r).is_err());
        assert!(SeaParams::register(&mut s, "b", 9, 3, ContextPooling::FinalStates, &mut r).is_err());
    }
}
