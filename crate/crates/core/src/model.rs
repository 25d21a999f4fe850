//! The full network: parameter registry plus the forward pass shared by
//! training, prediction and attention dumps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::Linear;
use crate::data::LabelCatalog;
use crate::encoder::{Encoder, EncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{cross_attend, CrossAttended, Fusion};
use crate::numerics::{CellKind, Graph, ParamStore, Var};
use crate::span::{span_internal, ContextPooling, SeaParams, Span, WidthTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Largest span width `k`.
    pub max_span_width: usize,
    pub width_dim: usize,
    pub context_heads: usize,
    pub fusion_cell: CellKind,
    pub context_pooling: ContextPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            max_span_width: 10,
            width_dim: 25,
            context_heads: 4,
            fusion_cell: CellKind::Lstm,
            context_pooling: ContextPooling::FinalStates,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !self.encoder.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("model dim {} must be even", self.encoder.dim)));
        }
        if self.max_span_width == 0 || self.width_dim == 0 {
            return Err(Error::Config("max span width and width dim must be positive".into()));
        }
        if self.context_heads == 0 || !self.encoder.dim.is_multiple_of(self.context_heads) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} context heads",
                self.encoder.dim, self.context_heads
            )));
        }
        Ok(())
    }
}

/// Parameter handles for every component.
#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub width: WidthTable,
    pub context: SeaParams,
    pub entity: Linear,
    pub relation: Linear,
}

/// Forward pass up to the fused sequence.
#[derive(Debug, Clone, Copy)]
pub struct SentenceEncoding {
    /// `(n + 1) × d`, CLS last.
    pub base: Var,
    pub xe: Var,
    pub xr: Var,
    pub cross: CrossAttended,
    /// `n × d`.
    pub h: Var,
}

/// Internal, width and context features of one span.
#[derive(Debug, Clone, Copy)]
pub struct SpanFeatures {
    pub span: Span,
    pub internal: Var,
    pub width: Var,
    pub context: Var,
}

impl Network {
    pub fn encode(&self, g: &mut Graph, vocab: &Vocab, tokens: &[String]) -> Result<SentenceEncoding> {
        let base = self.encoder.encode_tokens(g, vocab, tokens)?;
        let (xe, xr) = self.encoder.task_heads(g, base)?;
        let cross = cross_attend(g, xe, xr)?;
        let h = self.fusion.fuse(g, cross.xe, cross.xr)?;
        Ok(SentenceEncoding {
            base,
            xe,
            xr,
            cross,
            h,
        })
    }

    pub fn span_features(&self, g: &mut Graph, h: Var, span: Span) -> Result<SpanFeatures> {
        Ok(SpanFeatures {
            span,
            internal: span_internal(g, h, span)?,
            width: self.width.embed(g, span.width())?,
            context: self.context.context(g, h, span)?.context,
        })
    }
}

/// Trained or freshly initialised model with its vocabulary and labels.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub catalog: LabelCatalog,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    /// Registers and randomly initialises every parameter from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, catalog: LabelCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        catalog.validate()?;
        if catalog.num_entity_types() < 2 {
            return Err(Error::Config("catalog has no entity types besides none".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim();
        let encoder = Encoder::register(&mut params, config.encoder, vocab.len(), &mut rng)?;
        let fusion = Fusion::register(&mut params, d, config.fusion_cell, &mut rng)?;
        let width = WidthTable::register(&mut params, "span.width", config.max_span_width, config.width_dim, &mut rng)?;
        let context = SeaParams::register(
            &mut params,
            "span.context",
            d,
            config.context_heads,
            config.context_pooling,
            &mut rng,
        )?;
        let entity = Linear::register(
            &mut params,
            "classifier.entity",
            2 * d + config.width_dim,
            catalog.num_entity_types(),
            &mut rng,
        )?;
        let relation = Linear::register(
            &mut params,
            "classifier.relation",
            3 * d + 2 * config.width_dim,
            catalog.num_relation_types(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            vocab,
            catalog,
            params,
            net: Network {
                encoder,
                fusion,
                width,
                context,
                entity,
                relation,
            },
        })
    }
}
