//! Flat run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use iser_core::encoder::EncoderConfig;
use iser_core::evaluation::MatchMode;
use iser_core::model::ModelConfig;
use iser_core::numerics::{AdamConfig, CellKind};
use iser_core::span::ContextPooling;
use iser_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    SpanJson,
    Chddi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dialect: Dialect,
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    /// Every artifact is written below this directory.
    pub output_dir: PathBuf,
    /// Checkpoint read by eval, predict and attn; defaults to `output_dir/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Optional text file of pretrained token vectors.
    pub embeddings: Option<PathBuf>,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub neg_entities: usize,
    pub neg_relations: usize,
    pub seed: u64,
    pub parallel: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_span_width: usize,
    pub width_dim: usize,
    pub context_heads: usize,
    pub fusion_cell: CellKind,
    pub context_pooling: ContextPooling,

    pub threshold: f64,
    pub relation_mode: MatchMode,
    /// Sentences dumped by `attn`.
    pub attn_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            dialect: Dialect::SpanJson,
            train_path: None,
            eval_path: None,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            embeddings: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            neg_entities: t.neg_entities,
            neg_relations: t.neg_relations,
            seed: t.seed,
            parallel: t.parallel,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_epsilon: t.adam.epsilon,
            dim: m.encoder.dim,
            layers: m.encoder.layers,
            heads: m.encoder.heads,
            dropout: m.encoder.dropout,
            max_span_width: m.max_span_width,
            width_dim: m.width_dim,
            context_heads: m.context_heads,
            fusion_cell: m.fusion_cell,
            context_pooling: m.context_pooling,
            threshold: iser_core::classifiers::DEFAULT_THRESHOLD,
            relation_mode: MatchMode::ReBoundaries,
            attn_limit: 10,
        }
    }
}

impl RunConfig {
    /// Reads `file` (if any) and applies overrides; overrides win.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::new("CONFIG", format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::new("CONFIG", format!("{}: {}", path.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::new("CONFIG", format!("override {o:?} is not key=value")))?;
            table.insert(key.trim().to_string(), parse_value(raw.trim()));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new("CONFIG", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new("CONFIG", m));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.relation_mode == MatchMode::Ner {
            return bad("relation_mode must be re_boundaries or re_boundaries_and_types".into());
        }
        self.model().validate().map_err(|e| CliError::new("CONFIG", e.to_string()))?;
        self.train().validate().map_err(|e| CliError::new("CONFIG", e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dim: self.dim,
                layers: self.layers,
                heads: self.heads,
                dropout: self.dropout,
            },
            max_span_width: self.max_span_width,
            width_dim: self.width_dim,
            context_heads: self.context_heads,
            fusion_cell: self.fusion_cell,
            context_pooling: self.context_pooling,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            neg_entities: self.neg_entities,
            neg_relations: self.neg_relations,
            seed: self.seed,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            },
            parallel: self.parallel,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
