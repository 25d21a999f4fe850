//! Token-level export of the fusion cross-attention weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Relation representation queries entity keys (`attn_e`).
    QueryRelations,
    /// Entity representation queries relation keys (`attn_r`).
    QueryEntities,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::QueryRelations => "query_relations",
            Direction::QueryEntities => "query_entities",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_relations" | "relations" => Ok(Self::QueryRelations),
            "query_entities" | "entities" => Ok(Self::QueryEntities),
            other => Err(Error::Config(format!("unknown attention direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub tokens: Vec<String>,
    pub direction: Direction,
    /// Row-stochastic `n × n` weights.
    pub matrix: Vec<Vec<f64>>,
    /// Column sums divided by `n`.
    pub aggregate: Vec<f64>,
}

impl AttentionDump {
    pub fn from_weights(tokens: &[String], direction: Direction, weights: &Tensor) -> Result<Self> {
        let n = tokens.len();
        if weights.shape() != (n, n) {
            return Err(Error::shape(
                "attention_dump",
                format!("{:?} weights for {n} tokens", weights.shape()),
            ));
        }
        let mut aggregate = vec![0.0; n];
        for i in 0..n {
            for (a, w) in aggregate.iter_mut().zip(weights.row(i)) {
                *a += w;
            }
        }
        aggregate.iter_mut().for_each(|a| *a /= n as f64);
        Ok(Self {
            tokens: tokens.to_vec(),
            direction,
            matrix: weights.to_rows(),
            aggregate,
        })
    }

    /// Index of the token receiving the most attention.
    pub fn top_token(&self) -> usize {
        self.aggregate
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i)
    }

    /// Header of tokens, `n` matrix rows, then the aggregate row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(&self.tokens).map_err(csv_err)?;
        for row in self.matrix.iter().chain(std::iter::once(&self.aggregate)) {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Both directions from a single eval-mode forward pass, `(query_relations, query_entities)`.
pub fn attention_dumps(model: &Model, tokens: &[String]) -> Result<(AttentionDump, AttentionDump)> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("cannot dump attention for an empty sentence".into()));
    }
    let mut g = Graph::new(&model.params);
    let enc = model.net.encode(&mut g, &model.vocab, tokens)?;
    Ok((
        AttentionDump::from_weights(tokens, Direction::QueryRelations, g.value(enc.cross.attn_e))?,
        AttentionDump::from_weights(tokens, Direction::QueryEntities, g.value(enc.cross.attn_r))?,
    ))
}

pub fn attention_dump(model: &Model, tokens: &[String], direction: Direction) -> Result<AttentionDump> {
    let (rel, ent) = attention_dumps(model, tokens)?;
    Ok(match direction {
        Direction::QueryRelations => rel,
        Direction::QueryEntities => ent,
    })
}
