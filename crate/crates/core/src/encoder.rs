//! Token encoder producing the base sequence (tokens plus a trailing CLS row)
//! and the entity/relation task representations.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{multi_head_self_attention, Graph, ParamId, ParamStore, Tensor, Var};

pub const UNK: &str = "<unk>";

/// Token → index map. Index 0 is [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary of every token observed, in first-seen order after [`UNK`].
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from(vec![UNK.to_string()]);
        for t in tokens {
            if !v.index.contains_key(t) {
                v.index.insert(t.to_string(), v.tokens.len());
                v.tokens.push(t.to_string());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(mut tokens: Vec<String>) -> Self {
        if tokens.first().map(String::as_str) != Some(UNK) {
            tokens.insert(0, UNK.to_string());
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 2,
            heads: 4,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config(format!("model dim {} must be at least 8", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} encoder heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Two-layer feedforward map `d → hidden → d` with ReLU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: store.register(format!("{prefix}.w1"), glorot(dim, hidden, rng))?,
            b1: store.register(format!("{prefix}.b1"), Tensor::zeros(1, hidden))?,
            w2: store.register(format!("{prefix}.w2"), glorot(hidden, dim, rng))?,
            b2: store.register(format!("{prefix}.b2"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let z = g.matmul(x, w1)?;
        let z = g.add_row(z, b1)?;
        let z = g.relu(z);
        let z = g.matmul(z, w2)?;
        g.add_row(z, b2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{prefix}.gain"), Tensor::filled(1, dim, 1.0))?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(1, dim))?,
        })
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, 1e-5)
    }
}

/// Post-norm self-attention block.
#[derive(Debug, Clone)]
struct Block {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl Block {
    fn apply(&self, g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
        let (w_q, w_k, w_v, w_o) = (g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o));
        let (att, _) = multi_head_self_attention(g, x, w_q, w_k, w_v, heads)?;
        let att = g.matmul(att, w_o)?;
        let a = g.add(x, att)?;
        let a = self.norm1.apply(g, a)?;
        let f = self.ffn.apply(g, a)?;
        let b = g.add(a, f)?;
        self.norm2.apply(g, b)
    }
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            t.row_mut(pos)[j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Embeddings, positions, self-attention blocks, CLS row and both task heads.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub cls: ParamId,
    blocks: Vec<Block>,
    pub entity_head: FeedForward,
    pub relation_head: FeedForward,
}

impl Encoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embedding = store.register("encoder.embedding", Tensor::uniform(vocab_size, d, 0.5, rng))?;
        let cls = store.register("encoder.cls", Tensor::uniform(1, d, 0.5, rng))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.block{l}");
            blocks.push(Block {
                w_q: store.register(format!("{p}.w_q"), glorot(d, d, rng))?,
                w_k: store.register(format!("{p}.w_k"), glorot(d, d, rng))?,
                w_v: store.register(format!("{p}.w_v"), glorot(d, d, rng))?,
                w_o: store.register(format!("{p}.w_o"), glorot(d, d, rng))?,
                norm1: Norm::register(store, &format!("{p}.norm1"), d)?,
                ffn: FeedForward::register(store, &format!("{p}.ffn"), d, d, rng)?,
                norm2: Norm::register(store, &format!("{p}.norm2"), d)?,
            });
        }
        let entity_head = FeedForward::register(store, "heads.entity", d, d, rng)?;
        let relation_head = FeedForward::register(store, "heads.relation", d, d, rng)?;
        Ok(Self {
            config,
            embedding,
            cls,
            blocks,
            entity_head,
            relation_head,
        })
    }

    /// Base sequence `(n + 1) × d`; the last row is CLS.
    pub fn encode_tokens(&self, g: &mut Graph, vocab: &Vocab, tokens: &[String]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
        }
        let n = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.lookup(t)).collect();
        let emb = g.gather(self.embedding, &ids)?;
        let pos = g.constant(sinusoidal_positions(n, self.config.dim));
        let x = g.add(emb, pos)?;
        let cls = g.param(self.cls);
        let mut x = g.concat_rows(&[x, cls])?;
        x = g.dropout(x, self.config.dropout)?;
        for block in &self.blocks {
            x = block.apply(g, x, self.config.heads)?;
            x = g.dropout(x, self.config.dropout)?;
        }
        Ok(x)
    }

    /// `(X_e, X_r)`, each `n × d`, from the token rows of `base`.
    pub fn task_heads(&self, g: &mut Graph, base: Var) -> Result<(Var, Var)> {
        let (rows, _) = g.shape(base);
        if rows < 2 {
            return Err(Error::shape("task_heads", format!("base has {rows} rows")));
        }
        let tokens = g.slice_rows(base, 0, rows - 1)?;
        let xe = self.entity_head.apply(g, tokens)?;
        let xr = self.relation_head.apply(g, tokens)?;
        Ok((xe, xr))
    }

    /// Overwrites embedding rows of in-vocabulary tokens; returns how many were replaced.
    pub fn load_embeddings(
        &self,
        store: &mut ParamStore,
        vocab: &Vocab,
        vectors: &HashMap<String, Vec<f64>>,
    ) -> Result<usize> {
        let table = store.get_mut(self.embedding);
        let mut replaced = 0;
        for (token, v) in vectors {
            if v.len() != self.config.dim {
                return Err(Error::shape(
                    "load_embeddings",
                    format!("{token:?} has {} values, expected {}", v.len(), self.config.dim),
                ));
            }
            let i = vocab.lookup(token);
            if i != 0 || token == UNK {
                table.row_mut(i).copy_from_slice(v);
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}

/// Reads a text embedding file: one token per line followed by `dim` reals.
pub fn read_embedding_file(path: impl AsRef<Path>, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                record: i,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Load {
                path: path.to_path_buf(),
                record: i,
                message: format!("{} values, expected {dim}", values.len()),
            });
        }
        out.insert(token.to_string(), values);
    }
    Ok(out)
}
