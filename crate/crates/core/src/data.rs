//! Dataset loading for the span-JSON and spo_list dialects, corpus statistics
//! and negative sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::Span;

/// Reserved entity class for spans that are not entities.
pub const NONE_TYPE: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl EntitySpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

/// Directed relation between two entries of [`Sentence::entities`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationTriple {
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
    pub relations: Vec<RelationTriple>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("sentence has no tokens".into());
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.end <= e.start {
                return Err(format!("entity {i}: end {} <= start {}", e.end, e.start));
            }
            if e.end > self.tokens.len() {
                return Err(format!(
                    "entity {i}: end {} beyond {} tokens",
                    e.end,
                    self.tokens.len()
                ));
            }
            if e.label == NONE_TYPE {
                return Err(format!("entity {i}: type {NONE_TYPE:?} is reserved"));
            }
        }
        for (i, r) in self.relations.iter().enumerate() {
            let n = self.entities.len();
            if r.head >= n || r.tail >= n {
                return Err(format!(
                    "relation {i}: head {} / tail {} out of range for {n} entities",
                    r.head, r.tail
                ));
            }
            if r.head == r.tail {
                return Err(format!("relation {i}: head equals tail ({})", r.head));
            }
        }
        Ok(())
    }
}

/// Entity and relation type inventories. Entity index 0 is always [`NONE_TYPE`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCatalog {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

impl LabelCatalog {
    pub fn new(entity_types: &[&str], relation_types: &[&str]) -> Result<Self> {
        let mut ents = vec![NONE_TYPE.to_string()];
        ents.extend(entity_types.iter().map(|s| s.to_string()));
        let catalog = Self {
            entity_types: ents,
            relation_types: relation_types.iter().map(|s| s.to_string()).collect(),
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// Union of observed types, each list sorted, with `none` prepended.
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Self {
        let mut ents = std::collections::BTreeSet::new();
        let mut rels = std::collections::BTreeSet::new();
        for s in sentences {
            ents.extend(s.entities.iter().map(|e| e.label.clone()));
            rels.extend(s.relations.iter().map(|r| r.label.clone()));
        }
        let mut entity_types = vec![NONE_TYPE.to_string()];
        entity_types.extend(ents);
        Self {
            entity_types,
            relation_types: rels.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity_types.first().map(String::as_str) != Some(NONE_TYPE) {
            return Err(Error::Config(format!("entity type 0 must be {NONE_TYPE:?}")));
        }
        let unique = |v: &[String]| v.iter().collect::<HashSet<_>>().len() == v.len();
        if !unique(&self.entity_types) || !unique(&self.relation_types) {
            return Err(Error::Config("label names must be unique".into()));
        }
        if self.relation_types.iter().any(|r| r == NONE_TYPE) {
            return Err(Error::Config(format!(
                "{NONE_TYPE:?} is not a relation type"
            )));
        }
        Ok(())
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_types.iter().position(|t| t == name)
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn num_relation_types(&self) -> usize {
        self.relation_types.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub catalog: LabelCatalog,
}

// ---------------------------------------------------------------------------
// span JSON dialect

#[derive(Debug, Deserialize, Serialize)]
struct SpanRecord {
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<EntitySpan>,
    #[serde(default)]
    relations: Vec<RelationTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orig_id: Option<serde_json::Value>,
}

/// Parses a span-JSON array. `origin` is only used in error messages.
pub fn parse_span_json(text: &str, origin: &Path) -> Result<Dataset> {
    let records: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
    let mut sentences = Vec::with_capacity(records.len());
    for (i, value) in records.into_iter().enumerate() {
        let load_err = |message: String| Error::Load {
            path: origin.to_path_buf(),
            record: i,
            message,
        };
        let rec: SpanRecord = serde_json::from_value(value).map_err(|e| load_err(e.to_string()))?;
        let id = match rec.orig_id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => i.to_string(),
        };
        let sentence = Sentence {
            id,
            tokens: rec.tokens,
            entities: rec.entities,
            relations: rec.relations,
        };
        sentence.validate().map_err(load_err)?;
        sentences.push(sentence);
    }
    let catalog = LabelCatalog::from_sentences(&sentences);
    Ok(Dataset { sentences, catalog })
}

pub fn load_span_json(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_span_json(&text, path)
}

/// Serialises sentences back into the span-JSON dialect.
pub fn to_span_json(sentences: &[Sentence]) -> String {
    let records: Vec<SpanRecord> = sentences
        .iter()
        .map(|s| SpanRecord {
            tokens: s.tokens.clone(),
            entities: s.entities.clone(),
            relations: s.relations.clone(),
            orig_id: Some(serde_json::Value::String(s.id.clone())),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("span records serialise")
}

// ---------------------------------------------------------------------------
// spo_list dialect

/// Entity type assigned to every aligned drug mention.
pub const DRUG_TYPE: &str = "drug";

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Valued {
    Wrapped {
        #[serde(rename = "@value")]
        value: String,
    },
    Plain(String),
}

impl Valued {
    fn as_str(&self) -> &str {
        match self {
            Valued::Wrapped { value } | Valued::Plain(value) => value,
        }
    }
}

#[derive(Debug, Deserialize)]
struct SpoTriple {
    predicate: String,
    subject: Valued,
    object: Valued,
}

#[derive(Debug, Deserialize)]
struct SpoRecord {
    text: String,
    #[serde(default)]
    spo_list: Vec<SpoTriple>,
}

/// Character span of the first occurrence of `needle` in `chars`.
fn align(chars: &[char], needle: &str) -> Option<(Span, bool)> {
    let pattern: Vec<char> = needle.chars().collect();
    if pattern.is_empty() || pattern.len() > chars.len() {
        return None;
    }
    let mut hits = chars
        .windows(pattern.len())
        .enumerate()
        .filter(|(_, w)| *w == pattern.as_slice())
        .map(|(i, _)| i);
    let first = hits.next()?;
    let repeated = hits.next().is_some();
    Some((Span::new(first, first + pattern.len()), repeated))
}

/// Parses newline-delimited spo_list records; tokens are single characters.
pub fn parse_chddi_json(text: &str, origin: &Path) -> Result<Dataset> {
    let mut sentences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| Error::Load {
            path: origin.to_path_buf(),
            record: i,
            message,
        };
        let rec: SpoRecord = serde_json::from_str(line).map_err(|e| load_err(e.to_string()))?;
        let chars: Vec<char> = rec.text.chars().collect();
        let mut entities: Vec<EntitySpan> = Vec::new();
        let mut relations: Vec<RelationTriple> = Vec::new();

        let mut entity_for = |role: &'static str, mention: &str| -> Result<usize> {
            let (span, repeated) = align(&chars, mention).ok_or_else(|| Error::Alignment {
                path: origin.to_path_buf(),
                record: i,
                role,
                text: mention.to_string(),
            })?;
            if repeated {
                warn!(
                    "{}: record {i}: {mention:?} occurs more than once; using the first occurrence",
                    origin.display()
                );
            }
            if let Some(idx) = entities.iter().position(|e| e.span() == span) {
                return Ok(idx);
            }
            entities.push(EntitySpan {
                start: span.start,
                end: span.end,
                label: DRUG_TYPE.to_string(),
            });
            Ok(entities.len() - 1)
        };

        for spo in &rec.spo_list {
            let head = entity_for("subject", spo.subject.as_str())?;
            let tail = entity_for("object", spo.object.as_str())?;
            let triple = RelationTriple {
                head,
                tail,
                label: spo.predicate.clone(),
            };
            if !relations.contains(&triple) {
                relations.push(triple);
            }
        }

        let sentence = Sentence {
            id: i.to_string(),
            tokens: chars.iter().map(|c| c.to_string()).collect(),
            entities,
            relations,
        };
        sentence.validate().map_err(load_err)?;
        sentences.push(sentence);
    }
    let catalog = LabelCatalog::from_sentences(&sentences);
    Ok(Dataset { sentences, catalog })
}

pub fn load_chddi_json(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_chddi_json(&text, path)
}

// ---------------------------------------------------------------------------
// statistics

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sentences: usize,
    pub entities: usize,
    pub relations: usize,
    pub entity_types: BTreeMap<String, usize>,
    pub relation_types: BTreeMap<String, usize>,
}

pub fn dataset_stats(sentences: &[Sentence]) -> StatsReport {
    let mut report = StatsReport {
        sentences: sentences.len(),
        ..Default::default()
    };
    for s in sentences {
        report.entities += s.entities.len();
        report.relations += s.relations.len();
        for e in &s.entities {
            *report.entity_types.entry(e.label.clone()).or_default() += 1;
        }
        for r in &s.relations {
            *report.relation_types.entry(r.label.clone()).or_default() += 1;
        }
    }
    report
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:>10}", "sentences", self.sentences)?;
        writeln!(f, "{:<24}{:>10}", "entities", self.entities)?;
        writeln!(f, "{:<24}{:>10}", "relations", self.relations)?;
        writeln!(f)?;
        writeln!(f, "{:<24}{:>10}", "entity type", "count")?;
        for (k, v) in &self.entity_types {
            writeln!(f, "{k:<24}{v:>10}")?;
        }
        writeln!(f)?;
        writeln!(f, "{:<24}{:>10}", "relation type", "count")?;
        for (k, v) in &self.relation_types {
            writeln!(f, "{k:<24}{v:>10}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// negative sampling

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Negatives {
    /// Non-gold spans of width at most `max_width`.
    pub spans: Vec<Span>,
    /// Ordered `(head, tail)` pairs of entity indices with no gold relation in that direction.
    pub pairs: Vec<(usize, usize)>,
}

/// Draws up to `max_spans` non-gold spans and up to `max_pairs` unrelated
/// ordered gold-entity pairs, each without replacement.
///
/// Pairs are restricted to entities no wider than `max_width` and to distinct
/// spans; a pair counts as related if any gold relation joins the same head
/// and tail boundaries.
pub fn sample_negatives<R: Rng + ?Sized>(
    sentence: &Sentence,
    max_width: usize,
    max_spans: usize,
    max_pairs: usize,
    rng: &mut R,
) -> Negatives {
    let gold: HashSet<Span> = sentence.entities.iter().map(EntitySpan::span).collect();
    let pool: Vec<Span> = crate::span::enumerate_spans(sentence.len(), max_width)
        .into_iter()
        .filter(|s| !gold.contains(s))
        .collect();
    let spans = sample(rng, pool.len(), max_spans.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let linked: HashSet<(Span, Span)> = sentence
        .relations
        .iter()
        .map(|r| {
            (
                sentence.entities[r.head].span(),
                sentence.entities[r.tail].span(),
            )
        })
        .collect();
    let mut seen = HashSet::new();
    let mut pair_pool = Vec::new();
    for (i, a) in sentence.entities.iter().enumerate() {
        for (j, b) in sentence.entities.iter().enumerate() {
            if i == j || a.span() == b.span() || a.width() > max_width || b.width() > max_width {
                continue;
            }
            let key = (a.span(), b.span());
            if linked.contains(&key) || !seen.insert(key) {
                continue;
            }
            pair_pool.push((i, j));
        }
    }
    let pairs = sample(rng, pair_pool.len(), max_pairs.min(pair_pool.len()))
        .into_iter()
        .map(|i| pair_pool[i])
        .collect();
    Negatives { spans, pairs }
}
