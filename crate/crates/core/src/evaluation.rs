//! Strict-match precision, recall and F1 for entities and relations.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifiers::Prediction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Entity boundaries and type.
    Ner,
    /// Head and tail boundaries plus relation type.
    ReBoundaries,
    /// As `ReBoundaries`, and both endpoint entity types must agree too.
    ReBoundariesAndTypes,
}

impl std::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ner" => Ok(Self::Ner),
            "re_boundaries" => Ok(Self::ReBoundaries),
            "re_boundaries_and_types" => Ok(Self::ReBoundariesAndTypes),
            other => Err(Error::Config(format!("unknown match mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub type TypeCounts = BTreeMap<String, Counts>;

pub fn merge_counts(into: &mut TypeCounts, from: &TypeCounts) {
    for (k, c) in from {
        into.entry(k.clone()).or_default().add(*c);
    }
}

type Key = (String, Vec<String>);

fn keys(p: &Prediction, mode: MatchMode) -> Vec<Key> {
    match mode {
        MatchMode::Ner => p
            .entities
            .iter()
            .map(|e| (e.label.clone(), vec![e.start.to_string(), e.end.to_string()]))
            .collect(),
        MatchMode::ReBoundaries | MatchMode::ReBoundariesAndTypes => p
            .relations
            .iter()
            .map(|r| {
                let (h, t) = (&p.entities[r.head], &p.entities[r.tail]);
                let mut k = vec![
                    h.start.to_string(),
                    h.end.to_string(),
                    t.start.to_string(),
                    t.end.to_string(),
                ];
                if mode == MatchMode::ReBoundariesAndTypes {
                    k.push(h.label.clone());
                    k.push(t.label.clone());
                }
                (r.label.clone(), k)
            })
            .collect(),
    }
}

/// Per-type counts; each gold item is matched at most once.
pub fn match_and_count(gold: &Prediction, pred: &Prediction, mode: MatchMode) -> TypeCounts {
    let mut bag: HashMap<Key, (usize, usize)> = HashMap::new();
    for k in keys(gold, mode) {
        bag.entry(k).or_default().0 += 1;
    }
    for k in keys(pred, mode) {
        bag.entry(k).or_default().1 += 1;
    }
    let mut out = TypeCounts::new();
    for ((label, _), (g, p)) in bag {
        let m = g.min(p);
        out.entry(label).or_default().add(Counts {
            tp: m,
            fp: p - m,
            fn_: g - m,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of types with gold support that were averaged.
    pub types: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub per_type: BTreeMap<String, Prf>,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: MacroPrf,
}

/// Per-type, micro and macro scores. Macro averages only types present in gold.
pub fn compute_prf(counts: &TypeCounts) -> TaskReport {
    let mut total = Counts::default();
    let mut per_type = BTreeMap::new();
    let mut macro_avg = MacroPrf::default();
    for (label, c) in counts {
        total.add(*c);
        let prf = Prf::from_counts(*c);
        if c.tp + c.fn_ > 0 {
            macro_avg.precision += prf.precision;
            macro_avg.recall += prf.recall;
            macro_avg.f1 += prf.f1;
            macro_avg.types += 1;
        }
        per_type.insert(label.clone(), prf);
    }
    if macro_avg.types > 0 {
        let n = macro_avg.types as f64;
        macro_avg.precision /= n;
        macro_avg.recall /= n;
        macro_avg.f1 /= n;
    }
    TaskReport {
        per_type,
        micro: Prf::from_counts(total),
        macro_avg,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub relation_mode: MatchMode,
    pub ner: TaskReport,
    pub re: TaskReport,
}

/// Scores aligned gold and predicted sentences.
pub fn evaluate(gold: &[Prediction], pred: &[Prediction], relation_mode: MatchMode) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if relation_mode == MatchMode::Ner {
        return Err(Error::Config("relation mode must be re_boundaries or re_boundaries_and_types".into()));
    }
    let (mut ner, mut re) = (TypeCounts::new(), TypeCounts::new());
    for (g, p) in gold.iter().zip(pred) {
        merge_counts(&mut ner, &match_and_count(g, p, MatchMode::Ner));
        merge_counts(&mut re, &match_and_count(g, p, relation_mode));
    }
    Ok(EvalReport {
        relation_mode,
        ner: compute_prf(&ner),
        re: compute_prf(&re),
    })
}

fn write_task(f: &mut fmt::Formatter<'_>, title: &str, t: &TaskReport) -> fmt::Result {
    writeln!(f, "{title}")?;
    writeln!(
        f,
        "{:<20}{:>7}{:>7}{:>7}{:>11}{:>11}{:>11}",
        "type", "tp", "fp", "fn", "precision", "recall", "f1"
    )?;
    for (label, p) in &t.per_type {
        writeln!(
            f,
            "{label:<20}{:>7}{:>7}{:>7}{:>11.4}{:>11.4}{:>11.4}",
            p.tp, p.fp, p.fn_, p.precision, p.recall, p.f1
        )?;
    }
    let m = &t.micro;
    writeln!(
        f,
        "{:<20}{:>7}{:>7}{:>7}{:>11.4}{:>11.4}{:>11.4}",
        "micro", m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1
    )?;
    let a = &t.macro_avg;
    writeln!(
        f,
        "{:<20}{:>7}{:>7}{:>7}{:>11.4}{:>11.4}{:>11.4}",
        "macro", "", "", "", a.precision, a.recall, a.f1
    )
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_task(f, "entities", &self.ner)?;
        writeln!(f)?;
        let mode = match self.relation_mode {
            MatchMode::ReBoundariesAndTypes => "boundaries and types",
            _ => "boundaries",
        };
        write_task(f, &format!("relations ({mode})"), &self.re)
    }
}
