//! Small template-generated corpora for smoke tests and demos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{EntitySpan, RelationTriple, Sentence};

const PEOPLE: &[&str] = &["John", "Mary", "Anna Smith", "Peter", "Li Wei", "Omar Haddad"];
const PLACES: &[&str] = &["Rome", "Paris", "New York", "Berlin", "Oslo"];
const ORGS: &[&str] = &["Acme", "Globex Corp", "Initech", "Stark Industries"];

enum Piece {
    Word(&'static str),
    Slot(usize),
}

struct Builder {
    tokens: Vec<String>,
    entities: Vec<EntitySpan>,
}

impl Builder {
    fn build(pieces: &[Piece], slots: &[(&str, &str)]) -> Self {
        let mut b = Builder {
            tokens: Vec::new(),
            entities: vec![
                EntitySpan {
                    start: 0,
                    end: 0,
                    label: String::new()
                };
                slots.len()
            ],
        };
        for p in pieces {
            match p {
                Piece::Word(w) => b.tokens.push(w.to_string()),
                Piece::Slot(i) => {
                    let (text, label) = slots[*i];
                    let start = b.tokens.len();
                    b.tokens.extend(text.split_whitespace().map(String::from));
                    b.entities[*i] = EntitySpan {
                        start,
                        end: b.tokens.len(),
                        label: label.to_string(),
                    };
                }
            }
        }
        b
    }
}

/// `count` sentences over three entity types (`Peop`, `Loc`, `Org`) and two
/// relation types (`Live_in`, `Work_for`).
pub fn toy_corpus(count: usize, seed: u64) -> Vec<Sentence> {
    use Piece::{Slot, Word};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let p = *PEOPLE.choose(&mut rng).unwrap();
        let l = *PLACES.choose(&mut rng).unwrap();
        let o = *ORGS.choose(&mut rng).unwrap();
        let (pieces, slots, rels): (Vec<Piece>, Vec<(&str, &str)>, Vec<(usize, usize, &str)>) = match i % 5 {
            0 => (
                vec![Slot(0), Word("lives"), Word("in"), Slot(1), Word(".")],
                vec![(p, "Peop"), (l, "Loc")],
                vec![(0, 1, "Live_in")],
            ),
            1 => (
                vec![Slot(0), Word("works"), Word("for"), Slot(1), Word(".")],
                vec![(p, "Peop"), (o, "Org")],
                vec![(0, 1, "Work_for")],
            ),
            2 => (
                vec![
                    Slot(0),
                    Word(","),
                    Word("who"),
                    Word("works"),
                    Word("for"),
                    Slot(1),
                    Word(","),
                    Word("lives"),
                    Word("in"),
                    Slot(2),
                    Word("."),
                ],
                vec![(p, "Peop"), (o, "Org"), (l, "Loc")],
                vec![(0, 1, "Work_for"), (0, 2, "Live_in")],
            ),
            3 => (
                vec![Slot(0), Word("hired"), Slot(1), Word("yesterday"), Word(".")],
                vec![(o, "Org"), (p, "Peop")],
                vec![(1, 0, "Work_for")],
            ),
            _ => (
                vec![Slot(0), Word("is"), Word("home"), Word("to"), Slot(1), Word(".")],
                vec![(l, "Loc"), (p, "Peop")],
                vec![(1, 0, "Live_in")],
            ),
        };
        let b = Builder::build(&pieces, &slots);
        out.push(Sentence {
            id: format!("toy-{i}"),
            tokens: b.tokens,
            entities: b.entities,
            relations: rels
                .into_iter()
                .map(|(head, tail, label)| RelationTriple {
                    head,
                    tail,
                    label: label.to_string(),
                })
                .collect(),
        });
    }
    out
}
