//! Seeded synthetic corpora and word vectors for smoke runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::similarity::EmbeddingTable;

const ADJECTIVES: &[&str] = &[
    "old", "new", "young", "local", "federal", "small", "large", "senior", "foreign", "rural", "national", "private",
];
const NOUNS: &[&str] = &[
    "minister", "company", "bank", "court", "union", "army", "police", "council", "team", "school", "hospital",
    "market", "president", "airline", "farmer", "agency", "villager", "mayor",
];
const VERBS: &[&str] = &[
    "approved", "rejected", "announced", "signed", "blocked", "delayed", "launched", "criticized", "backed", "sold",
    "opened", "closed",
];
const OBJECTS: &[&str] = &[
    "plan", "deal", "budget", "law", "merger", "strike", "report", "project", "contract", "reform", "loan", "treaty",
];
const PLACES: &[&str] = &["paris", "tokyo", "cairo", "lima", "oslo", "delhi", "sydney", "berlin", "nairobi", "quebec"];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const FILLERS: &[&str] = &["officials said", "sources said", "reports said", "it was reported"];

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "in", "on", "of", "to", "its", "said", "officials", "sources", "reports", "it", "was",
    "reported", "after", "talks", ",", ".", "that",
];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// One sentence from a small set of news-like templates.
pub fn templated_sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let (adj, noun, verb, obj) = (pick(rng, ADJECTIVES), pick(rng, NOUNS), pick(rng, VERBS), pick(rng, OBJECTS));
    let (place, day, filler) = (pick(rng, PLACES), pick(rng, DAYS), pick(rng, FILLERS));
    match rng.random_range(0..4) {
        0 => format!("the {adj} {noun} {verb} the {obj} in {place} on {day} ."),
        1 => format!("{filler} the {noun} of {place} {verb} a {adj} {obj} on {day} ."),
        2 => format!("on {day} , the {adj} {noun} {verb} its {obj} after talks in {place} ."),
        _ => format!("the {noun} in {place} {verb} the {adj} {obj} , {filler} ."),
    }
}

pub fn templated_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| templated_sentence(&mut rng)).collect()
}

/// Unit-norm random vectors for content words and short vectors (norm 0.05)
/// for function words and punctuation.
pub fn word_vectors(dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let content = [ADJECTIVES, NOUNS, VERBS, OBJECTS, PLACES, DAYS].concat();
    let unit = |scale: f64, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| scale * x / n).collect::<Vec<f64>>()
    };
    for w in content {
        if !FUNCTION_WORDS.contains(&w) {
            entries.push((w.to_string(), unit(1.0, &mut rng)));
        }
    }
    for w in FUNCTION_WORDS {
        entries.push((w.to_string(), unit(0.05, &mut rng)));
    }
    EmbeddingTable::from_vectors(dim, entries).expect("consistent dimensions")
}

/// Text form accepted by [`EmbeddingTable::read`], sorted by token.
pub fn vectors_text(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    for (token, v) in table.entries() {
        out.push_str(token);
        for x in v {
            out.push(' ');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}
