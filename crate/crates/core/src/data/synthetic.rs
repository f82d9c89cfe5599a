//! A desk-scale stand-in for an entity linking benchmark: pronounceable
//! entity names and noisy mentions derived from them by character edits.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, CLS, CONTINUATION, PAD, SEP, UNK};

use super::{Dataset, EntityRecord, KnowledgeBase, MentionRow, Split};

const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";
const SUFFIXES: [&str; 5] = ["s", "e", "a", "in", "ol"];
/// Every this many entities one also gets an alternative name.
const ALT_EVERY: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub kb: KnowledgeBase,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// Wordpiece vocabulary covering every string the generator can emit.
    pub vocab: Vocab,
}

fn syllables() -> Vec<String> {
    CONSONANTS
        .chars()
        .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
        .collect()
}

/// Specials, syllables and single letters, each also as a continuation piece.
pub fn synthetic_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    let letters: Vec<String> = ('a'..='z').map(String::from).collect();
    for piece in syllables().into_iter().chain(letters) {
        tokens.push(format!("{CONTINUATION}{piece}"));
        tokens.push(piece);
    }
    Vocab::from_tokens(tokens).expect("generated vocabulary is valid")
}

fn random_name<R: Rng>(rng: &mut R, syl: &[String]) -> String {
    let words = rng.random_range(1..=2);
    (0..words)
        .map(|_| {
            let n = rng.random_range(2..=4);
            (0..n).map(|_| syl.choose(rng).unwrap().as_str()).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One character-level edit inside a randomly chosen word.
fn edit<R: Rng>(name: &str, rng: &mut R) -> String {
    let mut words: Vec<Vec<char>> = name.split(' ').map(|w| w.chars().collect()).collect();
    let wi = rng.random_range(0..words.len());
    let w = &mut words[wi];
    match rng.random_range(0..4) {
        0 if w.len() >= 2 => {
            let i = rng.random_range(0..w.len() - 1);
            w.swap(i, i + 1);
        }
        1 if w.len() >= 3 => {
            w.remove(rng.random_range(0..w.len()));
        }
        2 => {
            let i = rng.random_range(0..w.len());
            w.insert(i, w[i]);
        }
        _ => w.extend(SUFFIXES.choose(rng).unwrap().chars()),
    }
    words.iter().map(|w| w.iter().collect::<String>()).collect::<Vec<_>>().join(" ")
}

fn variant<R: Rng>(name: &str, rng: &mut R) -> String {
    let edits = rng.random_range(1..=2);
    (0..edits).fold(name.to_string(), |s, _| edit(&s, rng))
}

/// Entities `E0..`, each with a unique primary name; variant `i` of every
/// entity lands in split `i mod 3` (train, dev, test).
pub fn generate_synthetic_corpus(n_entities: usize, variants_per_entity: usize, seed: u64) -> Result<SyntheticCorpus> {
    if n_entities < 2 || variants_per_entity < 1 {
        return Err(Error::Invalid("synthetic corpus needs at least 2 entities and 1 variant".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let syl = syllables();
    let mut used = HashSet::new();
    let mut entities = Vec::with_capacity(n_entities);
    for i in 0..n_entities {
        let name = loop {
            let candidate = random_name(&mut rng, &syl);
            if used.insert(candidate.clone()) {
                break candidate;
            }
        };
        let mut record = EntityRecord::new(format!("E{i}"), name);
        if i % ALT_EVERY == 0 {
            record.alternatives.push(variant(&record.primary, &mut rng));
        }
        entities.push(record);
    }
    let mut splits: [Vec<MentionRow>; 3] = Default::default();
    for e in &entities {
        for v in 0..variants_per_entity {
            splits[v % 3].push(MentionRow {
                mention: variant(&e.primary, &mut rng),
                gold: e.id.clone(),
            });
        }
    }
    let [train, dev, test] = splits;
    Ok(SyntheticCorpus {
        kb: KnowledgeBase::new(entities)?,
        train: Dataset::new(Split::Train, train),
        dev: Dataset::new(Split::Dev, dev),
        test: Dataset::new(Split::Test, test),
        vocab: synthetic_vocab(),
    })
}
