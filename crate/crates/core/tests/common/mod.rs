//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod gradients;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rescnn::tokenizer::{Vocab, CLS, PAD, SEP, UNK};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small vocabulary where every lowercase letter is a piece.
pub fn letter_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
    for c in 'a'..='z' {
        tokens.push(c.to_string());
        tokens.push(format!("##{c}"));
    }
    Vocab::from_tokens(tokens).unwrap()
}
