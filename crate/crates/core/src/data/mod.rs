//! On-disk formats and the synthetic corpus.

pub mod checkpoint;
pub mod dataset;
pub mod embeddings;
pub mod kb;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use dataset::{load_dataset, parse_dataset, Dataset, MentionRow, Split};
pub use embeddings::{load_embeddings, save_embeddings};
pub use kb::{load_kb, parse_kb, EntityRecord, KnowledgeBase};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Lines with a trailing CR removed, numbered from 1.
pub(crate) fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
}
