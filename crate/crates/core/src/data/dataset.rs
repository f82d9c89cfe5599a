use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::{numbered_lines, read_text, KnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionRow {
    pub mention: String,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub rows: Vec<MentionRow>,
}

impl Dataset {
    pub fn new(split: Split, rows: Vec<MentionRow>) -> Self {
        Self { split, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reports every row whose gold id is not in `kb`.
    pub fn check_against(&self, kb: &KnowledgeBase) -> Result<()> {
        let missing: Vec<String> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !kb.contains(&r.gold))
            .map(|(i, r)| format!("row {}: unknown entity id {}", i + 1, r.gold))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(missing.join("; ")))
        }
    }

    pub fn to_tsv(&self) -> String {
        self.rows.iter().map(|r| format!("{}\t{}\n", r.mention, r.gold)).collect()
    }
}

/// Parses `mention<TAB>gold_id` lines. With a `kb`, unknown ids are
/// reported with their line numbers.
pub fn parse_dataset(text: &str, split: Split, kb: Option<&KnowledgeBase>) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut unknown = Vec::new();
    for (line_no, line) in numbered_lines(text) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [mention, gold] = fields[..] else {
            return Err(Error::Data(format!(
                "line {line_no}: expected 2 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let (mention, gold) = (mention.trim(), gold.trim());
        if mention.is_empty() || gold.is_empty() {
            return Err(Error::Data(format!("line {line_no}: empty mention or entity id")));
        }
        if kb.is_some_and(|kb| !kb.contains(gold)) {
            unknown.push(format!("line {line_no}: unknown entity id {gold}"));
        }
        rows.push(MentionRow {
            mention: mention.to_string(),
            gold: gold.to_string(),
        });
    }
    if !unknown.is_empty() {
        return Err(Error::Data(unknown.join("; ")));
    }
    if rows.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    Ok(Dataset { split, rows })
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split, kb: Option<&KnowledgeBase>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_dataset(&read_text(path)?, split, kb).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
