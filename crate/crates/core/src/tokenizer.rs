//! BERT-style WordPiece tokenization.
//!
//! Text is cleaned (control characters dropped, whitespace normalized,
//! optionally lowercased), split on whitespace and punctuation, and every
//! word is then split greedily into the longest vocabulary pieces, with
//! `##` marking word-internal pieces. A word that cannot be covered becomes
//! `[UNK]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const CONTINUATION: &str = "##";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary is missing the special token {0}")]
    MissingSpecial(&'static str),
    #[error("duplicate vocabulary token {token:?} on line {line}")]
    Duplicate { token: String, line: usize },
    #[error("empty vocabulary token on line {0}")]
    EmptyToken(usize),
}

/// Token strings with dense ids `0..V` in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    cls: u32,
    sep: u32,
    unk: u32,
    pad: u32,
}

impl Vocab {
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self, VocabError> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(VocabError::EmptyToken(i + 1));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate {
                    token: tok.clone(),
                    line: i + 1,
                });
            }
        }
        let special = |name: &'static str| ids.get(name).copied().ok_or(VocabError::MissingSpecial(name));
        let (cls, sep, unk, pad) = (special(CLS)?, special(SEP)?, special(UNK)?, special(PAD)?);
        Ok(Self {
            tokens,
            ids,
            cls,
            sep,
            unk,
            pad,
        })
    }

    /// Reads a `vocab.txt`: UTF-8, one token per line, id = line index.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)))
    }

    /// The `vocab.txt` rendering (LF-terminated lines).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.cls || id == self.sep || id == self.pad
    }

    /// Joins word pieces back into words: `##` pieces attach to the previous
    /// piece, everything else starts a new space-separated word.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let Some(tok) = self.token(id) else { continue };
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub max_len: usize,
    pub lowercase: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            max_len: 25,
            lowercase: true,
        }
    }
}

/// Token ids of one text. When `has_specials`, the first id is `[CLS]` and
/// the id at `length - 1` is `[SEP]`; anything after `length` is padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub has_specials: bool,
    pub length: usize,
}

impl TokenSequence {
    /// Wraps content ids in `[CLS] ... [SEP]`.
    pub fn with_specials(content: &[u32], vocab: &Vocab) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(vocab.cls_id());
        ids.extend_from_slice(content);
        ids.push(vocab.sep_id());
        let length = ids.len();
        Self {
            ids,
            has_specials: true,
            length,
        }
    }

    /// Ids excluding padding.
    pub fn valid(&self) -> &[u32] {
        &self.ids[..self.length]
    }

    /// Ids between the special tokens (all valid ids when there are none).
    pub fn content(&self) -> &[u32] {
        if self.has_specials && self.length >= 2 {
            &self.ids[1..self.length - 1]
        } else {
            self.valid()
        }
    }

    /// Positions (within the valid prefix) of the content tokens.
    pub fn content_range(&self) -> std::ops::Range<usize> {
        if self.has_specials && self.length >= 2 {
            1..self.length - 1
        } else {
            0..self.length
        }
    }

    /// Same sequence with the content replaced; specials and padding are
    /// reattached unchanged.
    pub fn replace_content(&self, content: &[u32]) -> Self {
        let range = self.content_range();
        let mut ids = Vec::with_capacity(self.ids.len() - range.len() + content.len());
        ids.extend_from_slice(&self.ids[..range.start]);
        ids.extend_from_slice(content);
        ids.extend_from_slice(&self.ids[range.end..]);
        let length = self.length - range.len() + content.len();
        Self {
            ids,
            has_specials: self.has_specials,
            length,
        }
    }

    /// Appends `[PAD]` ids up to `total` positions.
    pub fn padded(&self, total: usize, vocab: &Vocab) -> Self {
        let mut ids = self.ids.clone();
        while ids.len() < total {
            ids.push(vocab.pad_id());
        }
        Self {
            ids,
            has_specials: self.has_specials,
            length: self.length,
        }
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace())
}

/// Cleans `text` and splits it into words and single punctuation marks.
pub fn basic_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, words: &mut Vec<String>| {
        if !current.is_empty() {
            words.push(std::mem::take(current));
        }
    };
    for c in text.chars() {
        if c == '\0' || c == '\u{fffd}' || (c.is_control() && !c.is_whitespace()) {
            continue;
        }
        if c.is_whitespace() {
            flush(&mut current, &mut words);
        } else if is_punctuation(c) {
            flush(&mut current, &mut words);
            words.push(c.to_string());
        } else if lowercase {
            current.extend(c.to_lowercase());
        } else {
            current.push(c);
        }
    }
    flush(&mut current, &mut words);
    words
}

/// Greedy longest-match-first split of one word.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<u32> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + 2);
    while start < chars.len() {
        let from = chars[start].0;
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let to = chars.get(end).map_or(word.len(), |&(b, _)| b);
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[from..to]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => pieces.push(id),
            None => return vec![vocab.unk_id()],
        }
        start = end;
    }
    pieces
}

/// Tokenizes `text` into `[CLS] pieces... [SEP]`, truncated to
/// `config.max_len` positions with `[SEP]` kept last.
pub fn tokenize(text: &str, vocab: &Vocab, config: &TokenizerConfig) -> TokenSequence {
    let mut content = Vec::new();
    for word in basic_tokenize(text, config.lowercase) {
        content.extend(wordpiece(&word, vocab));
    }
    content.truncate(config.max_len.saturating_sub(2));
    TokenSequence::with_specials(&content, vocab)
}
