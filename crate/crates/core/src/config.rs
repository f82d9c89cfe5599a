//! Flat `key = value` configuration.
//!
//! The same grammar is used for run configuration files (with `#`
//! comments) and, in canonical form (`key=value`, sorted, one per line),
//! for the configuration block stored in checkpoints.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rescnn::{Pooling, ResCnnConfig};
use crate::tokenizer::TokenizerConfig;
use crate::training::TrainConfig;
use crate::transformer::TransformerConfig;

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut map = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(map)
}

pub fn render_key_values(map: &KeyValues) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Removes `key` and parses it, falling back to `default`.
pub fn take<T>(map: &mut KeyValues, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}"))),
    }
}

pub fn take_list(map: &mut KeyValues, key: &str, default: Vec<usize>) -> Result<Vec<usize>> {
    match map.remove(key) {
        None => Ok(default),
        Some(v) => v
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}")))
            })
            .collect(),
    }
}

pub fn reject_leftovers(map: &KeyValues) -> Result<()> {
    match map.keys().next() {
        Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
        None => Ok(()),
    }
}

pub(crate) fn put(map: &mut KeyValues, key: &str, value: impl ToString) {
    map.insert(key.to_string(), value.to_string());
}

pub(crate) fn tokenizer_from(map: &mut KeyValues) -> Result<TokenizerConfig> {
    let d = TokenizerConfig::default();
    let cfg = TokenizerConfig {
        max_len: take(map, "max_len", d.max_len)?,
        lowercase: take(map, "lowercase", d.lowercase)?,
    };
    if cfg.max_len < 3 {
        return Err(Error::Config("max_len must be at least 3".into()));
    }
    Ok(cfg)
}

pub(crate) fn tokenizer_into(cfg: &TokenizerConfig, map: &mut KeyValues) {
    put(map, "max_len", cfg.max_len);
    put(map, "lowercase", cfg.lowercase);
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub rescnn: ResCnnConfig,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
}


impl RunConfig {
    pub fn from_key_values(mut map: KeyValues) -> Result<Self> {
        let tokenizer = tokenizer_from(&mut map)?;
        let mut rescnn = ResCnnConfig::from_key_values(&mut map, "rescnn.")?;
        rescnn.tokenizer = tokenizer;
        let mut transformer = TransformerConfig::from_key_values(&mut map, "transformer.")?;
        transformer.tokenizer = tokenizer;
        let train = TrainConfig::from_key_values(&mut map)?;
        reject_leftovers(&map)?;
        rescnn.validate()?;
        transformer.validate()?;
        train.validate()?;
        Ok(Self {
            rescnn,
            transformer,
            train,
        })
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut map = KeyValues::new();
        tokenizer_into(&self.rescnn.tokenizer, &mut map);
        self.rescnn.write_key_values(&mut map, "rescnn.");
        self.transformer.write_key_values(&mut map, "transformer.");
        self.train.write_key_values(&mut map);
        map
    }

    /// Parses a config file body and applies `overrides` on top.
    pub fn from_text_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut map = parse_key_values(text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_key_values(map)
    }

    pub fn canonical_text(&self) -> String {
        render_key_values(&self.to_key_values())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "attention" | "self-attention" | "self_attention" => Ok(Pooling::SelfAttention),
            other => Err(Error::Config(format!("unknown pooling {other:?} (max|attention)"))),
        }
    }
}

impl Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::SelfAttention => "attention",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let map = parse_key_values("# run\ntrain.lr = 0.01  # faster\n\nmax_len=16\r\n").unwrap();
        assert_eq!(map["train.lr"], "0.01");
        assert_eq!(map["max_len"], "16");
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let err = RunConfig::from_text_with_overrides("train.lrr = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("train.lrr"), "{err}");
        assert!(parse_key_values("a=1\na=2\n").is_err());
        assert!(parse_key_values("just words\n").is_err());
    }

    #[test]
    fn overrides_win_and_round_trip() {
        let cfg = RunConfig::from_text_with_overrides(
            "train.epochs = 3\nrescnn.pooling = attention\n",
            &[("train.epochs".into(), "5".into())],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.rescnn.pooling, Pooling::SelfAttention);
        let again = RunConfig::from_key_values(parse_key_values(&cfg.canonical_text()).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.rescnn.n_blocks, 4);
        assert_eq!(cfg.rescnn.tokenizer.max_len, 25);
        assert_eq!(cfg, RunConfig::from_key_values(KeyValues::new()).unwrap());
    }
}
