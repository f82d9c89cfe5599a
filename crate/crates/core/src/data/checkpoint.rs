//! Binary checkpoints.
//!
//! ```text
//! "RCNN1" | u16 version | u8 kind | u32 n + config text (n bytes)
//! u32 tensor count | per tensor: u32 n + name, u8 rank, u32 dims.., f32 payload
//! ```
//!
//! All integers and floats are little-endian. The config block is the
//! canonical `key=value` rendering of the model config plus the vocabulary
//! (`vocab`, space separated) and, when known, the training seed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{render_key_values, KeyValues};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::rescnn::{ResCnn, ResCnnConfig};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;
use crate::transformer::{Transformer, TransformerConfig};

const MAGIC: &[u8; 5] = b"RCNN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u16,
    pub kind: ModelKind,
    pub config: KeyValues,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: Option<u64>) -> Result<Self> {
        let mut config = match model {
            Model::ResCnn(m) => m.config.to_key_values(),
            Model::Transformer(m) => m.config.to_key_values(),
        };
        let enc = model.encoder();
        if let Some(t) = enc.vocab().tokens().iter().find(|t| t.chars().any(char::is_whitespace)) {
            return Err(Error::Invalid(format!("vocabulary token {t:?} contains whitespace")));
        }
        config.insert("vocab".into(), enc.vocab().tokens().join(" "));
        if let Some(seed) = seed {
            config.insert("seed".into(), seed.to_string());
        }
        let tensors = enc
            .parameters()
            .into_iter()
            .map(|p| (p.name, p.tensor.clone()))
            .collect();
        Ok(Self {
            version: VERSION,
            kind: model.kind(),
            config,
            tensors,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.config.get("seed").and_then(|s| s.parse().ok())
    }

    /// Rebuilds the model, failing on missing, unknown or misshapen tensors.
    pub fn into_model(self) -> Result<Model> {
        let mut config = self.config;
        let vocab_text = config
            .remove("vocab")
            .ok_or_else(|| Error::Format("checkpoint config has no vocab".into()))?;
        config.remove("seed");
        let vocab = Vocab::from_tokens(vocab_text.split(' '))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = match self.kind {
            ModelKind::ResCnn => {
                let cfg = ResCnnConfig::from_checkpoint_values(&mut config)?;
                let placeholder = Tensor::zeros(&[vocab.len(), cfg.emb_dim]);
                Model::ResCnn(ResCnn::new(cfg, vocab, Some(placeholder), &mut rng)?)
            }
            ModelKind::Transformer => {
                let cfg = TransformerConfig::from_checkpoint_values(&mut config)?;
                Model::Transformer(Transformer::new(cfg, vocab, &mut rng)?)
            }
        };
        if let Some(k) = config.keys().next() {
            return Err(Error::Format(format!("unknown checkpoint config key {k:?}")));
        }
        let names: Vec<String> = model.encoder().parameters().into_iter().map(|p| p.name).collect();
        let mut stored: std::collections::HashMap<String, Tensor> = self.tensors.into_iter().collect();
        for (name, slot) in names.iter().zip(model.encoder_mut().parameters_mut()) {
            let t = stored
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(name) = stored.keys().min() {
            return Err(Error::Format(format!("unknown tensor name {name}")));
        }
        Ok(model)
    }

    pub fn into_kind(self, expected: ModelKind) -> Result<Model> {
        if self.kind != expected {
            return Err(Error::Format(format!(
                "checkpoint holds a {} model, not a {}",
                self.kind.name(),
                expected.name()
            )));
        }
        self.into_model()
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.push(ckpt.kind.code());
    put_bytes(&mut out, render_key_values(&ckpt.config).as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        put_bytes(&mut out, name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Invalid(format!("tensor {name} has too many dims")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

/// Canonical `key=value` lines; values may contain `#` and `=`.
fn parse_canonical(text: &str) -> Result<KeyValues> {
    let mut map = KeyValues::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad checkpoint config line {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint config key {k:?}")));
        }
    }
    Ok(map)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let code = r.u8()?;
    let kind = ModelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown model kind code {code}")))?;
    let config = parse_canonical(&r.string()?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        version,
        kind,
        config,
        tensors,
    })
}

/// SHA-256 of the checkpoint bytes; identifies the encoder an index was built with.
pub fn fingerprint(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Writes `model` to `path` and returns the fingerprint of the written bytes.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, seed: Option<u64>) -> Result<[u8; 32]> {
    let path = path.as_ref();
    let bytes = write_checkpoint(&Checkpoint::from_model(model, seed)?)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(fingerprint(&bytes))
}

/// Reads a checkpoint file, returning it with its fingerprint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Checkpoint, [u8; 32])> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = read_checkpoint(&bytes)?;
    Ok((ckpt, fingerprint(&bytes)))
}

/// Rounds every parameter to the nearest f32, the precision checkpoints store.
pub fn round_to_stored_precision(model: &mut Model) {
    for t in model.encoder_mut().parameters_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}
