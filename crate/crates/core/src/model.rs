//! What the trainer, the index and the probes need from an encoder.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rescnn::ResCnn;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{tokenize, TokenSequence, TokenizerConfig, Vocab};
use crate::transformer::{ScopeOptions, Transformer};

/// Texts encoded per trace during inference.
const ENCODE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResCnn,
    Transformer,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ResCnn => "rescnn",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ModelKind::ResCnn => 0,
            ModelKind::Transformer => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ModelKind::ResCnn),
            1 => Some(ModelKind::Transformer),
            _ => None,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rescnn" => Ok(ModelKind::ResCnn),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor,
    pub trainable: bool,
}

/// Evaluation-time switches. Training always uses the default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    pub scope: Option<ScopeOptions>,
}

pub trait Encoder: Sync {
    fn kind(&self) -> ModelKind;
    fn vocab(&self) -> &Vocab;
    fn tokenizer_config(&self) -> TokenizerConfig;
    fn output_dim(&self) -> usize;

    /// Parameters in a fixed order; [`Encoder::forward`] expects its leaves
    /// in the same order.
    fn parameters(&self) -> Vec<ParamRef<'_>>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Encodes a batch into a `batch x output_dim` matrix.
    fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        batch: &[&TokenSequence],
        opts: &EncodeOptions,
    ) -> Result<Var>;

    fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.vocab(), &self.tokenizer_config())
    }
}

/// Records every parameter as a leaf; frozen ones never require gradients.
pub fn bind_parameters<'a, E: Encoder + ?Sized>(model: &'a E, g: &mut Graph<'a>, with_grad: bool) -> Vec<Var> {
    model
        .parameters()
        .into_iter()
        .map(|p| g.leaf(p.tensor, with_grad && p.trainable))
        .collect()
}

/// Raw (unnormalized) encodings of already tokenized sequences.
pub fn encode_sequences<E: Encoder + ?Sized>(
    model: &E,
    seqs: &[TokenSequence],
    opts: &EncodeOptions,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = seqs
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let params = bind_parameters(model, &mut g, false);
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let out = model.forward(&mut g, &params, &refs, opts)?;
            let value = g.value(out);
            Ok((0..value.rows()).map(|r| value.row(r).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn encode_texts<E: Encoder + ?Sized, S: AsRef<str> + Sync>(
    model: &E,
    texts: &[S],
    opts: &EncodeOptions,
) -> Result<Vec<Vec<f64>>> {
    let seqs = texts
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if t.trim().is_empty() {
                return Err(Error::Invalid("cannot encode an empty text".into()));
            }
            Ok(model.tokenize(t))
        })
        .collect::<Result<Vec<_>>>()?;
    encode_sequences(model, &seqs, opts)
}

/// `φ(text)`: the raw vector of one text.
pub fn encode<E: Encoder + ?Sized>(model: &E, text: &str) -> Result<Vec<f64>> {
    Ok(encode_texts(model, &[text], &EncodeOptions::default())?.remove(0))
}

pub fn parameter_count<E: Encoder + ?Sized>(model: &E, trainable_only: bool) -> usize {
    model
        .parameters()
        .iter()
        .filter(|p| p.trainable || !trainable_only)
        .map(|p| p.tensor.len())
        .sum()
}

/// Either encoder, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    ResCnn(ResCnn),
    Transformer(Transformer),
}

impl Model {
    pub fn encoder(&self) -> &dyn Encoder {
        match self {
            Model::ResCnn(m) => m,
            Model::Transformer(m) => m,
        }
    }

    pub fn encoder_mut(&mut self) -> &mut dyn Encoder {
        match self {
            Model::ResCnn(m) => m,
            Model::Transformer(m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.encoder().kind()
    }
}
