//! A small pre-LayerNorm Transformer encoder with `[CLS]` pooling, used as
//! the attention baseline that the scope-restriction probe runs against.

use rand::Rng;

use crate::config::{put, take, tokenizer_from, tokenizer_into, KeyValues};
use crate::error::{Error, Result};
use crate::model::{EncodeOptions, Encoder, ModelKind, ParamRef};
use crate::rescnn::{PackedBatch, INIT_STD};
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenSequence, TokenizerConfig, Vocab};

const LN_EPS: f64 = 1e-5;
/// Parameter tensors per layer.
const PER_LAYER: usize = 15;

/// Which part of the `[CLS]` attention is freed at the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClsExemption {
    /// `[CLS]` attends to every position; nothing else changes.
    #[default]
    Row,
    /// Additionally every position may attend to `[CLS]`.
    RowAndColumn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScopeOptions {
    pub window: usize,
    pub cls_exemption: ClsExemption,
}

impl ScopeOptions {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            cls_exemption: ClsExemption::Row,
        }
    }
}

/// Additive `L x L` mask: 0 where `|i - j| <= window / 2`, `-inf`
/// elsewhere. At the last layer the `[CLS]` row is fully open.
pub fn build_scope_mask(
    len: usize,
    window: usize,
    is_last_layer: bool,
    cls_index: usize,
    exemption: ClsExemption,
) -> Result<Tensor> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Invalid(format!("attention window must be odd and positive, got {window}")));
    }
    let half = window / 2;
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            let open = i.abs_diff(j) <= half
                || (is_last_layer && i == cls_index)
                || (is_last_layer && exemption == ClsExemption::RowAndColumn && j == cls_index);
            if !open {
                data[i * len + j] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(Tensor::new(vec![len, len], data)?)
}

/// `softmax(Q K^T / sqrt(p) + mask) V` for one head; `p` is the head width.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
    let p = g.shape(q).get(1).copied().unwrap_or(1);
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (p as f64).sqrt())?;
    let weights = g.masked_softmax(scores, mask)?;
    Ok(g.matmul(weights, v)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub tokenizer: TokenizerConfig,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            ffn_dim: 512,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub(crate) fn from_key_values(map: &mut KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        Ok(Self {
            layers: take(map, &key("layers"), d.layers)?,
            heads: take(map, &key("heads"), d.heads)?,
            d_model: take(map, &key("d_model"), d.d_model)?,
            ffn_dim: take(map, &key("ffn_dim"), d.ffn_dim)?,
            tokenizer: d.tokenizer,
        })
    }

    pub(crate) fn write_key_values(&self, map: &mut KeyValues, prefix: &str) {
        let key = |k: &str| format!("{prefix}{k}");
        put(map, &key("layers"), self.layers);
        put(map, &key("heads"), self.heads);
        put(map, &key("d_model"), self.d_model);
        put(map, &key("ffn_dim"), self.ffn_dim);
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut map = KeyValues::new();
        tokenizer_into(&self.tokenizer, &mut map);
        self.write_key_values(&mut map, "");
        map
    }

    pub fn from_checkpoint_values(map: &mut KeyValues) -> Result<Self> {
        let tokenizer = tokenizer_from(map)?;
        let mut cfg = Self::from_key_values(map, "")?;
        cfg.tokenizer = tokenizer;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    /// No key bias: it shifts every score in a row equally and so never
    /// affects attention.
    pub k_weight: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn_in_weight: Tensor,
    pub ffn_in_bias: Tensor,
    pub ffn_out_weight: Tensor,
    pub ffn_out_bias: Tensor,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let ones = || Tensor::vector(vec![1.0; d]);
        Self {
            ln1_gain: ones(),
            ln1_bias: Tensor::zeros(&[d]),
            q_weight: Tensor::randn(&[d, d], INIT_STD, rng),
            q_bias: Tensor::zeros(&[d]),
            k_weight: Tensor::randn(&[d, d], INIT_STD, rng),
            v_weight: Tensor::randn(&[d, d], INIT_STD, rng),
            v_bias: Tensor::zeros(&[d]),
            out_weight: Tensor::randn(&[d, d], INIT_STD, rng),
            out_bias: Tensor::zeros(&[d]),
            ln2_gain: ones(),
            ln2_bias: Tensor::zeros(&[d]),
            ffn_in_weight: Tensor::randn(&[d, f], INIT_STD, rng),
            ffn_in_bias: Tensor::zeros(&[f]),
            ffn_out_weight: Tensor::randn(&[f, d], INIT_STD, rng),
            ffn_out_bias: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); PER_LAYER] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.q.weight", &self.q_weight),
            ("attn.q.bias", &self.q_bias),
            ("attn.k.weight", &self.k_weight),
            ("attn.v.weight", &self.v_weight),
            ("attn.v.bias", &self.v_bias),
            ("attn.out.weight", &self.out_weight),
            ("attn.out.bias", &self.out_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.in.weight", &self.ffn_in_weight),
            ("ffn.in.bias", &self.ffn_in_bias),
            ("ffn.out.weight", &self.ffn_out_weight),
            ("ffn.out.bias", &self.ffn_out_bias),
        ]
    }

    fn all_mut(&mut self) -> [&mut Tensor; PER_LAYER] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.q_weight,
            &mut self.q_bias,
            &mut self.k_weight,
            &mut self.v_weight,
            &mut self.v_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ffn_in_weight,
            &mut self.ffn_in_bias,
            &mut self.ffn_out_weight,
            &mut self.ffn_out_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub vocab: Vocab,
    pub token_embedding: Tensor,
    /// Learned absolute positions, `max_len x d_model`.
    pub position_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = Tensor::randn(&[vocab.len(), d], INIT_STD, rng);
        let position_embedding = Tensor::randn(&[config.tokenizer.max_len, d], INIT_STD, rng);
        let layers = (0..config.layers).map(|_| LayerParams::init(&config, rng)).collect();
        Ok(Self {
            config,
            vocab,
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::vector(vec![1.0; d]),
            final_bias: Tensor::zeros(&[d]),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph<'_>,
        q: Var,
        k: Var,
        v: Var,
        packed: &PackedBatch,
        scope: Option<&ScopeOptions>,
        is_last: bool,
    ) -> Result<Var> {
        let p = self.config.head_dim();
        let mut per_segment = Vec::with_capacity(packed.segments.len());
        for seg in &packed.segments {
            let mask = scope
                .map(|s| build_scope_mask(seg.len(), s.window, is_last, 0, s.cls_exemption))
                .transpose()?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let cols = h * p..(h + 1) * p;
                let qh = g.slice(q, seg.clone(), cols.clone())?;
                let kh = g.slice(k, seg.clone(), cols.clone())?;
                let vh = g.slice(v, seg.clone(), cols)?;
                heads.push(attention(g, qh, kh, vh, mask.as_ref())?);
            }
            per_segment.push(g.concat_cols(&heads)?);
        }
        Ok(g.concat_rows(&per_segment)?)
    }
}

impl Encoder for Transformer {
    fn kind(&self) -> ModelKind {
        ModelKind::Transformer
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn tokenizer_config(&self) -> TokenizerConfig {
        self.config.tokenizer
    }

    fn output_dim(&self) -> usize {
        self.config.d_model
    }

    fn parameters(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![
            ParamRef {
                name: "token_embedding".into(),
                tensor: &self.token_embedding,
                trainable: true,
            },
            ParamRef {
                name: "position_embedding".into(),
                tensor: &self.position_embedding,
                trainable: true,
            },
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, tensor) in layer.named() {
                out.push(ParamRef {
                    name: format!("layers.{i}.{name}"),
                    tensor,
                    trainable: true,
                });
            }
        }
        out.push(ParamRef {
            name: "final_ln.gain".into(),
            tensor: &self.final_gain,
            trainable: true,
        });
        out.push(ParamRef {
            name: "final_ln.bias".into(),
            tensor: &self.final_bias,
            trainable: true,
        });
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.all_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        batch: &[&TokenSequence],
        opts: &EncodeOptions,
    ) -> Result<Var> {
        if params.len() != 4 + PER_LAYER * self.config.layers {
            return Err(Error::Invalid(format!(
                "expected {} parameter leaves, got {}",
                4 + PER_LAYER * self.config.layers,
                params.len()
            )));
        }
        let packed = PackedBatch::new(batch);
        let positions: Vec<usize> = packed.segments.iter().flat_map(|s| 0..s.len()).collect();
        let tok = g.gather_rows(params[0], &packed.ids)?;
        let pos = g.gather_rows(params[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let n_layers = self.config.layers;
        for li in 0..n_layers {
            let p = &params[2 + PER_LAYER * li..2 + PER_LAYER * (li + 1)];
            let h = g.layer_norm(x, p[0], p[1], LN_EPS)?;
            let q = g.linear(h, p[2], p[3])?;
            let k = g.matmul(h, p[4])?;
            let v = g.linear(h, p[5], p[6])?;
            let o = self.attention_block(g, q, k, v, &packed, opts.scope.as_ref(), li + 1 == n_layers)?;
            let o = g.linear(o, p[7], p[8])?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, p[9], p[10], LN_EPS)?;
            let f = g.linear(h, p[11], p[12])?;
            let f = g.relu(f)?;
            let f = g.linear(f, p[13], p[14])?;
            x = g.add(x, f)?;
        }
        let last = 2 + PER_LAYER * n_layers;
        let x = g.layer_norm(x, params[last], params[last + 1], LN_EPS)?;
        let cls_rows: Vec<usize> = packed.segments.iter().map(|s| s.start).collect();
        Ok(g.gather_rows(x, &cls_rows)?)
    }
}
