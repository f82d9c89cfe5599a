//! The residual convolutional text encoder.
//!
//! ```text
//! tokens -> embedding table (frozen by default) -> linear 768 -> 300
//!        -> N x encoding block -> pooling over content positions
//!
//! encoding block:  H -> [conv_k(H) for k in widths] -> concat -> ReLU
//!                    -> position-wise linear -> + H
//! ```

use std::ops::Range;

use rand::Rng;

use crate::config::{put, take, take_list, tokenizer_from, tokenizer_into, KeyValues};
use crate::error::{Error, Result};
use crate::model::{EncodeOptions, Encoder, ModelKind, ParamRef};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::tokenizer::{TokenSequence, TokenizerConfig, Vocab};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    SelfAttention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResCnnConfig {
    pub emb_dim: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub kernel_widths: Vec<usize>,
    /// Filters per kernel width.
    pub filters: usize,
    pub pooling: Pooling,
    pub freeze_embeddings: bool,
    pub tokenizer: TokenizerConfig,
}

impl Default for ResCnnConfig {
    fn default() -> Self {
        Self {
            emb_dim: 768,
            d_model: 300,
            n_blocks: 4,
            kernel_widths: vec![1, 3, 5],
            filters: 100,
            pooling: Pooling::Max,
            freeze_embeddings: true,
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl ResCnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_widths.is_empty() {
            return Err(Error::Config("rescnn needs at least one kernel width".into()));
        }
        if let Some(k) = self.kernel_widths.iter().find(|k| *k % 2 == 0) {
            return Err(Error::Config(format!("kernel width {k} is not odd")));
        }
        if self.filters * self.kernel_widths.len() != self.d_model {
            return Err(Error::Config(format!(
                "{} widths x {} filters must equal d_model {} for the residual sum",
                self.kernel_widths.len(),
                self.filters,
                self.d_model
            )));
        }
        if self.emb_dim == 0 || self.d_model == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form count of trainable parameters, embedding table excluded.
    pub fn trainable_parameter_count(&self) -> usize {
        let d = self.d_model;
        let projection = self.emb_dim * d + d;
        let conv: usize = self
            .kernel_widths
            .iter()
            .map(|k| k * d * self.filters + self.filters)
            .sum();
        let ffn = d * d + d;
        let pool = match self.pooling {
            Pooling::Max => 0,
            Pooling::SelfAttention => d * d + d + d,
        };
        projection + self.n_blocks * (conv + ffn) + pool
    }

    pub(crate) fn from_key_values(map: &mut KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let key = |k: &str| format!("{prefix}{k}");
        Ok(Self {
            emb_dim: take(map, &key("emb_dim"), d.emb_dim)?,
            d_model: take(map, &key("d_model"), d.d_model)?,
            n_blocks: take(map, &key("blocks"), d.n_blocks)?,
            kernel_widths: take_list(map, &key("kernel_widths"), d.kernel_widths)?,
            filters: take(map, &key("filters"), d.filters)?,
            pooling: take(map, &key("pooling"), d.pooling)?,
            freeze_embeddings: take(map, &key("freeze_embeddings"), d.freeze_embeddings)?,
            tokenizer: d.tokenizer,
        })
    }

    pub(crate) fn write_key_values(&self, map: &mut KeyValues, prefix: &str) {
        let key = |k: &str| format!("{prefix}{k}");
        put(map, &key("emb_dim"), self.emb_dim);
        put(map, &key("d_model"), self.d_model);
        put(map, &key("blocks"), self.n_blocks);
        let widths: Vec<String> = self.kernel_widths.iter().map(|k| k.to_string()).collect();
        put(map, &key("kernel_widths"), widths.join(","));
        put(map, &key("filters"), self.filters);
        put(map, &key("pooling"), self.pooling);
        put(map, &key("freeze_embeddings"), self.freeze_embeddings);
    }

    /// Model configuration as stored in a checkpoint.
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

/// Token embedding matrix, `V x emb_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// One `k x d_model x filters` bank per kernel width.
    pub conv_weights: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    pub ffn_weight: Tensor,
    pub ffn_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Context vector, stored as a `d_model x 1` column.
    pub context: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResCnnParams {
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub blocks: Vec<BlockParams>,
    pub attention_pool: Option<AttentionPoolParams>,
}

impl ResCnnParams {
    pub fn init<R: Rng + ?Sized>(config: &ResCnnConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let blocks = (0..config.n_blocks)
            .map(|_| BlockParams {
                conv_weights: config
                    .kernel_widths
                    .iter()
                    .map(|&k| Tensor::randn(&[k, d, config.filters], INIT_STD, rng))
                    .collect(),
                conv_biases: config.kernel_widths.iter().map(|_| Tensor::zeros(&[config.filters])).collect(),
                ffn_weight: Tensor::randn(&[d, d], INIT_STD, rng),
                ffn_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let attention_pool = (config.pooling == Pooling::SelfAttention).then(|| AttentionPoolParams {
            weight: Tensor::randn(&[d, d], INIT_STD, rng),
            bias: Tensor::zeros(&[d]),
            context: Tensor::randn(&[d, 1], INIT_STD, rng),
        });
        Self {
            proj_weight: Tensor::randn(&[config.emb_dim, d], INIT_STD, rng),
            proj_bias: Tensor::zeros(&[d]),
            blocks,
            attention_pool,
        }
    }
}

/// Leaves of one encoding block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub conv_weights: Vec<Var>,
    pub conv_biases: Vec<Var>,
    pub ffn_weight: Var,
    pub ffn_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub weight: Var,
    pub bias: Var,
    pub context: Var,
}

/// Sequences packed along rows: pads dropped, one segment per sequence.
#[derive(Debug, Clone, Default)]
pub struct PackedBatch {
    pub ids: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    /// Rows that pooling may look at (content tokens only).
    pub content: Vec<Range<usize>>,
}

impl PackedBatch {
    pub fn new(batch: &[&TokenSequence]) -> Self {
        let mut packed = PackedBatch::default();
        for seq in batch {
            let start = packed.ids.len();
            packed.ids.extend(seq.valid().iter().map(|&i| i as usize));
            let range = seq.content_range();
            packed.segments.push(start..packed.ids.len());
            packed.content.push(start + range.start..start + range.end);
        }
        packed
    }
}

/// Embedding rows for one sequence (pads included), `L x emb_dim`.
pub fn embed(g: &mut Graph<'_>, table: Var, tokens: &TokenSequence) -> Result<Var> {
    let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
    Ok(g.gather_rows(table, &ids)?)
}

/// One residual block over packed sequences: `H + FFN(ReLU(concat_k conv_k(H)))`.
pub fn encoding_block(g: &mut Graph<'_>, h: Var, block: &BlockVars, segments: &[Range<usize>]) -> Result<Var> {
    let convs = block
        .conv_weights
        .iter()
        .zip(&block.conv_biases)
        .map(|(&w, &b)| g.conv1d_segments(h, w, b, segments))
        .collect::<std::result::Result<Vec<_>, TensorError>>()?;
    let c = g.concat_cols(&convs)?;
    let a = g.relu(c)?;
    let f = g.linear(a, block.ffn_weight, block.ffn_bias)?;
    Ok(g.add(h, f)?)
}

/// Per-channel maximum over the valid rows of each group.
pub fn pool_max(g: &mut Graph<'_>, h: Var, valid: &[Range<usize>]) -> Result<Var> {
    Ok(g.segment_max(h, valid)?)
}

/// `s_t = v . tanh(W h_t + b)`, `alpha = softmax(s)` over the valid rows of
/// each group, output `sum_t alpha_t h_t`.
pub fn pool_self_attention(g: &mut Graph<'_>, h: Var, valid: &[Range<usize>], pool: &PoolVars) -> Result<Var> {
    let alpha = attention_pool_weights(g, h, valid, pool)?;
    Ok(g.segment_weighted_sum(alpha, h, valid)?)
}

/// The attention weights used by [`pool_self_attention`], as a column.
pub fn attention_pool_weights(g: &mut Graph<'_>, h: Var, valid: &[Range<usize>], pool: &PoolVars) -> Result<Var> {
    let u = g.linear(h, pool.weight, pool.bias)?;
    let u = g.tanh(u)?;
    let scores = g.matmul(u, pool.context)?;
    Ok(g.segment_softmax(scores, valid)?)
}

/// The full encoder: vocabulary, embedding table, trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ResCnn {
    pub config: ResCnnConfig,
    pub vocab: Vocab,
    pub embedding: EmbeddingTable,
    pub params: ResCnnParams,
}

impl ResCnn {
    /// Random initialization. `embeddings` (a pretrained `V x emb_dim`
    /// table) is used when given; otherwise the table is sampled too.
    pub fn new<R: Rng + ?Sized>(
        config: ResCnnConfig,
        vocab: Vocab,
        embeddings: Option<Tensor>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let weights = match embeddings {
            Some(t) => {
                if t.shape() != [vocab.len(), config.emb_dim] {
                    return Err(Error::Invalid(format!(
                        "embedding table has shape {:?}, expected [{}, {}]",
                        t.shape(),
                        vocab.len(),
                        config.emb_dim
                    )));
                }
                t
            }
            None => Tensor::randn(&[vocab.len(), config.emb_dim], INIT_STD, rng),
        };
        let params = ResCnnParams::init(&config, rng);
        let frozen = config.freeze_embeddings;
        Ok(Self {
            config,
            vocab,
            embedding: EmbeddingTable { weights, frozen },
            params,
        })
    }

    fn param_list(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding.weights),
            ("projection.weight".to_string(), &self.params.proj_weight),
            ("projection.bias".to_string(), &self.params.proj_bias),
        ];
        for (i, b) in self.params.blocks.iter().enumerate() {
            for (k, (w, bias)) in self.config.kernel_widths.iter().zip(b.conv_weights.iter().zip(&b.conv_biases)) {
                out.push((format!("blocks.{i}.conv{k}.weight"), w));
                out.push((format!("blocks.{i}.conv{k}.bias"), bias));
            }
            out.push((format!("blocks.{i}.ffn.weight"), &b.ffn_weight));
            out.push((format!("blocks.{i}.ffn.bias"), &b.ffn_bias));
        }
        if let Some(p) = &self.params.attention_pool {
            out.push(("pool.weight".to_string(), &p.weight));
            out.push(("pool.bias".to_string(), &p.bias));
            out.push(("pool.context".to_string(), &p.context));
        }
        out
    }
}

impl Encoder for ResCnn {
    fn kind(&self) -> ModelKind {
        ModelKind::ResCnn
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
        self.param_list()
            .into_iter()
            .map(|(name, tensor)| ParamRef {
                trainable: !(name == "embedding" && self.embedding.frozen),
                name,
                tensor,
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embedding.weights,
            &mut self.params.proj_weight,
            &mut self.params.proj_bias,
        ];
        for b in &mut self.params.blocks {
            for (w, bias) in b.conv_weights.iter_mut().zip(b.conv_biases.iter_mut()) {
                out.push(w);
                out.push(bias);
            }
            out.push(&mut b.ffn_weight);
            out.push(&mut b.ffn_bias);
        }
        if let Some(p) = &mut self.params.attention_pool {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
            out.push(&mut p.context);
        }
        out
    }

    fn forward(
        &self,
        g: &mut Graph<'_>,
        params: &[Var],
        batch: &[&TokenSequence],
        opts: &EncodeOptions,
    ) -> Result<Var> {
        if opts.scope.is_some() {
            return Err(Error::Unsupported(
                "attention-scope restriction needs an attention model; ResCNN has no attention to restrict".into(),
            ));
        }
        let mut it = params.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::Invalid("too few parameter leaves".into()));
        let table = next()?;
        let proj_w = next()?;
        let proj_b = next()?;
        let mut blocks = Vec::with_capacity(self.config.n_blocks);
        for _ in 0..self.config.n_blocks {
            let mut conv_weights = Vec::new();
            let mut conv_biases = Vec::new();
            for _ in &self.config.kernel_widths {
                conv_weights.push(next()?);
                conv_biases.push(next()?);
            }
            blocks.push(BlockVars {
                conv_weights,
                conv_biases,
                ffn_weight: next()?,
                ffn_bias: next()?,
            });
        }
        let pool = match self.config.pooling {
            Pooling::Max => None,
            Pooling::SelfAttention => Some(PoolVars {
                weight: next()?,
                bias: next()?,
                context: next()?,
            }),
        };

        let packed = PackedBatch::new(batch);
        let e = g.gather_rows(table, &packed.ids)?;
        let mut h = g.linear(e, proj_w, proj_b)?;
        for block in &blocks {
            h = encoding_block(g, h, block, &packed.segments)?;
        }
        match pool {
            None => pool_max(g, h, &packed.content),
            Some(p) => pool_self_attention(g, h, &packed.content, &p),
        }
    }
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init, clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::model::{encode, encode_sequences, parameter_count};
    use crate::tokenizer::{tokenize, CLS, PAD, SEP, UNK};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::from_tokens([PAD, UNK, CLS, SEP, "aspirin", "ibu", "##pro", "##fen", "acid"]).unwrap()
    }

    fn small_config(pooling: Pooling) -> ResCnnConfig {
        ResCnnConfig {
            emb_dim: 8,
            d_model: 6,
            n_blocks: 2,
            kernel_widths: vec![1, 3, 5],
            filters: 2,
            pooling,
            freeze_embeddings: true,
            tokenizer: TokenizerConfig::default(),
        }
    }

    #[test]
    fn default_parameter_budget() {
        let max = ResCnnConfig::default();
        assert_eq!(max.trainable_parameter_count(), 1_673_100);
        let attn = ResCnnConfig {
            pooling: Pooling::SelfAttention,
            ..ResCnnConfig::default()
        };
        assert_eq!(attn.trainable_parameter_count(), 1_763_700);
    }

    #[test]
    fn instantiated_count_matches_formula() {
        for pooling in [Pooling::Max, Pooling::SelfAttention] {
            let cfg = small_config(pooling);
            let m = ResCnn::new(cfg.clone(), vocab(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(parameter_count(&m, true), cfg.trainable_parameter_count());
            assert_eq!(parameter_count(&m, false), cfg.trainable_parameter_count() + 9 * 8);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(Pooling::Max);
        cfg.kernel_widths = vec![1, 2, 5];
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(Pooling::Max);
        cfg.filters = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_shapes_and_identical_rows() {
        let v = vocab();
        let table = Tensor::randn(&[v.len(), 768], 0.02, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let t = g.leaf(&table, false);
        let seq = tokenize("aspirin", &v, &TokenizerConfig::default());
        let e = embed(&mut g, t, &seq).unwrap();
        assert_eq!(g.shape(e), &[3, 768]);
        let seq = tokenize("acid acid", &v, &TokenizerConfig::default());
        let e = embed(&mut g, t, &seq).unwrap();
        assert_eq!(g.value(e).row(1), g.value(e).row(2));
        let bad = TokenSequence {
            ids: vec![99],
            has_specials: false,
            length: 1,
        };
        assert!(embed(&mut g, t, &bad).is_err());
    }

    fn zero_block(d: usize, widths: &[usize], filters: usize) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = Vec::new();
        for &k in widths {
            out.push(Tensor::zeros(&[k, d, filters]));
            out.push(Tensor::zeros(&[filters]));
        }
        out.push(Tensor::zeros(&[d, d]));
        out.push(Tensor::zeros(&[d]));
        out
    }

    fn block_vars(g: &mut Graph<'_>, tensors: Vec<Tensor>, widths: usize) -> BlockVars {
        let vars: Vec<Var> = tensors.into_iter().map(|t| g.param(t)).collect();
        BlockVars {
            conv_weights: (0..widths).map(|i| vars[2 * i]).collect(),
            conv_biases: (0..widths).map(|i| vars[2 * i + 1]).collect(),
            ffn_weight: vars[2 * widths],
            ffn_bias: vars[2 * widths + 1],
        }
    }

    #[test]
    fn zero_block_is_identity_and_keeps_shape() {
        for len in [1, 2, 25] {
            let h = Tensor::randn(&[len, 300], 1.0, &mut ChaCha8Rng::seed_from_u64(len as u64));
            let mut g = Graph::new();
            let hv = g.leaf(&h, false);
            let block = block_vars(&mut g, zero_block(300, &[1, 3, 5], 100), 3);
            let out = encoding_block(&mut g, hv, &block, &[0..len]).unwrap();
            assert_eq!(g.value(out), &h);
        }
    }

    #[test]
    fn pooling_examples() {
        let h = Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap();
        let mut g = Graph::new();
        let hv = g.leaf(&h, false);
        let m = pool_max(&mut g, hv, &[0..2]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let single = pool_max(&mut g, hv, &[1..2]).unwrap();
        assert_eq!(g.value(single).data(), h.row(1));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool = PoolVars {
            weight: g.param(Tensor::randn(&[2, 2], 1.0, &mut rng)),
            bias: g.param(Tensor::randn(&[2], 1.0, &mut rng)),
            context: g.param(Tensor::randn(&[2, 1], 1.0, &mut rng)),
        };
        let one = pool_self_attention(&mut g, hv, &[0..1], &pool).unwrap();
        assert_eq!(g.value(one).data(), h.row(0));

        let same = Tensor::from_rows(&[[0.5, -1.5], [0.5, -1.5], [0.5, -1.5]]).unwrap();
        let sv = g.leaf(&same, false);
        let out = pool_self_attention(&mut g, sv, &[0..3], &pool).unwrap();
        for (a, b) in g.value(out).data().iter().zip([0.5, -1.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let alpha = attention_pool_weights(&mut g, hv, &[0..2], &pool).unwrap();
        assert!((g.value(alpha).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(pool_max(&mut g, hv, &[0..0]).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_sized() {
        let m = ResCnn::new(small_config(Pooling::Max), vocab(), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = encode(&m, "ibuprofen").unwrap();
        let b = encode(&m, "ibuprofen").unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert!(encode(&m, "  ").is_err());
    }

    #[test]
    fn padding_does_not_change_the_encoding() {
        for pooling in [Pooling::Max, Pooling::SelfAttention] {
            let m = ResCnn::new(small_config(pooling), vocab(), None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let seq = m.tokenize("aspirin acid ibuprofen");
            let padded = seq.padded(20, &m.vocab);
            let out = encode_sequences(&m, &[seq, padded], &EncodeOptions::default()).unwrap();
            for (a, b) in out[0].iter().zip(&out[1]) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_blocks_reduce_to_pooled_projection() {
        let mut m = ResCnn::new(small_config(Pooling::Max), vocab(), None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for b in &mut m.params.blocks {
            for t in b.conv_weights.iter_mut().chain(b.conv_biases.iter_mut()) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            b.ffn_weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            b.ffn_bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let seq = m.tokenize("ibuprofen acid");
        let got = encode(&m, "ibuprofen acid").unwrap();
        // projection of each content embedding, then per-channel max, by hand
        let emb = &m.embedding.weights;
        let (w, b) = (&m.params.proj_weight, &m.params.proj_bias);
        let mut expected = vec![f64::NEG_INFINITY; 6];
        for &id in seq.content() {
            let row = emb.row(id as usize);
            for c in 0..6 {
                let mut v = b.data()[c];
                for (j, x) in row.iter().enumerate() {
                    v += x * w.data()[j * 6 + c];
                }
                expected[c] = expected[c].max(v);
            }
        }
        for (a, e) in got.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn scope_restriction_is_rejected() {
        let m = ResCnn::new(small_config(Pooling::Max), vocab(), None, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let opts = EncodeOptions {
            scope: Some(crate::transformer::ScopeOptions::new(3)),
        };
        let seq = m.tokenize("acid");
        assert!(matches!(
            encode_sequences(&m, &[seq], &opts),
            Err(Error::Unsupported(_))
        ));
    }
}
