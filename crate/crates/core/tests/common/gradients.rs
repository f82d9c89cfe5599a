//! Finite-difference cases: every tape primitive, the encoder components
//! and the training loss, each a function of a seed.

use std::ops::Range;

use rand::Rng;
use rescnn::model::{EncodeOptions, Encoder};
use rescnn::rescnn::{
    encoding_block, pool_max, pool_self_attention, BlockVars, Pooling, PoolVars, ResCnn, ResCnnConfig,
};
use rescnn::tensor::{finite_difference_check, CheckOptions, GradCheckReport, Graph, Tensor, Var};
use rescnn::tokenizer::TokenSequence;
use rescnn::training::contrastive_loss;
use rescnn::transformer::{attention, build_scope_mask, ClsExemption, Transformer, TransformerConfig};
use rescnn::Result;

use super::{letter_vocab, rng};

pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

fn opts(seed: u64) -> CheckOptions {
    CheckOptions {
        seed,
        ..CheckOptions::default()
    }
}

fn sampled(seed: u64, per_tensor: usize) -> CheckOptions {
    CheckOptions {
        seed,
        max_coords: Some(per_tensor),
        ..CheckOptions::default()
    }
}

fn randn(shape: &[usize], seed: u64, salt: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed * 1000 + salt))
}

/// `sum(out * R)` for a fixed random `R`, so every output entry matters.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> std::result::Result<Var, rescnn::tensor::TensorError> {
    let r = randn(g.shape(out), seed, 999);
    let rv = g.input(r);
    let y = g.mul(out, rv)?;
    g.sum(y)
}

macro_rules! primitive {
    ($name:literal, [$($shape:expr),*], |$g:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            run: |seed| {
                let shapes: Vec<Vec<usize>> = vec![$($shape.to_vec()),*];
                let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| randn(s, seed, i as u64)).collect();
                finite_difference_check(
                    |$g: &mut Graph<'_>, $v: &[Var]| -> Result<Var> {
                        let out = $body?;
                        Ok(project($g, out, seed)?)
                    },
                    &inputs,
                    &opts(seed),
                )
            },
        }
    };
}

const SEGS: [Range<usize>; 2] = [0..2, 2..7];

fn scope_mask() -> Tensor {
    build_scope_mask(5, 3, false, 0, ClsExemption::Row).unwrap()
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        primitive!("matmul", [[3, 4], [4, 5]], |g, v| g.matmul(v[0], v[1])),
        primitive!("matmul_t", [[3, 4], [5, 4]], |g, v| g.matmul_t(v[0], v[1])),
        primitive!("add_bias", [[3, 4], [4]], |g, v| g.add_bias(v[0], v[1])),
        primitive!("linear", [[3, 4], [4, 2], [2]], |g, v| g.linear(v[0], v[1], v[2])),
        primitive!("add", [[3, 4], [3, 4]], |g, v| g.add(v[0], v[1])),
        primitive!("mul", [[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1])),
        primitive!("scale", [[3, 4]], |g, v| g.scale(v[0], -0.7)),
        primitive!("relu", [[4, 5]], |g, v| g.relu(v[0])),
        primitive!("tanh", [[4, 5]], |g, v| g.tanh(v[0])),
        primitive!("conv1d_same", [[6, 3], [3, 3, 2], [2]], |g, v| g.conv1d_same(v[0], v[1], v[2])),
        primitive!("conv1d_segments", [[7, 3], [5, 3, 2], [2]], |g, v| g.conv1d_segments(v[0], v[1], v[2], &SEGS)),
        primitive!("concat_cols", [[3, 2], [3, 4]], |g, v| g.concat_cols(&[v[0], v[1]])),
        primitive!("concat_rows", [[2, 3], [4, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        primitive!("slice", [[5, 6]], |g, v| g.slice(v[0], 1..4, 2..5)),
        primitive!("gather_rows", [[5, 3]], |g, v| g.gather_rows(v[0], &[0, 2, 2, 4])),
        primitive!("segment_max", [[7, 3]], |g, v| g.segment_max(v[0], &SEGS)),
        primitive!("segment_softmax", [[7, 1]], |g, v| g.segment_softmax(v[0], &SEGS)),
        primitive!("segment_weighted_sum", [[7, 1], [7, 3]], |g, v| g.segment_weighted_sum(v[0], v[1], &SEGS)),
        primitive!("softmax", [[4, 5]], |g, v| g.masked_softmax(v[0], None)),
        primitive!("masked_softmax", [[5, 5]], |g, v| g.masked_softmax(v[0], Some(&scope_mask()))),
        primitive!("normalize_rows", [[3, 4]], |g, v| g.normalize_rows(v[0])),
        primitive!("layer_norm", [[3, 4], [4], [4]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        primitive!("cross_entropy", [[3, 4]], |g, v| g.cross_entropy(v[0], &[0, 3, 1])),
        primitive!("sum", [[3, 4]], |g, v| g.sum(v[0])),
        primitive!("attention", [[5, 4], [5, 4], [5, 3]], |g, v| attention(g, v[0], v[1], v[2], None)),
        primitive!("scoped_attention", [[5, 4], [5, 4], [5, 3]], |g, v| attention(
            g,
            v[0],
            v[1],
            v[2],
            Some(&scope_mask())
        )),
    ]
}

fn small_rescnn(pooling: Pooling, seed: u64) -> ResCnn {
    let cfg = ResCnnConfig {
        emb_dim: 5,
        d_model: 6,
        n_blocks: 2,
        kernel_widths: vec![1, 3, 5],
        filters: 2,
        pooling,
        freeze_embeddings: false,
        ..ResCnnConfig::default()
    };
    let mut m = ResCnn::new(cfg, letter_vocab(), None, &mut rng(seed)).unwrap();
    // Larger weights than the 0.02 initializer (but short of saturating tanh) so every path carries signal.
    for t in m.parameters_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, 0.3, &mut rng(seed + t.len() as u64));
    }
    m
}

fn small_transformer(seed: u64) -> Transformer {
    let cfg = TransformerConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        ffn_dim: 12,
        ..TransformerConfig::default()
    };
    let mut m = Transformer::new(cfg, letter_vocab(), &mut rng(seed)).unwrap();
    for t in m.parameters_mut() {
        let shape = t.shape().to_vec();
        let noise = Tensor::randn(&shape, 0.3, &mut rng(seed + 7 * t.len() as u64));
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    m
}

/// Random lowercase text of `len` single-letter words.
fn random_text(len: usize, seed: u64) -> String {
    let mut r = rng(seed);
    (0..len)
        .map(|_| ((b'a' + r.random_range(0..26u8)) as char).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Checks every trainable parameter of `model` through `loss(model output)`.
fn check_model<E: Encoder>(
    model: &E,
    batches: &[Vec<TokenSequence>],
    loss: fn(&mut Graph<'_>, &[Var], u64) -> Result<Var>,
    seed: u64,
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = model
        .parameters()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.tensor.clone())
        .collect();
    finite_difference_check(
        |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> {
            let outs = batches
                .iter()
                .map(|b| {
                    let refs: Vec<&TokenSequence> = b.iter().collect();
                    model.forward(g, v, &refs, &EncodeOptions::default())
                })
                .collect::<Result<Vec<_>>>()?;
            loss(g, &outs, seed)
        },
        &inputs,
        opts,
    )
}

fn projected(g: &mut Graph<'_>, outs: &[Var], seed: u64) -> Result<Var> {
    Ok(project(g, outs[0], seed)?)
}

fn contrastive(g: &mut Graph<'_>, outs: &[Var], _seed: u64) -> Result<Var> {
    contrastive_loss(g, outs[0], outs[1], 0.5)
}

fn texts<E: Encoder>(model: &E, n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    (0..n).map(|i| model.tokenize(&random_text(len, seed * 31 + i as u64))).collect()
}

fn block_case(seed: u64) -> Result<GradCheckReport> {
    let (d, f) = (6, 2);
    let widths = [1, 3, 5];
    let mut inputs = vec![randn(&[7, d], seed, 0)];
    for (i, k) in widths.iter().enumerate() {
        inputs.push(randn(&[*k, d, f], seed, 10 + i as u64));
        inputs.push(randn(&[f], seed, 20 + i as u64));
    }
    inputs.push(randn(&[d, d], seed, 30));
    inputs.push(randn(&[d], seed, 31));
    finite_difference_check(
        |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> {
            let block = BlockVars {
                conv_weights: vec![v[1], v[3], v[5]],
                conv_biases: vec![v[2], v[4], v[6]],
                ffn_weight: v[7],
                ffn_bias: v[8],
            };
            let h = encoding_block(g, v[0], &block, &SEGS)?;
            Ok(project(g, h, seed)?)
        },
        &inputs,
        &opts(seed),
    )
}

fn max_pool_case(seed: u64) -> Result<GradCheckReport> {
    finite_difference_check(
        |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> {
            let p = pool_max(g, v[0], &[1..2, 3..6])?;
            Ok(project(g, p, seed)?)
        },
        &[randn(&[7, 4], seed, 0)],
        &opts(seed),
    )
}

fn attention_pool_case(seed: u64) -> Result<GradCheckReport> {
    let inputs = [
        randn(&[7, 4], seed, 0),
        randn(&[4, 4], seed, 1),
        randn(&[4], seed, 2),
        randn(&[4, 1], seed, 3),
    ];
    finite_difference_check(
        |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> {
            let pool = PoolVars {
                weight: v[1],
                bias: v[2],
                context: v[3],
            };
            let p = pool_self_attention(g, v[0], &[1..2, 3..6], &pool)?;
            Ok(project(g, p, seed)?)
        },
        &inputs,
        &opts(seed),
    )
}

fn rescnn_case(pooling: Pooling, seed: u64) -> Result<GradCheckReport> {
    let m = small_rescnn(pooling, seed);
    let batch = vec![m.tokenize(&random_text(6, seed))];
    check_model(&m, &[batch], projected, seed, &opts(seed))
}

fn transformer_case(seed: u64) -> Result<GradCheckReport> {
    let m = small_transformer(seed);
    let batch = texts(&m, 2, 5, seed);
    check_model(&m, &[batch], projected, seed, &opts(seed))
}

pub fn component_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "encoding_block",
            run: block_case,
        },
        GradCase {
            name: "max_pooling",
            run: max_pool_case,
        },
        GradCase {
            name: "attention_pooling",
            run: attention_pool_case,
        },
        GradCase {
            name: "rescnn_max",
            run: |s| rescnn_case(Pooling::Max, s),
        },
        GradCase {
            name: "rescnn_attention",
            run: |s| rescnn_case(Pooling::SelfAttention, s),
        },
        GradCase {
            name: "transformer",
            run: transformer_case,
        },
        GradCase {
            name: "contrastive_loss",
            // At tau = 0.05 random vectors give near one-hot softmax rows whose
            // gradients sit below f64 roundoff; tau only scales the logits.
            run: |seed| {
                let inputs = [randn(&[3, 5], seed, 0), randn(&[3, 5], seed, 1)];
                finite_difference_check(
                    |g: &mut Graph<'_>, v: &[Var]| -> Result<Var> { contrastive_loss(g, v[0], v[1], 0.5) },
                    &inputs,
                    &opts(seed),
                )
            },
        },
        GradCase {
            name: "contrastive_loss_through_rescnn",
            run: |seed| {
                let m = small_rescnn(Pooling::SelfAttention, seed);
                let batches = [texts(&m, 3, 4, seed), texts(&m, 3, 4, seed + 100)];
                check_model(&m, &batches, contrastive, seed, &opts(seed))
            },
        },
        GradCase {
            name: "contrastive_loss_through_transformer",
            run: |seed| {
                let m = small_transformer(seed);
                let batches = [texts(&m, 3, 4, seed), texts(&m, 3, 4, seed + 100)];
                check_model(&m, &batches, contrastive, seed, &opts(seed))
            },
        },
    ]
}

/// Full-size models, a sampled subset of coordinates per parameter tensor.
pub fn default_size_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "rescnn_default_max",
            run: |seed| default_rescnn(Pooling::Max, seed),
        },
        GradCase {
            name: "rescnn_default_attention",
            run: |seed| default_rescnn(Pooling::SelfAttention, seed),
        },
        GradCase {
            name: "transformer_default",
            run: |seed| {
                let m = Transformer::new(TransformerConfig::default(), letter_vocab(), &mut rng(seed))?;
                let batch = vec![m.tokenize(&random_text(6, seed))];
                check_model(&m, &[batch], projected, seed, &sampled(seed, 4))
            },
        },
    ]
}

/// Redraws weights with std `1/sqrt(fan_in)` and vectors with std 0.1.
/// Under the 0.02 initializer some gradients of a full-size model are near
/// 1e-9, below what central differences resolve in f64.
fn fan_in_scale<E: Encoder>(model: &mut E, seed: u64) {
    for (i, t) in model.parameters_mut().into_iter().enumerate() {
        let shape = t.shape().to_vec();
        let std = match shape.len() {
            1 => 0.1,
            _ => 1.0 / ((t.len() / shape[shape.len() - 1]) as f64).sqrt(),
        };
        *t = Tensor::randn(&shape, std, &mut rng(seed * 7919 + i as u64));
    }
}

fn default_rescnn(pooling: Pooling, seed: u64) -> Result<GradCheckReport> {
    let cfg = ResCnnConfig {
        pooling,
        freeze_embeddings: false,
        ..ResCnnConfig::default()
    };
    let mut m = ResCnn::new(cfg, letter_vocab(), None, &mut rng(seed))?;
    fan_in_scale(&mut m, seed);
    let batch = vec![m.tokenize(&random_text(6, seed))];
    check_model(&m, &[batch], projected, seed, &sampled(seed, 4))
}

pub fn all_cases() -> Vec<GradCase> {
    let mut cases = primitive_cases();
    cases.extend(component_cases());
    cases.extend(default_size_cases());
    cases
}



