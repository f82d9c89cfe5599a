//! In-batch contrastive training with Adam.

use std::collections::{HashSet, VecDeque};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{put, take, KeyValues, RunConfig};
use crate::data::checkpoint::round_to_stored_precision;
use crate::data::{Dataset, KnowledgeBase};
use crate::error::{Error, Result};
use crate::model::{bind_parameters, EncodeOptions, Encoder, Model, ModelKind};
use crate::rescnn::ResCnn;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::{TokenSequence, Vocab};
use crate::transformer::Transformer;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            epochs: 20,
            temperature: 0.05,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config("train.temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2 for in-batch negatives".into()));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let lr_ok = self.lr == 0.0 || positive(self.lr);
        if !lr_ok || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !positive(self.eps) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    pub(crate) fn from_key_values(map: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            lr: take(map, "train.lr", d.lr)?,
            batch_size: take(map, "train.batch_size", d.batch_size)?,
            epochs: take(map, "train.epochs", d.epochs)?,
            temperature: take(map, "train.temperature", d.temperature)?,
            seed: take(map, "train.seed", d.seed)?,
            beta1: take(map, "train.beta1", d.beta1)?,
            beta2: take(map, "train.beta2", d.beta2)?,
            eps: take(map, "train.eps", d.eps)?,
        })
    }

    pub(crate) fn write_key_values(&self, map: &mut KeyValues) {
        put(map, "train.lr", self.lr);
        put(map, "train.batch_size", self.batch_size);
        put(map, "train.epochs", self.epochs);
        put(map, "train.temperature", self.temperature);
        put(map, "train.seed", self.seed);
        put(map, "train.beta1", self.beta1);
        put(map, "train.beta2", self.beta2);
        put(map, "train.eps", self.eps);
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_model<E: Encoder + ?Sized>(model: &E) -> Self {
        let params: Vec<&Tensor> = model.parameters().into_iter().map(|p| p.tensor).collect();
        Self::new(&params)
    }
}

/// One bias-corrected Adam update. A `None` gradient marks a frozen tensor,
/// which is skipped entirely (its moments are left alone too).
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<Tensor>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() || state.m[i].shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "adam: parameter {i} has shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean over `i` of `-log softmax(cos(m_i, n_.) / tau)[i]`.
pub fn contrastive_loss(g: &mut Graph<'_>, mentions: Var, names: Var, temperature: f64) -> Result<Var> {
    let b = g.shape(mentions)[0];
    if b == 0 || g.shape(names)[0] != b {
        return Err(Error::Invalid(format!(
            "contrastive loss needs equal nonempty batches, got {b} and {}",
            g.shape(names)[0]
        )));
    }
    let m = g.normalize_rows(mentions)?;
    let n = g.normalize_rows(names)?;
    let cos = g.matmul_t(m, n)?;
    let logits = g.scale(cos, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.cross_entropy(logits, &targets)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// A (mention, positive name) row and the entity it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub mention: String,
    pub name: String,
    pub entity: usize,
}

/// One row per mention with the gold primary name, plus one row per
/// alternative name of the gold entity.
pub fn training_pairs(train: &Dataset, kb: &KnowledgeBase) -> Result<Vec<TrainingPair>> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let index: std::collections::HashMap<&str, usize> =
        kb.entities().iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
    let mut pairs = Vec::new();
    for (row_no, row) in train.rows.iter().enumerate() {
        let &entity = index
            .get(row.gold.as_str())
            .ok_or_else(|| Error::Data(format!("training row {}: unknown entity id {}", row_no + 1, row.gold)))?;
        for name in kb.entities()[entity].names() {
            pairs.push(TrainingPair {
                mention: row.mention.clone(),
                name: name.to_string(),
                entity,
            });
        }
    }
    Ok(pairs)
}

/// Splits `order` into batches of at most `size` with no entity repeated
/// inside a batch. Rows that would repeat an entity wait for the next batch.
pub fn make_batches(order: &[usize], entity_of: impl Fn(usize) -> usize, size: usize) -> Vec<Vec<usize>> {
    let mut queue: VecDeque<usize> = order.iter().copied().collect();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut batch = Vec::with_capacity(size);
        let mut seen = HashSet::with_capacity(size);
        let mut deferred = Vec::new();
        while batch.len() < size {
            let Some(i) = queue.pop_front() else { break };
            if seen.insert(entity_of(i)) {
                batch.push(i);
            } else {
                deferred.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            queue.push_front(i);
        }
        batches.push(batch);
    }
    batches
}

/// Loss and gradients of one batch; `None` for frozen parameters.
pub fn batch_gradients<E: Encoder + ?Sized>(
    model: &E,
    mentions: &[&TokenSequence],
    names: &[&TokenSequence],
    temperature: f64,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let params = bind_parameters(model, &mut g, true);
    let opts = EncodeOptions::default();
    let m = model.forward(&mut g, &params, mentions, &opts)?;
    let n = model.forward(&mut g, &params, names, &opts)?;
    let loss = contrastive_loss(&mut g, m, n, temperature)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    Ok((value, params.iter().map(|&p| grads.take(p)).collect()))
}

/// Trains `model` in place and returns one log entry per epoch. `on_epoch`
/// sees each entry as soon as it is complete.
pub fn train<E: Encoder + ?Sized>(
    model: &mut E,
    train_set: &Dataset,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let pairs = training_pairs(train_set, kb)?;
    let mention_seqs: Vec<TokenSequence> = pairs.iter().map(|p| model.tokenize(&p.mention)).collect();
    let name_seqs: Vec<TokenSequence> = pairs.iter().map(|p| model.tokenize(&p.name)).collect();
    let trainable: Vec<bool> = model.parameters().iter().map(|p| p.trainable).collect();
    let mut state = AdamState::for_model(&*model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let batches = make_batches(&order, |i| pairs[i].entity, cfg.batch_size);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches.iter().filter(|b| b.len() >= 2) {
            let ms: Vec<&TokenSequence> = batch.iter().map(|&i| &mention_seqs[i]).collect();
            let ns: Vec<&TokenSequence> = batch.iter().map(|&i| &name_seqs[i]).collect();
            let (loss, mut grads) = batch_gradients(&*model, &ms, &ns, cfg.temperature)?;
            for (g, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    *g = None;
                }
            }
            adam_step(&mut model.parameters_mut(), &grads, &mut state, cfg)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        if count == 0 {
            return Err(Error::Data("no batch with at least two distinct entities".into()));
        }
        let log = EpochLog {
            epoch,
            mean_loss: total / count as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Initializes a fresh `kind` model seeded by `cfg.train.seed`, trains it,
/// and rounds it to checkpoint precision so that it equals its own reload.
pub fn train_new_model(
    kind: ModelKind,
    cfg: &RunConfig,
    vocab: Vocab,
    embeddings: Option<Tensor>,
    train_set: &Dataset,
    kb: &KnowledgeBase,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = match kind {
        ModelKind::ResCnn => Model::ResCnn(ResCnn::new(cfg.rescnn.clone(), vocab, embeddings, &mut rng)?),
        ModelKind::Transformer => {
            if embeddings.is_some() {
                return Err(Error::Config("pretrained embeddings apply to the rescnn model only".into()));
            }
            Model::Transformer(Transformer::new(cfg.transformer.clone(), vocab, &mut rng)?)
        }
    };
    let logs = train(model.encoder_mut(), train_set, kb, &cfg.train, on_epoch)?;
    round_to_stored_precision(&mut model);
    Ok((model, logs))
}
