//! Vocabulary construction, teacher-forced maximum-likelihood training with
//! Adam, and caption metrics.

mod adam;
mod metrics;
mod vocab;

pub use adam::*;
pub use metrics::*;
pub use vocab::*;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, ParamSet, Tape};
use crate::cells::{Cell, CellError};
use crate::corpus::FeatureRecord;
use crate::decoder::{DecodeError, DecodeMode, DecoderModel, MAX_CAPTION_WORDS};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Decode(e.into())
    }
}

impl From<CellError> for TrainError {
    fn from(e: CellError) -> Self {
        TrainError::Decode(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub stage1_epochs: usize,
    pub lr_stage2: f64,
    /// Epochs after the first stage; the encoder is fixed so this stage
    /// only changes the learning rate.
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Caption words kept per reference; one more step is allowed for `<eos>`.
    pub max_len: usize,
    pub seed: u64,
    /// Stop after this many epochs without a better validation BLEU-4.
    pub patience: Option<usize>,
    /// Rescale the minibatch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Arithmetic used while training; checkpoints always store 32-bit values.
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(TrainError::Contract(format!("unknown precision {s:?}"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0004,
            stage1_epochs: 20,
            lr_stage2: 0.0001,
            stage2_epochs: 0,
            batch_size: 32,
            max_len: MAX_CAPTION_WORDS,
            seed: 0,
            patience: None,
            clip_norm: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.lr_stage2 >= 0.0
            && self.lr_stage2.is_finite();
        if !rates_ok {
            return Err(TrainError::Contract(
                "learning rates must be finite and nonnegative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(TrainError::Contract(
                "batch size and max length must be positive".into(),
            ));
        }
        if self.patience == Some(0) {
            return Err(TrainError::Contract("patience must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(TrainError::Contract("clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Learning rate of a one-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.stage1_epochs {
            self.lr
        } else {
            self.lr_stage2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    /// Mean negative log-likelihood per target token.
    pub train_nll: f64,
    pub val_bleu4: Option<f64>,
    pub val_rouge_l: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Parameters of the epoch with the best validation BLEU-4, or the last
    /// epoch when there is no validation set.
    pub model: DecoderModel<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Wall-clock seconds per epoch.
    pub timings: Vec<f64>,
}

/// Training target for one caption: its word ids followed by `<eos>`.
pub fn target_tokens(vocab: &Vocabulary, caption: &str, max_len: usize) -> Vec<usize> {
    let mut t = vocab.encode(caption, max_len);
    t.push(vocab.eos());
    t
}

struct Item {
    record: usize,
    tokens: Vec<usize>,
}

struct ExampleResult<T: Scalar> {
    nll: f64,
    grads: Gradients<T>,
    embedding_grads: Vec<(usize, Tensor<T>)>,
}

/// Computes each listed word's embedding once on its own tape.
struct EmbeddingCache<'m, T: Scalar> {
    tape: Tape<'m, T>,
    vars: BTreeMap<usize, crate::autodiff::Var>,
}

impl<'m, T: Scalar> EmbeddingCache<'m, T> {
    fn new(model: &'m DecoderModel<T>, words: &BTreeSet<usize>) -> Result<Self> {
        let cell = Cell::new(&model.config().cell, model.params());
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for &w in words {
            vars.insert(w, cell.embed(&mut tape, w)?);
        }
        Ok(Self { tape, vars })
    }

    fn value(&self, word: usize) -> &Tensor<T> {
        self.tape.value(self.vars[&word])
    }

    fn gradients(&self, seeds: BTreeMap<usize, Tensor<T>>) -> Result<Gradients<T>> {
        let seeds: Vec<_> = seeds.into_iter().map(|(w, g)| (self.vars[&w], g)).collect();
        Ok(self.tape.backward_seeded(&seeds)?.into_gradients())
    }
}

fn input_words<'a>(vocab: &Vocabulary, tokens: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
    std::iter::once(vocab.bos()).chain(tokens[..tokens.len().saturating_sub(1)].iter().copied())
}

fn example_gradients<T: Scalar>(
    model: &DecoderModel<T>,
    visual: &Tensor<T>,
    tokens: &[usize],
    cache: &EmbeddingCache<'_, T>,
) -> Result<ExampleResult<T>> {
    let mut session = model.session(visual)?;
    let mut provided = Vec::new();
    for w in input_words(model.vocab(), tokens) {
        if !provided.iter().any(|&(p, _)| p == w) {
            provided.push((w, session.provide_embedding(w, cache.value(w).clone())));
        }
    }
    let loss = session.sequence_nll(tokens, None)?;
    let tape = session.into_tape();
    let nll = tape.value(loss).item().map_err(DecodeError::from)?.as_f64();
    let back = tape.backward_seeded(&[(loss, Tensor::scalar(T::one()))])?;
    let embedding_grads = provided.iter().map(|&(w, v)| (w, back.grad(v))).collect();
    Ok(ExampleResult {
        nll,
        grads: back.into_gradients(),
        embedding_grads,
    })
}

/// Summed teacher-forced NLL of `tokens` and its parameter gradients,
/// computed along the same path as a training step.
pub fn caption_gradients<T: Scalar>(
    model: &DecoderModel<T>,
    visual: &Tensor<T>,
    tokens: &[usize],
) -> Result<(f64, Gradients<T>)> {
    if tokens.is_empty() {
        return Err(TrainError::Contract(
            "caption must contain at least one token".into(),
        ));
    }
    let words = input_words(model.vocab(), tokens).collect();
    let cache = EmbeddingCache::new(model, &words)?;
    let ex = example_gradients(model, visual, tokens, &cache)?;
    let mut grads = ex.grads;
    grads.accumulate(&cache.gradients(merge_embedding_grads([ex.embedding_grads])?)?)?;
    Ok((ex.nll, grads))
}

fn merge_embedding_grads<T: Scalar>(
    parts: impl IntoIterator<Item = Vec<(usize, Tensor<T>)>>,
) -> Result<BTreeMap<usize, Tensor<T>>> {
    let mut out: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
    for part in parts {
        for (w, g) in part {
            match out.get_mut(&w) {
                Some(acc) => acc.add_assign(&g).map_err(DecodeError::from)?,
                None => {
                    out.insert(w, g);
                }
            }
        }
    }
    Ok(out)
}

fn global_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Greedy captions for `records` as token strings.
pub fn greedy_captions<T: Scalar>(
    model: &DecoderModel<T>,
    records: &[FeatureRecord],
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    records
        .par_iter()
        .map(|r| {
            let visual = r.features.cast::<T>();
            let g = model.generate(&visual, DecodeMode::Greedy, max_len + 1)?;
            Ok(g.tokens
                .iter()
                .map(|&t| model.vocab().token(t).unwrap_or(UNK).to_string())
                .collect())
        })
        .collect()
}

/// Corpus BLEU-4 and mean ROUGE-L of greedy captions against each record's
/// tokenized references.
pub fn evaluate<T: Scalar>(
    model: &DecoderModel<T>,
    records: &[FeatureRecord],
    max_len: usize,
) -> Result<(f64, f64)> {
    let cands = greedy_captions(model, records, max_len)?;
    let refs: Vec<Vec<Vec<String>>> = records
        .iter()
        .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    Ok((bleu4(&cands, &refs)?, rouge_l(&cands, &refs)?))
}

pub fn train<T: Scalar>(
    model: DecoderModel<T>,
    train_set: &[FeatureRecord],
    validation: &[FeatureRecord],
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(model, train_set, validation, config, |_| {})
}

/// Minimizes per-token NLL over shuffled minibatches of (image, caption)
/// pairs. Per-example gradients may be computed in parallel; they are
/// always summed in example order, so results do not depend on the thread
/// count.
pub fn train_with<T: Scalar>(
    mut model: DecoderModel<T>,
    train_set: &[FeatureRecord],
    validation: &[FeatureRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Contract("training set is empty".into()));
    }
    let visuals: Vec<Tensor<T>> = train_set.iter().map(|r| r.features.cast()).collect();
    let items: Vec<Item> = train_set
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let vocab = model.vocab();
            r.captions.iter().map(move |c| Item {
                record: i,
                tokens: target_tokens(vocab, c, config.max_len),
            })
        })
        .collect();
    if items.is_empty() {
        return Err(TrainError::Contract("training set has no captions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::new();
    let mut timings = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<T>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.epochs() {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut item_nll = vec![0.0; items.len()];
        for batch in order.chunks(config.batch_size) {
            let words: BTreeSet<usize> = batch
                .iter()
                .flat_map(|&i| input_words(model.vocab(), &items[i].tokens))
                .collect();
            let (mut grads, token_count) = {
                let cache = EmbeddingCache::new(&model, &words)?;
                let results: Vec<Result<ExampleResult<T>>> = batch
                    .par_iter()
                    .map(|&i| {
                        example_gradients(
                            &model,
                            &visuals[items[i].record],
                            &items[i].tokens,
                            &cache,
                        )
                    })
                    .collect();
                let mut grads = Gradients::default();
                let mut emb = Vec::with_capacity(batch.len());
                let mut token_count = 0;
                for (&i, r) in batch.iter().zip(results) {
                    let r = r?;
                    item_nll[i] = r.nll;
                    token_count += items[i].tokens.len();
                    grads.accumulate(&r.grads).map_err(TrainError::from)?;
                    emb.push(r.embedding_grads);
                }
                grads.accumulate(&cache.gradients(merge_embedding_grads(emb)?)?)?;
                (grads, token_count)
            };
            grads.scale(T::from_f64(1.0 / token_count as f64));
            if let Some(max) = config.clip_norm {
                let norm = global_norm(&grads);
                if norm > max {
                    grads.scale(T::from_f64(max / norm));
                }
            }
            adam_update(model.params_mut(), &grads, &mut adam, lr)?;
        }
        let total_tokens: usize = items.iter().map(|it| it.tokens.len()).sum();
        let train_nll = item_nll.iter().sum::<f64>() / total_tokens as f64;
        let (val_bleu4, val_rouge_l) = if validation.is_empty() {
            (None, None)
        } else {
            let (b, r) = evaluate(&model, validation, config.max_len)?;
            (Some(b), Some(r))
        };
        let record = EpochRecord {
            epoch,
            stage: if epoch <= config.stage1_epochs { 1 } else { 2 },
            lr,
            train_nll,
            val_bleu4,
            val_rouge_l,
        };
        on_epoch(&record);
        log.push(record);
        timings.push(started.elapsed().as_secs_f64());
        if let Some(score) = val_bleu4 {
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.params().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    let last_epoch = log.len();
    let (model, best_epoch) = match best {
        Some((_, epoch, params)) => {
            let m =
                DecoderModel::from_params(model.config().clone(), model.vocab().clone(), params)?;
            (m, epoch)
        }
        None => (model, last_epoch),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        timings,
    })
}
