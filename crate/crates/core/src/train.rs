//! Binary cross-entropy objective, batched gradients, AdamW and the epoch loop.
//!
//! Gradients of a batch are computed in fixed chunks of
//! [`REDUCTION_CHUNK`] windows, possibly on several threads, and the chunk
//! sums are combined by a pairwise tree in chunk order. The result does not
//! depend on the number of threads.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::{EncodedDataset, EncodedWindow, VocabSpec, DEFAULT_MAX_SEQ};
use crate::model::{backward_window, forward_logits, init_params, Mode, ModelConfig, ModelParams, Real};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Windows per gradient-reduction chunk.
pub const REDUCTION_CHUNK: usize = 8;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

/// Mixes a base seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and logit gradient (before division by the valid count) of one
/// prediction. The gradient is zero where the clamp is active.
fn bce_term(p: f64, y: u8) -> (f64, f64) {
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = f64::from(y);
    let loss = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    let grad = if clamped == p { p - y } else { 0.0 };
    (loss, grad)
}

/// Mean binary cross-entropy over the positions where `valid` is set.
pub fn bce_loss<F: Real>(probs: &[F], targets: &[u8], valid: &[bool]) -> Result<f64> {
    if probs.len() != targets.len() || probs.len() != valid.len() {
        return Err(Error::Invalid(format!(
            "bce_loss: {} probabilities, {} targets, {} mask entries",
            probs.len(),
            targets.len(),
            valid.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&p, &y), &v) in probs.iter().zip(targets).zip(valid) {
        if v {
            sum += bce_term(p.as_f64(), y).0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no valid positions".into()));
    }
    Ok(sum / n as f64)
}

/// Gradients of the mean batch loss.
#[derive(Debug, Clone)]
pub struct BatchGradients<F> {
    /// Sum of per-position losses; divide by `n_valid` for the mean.
    pub loss_sum: f64,
    pub n_valid: usize,
    pub grads: ModelParams<F>,
}

impl<F> BatchGradients<F> {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.n_valid as f64
    }
}

/// Forward and backward over a batch. With `dropout_seed` set the model runs
/// in training mode and window `k` of the batch draws its masks from
/// `derive_seed(seed, _, k)`; otherwise in inference mode.
pub fn batch_gradients<F: Real>(
    params: &ModelParams<F>,
    batch: &[&EncodedWindow],
    dropout_seed: Option<u64>,
) -> Result<BatchGradients<F>> {
    let n_valid: usize = batch.iter().map(|w| w.n_valid()).sum();
    if n_valid == 0 {
        return Err(Error::Invalid("batch has no valid positions".into()));
    }
    let inv_n = 1.0 / n_valid as f64;

    let chunks: Vec<(usize, &[&EncodedWindow])> = batch
        .chunks(REDUCTION_CHUNK)
        .enumerate()
        .map(|(c, ws)| (c * REDUCTION_CHUNK, ws))
        .collect();
    let partials: Vec<(f64, ModelParams<F>)> = chunks
        .par_iter()
        .map(|&(start, windows)| {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for (k, w) in windows.iter().enumerate() {
                let mode = match dropout_seed {
                    Some(seed) => Mode::Train {
                        dropout_seed: derive_seed(seed, DROPOUT_STREAM, (start + k) as u64),
                    },
                    None => Mode::Infer,
                };
                let pass = forward_logits(params, w, mode)?;
                let dlogits: Vec<F> = pass
                    .positions()
                    .iter()
                    .zip(pass.probs())
                    .map(|(&pos, &p)| {
                        let (l, g) = bce_term(p.as_f64(), w.target[pos]);
                        loss += l;
                        F::cast(g * inv_n)
                    })
                    .collect();
                backward_window(params, w, &pass, &dlogits, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;

    let (loss_sum, grads) = tree_sum(partials);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numerical(format!("non-finite gradient in `{name}`")));
    }
    Ok(BatchGradients { loss_sum, n_valid, grads })
}

fn tree_sum<F: Real>(mut level: Vec<(f64, ModelParams<F>)>) -> (f64, ModelParams<F>) {
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some((mut la, mut a)) = it.next() {
            if let Some((lb, b)) = it.next() {
                la += lb;
                a.add_assign(&b);
            }
            next.push((la, a));
        }
        level = next;
    }
    level.pop().expect("at least one chunk")
}

/// Rescales `grads` so that its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut ModelParams<F>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|x| x.as_f64() * x.as_f64()).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(F::cast(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ModelParams<F>, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

fn check_shapes<F: Real>(reference: &ModelParams<F>, other: &ModelParams<F>) -> Result<()> {
    for ((name, a), (_, b)) in reference.tensors().iter().zip(other.tensors()) {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                tensor: name.clone(),
                expected: a.shape().to_vec(),
                found: b.shape().to_vec(),
            });
        }
    }
    if reference.tensors().len() != other.tensors().len() {
        return Err(Error::Invalid("parameter sets have different layer counts".into()));
    }
    Ok(())
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.m)?;
    check_shapes(params, &state.v)?;
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let decay = F::cast(1.0 - c.lr * c.weight_decay);
    let (b1, b2) = (F::cast(c.beta1), F::cast(c.beta2));
    let (one_m_b1, one_m_b2) = (F::cast(1.0 - c.beta1), F::cast(1.0 - c.beta2));
    let bc1 = F::cast(1.0 - c.beta1.powi(t));
    let bc2 = F::cast(1.0 - c.beta2.powi(t));
    let (lr, eps) = (F::cast(c.lr), F::cast(c.eps));

    let mut m_all = state.m.tensors_mut();
    let mut v_all = state.v.tensors_mut();
    for (((_, mut p), (_, g)), ((_, m), (_, v))) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m_all.iter_mut().zip(v_all.iter_mut()))
    {
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Whole users go to one side.
    #[default]
    Users,
    /// Individual windows go to one side; a user may appear in both.
    Rows,
}

/// Shuffles `items` with `seed` and puts the first `ceil(ratio * N)` in the
/// training set. The count is capped at `N - 1` so that validation is never
/// empty.
pub fn split_train_val<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 items to split, found {}", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n = items.len();
    let n_train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM, 0)));
    let val = shuffled.split_off(n_train);
    Ok((shuffled, val))
}

/// Splits a dataset by user (or by window in [`SplitMode::Rows`]).
pub fn split_dataset(
    dataset: &EncodedDataset,
    ratio: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(EncodedDataset, EncodedDataset)> {
    match mode {
        SplitMode::Users => {
            let (train_users, _) = split_train_val(&dataset.user_ids(), ratio, seed)?;
            let train: std::collections::HashSet<u64> = train_users.into_iter().collect();
            Ok((
                dataset.filter(|_, w| train.contains(&w.user_id)),
                dataset.filter(|_, w| !train.contains(&w.user_id)),
            ))
        }
        SplitMode::Rows => {
            let idx: Vec<usize> = (0..dataset.windows.len()).collect();
            let (train_idx, _) = split_train_val(&idx, ratio, seed)?;
            let mut in_train = vec![false; idx.len()];
            for i in train_idx {
                in_train[i] = true;
            }
            Ok((dataset.filter(|i, _| in_train[i]), dataset.filter(|i, _| !in_train[i])))
        }
    }
}

/// Every model and optimizer hyperparameter plus the loop settings. Missing
/// keys take the defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub split_mode: SplitMode,
    /// Global gradient-norm limit; off when `None`.
    pub grad_clip: Option<f64>,
    /// When false the `seconds` column of the history is written as 0.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            d_model: 128,
            n_heads: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 512,
            max_seq: DEFAULT_MAX_SEQ,
            dropout: 0.1,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch_size: 256,
            epochs: 10,
            seed: 0,
            split_ratio: 0.975,
            split_mode: SplitMode::Users,
            grad_clip: None,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Invalid(format!("field `{field}`: {why}")));
        for (field, value) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("batch_size", self.batch_size),
        ] {
            if value == 0 {
                return bad(field, "must be positive");
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", "must divide d_model");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return bad("weight_decay", "must be non-negative with lr * weight_decay < 1");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio", "must lie in (0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("grad_clip", "must be positive");
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: VocabSpec) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
            dropout: self.dropout,
            vocab,
            seed: self.seed,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// NaN when the validation labels are a single class.
    pub val_auc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

impl TrainRun {
    /// `epoch,train_loss,val_loss,val_auc,seconds` with one row per epoch.
    pub fn history_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "train_loss", "val_loss", "val_auc", "seconds"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .filter(|r| !r.val_auc.is_nan())
            .fold(None, |best: Option<&EpochRecord>, r| match best {
                Some(b) if b.val_auc >= r.val_auc => Some(b),
                _ => Some(r),
            })
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write `config.json`, `epoch_<k>.ckpt`, `best.ckpt` and
    /// `history.csv`. Nothing is written when `None`.
    pub run_dir: Option<PathBuf>,
    /// Continue from this checkpoint; epoch numbering carries on.
    pub resume: Option<Checkpoint>,
    /// Size of the worker pool; the ambient rayon pool when `None`.
    pub threads: Option<usize>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut (dyn FnMut(&EpochRecord) + Send)>,
}

pub struct TrainOutcome {
    pub run: TrainRun,
    pub params: ModelParams<f32>,
    pub optimizer: OptimizerState<f32>,
}

fn in_context(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Splits `dataset` according to the config and trains.
pub fn train_on_dataset(config: &TrainConfig, dataset: &EncodedDataset, options: TrainOptions) -> Result<TrainOutcome> {
    let (train_set, val_set) = split_dataset(dataset, config.split_ratio, config.seed, config.split_mode)?;
    train(config, &train_set, &val_set, options)
}

pub fn train(
    config: &TrainConfig,
    train_set: &EncodedDataset,
    val_set: &EncodedDataset,
    options: TrainOptions,
) -> Result<TrainOutcome> {
    match options.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
            pool.install(|| train_inner(config, train_set, val_set, options))
        }
        None => train_inner(config, train_set, val_set, options),
    }
}

fn train_inner(
    config: &TrainConfig,
    train_set: &EncodedDataset,
    val_set: &EncodedDataset,
    mut options: TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.windows.is_empty() || val_set.windows.is_empty() {
        return Err(Error::Invalid("training and validation sets must be non-empty".into()));
    }
    for (name, ds) in [("training", train_set), ("validation", val_set)] {
        if ds.max_seq != config.max_seq {
            return Err(Error::Invalid(format!(
                "{name} windows have length {} but field `max_seq` is {}",
                ds.max_seq, config.max_seq
            )));
        }
    }
    if train_set.vocab != val_set.vocab {
        return Err(Error::Invalid("training and validation vocabularies differ".into()));
    }
    let model_config = config.model_config(train_set.vocab);
    model_config.validate()?;

    let (mut params, mut optimizer, mut records) = match options.resume.take() {
        Some(ck) => {
            if ck.model != model_config {
                return Err(Error::Invalid("checkpoint model configuration differs from the run configuration".into()));
            }
            let optimizer = ck
                .optimizer
                .ok_or_else(|| Error::Invalid("checkpoint has no optimizer state to resume from".into()))?;
            (ck.params, optimizer, ck.history)
        }
        None => {
            let params = init_params::<f32>(&model_config)?;
            let optimizer = OptimizerState::new(&params, config.adamw());
            (params, optimizer, Vec::new())
        }
    };
    optimizer.config = config.adamw();

    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    }

    let mut best_auc = records
        .iter()
        .map(|r| r.val_auc)
        .filter(|a| !a.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    let start = records.last().map_or(0, |r| r.epoch);
    for epoch in start + 1..=config.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train_set.windows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64)));

        let (mut loss_sum, mut n_valid) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EncodedWindow> = idx.iter().map(|&i| &train_set.windows[i]).collect();
            let seed = derive_seed(config.seed, DROPOUT_STREAM, optimizer.step);
            let mut g = batch_gradients(&params, &batch, Some(seed)).map_err(in_context(epoch, b))?;
            if let Some(limit) = config.grad_clip {
                clip_grad_norm(&mut g.grads, limit);
            }
            adamw_step(&mut params, &g.grads, &mut optimizer)?;
            if let Some(name) = params.first_non_finite() {
                return Err(in_context(epoch, b)(Error::Numerical(format!("non-finite parameter in `{name}`"))));
            }
            loss_sum += g.loss_sum;
            n_valid += g.n_valid;
        }

        let (val_loss, val_auc) = match evaluate(&params, val_set) {
            Ok(r) => (r.mean_bce, r.auc),
            Err(Error::SingleClass) => (crate::eval::mean_bce(&params, val_set)?, f64::NAN),
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_valid as f64,
            val_loss,
            val_auc,
            seconds: if config.record_wall_time {
                clock.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        records.push(record);

        if let Some(dir) = &options.run_dir {
            let ck = Checkpoint {
                model: model_config.clone(),
                train: config.clone(),
                epoch,
                history: records.clone(),
                params: params.clone(),
                optimizer: Some(optimizer.clone()),
            };
            ck.save(&dir.join(format!("epoch_{epoch}.ckpt")))?;
            if val_auc > best_auc {
                best_auc = val_auc;
                ck.save(&dir.join("best.ckpt"))?;
            }
            let run = TrainRun {
                config: config.clone(),
                seed: config.seed,
                records: records.clone(),
            };
            write_atomic(&dir.join("history.csv"), run.history_csv()?.as_bytes())?;
        }
        if let Some(cb) = options.on_epoch.as_mut() {
            cb(&record);
        }
    }

    Ok(TrainOutcome {
        run: TrainRun {
            config: config.clone(),
            seed: config.seed,
            records,
        },
        params,
        optimizer,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let l = bce_loss(&[0.5f64], &[1], &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = bce_loss(&[0.9f64, 0.1], &[1, 0], &[true, true]).unwrap();
        assert!((l - 0.105_360_515_657_826_3).abs() < 1e-12);
        let l = bce_loss(&[1.0f64, 0.0], &[1, 0], &[true, true]).unwrap();
        assert!(l <= -(1.0f64 - 1e-7).ln() * (1.0 + 1e-6));
        let l = bce_loss(&[0.5f64, 0.01], &[1, 1], &[true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[0.5f64], &[1], &[false]).is_err());
    }

    #[test]
    fn clamped_term_has_zero_gradient() {
        assert_eq!(bce_term(1.0, 1).1, 0.0);
        assert_eq!(bce_term(0.0, 1).1, 0.0);
        assert_eq!(bce_term(0.25, 1).1, -0.75);
    }

    #[test]
    fn split_counts() {
        let users: Vec<u64> = (0..40).collect();
        let (train, val) = split_train_val(&users, 0.975, 3).unwrap();
        assert_eq!((train.len(), val.len()), (39, 1));
        assert!(!train.contains(&val[0]));
        assert_eq!(split_train_val(&users, 0.975, 3).unwrap(), (train, val));
        let (t, v) = split_train_val(&[1, 2], 0.975, 0).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
        assert!(split_train_val(&[1u64], 0.975, 0).is_err());
    }

    #[test]
    fn seeds_differ_by_stream_and_index() {
        let a = derive_seed(7, 1, 0);
        assert_ne!(a, derive_seed(7, 2, 0));
        assert_ne!(a, derive_seed(7, 1, 1));
        assert_eq!(a, derive_seed(7, 1, 0));
    }

    #[test]
    fn config_defaults_and_rejection() {
        let c = TrainConfig::from_json("{}").unwrap();
        assert_eq!(
            (c.max_seq, c.d_model, c.n_enc_layers, c.n_dec_layers, c.batch_size, c.epochs, c.n_heads),
            (100, 128, 2, 2, 256, 10, 8)
        );
        assert_eq!((c.dropout, c.lr), (0.1, 5e-4));
        let err = TrainConfig::from_json(r#"{"d_modl": 3}"#).unwrap_err().to_string();
        assert!(err.contains("d_modl"), "{err}");
        let err = TrainConfig::from_json(r#"{"n_heads": 3}"#).unwrap_err().to_string();
        assert!(err.contains("n_heads"), "{err}");
        let err = TrainConfig::from_json(r#"{"split_ratio": 1.0}"#).unwrap_err().to_string();
        assert!(err.contains("split_ratio"), "{err}");
    }

    #[test]
    fn history_header() {
        let run = TrainRun {
            config: TrainConfig::default(),
            seed: 0,
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_auc: 0.75,
                seconds: 0.0,
            }],
        };
        assert_eq!(
            run.history_csv().unwrap(),
            "epoch,train_loss,val_loss,val_auc,seconds\n1,0.5,0.25,0.75,0.0\n"
        );
    }
}
