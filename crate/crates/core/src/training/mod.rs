//! Teacher-forced NLL training with Adam, plateau learning-rate halving, and
//! checkpoint persistence.
//!
//! A batch is processed pair by pair on a fresh tape, each pair's summed loss
//! scaled by the batch token count before backward; gradient accumulation is
//! additive, so the result equals the gradient of the batch's per-token mean
//! loss. All randomness (shuffling, dropout masks) derives from the run seed
//! plus epoch/step counters, which keeps resumed runs on the original
//! trajectory.

pub mod adam;
pub mod checkpoint;
pub mod loss;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tokenizer::{EncodedPair, PAD};

pub use adam::{adam_step, clip_gradients, AdamState};
pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION, MAGIC};
pub use loss::{nll_loss, nll_loss_sum};
pub use schedule::PlateauSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub truncate_len: usize,
    pub seed: u64,
    pub patience_epochs: usize,
    pub lr_decay_factor: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.1,
            batch_size: 16,
            max_epochs: 10,
            truncate_len: 500,
            seed: 0,
            patience_epochs: 2,
            lr_decay_factor: 0.5,
            clip_norm: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.truncate_len == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, and truncate_len must be positive".into(),
            ));
        }
        if self.patience_epochs == 0 {
            return Err(Error::Config("patience_epochs must be at least 1".into()));
        }
        if self.lr_decay_factor <= 0.0 || self.lr_decay_factor >= 1.0 {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1)".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// splitmix64-style mixing of a run seed with a salt (epoch, step, ...).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Optimizer state plus the global step counter that drives seeds.
pub struct TrainState<T: Scalar> {
    pub adam: AdamState<T>,
    pub global_step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new() -> TrainState<T> {
        TrainState { adam: AdamState::new(), global_step: 0 }
    }
}

impl<T: Scalar> Default for TrainState<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Token-weighted mean per-token loss over the epoch.
    pub mean_loss: f64,
    pub token_count: usize,
    /// Per-optimizer-step batch losses (per-token means).
    pub step_losses: Vec<f64>,
}

/// Loss targets for a pair: extended ids when the pointer can copy, plain
/// vocabulary ids otherwise; PAD steps are masked out.
pub fn loss_targets(pair: &EncodedPair, use_pointer: bool) -> (Vec<usize>, Vec<bool>) {
    let ids = if use_pointer { &pair.target_ext_ids } else { &pair.target_ids };
    let targets: Vec<usize> = ids[1..].to_vec();
    let mask: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    (targets, mask)
}

/// Teacher-forced summed NLL of one pair and its token count.
pub fn pair_loss_sum<T: Scalar>(
    model: &Model<T>,
    tape: &Tape<T>,
    pair: &EncodedPair,
) -> Result<(crate::Tensor<T>, usize)> {
    let out = model.forward(tape, pair)?;
    let (targets, mask) = loss_targets(pair, model.config.use_pointer);
    nll_loss_sum(tape, &out.log_final, &targets, &mask)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// One pass over the training pairs: shuffle, accumulate per-batch gradients,
/// clip, and step Adam. Deterministic given `(config.seed, epoch,
/// state.global_step)`.
pub fn train_epoch<T: Scalar>(
    model: &Model<T>,
    data: &[EncodedPair],
    config: &TrainConfig,
    lr: f64,
    epoch: u64,
    state: &mut TrainState<T>,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Config("training on an empty dataset".into()));
    }
    let order = shuffled_indices(data.len(), mix_seed(config.seed, 0xE90C ^ epoch));
    let mut step_losses = Vec::new();
    let mut weighted = 0.0f64;
    let mut total_tokens = 0usize;

    for batch in order.chunks(config.batch_size) {
        model.params.zero_grads();
        let batch_tokens: usize = batch.iter().map(|&i| data[i].target_ids.len() - 1).sum();
        let inv = T::from_f(1.0 / batch_tokens as f64);
        let mut batch_loss = 0.0f64;
        for (k, &i) in batch.iter().enumerate() {
            let tape =
                Tape::training(mix_seed(mix_seed(config.seed, state.global_step), k as u64));
            let (loss_sum, _) = pair_loss_sum(model, &tape, &data[i])?;
            let scaled = tape.scale_add(&loss_sum, inv, T::zero())?;
            tape.backward(&scaled)?;
            batch_loss += scaled.item().to_f();
        }
        clip_gradients(&model.params, config.clip_norm);
        adam_step(&model.params, &mut state.adam, lr, config.beta1, config.beta2, config.adam_eps)?;
        state.global_step += 1;
        step_losses.push(batch_loss);
        weighted += batch_loss * batch_tokens as f64;
        total_tokens += batch_tokens;
    }
    Ok(EpochStats {
        mean_loss: weighted / total_tokens as f64,
        token_count: total_tokens,
        step_losses,
    })
}

/// Token-weighted mean NLL over a dataset, dropout off. Independent of any
/// batching, so the value is comparable across batch sizes.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, data: &[EncodedPair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("evaluating on an empty dataset".into()));
    }
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for pair in data {
        let tape = Tape::inference();
        let (loss_sum, count) = pair_loss_sum(model, &tape, pair)?;
        total += loss_sum.item().to_f();
        tokens += count;
    }
    Ok(total / tokens as f64)
}
