//! Mini-batch training with gradient accumulation and early stopping.

use ndgrad::{BoundParams, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DishftError, Result};
use crate::marketdata::WindowSample;
use crate::nn::Batch;
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub delta: f64,
    /// Horizon `T`.
    pub horizon: usize,
    /// Lookback `L`.
    pub lookback: usize,
    pub lambda: f64,
    /// Attention temperature.
    pub tau: f64,
    /// Windows per tape; a batch is split into chunks whose gradients are summed.
    pub chunk_size: usize,
    /// Anchor spacing of training windows.
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            delta: 0.04,
            horizon: 20,
            lookback: 20,
            lambda: 0.5,
            tau: 0.5,
            chunk_size: 16,
            stride: 1,
        }
    }
}

impl TrainConfig {
    /// Every invalid field, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate = {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.patience == 0 {
            out.push("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be >= 1".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            out.push(format!("delta = {} must be >= 0", self.delta));
        }
        if self.horizon == 0 || self.lookback == 0 {
            out.push("horizon and lookback must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!("lambda = {} must be >= 0", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            out.push(format!("tau = {} must be > 0", self.tau));
        }
        if self.chunk_size == 0 || self.stride == 0 {
            out.push("chunk_size and stride must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(DishftError::Config(p.join("; ")))
        }
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Two loss components averaged over the epoch (their meaning depends on the trainer).
    pub losses: [f64; 2],
    pub val_acc: f64,
    pub val_mcc: f64,
}

pub(crate) trait Objective {
    /// Chunk loss (a mean over rows) and two reported components.
    fn loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'_, 't>,
        batch: &Batch,
    ) -> Result<(Var<'t>, [f64; 2])>;

    /// Validation `(acc, mcc)` for a parameter snapshot.
    fn validate(&self, params: &ParamSet) -> Result<(f64, f64)>;
}

/// Trains `params` in place and leaves them at the best validation epoch.
pub(crate) fn fit(
    params: &mut ParamSet,
    trainable: &dyn Fn(&str) -> bool,
    train: &[WindowSample],
    cfg: &TrainConfig,
    objective: &dyn Objective,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    retain_freed_memory();
    if train.is_empty() {
        return Err(DishftError::InsufficientData("empty training split".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut adam = Adam::new(params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut totals = [0.0; 2];
        for batch_idx in order.chunks(cfg.batch_size) {
            let windows: Vec<&WindowSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
            for chunk in windows.chunks(cfg.chunk_size) {
                let batch = Batch::from_windows(chunk)?;
                let tape = Tape::new();
                let bound = params.bind_where(&tape, trainable)?;
                let (loss, parts) = objective.loss(&tape, &bound, &batch)?;
                let weight = chunk.len() as f64 / windows.len() as f64;
                let g = tape.backward(loss.scale(weight)?)?;
                for (slot, var) in grads.iter_mut().zip(bound.vars()) {
                    if let Some(t) = g.get(*var) {
                        match slot {
                            Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                            None => *slot = Some(t.clone()),
                        }
                    }
                }
                let share = chunk.len() as f64 / train.len() as f64;
                totals[0] += parts[0] * share;
                totals[1] += parts[1] * share;
            }
            adam.step(params, &grads);
        }
        let (val_acc, val_mcc) = objective.validate(params)?;
        log.push(EpochLog {
            epoch,
            losses: totals,
            val_acc,
            val_mcc,
        });
        if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        *params = p;
    }
    Ok(log)
}

/// Every chunk allocates and drops large activations; keeping freed pages in
/// the heap avoids paying a page fault per page on the next chunk.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| {
            // SAFETY: mallopt only adjusts allocator tunables.
            unsafe {
                libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
                libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
                libc::mallopt(libc::M_TOP_PAD, 256 << 20);
            }
        });
    }
}
