//! Optimization: learning-rate schedule, mixed-task batches, AdamW updates,
//! loss logging and checkpoints.

mod optim;
mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::LossConfig;
use crate::{Error, Result, TaskId};

pub use optim::{decays, AdamW, AdamWParams};
pub use run::{
    init_weights, load_model, load_params, save_model, train_loop, train_step, CheckpointMeta,
    InitSource, LoadReport, LogLine, ScheduleState, StepOutcome, TrainData, TrainSummary,
    CHECKPOINT_FORMAT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    /// Samples per batch for removal, segmentation and tamper.
    pub per_task_batch: [usize; 3],
    pub lr_start: f64,
    pub lr_end: f64,
    /// Iterations per constant learning-rate window.
    pub lr_step: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub image_size: u32,
    pub preset: String,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 80_000,
            batch_size: 48,
            per_task_batch: [16, 16, 16],
            lr_start: 5e-4,
            lr_end: 1e-5,
            lr_step: 200,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            image_size: 512,
            preset: "small".into(),
            checkpoint_every: 5_000,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_iters == 0 || self.lr_step == 0 {
            return bad("total_iters and lr_step must be positive".into());
        }
        if self.total_iters % self.lr_step != 0 {
            return bad(format!(
                "total_iters {} is not divisible by lr_step {}",
                self.total_iters, self.lr_step
            ));
        }
        if self.total_iters / self.lr_step < 2 {
            return bad("the schedule needs at least two learning-rate windows".into());
        }
        if self.per_task_batch.iter().sum::<usize>() != self.batch_size {
            return bad(format!(
                "batch_size {} differs from the per-task sum {:?}",
                self.batch_size, self.per_task_batch
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return bad(format!(
                "need lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        let [b1, b2] = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.eps <= 0.0 {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} is not a positive multiple of 32", self.image_size));
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamWParams {
        AdamWParams {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batch_for(&self, task: TaskId) -> usize {
        self.per_task_batch[task.index()]
    }
}

/// Piecewise-constant linear decay: window `k` of `K` gets
/// `lr_start + (lr_end - lr_start) * k / (K - 1)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::Config(format!(
            "iteration {iter} is outside the schedule of {} iterations",
            cfg.total_iters
        )));
    }
    let windows = cfg.total_iters / cfg.lr_step;
    if windows < 2 {
        return Err(Error::Config("the schedule needs at least two learning-rate windows".into()));
    }
    let t = (iter / cfg.lr_step) as f64 / (windows - 1) as f64;
    // interpolation form that hits both endpoints exactly
    Ok(cfg.lr_start * (1.0 - t) + cfg.lr_end * t)
}

const STREAM_PERMUTATION: u64 = 1;
const STREAM_BATCH: u64 = 2;

fn stream_rng(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) | (a << 48) | b);
    rng
}

/// Sample order of one epoch of a task's stream.
pub fn epoch_permutation(seed: u64, task: TaskId, epoch: u64, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_PERMUTATION, task.index() as u64, epoch));
    idx
}

/// One batch entry: a task and an index into that task's sample list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub task: TaskId,
    pub index: usize,
}

/// Batch for iteration `iter`. Each task's stream is its samples in a fresh
/// permutation per epoch; the batch takes the next `per_task_batch[t]`
/// positions of every stream and shuffles the result. Depends only on the
/// seed and the iteration, so resumed runs see the same batches.
pub fn build_batch(cfg: &TrainConfig, stream_lens: [usize; 3], iter: usize) -> Result<Vec<BatchItem>> {
    let mut items = Vec::with_capacity(cfg.batch_size);
    for task in TaskId::ALL {
        let k = cfg.batch_for(task);
        if k == 0 {
            continue;
        }
        let n = stream_lens[task.index()];
        if n == 0 {
            return Err(Error::Config(format!("no {task} samples to draw from")));
        }
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in iter * k..(iter + 1) * k {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_permutation(cfg.seed, task, epoch as u64, n)));
            }
            let perm = &cached.as_ref().expect("set above").1;
            items.push(BatchItem {
                task,
                index: perm[pos % n],
            });
        }
    }
    items.shuffle(&mut stream_rng(cfg.seed, STREAM_BATCH, 0, iter as u64));
    Ok(items)
}
