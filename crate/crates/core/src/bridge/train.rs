use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CheckpointStats, MapperCheckpoint, MapperConfig, MapperWeights};
use crate::error::{Error, Result};
use crate::gateway::{ClipBackend, MllmBackend};
use crate::image::Image;
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::seed;
use crate::tensor::{EmbeddingVector, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Cosine period in epochs.
    pub t_max: usize,
    pub warmup_steps: u64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 10,
            batch_size: 32,
            weight_decay: 0.01,
            t_max: 10,
            warmup_steps: 1000,
        }
    }
}

impl MapperTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("mapper lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("mapper epochs and batch size must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("mapper weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_samples: usize) -> u64 {
        (self.epochs * n_samples.div_ceil(self.batch_size)) as u64
    }

    /// Full check once the dataset size is known.
    pub fn validate_for(&self, n_samples: usize) -> Result<()> {
        self.validate()?;
        let total = self.total_steps(n_samples);
        if self.warmup_steps > total {
            return Err(Error::Config(format!(
                "warmup of {} steps exceeds the {total} total training steps",
                self.warmup_steps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Alignment MSE of the saved checkpoint over the whole dataset.
    pub final_loss: f64,
}

/// Mean over samples and elements of `(Pi(cls) - target)^2`.
pub fn alignment_mse(ckpt: &MapperCheckpoint, pairs: &[(EmbeddingVector, TokenSeq)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("alignment over an empty dataset".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (cls, target) in pairs {
        let y = ckpt.forward(cls)?;
        if y.shape() != target.shape() {
            return Err(Error::DimensionMismatch {
                context: "alignment target",
                expected: y.data.len(),
                actual: target.data.len(),
            });
        }
        sum += y.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += y.data.len();
    }
    Ok(sum / count as f64)
}

/// Encodes every image with both backends, then trains on the pairs.
pub fn train_mapper(
    dataset: &[Image],
    clip: &dyn ClipBackend,
    mllm: &dyn MllmBackend,
    cfg: MapperConfig,
    tcfg: &MapperTrainConfig,
    seed: u64,
) -> Result<(MapperCheckpoint, TrainStats)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("mapper training set is empty".into()));
    }
    tensor_dims_match(clip, mllm, &cfg)?;
    let pairs = dataset
        .iter()
        .map(|img| Ok((clip.embed_image(img)?, mllm.encode_vision(img)?)))
        .collect::<Result<Vec<_>>>()?;
    train_on_pairs(&pairs, cfg, tcfg, seed, |_, _| {})
}

fn tensor_dims_match(clip: &dyn ClipBackend, mllm: &dyn MllmBackend, cfg: &MapperConfig) -> Result<()> {
    crate::tensor::check_dim("clip dims vs mapper d_clip", cfg.d_clip, clip.dims())?;
    let (n, d_m) = mllm.token_dims();
    crate::tensor::check_dim("mllm tokens vs mapper n_tokens", cfg.n_tokens, n)?;
    crate::tensor::check_dim("mllm token dim vs mapper d_m", cfg.d_m, d_m)
}

/// Mini-batch AdamW over `(cls, target tokens)` pairs. `on_step` sees the
/// step index and the batch loss before that step's update.
pub fn train_on_pairs(
    pairs: &[(EmbeddingVector, TokenSeq)],
    cfg: MapperConfig,
    tcfg: &MapperTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<(MapperCheckpoint, TrainStats)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("mapper training set is empty".into()));
    }
    tcfg.validate_for(pairs.len())?;
    for (cls, target) in pairs {
        crate::tensor::check_dim("training cls", cfg.d_clip, cls.dim())?;
        if target.shape() != (cfg.n_tokens, cfg.d_m) {
            return Err(Error::DimensionMismatch {
                context: "training target tokens",
                expected: cfg.n_tokens * cfg.d_m,
                actual: target.data.len(),
            });
        }
    }
    let seed_bytes = seed.to_le_bytes();
    let mut weights = MapperWeights::init(cfg, seed::derive(&[&seed_bytes, b"mapper-init"]))?;
    let mut shuffle_rng = seed::rng(seed::derive(&[&seed_bytes, b"mapper-shuffle"]));
    let mut opt = AdamW::new(
        weights.data.len(),
        AdamWConfig {
            weight_decay: tcfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let schedule = WarmupCosine {
        base_lr: tcfg.lr,
        warmup_steps: tcfg.warmup_steps,
        t_max: tcfg.t_max as u64,
        min_lr: 0.0,
    };
    let elems = (cfg.n_tokens * cfg.d_m) as f64;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grads = vec![0.0; weights.data.len()];
    let mut step = 0u64;
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let denom = batch.len() as f64 * elems;
            let mut loss = 0.0;
            for &i in batch {
                let (cls, target) = &pairs[i];
                let cache = weights.forward_cached(cls.as_slice())?;
                let mut upstream = TokenSeq::zeros(cfg.n_tokens, cfg.d_m);
                for ((g, y), t) in upstream.data.iter_mut().zip(&cache.output.data).zip(&target.data) {
                    let r = y - t;
                    loss += r * r / denom;
                    *g = 2.0 * r / denom;
                }
                weights.backward(&cache, &upstream, Some(&mut grads))?;
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "mapper training diverged at epoch {epoch}, step {step} (loss {loss})"
                )));
            }
            on_step(step, loss);
            opt.step(&mut weights.data, &grads, schedule.lr(step, epoch as u64));
            step += 1;
            epoch_sum += loss;
            batches += 1;
        }
        let mean = epoch_sum / batches as f64;
        log::debug!("mapper epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    let mut ckpt = MapperCheckpoint::new(weights, CheckpointStats::default())?;
    let final_loss = alignment_mse(&ckpt, pairs)?;
    ckpt.stats = CheckpointStats {
        final_loss: Some(final_loss),
        epochs: tcfg.epochs,
        steps: step,
    };
    Ok((
        ckpt,
        TrainStats {
            epoch_losses,
            steps: step,
            final_loss,
        },
    ))
}
