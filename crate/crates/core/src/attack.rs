//! Optimizes a CLIP image embedding so the victim answers "Yes" about an
//! absent object.
//!
//! The objective is `L_adv + lambda_clip * L_clip + lambda_reg * L_reg`:
//! `L_adv = -log p(yes)` through the mapper, `L_clip` is the cosine to the
//! object's composed text embedding and `L_reg = |c - c0|^2`.

use serde::{Deserialize, Serialize};

use crate::bridge::MapperCheckpoint;
use crate::compose::PromptSet;
use crate::error::{Error, Result};
use crate::gateway::{ClipBackend, MllmBackend, ProbeMode};
use crate::image::Image;
use crate::optim::{AdamW, AdamWConfig};
use crate::seed;
use crate::tensor::{self, EmbeddingVector};

/// Lower bound on `p(yes)` inside the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub tau_yes: f64,
    pub lambda_clip: f64,
    pub lambda_reg: f64,
    pub attempts: usize,
    pub guidance_scale: f64,
    /// Index on the inference grid where denoising starts; lower is noisier.
    pub noise_level: usize,
    pub detector_threshold: f64,
    pub num_inference_steps: usize,
    #[serde(default)]
    pub probe_mode: ProbeMode,
}

impl AttackConfig {
    pub fn qwen() -> Self {
        Self {
            lr: 0.1,
            max_steps: 100,
            tau_yes: 0.8,
            lambda_clip: 15.0,
            lambda_reg: 10.0,
            attempts: 4,
            guidance_scale: 5.0,
            noise_level: 30,
            detector_threshold: 0.5,
            num_inference_steps: 50,
            probe_mode: ProbeMode::DirectAnswer,
        }
    }

    pub fn llava() -> Self {
        Self::qwen()
    }

    pub fn glm() -> Self {
        Self {
            lr: 0.2,
            max_steps: 125,
            tau_yes: 0.5,
            lambda_clip: 0.5,
            lambda_reg: 1.5,
            attempts: 5,
            probe_mode: ProbeMode::AfterThinkToken,
            ..Self::qwen()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "qwen" => Some(Self::qwen()),
            "llava" => Some(Self::llava()),
            "glm" => Some(Self::glm()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau_yes > 0.0 && self.tau_yes < 1.0) {
            return bad(format!("tau_yes must lie in (0, 1), got {}", self.tau_yes));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.attempts == 0 {
            return bad("attempts must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("attack lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_clip >= 0.0 && self.lambda_reg >= 0.0) {
            return bad("lambda_clip and lambda_reg must be non-negative".into());
        }
        if self.num_inference_steps == 0 {
            return bad("num_inference_steps must be positive".into());
        }
        if self.noise_level > self.num_inference_steps {
            return bad(format!(
                "noise level {} exceeds the {} inference steps",
                self.noise_level, self.num_inference_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.detector_threshold) {
            return bad("detector threshold must lie in [0, 1]".into());
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return bad("guidance scale must be non-negative".into());
        }
        Ok(())
    }
}

pub fn loss_reg(c: &EmbeddingVector, c0: &EmbeddingVector) -> Result<f64> {
    tensor::check_dim("loss_reg", c0.dim(), c.dim())?;
    Ok(c.0.iter().zip(&c0.0).map(|(a, b)| (a - b).powi(2)).sum())
}

pub fn loss_clip(c: &EmbeddingVector, e_comp: &EmbeddingVector) -> Result<f64> {
    c.cosine(e_comp)
}

/// `-log p` with `p` floored at [`PROBABILITY_FLOOR`]; the flag reports
/// whether the floor was hit.
pub fn loss_adv(p_yes: f64) -> Result<(f64, bool)> {
    if !(0.0..=1.0).contains(&p_yes) {
        return Err(Error::InvalidInput(format!("yes-probability {p_yes} outside [0, 1]")));
    }
    let floored = p_yes < PROBABILITY_FLOOR;
    Ok((-p_yes.max(PROBABILITY_FLOOR).ln(), floored))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub clip: f64,
    pub reg: f64,
    pub total: f64,
    pub floored: bool,
}

pub fn loss_total(
    c: &EmbeddingVector,
    c0: &EmbeddingVector,
    e_comp: &EmbeddingVector,
    p_yes: f64,
    lambda_clip: f64,
    lambda_reg: f64,
) -> Result<LossBreakdown> {
    let (adv, floored) = loss_adv(p_yes)?;
    let clip = loss_clip(c, e_comp)?;
    let reg = loss_reg(c, c0)?;
    Ok(LossBreakdown {
        adv,
        clip,
        reg,
        total: adv + lambda_clip * clip + lambda_reg * reg,
        floored,
    })
}

/// Everything the optimizer needs besides the embedding itself.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub mapper: &'a MapperCheckpoint,
    pub mllm: &'a dyn MllmBackend,
    pub prompts: &'a PromptSet,
    pub object: &'a str,
    pub e_comp: &'a EmbeddingVector,
}

/// Yes-probability of `prompt` at embedding `c`.
pub fn probe_probability(ctx: &AttackContext<'_>, c: &EmbeddingVector, prompt: &str, mode: ProbeMode) -> Result<f64> {
    let tokens = ctx.mapper.forward(c)?;
    ctx.mllm.yes_probability(&tokens, prompt, mode)
}

/// `L_total` at `c` for one prompt, with its gradient w.r.t. `c`.
pub fn loss_and_grad(
    ctx: &AttackContext<'_>,
    c: &EmbeddingVector,
    c0: &EmbeddingVector,
    prompt: &str,
    cfg: &AttackConfig,
) -> Result<(f64, LossBreakdown, Vec<f64>)> {
    let weights = ctx.mapper.weights();
    let cache = weights.forward_cached(c.as_slice())?;
    let probe = ctx.mllm.yes_probability_grad(&cache.output, prompt, cfg.probe_mode)?;
    let p = probe.probability;
    let losses = loss_total(c, c0, ctx.e_comp, p, cfg.lambda_clip, cfg.lambda_reg)?;

    // d(-log p)/dp; zero once the floor is active.
    let dadv_dp = if losses.floored { 0.0 } else { -1.0 / p };
    let mut upstream = probe.grad;
    upstream.data.iter_mut().for_each(|g| *g *= dadv_dp);
    let mut grad = weights.backward(&cache, &upstream, None)?;

    let (nc, ne) = (c.norm(), ctx.e_comp.norm());
    if cfg.lambda_clip != 0.0 {
        let cos = losses.clip;
        for ((g, ci), ei) in grad.iter_mut().zip(c.as_slice()).zip(ctx.e_comp.as_slice()) {
            *g += cfg.lambda_clip * (ei / (nc * ne) - cos * ci / (nc * nc));
        }
    }
    if cfg.lambda_reg != 0.0 {
        for ((g, ci), c0i) in grad.iter_mut().zip(c.as_slice()).zip(c0.as_slice()) {
            *g += cfg.lambda_reg * 2.0 * (ci - c0i);
        }
    }
    Ok((p, losses, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based: the record of the `k`-th update.
    pub step: usize,
    pub prompt: String,
    /// `p(yes)` for `prompt` before the update.
    pub p_yes: f64,
    pub l_adv: f64,
    pub l_clip: f64,
    pub l_reg: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub floored: bool,
    pub check_prompt: String,
    /// `p(yes)` for `check_prompt` after the update.
    pub check_p_yes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceStatus {
    /// Met after `step` updates.
    ThresholdMet { step: usize },
    BudgetExhausted,
    NumericalFailure { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub status: TraceStatus,
    pub initial_check_prompt: String,
    pub initial_p_yes: f64,
    pub records: Vec<StepRecord>,
    /// Latest threshold-check probability.
    pub final_p_yes: f64,
    pub final_embedding: EmbeddingVector,
    pub steps_taken: usize,
}

impl OptimizationTrace {
    pub fn threshold_met(&self) -> bool {
        matches!(self.status, TraceStatus::ThresholdMet { .. })
    }

    /// Keeps every 10th record plus the last one.
    pub fn thinned(&self) -> Self {
        let last = self.records.len().saturating_sub(1);
        let mut out = self.clone();
        out.records = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| r.step % 10 == 0 || *i == last)
            .map(|(_, r)| r.clone())
            .collect();
        out
    }
}

/// Embeds `image` and optimizes from there.
pub fn optimize_embedding(
    image: &Image,
    clip: &dyn ClipBackend,
    ctx: &AttackContext<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<OptimizationTrace> {
    let c0 = clip.embed_image(image)?;
    optimize_from(&c0, ctx, cfg, seed)
}

/// AdamW on `c` starting at `c0`: one sampled prompt per step, followed by
/// a threshold check with a freshly sampled prompt.
pub fn optimize_from(
    c0: &EmbeddingVector,
    ctx: &AttackContext<'_>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<OptimizationTrace> {
    cfg.validate()?;
    if !ctx.mllm.supports_gradients() {
        return Err(Error::GradientUnavailable(ctx.mllm.id().to_string()));
    }
    tensor::check_dim("attack embedding", ctx.mapper.config().d_clip, c0.dim())?;
    let mut rng = seed::rng(seed);
    let mut c = c0.clone();
    let check_prompt = ctx.prompts.sample(ctx.object, &mut rng);
    let initial = probe_probability(ctx, &c, &check_prompt, cfg.probe_mode)?;
    let mut trace = OptimizationTrace {
        status: TraceStatus::BudgetExhausted,
        initial_check_prompt: check_prompt,
        initial_p_yes: initial,
        records: Vec::new(),
        final_p_yes: initial,
        final_embedding: c.clone(),
        steps_taken: 0,
    };
    if !initial.is_finite() {
        trace.status = TraceStatus::NumericalFailure { step: 0 };
        return Ok(trace);
    }
    if initial >= cfg.tau_yes {
        trace.status = TraceStatus::ThresholdMet { step: 0 };
        return Ok(trace);
    }
    let mut opt = AdamW::new(c.dim(), AdamWConfig::default());
    for step in 1..=cfg.max_steps {
        let prompt = ctx.prompts.sample(ctx.object, &mut rng);
        let (p, losses, grad) = loss_and_grad(ctx, &c, c0, &prompt, cfg)?;
        if !losses.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            trace.status = TraceStatus::NumericalFailure { step };
            return Ok(trace);
        }
        if losses.floored {
            log::warn!("yes-probability floored at step {step} for {:?}", ctx.object);
        }
        opt.step(&mut c.0, &grad, cfg.lr);
        let check_prompt = ctx.prompts.sample(ctx.object, &mut rng);
        let check = probe_probability(ctx, &c, &check_prompt, cfg.probe_mode)?;
        trace.records.push(StepRecord {
            step,
            prompt,
            p_yes: p,
            l_adv: losses.adv,
            l_clip: losses.clip,
            l_reg: losses.reg,
            l_total: losses.total,
            floored: losses.floored,
            check_prompt,
            check_p_yes: check,
        });
        trace.final_p_yes = check;
        trace.final_embedding = c.clone();
        trace.steps_taken = step;
        if !check.is_finite() || !c.is_finite() {
            trace.status = TraceStatus::NumericalFailure { step };
            return Ok(trace);
        }
        if check >= cfg.tau_yes {
            trace.status = TraceStatus::ThresholdMet { step };
            return Ok(trace);
        }
    }
    Ok(trace)
}
