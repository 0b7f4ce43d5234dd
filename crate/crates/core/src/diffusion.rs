//! Decodes an optimized embedding into images: partially noise the source
//! latent, denoise conditioned on the embedding, repeat with fresh seeds
//! until a candidate passes the verdict.

use std::collections::BTreeSet;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{DenoiseRequest, DiffusionBackend, Latent, NoiseSchedule};
use crate::image::Image;
use crate::seed;
use crate::tensor::EmbeddingVector;
use crate::verdict::{CandidateOutcome, CandidateVerdict};

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`, `eps` standard normal from
/// `seed`. `t` is a schedule timestep; `t = 0` returns `z0` unchanged.
pub fn forward_noise(z0: &Latent, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Latent> {
    let alpha_bar = schedule.alpha_bar(t).ok_or_else(|| {
        Error::InvalidInput(format!(
            "timestep {t} outside schedule of {} steps",
            schedule.total_steps()
        ))
    })?;
    let mut out = z0.clone();
    if t == 0 {
        return Ok(out);
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let mut rng = seed::rng(seed);
    for z in &mut out.data {
        let eps: f64 = rng.sample(StandardNormal);
        *z = a * *z + b * eps;
    }
    Ok(out)
}

/// Schedule timestep where denoising starts for `noise_level` on a grid of
/// `num_inference_steps`: `T * (num_inf - t) / num_inf`. Smaller levels
/// start deeper in noise; `t = num_inf` starts at 0 (no noise).
pub fn start_timestep(noise_level: usize, num_inference_steps: usize, total_steps: usize) -> Result<usize> {
    if num_inference_steps == 0 || noise_level > num_inference_steps {
        return Err(Error::InvalidInput(format!(
            "noise level {noise_level} outside 0..={num_inference_steps}"
        )));
    }
    Ok(total_steps * (num_inference_steps - noise_level) / num_inference_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub noise_level: usize,
    pub start_step: usize,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub source: Image,
    pub conditioning: EmbeddingVector,
    pub noise_level: usize,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub attempt_seeds: Vec<u64>,
}

impl GenerationRequest {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<usize> {
        let distinct: BTreeSet<u64> = self.attempt_seeds.iter().copied().collect();
        if distinct.len() != self.attempt_seeds.len() {
            return Err(Error::InvalidInput("attempt seeds must be distinct".into()));
        }
        if self.attempt_seeds.is_empty() {
            return Err(Error::InvalidInput("no attempt seeds".into()));
        }
        start_timestep(self.noise_level, self.num_inference_steps, schedule.total_steps())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateImage {
    pub image: Image,
    pub attempt: usize,
    pub seed: u64,
    pub params: GenerationParams,
}

/// One attempt: encode, noise, denoise, decode.
pub fn generate_conditioned(
    req: &GenerationRequest,
    backend: &dyn DiffusionBackend,
    attempt: usize,
) -> Result<CandidateImage> {
    let start_step = req.validate(backend.schedule())?;
    let seed = *req.attempt_seeds.get(attempt).ok_or_else(|| {
        Error::InvalidInput(format!("attempt {attempt} beyond {} seeds", req.attempt_seeds.len()))
    })?;
    let seed_bytes = seed.to_le_bytes();
    let z0 = backend.vae_encode(&req.source)?;
    let noisy = forward_noise(
        &z0,
        start_step,
        backend.schedule(),
        seed::derive(&[&seed_bytes, b"forward-noise"]),
    )?;
    let denoised = backend.denoise(&DenoiseRequest {
        noisy: &noisy,
        start_step,
        conditioning: &req.conditioning,
        guidance_scale: req.guidance_scale,
        num_inference_steps: req.num_inference_steps,
        seed: seed::derive(&[&seed_bytes, b"sampler"]),
    })?;
    Ok(CandidateImage {
        image: backend.vae_decode(&denoised)?,
        attempt,
        seed,
        params: GenerationParams {
            noise_level: req.noise_level,
            start_step,
            guidance_scale: req.guidance_scale,
            num_inference_steps: req.num_inference_steps,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgedCandidate {
    pub candidate: CandidateImage,
    /// `None` when the verdict backends failed on this candidate.
    pub verdict: Option<CandidateVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptFailure {
    pub attempt: usize,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttemptReport {
    pub candidates: Vec<JudgedCandidate>,
    pub failures: Vec<AttemptFailure>,
    /// Index into `candidates` of the first hallucination success.
    pub success: Option<usize>,
}

impl AttemptReport {
    pub fn outcomes(&self) -> Vec<CandidateOutcome> {
        self.candidates
            .iter()
            .filter_map(|c| c.verdict.as_ref().map(|v| v.outcome))
            .collect()
    }

    pub fn all_failed(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Generates attempts in seed order, judging each, and stops at the first
/// hallucination success. Failed attempts are recorded and skipped;
/// unreachable backends abort.
pub fn attempt_generations(
    req: &GenerationRequest,
    backend: &dyn DiffusionBackend,
    mut verdict_fn: impl FnMut(&CandidateImage) -> Result<CandidateVerdict>,
) -> Result<AttemptReport> {
    req.validate(backend.schedule())?;
    let mut report = AttemptReport::default();
    for attempt in 0..req.attempt_seeds.len() {
        let candidate = match generate_conditioned(req, backend, attempt) {
            Ok(c) => c,
            Err(e) if e.is_backend_outage() => return Err(e),
            Err(e) => {
                log::warn!("generation attempt {attempt} failed: {e}");
                report.failures.push(AttemptFailure {
                    attempt,
                    seed: req.attempt_seeds[attempt],
                    message: e.to_string(),
                });
                continue;
            }
        };
        let verdict = match verdict_fn(&candidate) {
            Ok(v) => Some(v),
            Err(e) if e.is_backend_outage() => return Err(e),
            Err(e) if e.is_backend_failure() => {
                log::warn!("verdict for attempt {attempt} failed: {e}");
                None
            }
            Err(e) => return Err(e),
        };
        let success = verdict
            .as_ref()
            .is_some_and(|v| v.outcome == CandidateOutcome::HallucinationSuccess);
        report.candidates.push(JudgedCandidate { candidate, verdict });
        if success {
            report.success = Some(report.candidates.len() - 1);
            break;
        }
    }
    Ok(report)
}
