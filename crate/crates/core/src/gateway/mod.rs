//! Adapter interfaces for the four external model roles: the CLIP encoder,
//! the victim MLLM, the embedding-conditioned diffusion decoder and the
//! open-vocabulary detector.
//!
//! Interfaces speak only arrays, strings, scalars and images so that a
//! remote process can implement them (see [`remote`]). Deterministic seeded
//! mocks live in [`mock`].

pub mod mock;
pub mod remote;

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{EmbeddingVector, TokenSeq};

/// Where the yes-token probability is read from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMode {
    /// First decoding position of the answer.
    #[default]
    DirectAnswer,
    /// First decoding position after the think-open token, for reasoning
    /// models that emit `<think>...</think><answer>...</answer>`.
    AfterThinkToken,
}

/// Vision input for a generation call: either a raw image or vision tokens
/// that bypass the model's own encoder.
#[derive(Debug, Clone, Copy)]
pub enum VisionInput<'a> {
    Image(&'a Image),
    Tokens(&'a TokenSeq),
}

pub trait ClipBackend: Send + Sync {
    fn id(&self) -> &str;
    fn dims(&self) -> usize;
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    /// `Some(1)` asks the orchestrator to serialize calls.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Yes-probability together with its gradient w.r.t. the vision tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct YesProbe {
    pub probability: f64,
    pub grad: TokenSeq,
}

pub trait MllmBackend: Send + Sync {
    fn id(&self) -> &str;
    /// `(N, d_M)`.
    fn token_dims(&self) -> (usize, usize);
    fn encode_vision(&self, image: &Image) -> Result<TokenSeq>;
    /// Probability of the yes-token (summed over configured yes variants).
    fn yes_probability(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<f64>;
    fn supports_gradients(&self) -> bool {
        false
    }
    /// Value and gradient in one call. Verdict-only backends keep the
    /// default, which reports [`Error::GradientUnavailable`].
    fn yes_probability_grad(
        &self,
        _tokens: &TokenSeq,
        _prompt: &str,
        _mode: ProbeMode,
    ) -> Result<YesProbe> {
        Err(Error::GradientUnavailable(self.id().to_string()))
    }
    /// Free-form decoded answer.
    fn respond(&self, input: VisionInput<'_>, prompt: &str) -> Result<String>;
    /// Decodes an answer and parses its Yes/No.
    fn verdict(&self, image: &Image, prompt: &str) -> Result<bool> {
        let answer = self.respond(VisionInput::Image(image), prompt)?;
        parse_yes_no(&answer).ok_or_else(|| {
            Error::backend(self.id(), format!("answer is neither yes nor no: {answer:?}"))
        })
    }
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Parses a Yes/No answer. If an `<answer>` block is present only its
/// contents count; otherwise the leading word decides. Case-insensitive.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    let body = match (text.find("<answer>"), text.find("</answer>")) {
        (Some(open), Some(close)) if close > open => &text[open + "<answer>".len()..close],
        (Some(open), None) => &text[open + "<answer>".len()..],
        _ => text,
    };
    let word: String = body
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Cumulative-alpha noise schedule indexed `0..=T`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bars: Vec<f64>) -> Result<Self> {
        if alpha_bars.len() < 2 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if (alpha_bars[0] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "alpha_bar at t=0 must be 1, got {}",
                alpha_bars[0]
            )));
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("alpha_bar must strictly decrease".into()));
        }
        if alpha_bars.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput("alpha_bar outside [0, 1]".into()));
        }
        Ok(Self { alpha_bars })
    }

    /// `alpha_bar_t = 1 - (1 - final) * t / T`.
    pub fn linear(total_steps: usize, final_alpha_bar: f64) -> Result<Self> {
        let t_max = total_steps as f64;
        Self::new(
            (0..=total_steps)
                .map(|t| 1.0 - (1.0 - final_alpha_bar) * t as f64 / t_max)
                .collect(),
        )
    }

    /// The "scaled linear" beta schedule used by Stable Diffusion
    /// (`beta` from 0.00085 to 0.012 over 1000 steps, linear in sqrt).
    pub fn scaled_linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut bars = Vec::with_capacity(total_steps + 1);
        bars.push(1.0);
        let mut acc = 1.0;
        for i in 0..total_steps {
            let frac = if total_steps > 1 {
                i as f64 / (total_steps - 1) as f64
            } else {
                0.0
            };
            let beta = (s + (e - s) * frac).powi(2);
            acc *= 1.0 - beta;
            bars.push(acc);
        }
        Self::new(bars)
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Option<f64> {
        self.alpha_bars.get(t).copied()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// A diffusion latent. `tags` is metadata carried through the VAE for
/// backends that understand it; real backends ignore it.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub tags: BTreeSet<String>,
}

impl Latent {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                context: "latent",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            tags: BTreeSet::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub noisy: &'a Latent,
    /// Schedule timestep the latent was noised to; denoising runs from here
    /// down to 0.
    pub start_step: usize,
    pub conditioning: &'a EmbeddingVector,
    pub guidance_scale: f64,
    /// Size of the full inference grid; the backend runs the part of it that
    /// lies below `start_step`.
    pub num_inference_steps: usize,
    pub seed: u64,
}

pub trait DiffusionBackend: Send + Sync {
    fn id(&self) -> &str;
    fn schedule(&self) -> &NoiseSchedule;
    fn vae_encode(&self, image: &Image) -> Result<Latent>;
    fn vae_decode(&self, latent: &Latent) -> Result<Image>;
    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Latent>;
    /// Max per-pixel error of `vae_decode(vae_encode(x))`, in 8-bit units.
    fn reconstruction_tolerance(&self) -> u8 {
        0
    }
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x0, y0, x1, y1]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

pub trait DetectorBackend: Send + Sync {
    fn id(&self) -> &str;
    /// All detections of `object` scoring at least `threshold`.
    fn detect(&self, image: &Image, object: &str, threshold: f64) -> Result<Vec<Detection>>;
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

/// Serializes access to a backend that declared `max_concurrency == 1`.
pub struct Gated<T: ?Sized> {
    inner: Arc<T>,
    lock: Option<Mutex<()>>,
}

impl<T: ?Sized> Gated<T> {
    pub fn new(inner: Arc<T>, max_concurrency: Option<usize>) -> Self {
        Self {
            inner,
            lock: (max_concurrency == Some(1)).then(|| Mutex::new(())),
        }
    }

    pub fn call<R>(&self, f: impl FnOnce(&T) -> R) -> R {
        let _guard = self
            .lock
            .as_ref()
            .map(|m| m.lock().unwrap_or_else(|poisoned| poisoned.into_inner()));
        f(&self.inner)
    }

    pub fn inner(&self) -> &Arc<T> {
        &self.inner
    }
}

/// One handle per model role.
#[derive(Clone)]
pub struct Backends {
    pub clip: Arc<dyn ClipBackend>,
    pub mllm: Arc<dyn MllmBackend>,
    pub diffusion: Arc<dyn DiffusionBackend>,
    pub detector: Arc<dyn DetectorBackend>,
}

impl Backends {
    /// Wraps every backend that declared `max_concurrency == 1` so calls to
    /// it are serialized.
    pub fn gated(self) -> Self {
        let clip: Arc<dyn ClipBackend> = match self.clip.max_concurrency() {
            Some(1) => Arc::new(Gated::new(self.clip, Some(1))),
            _ => self.clip,
        };
        let mllm: Arc<dyn MllmBackend> = match self.mllm.max_concurrency() {
            Some(1) => Arc::new(Gated::new(self.mllm, Some(1))),
            _ => self.mllm,
        };
        let diffusion: Arc<dyn DiffusionBackend> = match self.diffusion.max_concurrency() {
            Some(1) => Arc::new(Gated::new(self.diffusion, Some(1))),
            _ => self.diffusion,
        };
        let detector: Arc<dyn DetectorBackend> = match self.detector.max_concurrency() {
            Some(1) => Arc::new(Gated::new(self.detector, Some(1))),
            _ => self.detector,
        };
        Self {
            clip,
            mllm,
            diffusion,
            detector,
        }
    }
}

impl ClipBackend for Gated<dyn ClipBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn dims(&self) -> usize {
        self.inner.dims()
    }
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        self.call(|b| b.embed_image(image))
    }
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.call(|b| b.embed_text(text))
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}

impl MllmBackend for Gated<dyn MllmBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn token_dims(&self) -> (usize, usize) {
        self.inner.token_dims()
    }
    fn encode_vision(&self, image: &Image) -> Result<TokenSeq> {
        self.call(|b| b.encode_vision(image))
    }
    fn yes_probability(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<f64> {
        self.call(|b| b.yes_probability(tokens, prompt, mode))
    }
    fn supports_gradients(&self) -> bool {
        self.inner.supports_gradients()
    }
    fn yes_probability_grad(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<YesProbe> {
        self.call(|b| b.yes_probability_grad(tokens, prompt, mode))
    }
    fn respond(&self, input: VisionInput<'_>, prompt: &str) -> Result<String> {
        self.call(|b| b.respond(input, prompt))
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}

impl DiffusionBackend for Gated<dyn DiffusionBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
    fn vae_encode(&self, image: &Image) -> Result<Latent> {
        self.call(|b| b.vae_encode(image))
    }
    fn vae_decode(&self, latent: &Latent) -> Result<Image> {
        self.call(|b| b.vae_decode(latent))
    }
    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Latent> {
        self.call(|b| b.denoise(request))
    }
    fn reconstruction_tolerance(&self) -> u8 {
        self.inner.reconstruction_tolerance()
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}

impl DetectorBackend for Gated<dyn DetectorBackend> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn detect(&self, image: &Image, object: &str, threshold: f64) -> Result<Vec<Detection>> {
        self.call(|b| b.detect(image, object, threshold))
    }
    fn max_concurrency(&self) -> Option<usize> {
        self.inner.max_concurrency()
    }
}
