//! Deterministic seeded backends for tests and dry runs.
//!
//! Everything here is a pure function of the constructor seed and the call
//! arguments. The CLIP mock is a bag-of-words random projection so that
//! related strings ("vase", "a photo of a vase") land near each other, and
//! image embeddings pick up the directions of their metadata tags.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{
    ClipBackend, DenoiseRequest, Detection, DetectorBackend, DiffusionBackend, Latent,
    MllmBackend, NoiseSchedule, ProbeMode, VisionInput, YesProbe,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;
use crate::tensor::{self, EmbeddingVector, TokenSeq};

const HASH_BITS: usize = 256;

/// Fixed seeded `dim x 256` Gaussian projection of a SHA-256 bit vector.
#[derive(Debug, Clone)]
struct HashProjection {
    dim: usize,
    matrix: Vec<f64>,
}

impl HashProjection {
    fn new(seed: u64, tag: &str, dim: usize) -> Self {
        let mut rng = seed::rng(seed::derive(&[&seed.to_le_bytes(), tag.as_bytes()]));
        let scale = 1.0 / (HASH_BITS as f64).sqrt();
        let matrix = (0..dim * HASH_BITS)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self { dim, matrix }
    }

    fn project(&self, bytes: &[u8]) -> Vec<f64> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(bytes);
        let bits: Vec<f64> = (0..HASH_BITS)
            .map(|i| {
                if digest[i / 8] >> (i % 8) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        self.matrix
            .chunks_exact(HASH_BITS)
            .map(|row| tensor::dot(row, &bits))
            .collect()
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

fn image_bytes(image: &Image) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(image.rgb.len() + 8);
    bytes.extend_from_slice(&image.width.to_le_bytes());
    bytes.extend_from_slice(&image.height.to_le_bytes());
    bytes.extend_from_slice(&image.rgb);
    bytes
}

fn gaussian_vec(seed: u64, len: usize, scale: f64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

/// Mock CLIP encoder with unit-norm outputs.
#[derive(Debug, Clone)]
pub struct MockClip {
    id: String,
    projection: HashProjection,
}

impl MockClip {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidInput(format!("mock clip dim {dim} < 2")));
        }
        Ok(Self {
            id: format!("mock-clip-{seed}-{dim}"),
            projection: HashProjection::new(seed, "mock-clip", dim),
        })
    }

    fn text_direction(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.projection.dim];
        let mut any = false;
        for word in words(text) {
            any = true;
            let v = self.projection.project(format!("word:{word}").as_bytes());
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        if !any {
            acc = self.projection.project(format!("text:{text}").as_bytes());
        }
        acc
    }
}

fn unit(v: Vec<f64>) -> Result<EmbeddingVector> {
    EmbeddingVector::new(v).normalized()
}

impl ClipBackend for MockClip {
    fn id(&self) -> &str {
        &self.id
    }

    fn dims(&self) -> usize {
        self.projection.dim
    }

    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let mut v = self.projection.project(&image_bytes(image));
        for tag in &image.tags {
            let t = self.text_direction(tag);
            v.iter_mut().zip(t).for_each(|(a, b)| *a += b);
        }
        unit(v)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        unit(self.text_direction(text))
    }
}

pub fn mock_clip_backend(seed: u64, d: usize) -> Result<MockClip> {
    MockClip::new(seed, d)
}

/// How the mock MLLM decides a free-form Yes/No answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockVerdictRule {
    /// Answer Yes iff the yes-probability exceeds 0.5.
    Probability,
    Always(bool),
    /// Answer Yes iff one of the image tags appears as a word of the prompt.
    /// Token inputs fall back to [`MockVerdictRule::Probability`].
    TagInPrompt,
}

#[derive(Clone)]
enum VisionSource {
    ContentHash(HashProjection),
    /// Token `i` is `maps[i] * clip(x)`; `maps[i]` is `d_M x d_CLIP`.
    LinearOfClip {
        clip: Arc<dyn ClipBackend>,
        maps: Vec<Vec<f64>>,
    },
}

/// Mock victim: `p(yes) = logistic(<mean(tokens), w_prompt>)` with seeded
/// Gaussian weights per prompt string (see [`MockMllm::prompt_weights`]).
#[derive(Clone)]
pub struct MockMllm {
    id: String,
    seed: u64,
    d_m: usize,
    n_tokens: usize,
    vision: VisionSource,
    rule: MockVerdictRule,
    answer_format: ProbeMode,
    gain: f64,
    bias: f64,
}

impl MockMllm {
    pub fn new(seed: u64, d_m: usize, n_tokens: usize) -> Result<Self> {
        if d_m < 2 || n_tokens < 1 {
            return Err(Error::InvalidInput(format!(
                "mock mllm needs d_M >= 2 and N >= 1, got {d_m} and {n_tokens}"
            )));
        }
        Ok(Self {
            id: format!("mock-mllm-{seed}-{n_tokens}x{d_m}"),
            seed,
            d_m,
            n_tokens,
            vision: VisionSource::ContentHash(HashProjection::new(seed, "mock-vision", d_m)),
            rule: MockVerdictRule::Probability,
            answer_format: ProbeMode::DirectAnswer,
            gain: 1.0,
            bias: 0.0,
        })
    }

    /// Makes the vision encoder a fixed seeded linear map of `clip`'s image
    /// embedding, one `d_M x d_CLIP` matrix per token.
    pub fn with_linear_vision(mut self, clip: Arc<dyn ClipBackend>) -> Self {
        let d_clip = clip.dims();
        let scale = 1.0 / (d_clip as f64).sqrt();
        let maps = (0..self.n_tokens)
            .map(|i| {
                gaussian_vec(
                    seed::derive(&[&self.seed.to_le_bytes(), b"vision-map", &(i as u64).to_le_bytes()]),
                    self.d_m * d_clip,
                    scale,
                )
            })
            .collect();
        self.vision = VisionSource::LinearOfClip { clip, maps };
        self
    }

    pub fn with_rule(mut self, rule: MockVerdictRule) -> Self {
        self.rule = rule;
        self
    }

    /// Logit becomes `gain * <mean(tokens), w_prompt> + bias`.
    pub fn with_logit(mut self, gain: f64, bias: f64) -> Self {
        self.gain = gain;
        self.bias = bias;
        self
    }

    /// Emit `<think>..</think><answer>..</answer>` style answers.
    pub fn with_answer_format(mut self, format: ProbeMode) -> Self {
        self.answer_format = format;
        self
    }

    /// The per-token linear maps when built with [`Self::with_linear_vision`].
    pub fn linear_vision_maps(&self) -> Option<&[Vec<f64>]> {
        match &self.vision {
            VisionSource::LinearOfClip { maps, .. } => Some(maps),
            VisionSource::ContentHash(_) => None,
        }
    }

    /// The logistic weight vector for `prompt` under `mode`: a direction
    /// shared by all prompts of a mode plus a smaller per-prompt part.
    pub fn prompt_weights(&self, prompt: &str, mode: ProbeMode) -> Vec<f64> {
        let mode_tag: &[u8] = match mode {
            ProbeMode::DirectAnswer => b"direct",
            ProbeMode::AfterThinkToken => b"after-think",
        };
        let seed_bytes = self.seed.to_le_bytes();
        let shared = gaussian_vec(seed::derive(&[&seed_bytes, b"shared", mode_tag]), self.d_m, 1.0);
        let own = gaussian_vec(
            seed::derive(&[&seed_bytes, b"prompt", mode_tag, prompt.as_bytes()]),
            self.d_m,
            PROMPT_WEIGHT_SPREAD,
        );
        shared.iter().zip(own).map(|(a, b)| a + b).collect()
    }

    fn check_tokens(&self, tokens: &TokenSeq) -> Result<()> {
        tensor::check_dim("mllm token dim", self.d_m, tokens.dim)?;
        tensor::check_dim("mllm token count", self.n_tokens, tokens.n_tokens)
    }

    fn logit(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<(f64, Vec<f64>)> {
        self.check_tokens(tokens)?;
        let mut w = self.prompt_weights(prompt, mode);
        w.iter_mut().for_each(|v| *v *= self.gain);
        Ok((tensor::dot(&tokens.mean_token(), &w) + self.bias, w))
    }

    fn format_answer(&self, yes: bool) -> String {
        let word = if yes { "Yes" } else { "No" };
        match self.answer_format {
            ProbeMode::DirectAnswer => word.to_string(),
            ProbeMode::AfterThinkToken => {
                format!("<think>Checking the image for the object.</think><answer>{word}</answer>")
            }
        }
    }
}

/// Scale of the prompt-specific part of the mock logistic weights.
pub const PROMPT_WEIGHT_SPREAD: f64 = 0.5;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl MllmBackend for MockMllm {
    fn id(&self) -> &str {
        &self.id
    }

    fn token_dims(&self) -> (usize, usize) {
        (self.n_tokens, self.d_m)
    }

    fn encode_vision(&self, image: &Image) -> Result<TokenSeq> {
        match &self.vision {
            VisionSource::ContentHash(proj) => {
                let bytes = image_bytes(image);
                let mut data = Vec::with_capacity(self.n_tokens * self.d_m);
                for i in 0..self.n_tokens {
                    let mut keyed = (i as u64).to_le_bytes().to_vec();
                    keyed.extend_from_slice(&bytes);
                    data.extend(proj.project(&keyed));
                }
                TokenSeq::from_flat(self.n_tokens, self.d_m, data)
            }
            VisionSource::LinearOfClip { clip, maps } => {
                let c = clip.embed_image(image)?;
                let d_clip = c.dim();
                let mut data = Vec::with_capacity(self.n_tokens * self.d_m);
                for map in maps {
                    data.extend(
                        map.chunks_exact(d_clip)
                            .map(|row| tensor::dot(row, c.as_slice())),
                    );
                }
                TokenSeq::from_flat(self.n_tokens, self.d_m, data)
            }
        }
    }

    fn yes_probability(&self, tokens: &TokenSeq, prompt: &str, mode: ProbeMode) -> Result<f64> {
        Ok(logistic(self.logit(tokens, prompt, mode)?.0))
    }

    fn supports_gradients(&self) -> bool {
        true
    }

    fn yes_probability_grad(
        &self,
        tokens: &TokenSeq,
        prompt: &str,
        mode: ProbeMode,
    ) -> Result<YesProbe> {
        let (z, w) = self.logit(tokens, prompt, mode)?;
        let p = logistic(z);
        let scale = p * (1.0 - p) / self.n_tokens as f64;
        let mut grad = TokenSeq::zeros(self.n_tokens, self.d_m);
        for i in 0..self.n_tokens {
            grad.row_mut(i)
                .iter_mut()
                .zip(&w)
                .for_each(|(g, wj)| *g = scale * wj);
        }
        Ok(YesProbe {
            probability: p,
            grad,
        })
    }

    fn respond(&self, input: VisionInput<'_>, prompt: &str) -> Result<String> {
        let yes = match (self.rule, input) {
            (MockVerdictRule::Always(answer), _) => answer,
            (MockVerdictRule::TagInPrompt, VisionInput::Image(image)) => {
                let prompt_words: Vec<String> = words(prompt).collect();
                image.tags.iter().any(|tag| {
                    let tag_words: Vec<String> = words(tag).collect();
                    !tag_words.is_empty()
                        && prompt_words
                            .windows(tag_words.len())
                            .any(|w| w == tag_words.as_slice())
                })
            }
            (_, VisionInput::Image(image)) => {
                let tokens = self.encode_vision(image)?;
                self.yes_probability(&tokens, prompt, ProbeMode::DirectAnswer)? > 0.5
            }
            (_, VisionInput::Tokens(tokens)) => {
                self.yes_probability(tokens, prompt, ProbeMode::DirectAnswer)? > 0.5
            }
        };
        Ok(self.format_answer(yes))
    }
}

pub fn mock_mllm_backend(seed: u64, d_m: usize, n_tokens: usize) -> Result<MockMllm> {
    MockMllm::new(seed, d_m, n_tokens)
}

/// Object-insertion rule for [`MockDiffusion`]: the decoded image is tagged
/// with `keyword` when the conditioning is close to its text embedding.
#[derive(Clone)]
struct Insertion {
    clip: Arc<dyn ClipBackend>,
    keywords: Vec<String>,
    threshold: f64,
}

/// Identity VAE over the pixel grid (`[h, w, 3]`, values in `[-1, 1]`) and
/// a one-shot denoiser that blends the noisy latent with a projection of
/// the conditioning vector.
#[derive(Clone)]
pub struct MockDiffusion {
    id: String,
    seed: u64,
    schedule: NoiseSchedule,
    insertion: Option<Insertion>,
}

pub const MOCK_FINAL_ALPHA_BAR: f64 = 0.01;

impl MockDiffusion {
    pub fn new(seed: u64) -> Self {
        Self::with_total_steps(seed, 1000)
    }

    pub fn with_total_steps(seed: u64, total_steps: usize) -> Self {
        Self {
            id: format!("mock-diffusion-{seed}"),
            seed,
            schedule: NoiseSchedule::linear(total_steps.max(1), MOCK_FINAL_ALPHA_BAR)
                .expect("linear schedule is valid"),
            insertion: None,
        }
    }

    pub fn with_insertion(
        mut self,
        clip: Arc<dyn ClipBackend>,
        keywords: Vec<String>,
        threshold: f64,
    ) -> Self {
        self.insertion = Some(Insertion {
            clip,
            keywords,
            threshold,
        });
        self
    }

    /// Weight given to the conditioning projection when denoising from
    /// `start_step`: `(1 - alpha_bar) * g / (1 + g)`. Zero at `t = 0`.
    pub fn blend_weight(&self, start_step: usize, guidance_scale: f64) -> Result<f64> {
        let alpha_bar = self.schedule.alpha_bar(start_step).ok_or_else(|| {
            Error::InvalidInput(format!("start step {start_step} beyond schedule"))
        })?;
        let g = guidance_scale.max(0.0);
        Ok((1.0 - alpha_bar) * g / (1.0 + g))
    }

    /// `tanh(P c)` with a seeded Gaussian `P` of shape `len x d`.
    pub fn conditioning_target(&self, conditioning: &EmbeddingVector, len: usize) -> Vec<f64> {
        let d = conditioning.dim();
        let scale = 1.0 / (d.max(1) as f64).sqrt();
        (0..len)
            .map(|j| {
                let row = gaussian_vec(
                    seed::derive(&[&self.seed.to_le_bytes(), b"cond-row", &(j as u64).to_le_bytes()]),
                    d,
                    scale,
                );
                tensor::dot(&row, conditioning.as_slice()).tanh()
            })
            .collect()
    }
}

impl DiffusionBackend for MockDiffusion {
    fn id(&self) -> &str {
        &self.id
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn vae_encode(&self, image: &Image) -> Result<Latent> {
        let data = image.rgb.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
        let mut latent = Latent::new(
            vec![image.height as usize, image.width as usize, 3],
            data,
        )?;
        latent.tags = image.tags.clone();
        Ok(latent)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<Image> {
        let [h, w, c] = latent.shape[..] else {
            return Err(Error::InvalidInput(format!(
                "mock latent must be [h, w, 3], got {:?}",
                latent.shape
            )));
        };
        if c != 3 {
            return Err(Error::InvalidInput("mock latent needs 3 channels".into()));
        }
        let rgb = latent
            .data
            .iter()
            .map(|&x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect();
        let mut image = Image::new(w as u32, h as u32, rgb)?;
        image.tags = latent.tags.clone();
        Ok(image)
    }

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Latent> {
        let weight = self.blend_weight(request.start_step, request.guidance_scale)?;
        let mut out = request.noisy.clone();
        if weight > 0.0 {
            let target = self.conditioning_target(request.conditioning, out.len());
            out.data
                .iter_mut()
                .zip(target)
                .for_each(|(z, t)| *z = (1.0 - weight) * *z + weight * t);
        }
        if let Some(rule) = &self.insertion {
            for keyword in &rule.keywords {
                let text = rule.clip.embed_text(keyword)?;
                if request.conditioning.cosine(&text)? >= rule.threshold {
                    out.tags.insert(keyword.clone());
                }
            }
        }
        Ok(out)
    }
}

pub fn mock_diffusion_backend(seed: u64) -> MockDiffusion {
    MockDiffusion::new(seed)
}

/// Fires one full-frame detection with score 0.9 iff the image carries the
/// object as a metadata tag (and, when `keywords` is non-empty, the object
/// is one of them).
#[derive(Debug, Clone, Default)]
pub struct MockDetector {
    keywords: Vec<String>,
}

pub const MOCK_DETECTION_SCORE: f64 = 0.9;

impl MockDetector {
    pub fn new(keywords: Vec<String>) -> Self {
        Self { keywords }
    }
}

impl DetectorBackend for MockDetector {
    fn id(&self) -> &str {
        "mock-detector"
    }

    fn detect(&self, image: &Image, object: &str, threshold: f64) -> Result<Vec<Detection>> {
        let known = self.keywords.is_empty() || self.keywords.iter().any(|k| k == object);
        if known && image.has_tag(object) && MOCK_DETECTION_SCORE >= threshold {
            Ok(vec![Detection {
                bbox: [0.0, 0.0, image.width as f64, image.height as f64],
                score: MOCK_DETECTION_SCORE,
            }])
        } else {
            Ok(Vec::new())
        }
    }
}

pub fn mock_detector_backend(keywords: Vec<String>) -> MockDetector {
    MockDetector::new(keywords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> Image {
        Image::synthetic(seed, 4, 4)
    }

    #[test]
    fn clip_is_deterministic_and_unit_norm() {
        let clip = mock_clip_backend(7, 8).unwrap();
        let a = clip.embed_image(&img(1)).unwrap();
        let b = clip.embed_image(&img(1)).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        let t = clip.embed_text("a photo of a vase").unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-6);
        assert_eq!(t.dim(), 8);
    }

    #[test]
    fn clip_cross_seed_cosine_matches_dot_oracle() {
        let a = mock_clip_backend(7, 8).unwrap().embed_image(&img(3)).unwrap();
        let b = mock_clip_backend(8, 8).unwrap().embed_image(&img(3)).unwrap();
        let oracle: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum::<f64>()
            / (a.0.iter().map(|x| x * x).sum::<f64>().sqrt()
                * b.0.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((a.cosine(&b).unwrap() - oracle).abs() < 1e-12);
        assert_ne!(a, b);
    }

    #[test]
    fn clip_rejects_tiny_dim() {
        assert!(mock_clip_backend(1, 1).is_err());
    }

    #[test]
    fn related_text_is_closer() {
        let clip = mock_clip_backend(11, 64).unwrap();
        let vase = clip.embed_text("vase").unwrap();
        let photo = clip.embed_text("A photo of a vase").unwrap();
        let boat = clip.embed_text("boat").unwrap();
        assert!(vase.cosine(&photo).unwrap() > vase.cosine(&boat).unwrap());
    }

    #[test]
    fn mllm_zero_tokens_give_half() {
        let m = mock_mllm_backend(3, 4, 2).unwrap();
        let p = m
            .yes_probability(&TokenSeq::zeros(2, 4), "Is there a boat?", ProbeMode::DirectAnswer)
            .unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn mllm_saturates_along_prompt_direction() {
        let m = mock_mllm_backend(3, 4, 2).unwrap();
        let w = m.prompt_weights("q", ProbeMode::DirectAnswer);
        let mut last = 0.0;
        for scale in [0.1, 1.0, 10.0, 100.0] {
            let row: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let tokens = TokenSeq::from_rows(vec![row.clone(), row]).unwrap();
            let p = m.yes_probability(&tokens, "q", ProbeMode::DirectAnswer).unwrap();
            assert!(p > last);
            last = p;
        }
        assert!(last > 1.0 - 1e-9);
    }

    #[test]
    fn mllm_matches_closed_form() {
        let m = mock_mllm_backend(3, 4, 2).unwrap();
        let mut rng = seed::rng(3);
        let data: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let tokens = TokenSeq::from_flat(2, 4, data.clone()).unwrap();
        let w = m.prompt_weights("Is there a cat?", ProbeMode::DirectAnswer);
        let mean: Vec<f64> = (0..4).map(|j| (data[j] + data[4 + j]) / 2.0).collect();
        let z: f64 = mean.iter().zip(&w).map(|(a, b)| a * b).sum();
        let oracle = 1.0 / (1.0 + (-z).exp());
        let p = m
            .yes_probability(&tokens, "Is there a cat?", ProbeMode::DirectAnswer)
            .unwrap();
        assert!((p - oracle).abs() < 1e-15);
    }

    #[test]
    fn mllm_gradient_matches_central_differences() {
        let m = mock_mllm_backend(5, 3, 2).unwrap();
        let mut rng = seed::rng(9);
        let data: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let tokens = TokenSeq::from_flat(2, 3, data).unwrap();
        let probe = m
            .yes_probability_grad(&tokens, "p", ProbeMode::AfterThinkToken)
            .unwrap();
        let h = 1e-6;
        for k in 0..tokens.data.len() {
            let mut plus = tokens.clone();
            let mut minus = tokens.clone();
            plus.data[k] += h;
            minus.data[k] -= h;
            let fd = (m.yes_probability(&plus, "p", ProbeMode::AfterThinkToken).unwrap()
                - m.yes_probability(&minus, "p", ProbeMode::AfterThinkToken).unwrap())
                / (2.0 * h);
            let an = probe.grad.data[k];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn mllm_token_shape_checked() {
        let m = mock_mllm_backend(3, 4, 2).unwrap();
        assert!(m
            .yes_probability(&TokenSeq::zeros(3, 4), "q", ProbeMode::DirectAnswer)
            .is_err());
    }

    #[test]
    fn think_format_answer_parses() {
        let m = mock_mllm_backend(3, 4, 2)
            .unwrap()
            .with_rule(MockVerdictRule::Always(true))
            .with_answer_format(ProbeMode::AfterThinkToken);
        let answer = m.respond(VisionInput::Image(&img(1)), "q").unwrap();
        assert!(answer.contains("<answer>Yes</answer>"));
        assert!(m.verdict(&img(1), "q").unwrap());
    }

    #[test]
    fn diffusion_identity_at_t0() {
        let d = mock_diffusion_backend(1);
        let image = img(2);
        let z = d.vae_encode(&image).unwrap();
        let cond = EmbeddingVector::new(vec![1.0, -2.0, 0.5]);
        let out = d
            .denoise(&DenoiseRequest {
                noisy: &z,
                start_step: 0,
                conditioning: &cond,
                guidance_scale: 5.0,
                num_inference_steps: 50,
                seed: 3,
            })
            .unwrap();
        assert_eq!(out, z);
        assert_eq!(d.vae_decode(&z).unwrap(), image);
    }

    #[test]
    fn diffusion_schedule_strictly_decreasing() {
        let d = MockDiffusion::with_total_steps(1, 10);
        let bars = d.schedule().alpha_bars();
        assert_eq!(bars.len(), 11);
        for i in 0..bars.len() {
            for j in i + 1..bars.len() {
                assert!(bars[i] > bars[j]);
            }
        }
    }

    #[test]
    fn diffusion_blend_weight_by_hand() {
        let d = MockDiffusion::with_total_steps(1, 10);
        // alpha_bar_5 = 1 - 0.99 * 5/10 = 0.505; weight = 0.495 * 5/6.
        let w = d.blend_weight(5, 5.0).unwrap();
        assert!((w - 0.495 * 5.0 / 6.0).abs() < 1e-15);
        let z = Latent::new(vec![1, 1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let cond = EmbeddingVector::new(vec![0.3, 0.1]);
        let target = d.conditioning_target(&cond, 3);
        let out = d
            .denoise(&DenoiseRequest {
                noisy: &z,
                start_step: 5,
                conditioning: &cond,
                guidance_scale: 5.0,
                num_inference_steps: 10,
                seed: 0,
            })
            .unwrap();
        for k in 0..3 {
            let expected = (1.0 - w) * z.data[k] + w * target[k];
            assert!((out.data[k] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn detector_rule() {
        let det = mock_detector_backend(vec!["vase".into()]);
        let tagged = img(1).with_tags(["vase"]);
        let hits = det.detect(&tagged, "vase", 0.5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].score, 0.9);
        assert!(det.detect(&img(1), "vase", 0.5).unwrap().is_empty());
        assert!(det.detect(&tagged, "vase", 0.95).unwrap().is_empty());
    }
}
