//! The mapper from a CLIP embedding to the victim's vision-token space.
//!
//! The CLS embedding is broadcast over `N` positions and concatenated with
//! a learnable context token per position; a shared two-hidden-layer GELU
//! perceptron maps each `[cls ; e_i]` to one output token.

mod checkpoint;
mod judge;
mod select;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint};
pub use judge::{Judge, JudgeItem, JudgeOutcome, JudgeReport, WordOverlapJudge, judge_reconstruction};
pub use select::{AccuracyRow, ProbeItem, Selection, pick_best, select_mapper};
pub use train::{MapperTrainConfig, TrainStats, alignment_mse, train_mapper, train_on_pairs};

use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{self, EmbeddingVector, TokenSeq};

/// Standard deviation of the context-token initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub d_clip: usize,
    pub d_m: usize,
    pub n_tokens: usize,
    pub d_hidden: usize,
    pub d_ctx: usize,
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_clip", self.d_clip),
            ("d_m", self.d_m),
            ("n_tokens", self.n_tokens),
            ("d_hidden", self.d_hidden),
            ("d_ctx", self.d_ctx),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("mapper {name} must be positive")));
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.d_clip + self.d_ctx
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub fc1_weight: Range<usize>,
    pub fc1_bias: Range<usize>,
    pub fc2_weight: Range<usize>,
    pub fc2_bias: Range<usize>,
    pub fc3_weight: Range<usize>,
    pub fc3_bias: Range<usize>,
    pub context: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(c: &MapperConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let fc1_weight = take(c.d_hidden * c.d_in());
        let fc1_bias = take(c.d_hidden);
        let fc2_weight = take(c.d_hidden * c.d_hidden);
        let fc2_bias = take(c.d_hidden);
        let fc3_weight = take(c.d_m * c.d_hidden);
        let fc3_bias = take(c.d_m);
        let context = take(c.n_tokens * c.d_ctx);
        Self {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
            fc3_weight,
            fc3_bias,
            context,
            total: at,
        }
    }

    /// `(name, shape, range)` for every tensor, in storage order.
    pub fn tensors(&self, c: &MapperConfig) -> Vec<(&'static str, Vec<usize>, Range<usize>)> {
        vec![
            ("fc1.weight", vec![c.d_hidden, c.d_in()], self.fc1_weight.clone()),
            ("fc1.bias", vec![c.d_hidden], self.fc1_bias.clone()),
            ("fc2.weight", vec![c.d_hidden, c.d_hidden], self.fc2_weight.clone()),
            ("fc2.bias", vec![c.d_hidden], self.fc2_bias.clone()),
            ("fc3.weight", vec![c.d_m, c.d_hidden], self.fc3_weight.clone()),
            ("fc3.bias", vec![c.d_m], self.fc3_bias.clone()),
            ("context", vec![c.n_tokens, c.d_ctx], self.context.clone()),
        ]
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `out = W x + b` with `W` row-major `rows x cols`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let cols = x.len();
    out.extend(
        w.chunks_exact(cols)
            .zip(b)
            .map(|(row, bias)| tensor::dot(row, x) + bias),
    );
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre1: Vec<Vec<f64>>,
    hid1: Vec<Vec<f64>>,
    pre2: Vec<Vec<f64>>,
    hid2: Vec<Vec<f64>>,
    pub output: TokenSeq,
}

/// Flat mapper parameters plus the layout that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperWeights {
    pub config: MapperConfig,
    pub data: Vec<f64>,
}

impl MapperWeights {
    pub fn zeros(config: MapperConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            data: vec![0.0; config.param_count()],
            config,
        })
    }

    /// Linear layers uniform in `+-1/sqrt(fan_in)`; context tokens
    /// `N(0, 0.02^2)`.
    pub fn init(config: MapperConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let layout = config.layout();
        let mut rng = seed::rng(seed);
        let fan_ins = [
            (layout.fc1_weight.clone(), config.d_in()),
            (layout.fc1_bias.clone(), config.d_in()),
            (layout.fc2_weight.clone(), config.d_hidden),
            (layout.fc2_bias.clone(), config.d_hidden),
            (layout.fc3_weight.clone(), config.d_hidden),
            (layout.fc3_bias.clone(), config.d_hidden),
        ];
        for (range, fan_in) in fan_ins {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut w.data[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        let normal = Normal::new(0.0, CONTEXT_INIT_STD).expect("valid std");
        for v in &mut w.data[layout.context] {
            *v = rng.sample(normal);
        }
        Ok(w)
    }

    pub fn context_token(&self, i: usize) -> &[f64] {
        let layout = self.config.layout();
        let d = self.config.d_ctx;
        &self.data[layout.context][i * d..(i + 1) * d]
    }

    pub fn forward_cached(&self, cls: &[f64]) -> Result<ForwardCache> {
        let c = &self.config;
        tensor::check_dim("mapper input", c.d_clip, cls.len())?;
        let l = c.layout();
        let (w1, b1) = (&self.data[l.fc1_weight.clone()], &self.data[l.fc1_bias.clone()]);
        let (w2, b2) = (&self.data[l.fc2_weight.clone()], &self.data[l.fc2_bias.clone()]);
        let (w3, b3) = (&self.data[l.fc3_weight.clone()], &self.data[l.fc3_bias.clone()]);
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(c.n_tokens),
            pre1: Vec::with_capacity(c.n_tokens),
            hid1: Vec::with_capacity(c.n_tokens),
            pre2: Vec::with_capacity(c.n_tokens),
            hid2: Vec::with_capacity(c.n_tokens),
            output: TokenSeq::zeros(c.n_tokens, c.d_m),
        };
        let mut out = Vec::with_capacity(c.d_m);
        for i in 0..c.n_tokens {
            let mut input = Vec::with_capacity(c.d_in());
            input.extend_from_slice(cls);
            input.extend_from_slice(self.context_token(i));
            let mut pre1 = Vec::new();
            affine(w1, b1, &input, &mut pre1);
            let hid1: Vec<f64> = pre1.iter().map(|&x| gelu(x)).collect();
            let mut pre2 = Vec::new();
            affine(w2, b2, &hid1, &mut pre2);
            let hid2: Vec<f64> = pre2.iter().map(|&x| gelu(x)).collect();
            affine(w3, b3, &hid2, &mut out);
            cache.output.row_mut(i).copy_from_slice(&out);
            cache.inputs.push(input);
            cache.pre1.push(pre1);
            cache.hid1.push(hid1);
            cache.pre2.push(pre2);
            cache.hid2.push(hid2);
        }
        Ok(cache)
    }

    /// Backpropagates `grad_out = dL/dY` and returns `dL/dcls`. When
    /// `param_grads` is given, parameter gradients are accumulated into it.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &TokenSeq,
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let c = &self.config;
        if grad_out.shape() != (c.n_tokens, c.d_m) {
            return Err(Error::DimensionMismatch {
                context: "mapper output gradient",
                expected: c.n_tokens * c.d_m,
                actual: grad_out.data.len(),
            });
        }
        let l = c.layout();
        let w1 = &self.data[l.fc1_weight.clone()];
        let w2 = &self.data[l.fc2_weight.clone()];
        let w3 = &self.data[l.fc3_weight.clone()];
        let (d_in, d_h) = (c.d_in(), c.d_hidden);
        let mut grad_cls = vec![0.0; c.d_clip];
        let mut g_hid2 = vec![0.0; d_h];
        let mut g_pre2 = vec![0.0; d_h];
        let mut g_hid1 = vec![0.0; d_h];
        let mut g_pre1 = vec![0.0; d_h];
        for i in 0..c.n_tokens {
            let gy = grad_out.row(i);
            // fc3
            g_hid2.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in gy.iter().enumerate() {
                let row = &w3[o * d_h..(o + 1) * d_h];
                g_hid2.iter_mut().zip(row).for_each(|(acc, w)| *acc += g * w);
            }
            for k in 0..d_h {
                g_pre2[k] = g_hid2[k] * gelu_grad(cache.pre2[i][k]);
            }
            // fc2
            g_hid1.iter_mut().for_each(|v| *v = 0.0);
            for (o, &g) in g_pre2.iter().enumerate() {
                let row = &w2[o * d_h..(o + 1) * d_h];
                g_hid1.iter_mut().zip(row).for_each(|(acc, w)| *acc += g * w);
            }
            for k in 0..d_h {
                g_pre1[k] = g_hid1[k] * gelu_grad(cache.pre1[i][k]);
            }
            // fc1 input gradient: cls part and context part.
            let mut g_input = vec![0.0; d_in];
            for (o, &g) in g_pre1.iter().enumerate() {
                let row = &w1[o * d_in..(o + 1) * d_in];
                g_input.iter_mut().zip(row).for_each(|(acc, w)| *acc += g * w);
            }
            grad_cls
                .iter_mut()
                .zip(&g_input[..c.d_clip])
                .for_each(|(a, b)| *a += b);

            if let Some(pg) = param_grads.as_deref_mut() {
                outer_add(&mut pg[l.fc3_weight.clone()], gy, &cache.hid2[i]);
                add(&mut pg[l.fc3_bias.clone()], gy);
                outer_add(&mut pg[l.fc2_weight.clone()], &g_pre2, &cache.hid1[i]);
                add(&mut pg[l.fc2_bias.clone()], &g_pre2);
                outer_add(&mut pg[l.fc1_weight.clone()], &g_pre1, &cache.inputs[i]);
                add(&mut pg[l.fc1_bias.clone()], &g_pre1);
                let ctx = l.context.start + i * c.d_ctx;
                add(&mut pg[ctx..ctx + c.d_ctx], &g_input[c.d_clip..]);
            }
        }
        Ok(grad_cls)
    }
}

fn add(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `dst += a b^T` (row-major `len(a) x len(b)`).
fn outer_add(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in dst.chunks_exact_mut(b.len()).zip(a) {
        row.iter_mut().zip(b).for_each(|(d, bj)| *d += ai * bj);
    }
}

/// Statistics recorded with a trained checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStats {
    pub final_loss: Option<f64>,
    pub epochs: usize,
    pub steps: u64,
}

/// A trained (or constructed) mapper. Parameter values are always exactly
/// representable as `f32`, so the on-disk form round-trips bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperCheckpoint {
    weights: MapperWeights,
    pub stats: CheckpointStats,
}

impl MapperCheckpoint {
    pub fn new(mut weights: MapperWeights, stats: CheckpointStats) -> Result<Self> {
        weights.config.validate()?;
        if weights.data.len() != weights.config.param_count() {
            return Err(Error::DimensionMismatch {
                context: "mapper parameters",
                expected: weights.config.param_count(),
                actual: weights.data.len(),
            });
        }
        if weights.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mapper parameters".into()));
        }
        weights
            .data
            .iter_mut()
            .for_each(|v| *v = f64::from(*v as f32));
        Ok(Self { weights, stats })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &MapperWeights {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len()
    }

    pub fn forward(&self, cls: &EmbeddingVector) -> Result<TokenSeq> {
        Ok(self.weights.forward_cached(cls.as_slice())?.output)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_checkpoint(&bytes)
    }
}

/// Input offset that keeps both GELUs of [`MapperWeights::affine`] in
/// their linear regime for inputs with entries in `[-AFFINE_SHIFT + 2, inf)`.
pub const AFFINE_SHIFT: f64 = 8.0;

impl MapperWeights {
    /// A mapper whose every token is `m * cls`, with `m` row-major
    /// `d_m x d_clip`. Needs `d_hidden >= d_clip`.
    pub fn affine(config: MapperConfig, m: &[f64]) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let (dc, dm, dh, din) = (config.d_clip, config.d_m, config.d_hidden, config.d_in());
        tensor::check_dim("affine mapper matrix", dm * dc, m.len())?;
        if dh < dc {
            return Err(Error::Config(format!("affine mapper needs d_hidden >= d_clip ({dh} < {dc})")));
        }
        let l = config.layout();
        for j in 0..dc {
            w.data[l.fc1_weight.start + j * din + j] = 1.0;
            w.data[l.fc1_bias.start + j] = AFFINE_SHIFT;
            w.data[l.fc2_weight.start + j * dh + j] = 1.0;
        }
        for r in 0..dm {
            let row = &m[r * dc..(r + 1) * dc];
            w.data[l.fc3_weight.start + r * dh..][..dc].copy_from_slice(row);
            w.data[l.fc3_bias.start + r] = -AFFINE_SHIFT * row.iter().sum::<f64>();
        }
        Ok(w)
    }
}

/// `Pi(cls)`: one output token per position.
pub fn mapper_forward(cls: &EmbeddingVector, ckpt: &MapperCheckpoint) -> Result<TokenSeq> {
    ckpt.forward(cls)
}

/// Random seeded standard-normal vector, used by tests and synthetic data.
pub fn gaussian(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> MapperConfig {
        MapperConfig {
            d_clip: 5,
            d_m: 3,
            n_tokens: 2,
            d_hidden: 6,
            d_ctx: 4,
        }
    }

    #[test]
    fn zero_everything_gives_zero_output() {
        let ckpt = MapperCheckpoint::new(MapperWeights::zeros(cfg()).unwrap(), Default::default())
            .unwrap();
        let out = ckpt.forward(&EmbeddingVector::zeros(5)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_context_tokens_give_identical_rows() {
        let mut w = MapperWeights::init(cfg(), 1).unwrap();
        let ctx = w.config.layout().context;
        let first: Vec<f64> = w.data[ctx.start..ctx.start + 4].to_vec();
        w.data[ctx.start + 4..ctx.end].copy_from_slice(&first);
        let ckpt = MapperCheckpoint::new(w, Default::default()).unwrap();
        let out = ckpt.forward(&EmbeddingVector::new(gaussian(2, 5))).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let ckpt = MapperCheckpoint::new(MapperWeights::init(cfg(), 1).unwrap(), Default::default())
            .unwrap();
        assert!(matches!(
            ckpt.forward(&EmbeddingVector::zeros(4)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn parameter_gradients_match_differences() {
        let w = MapperWeights::init(cfg(), 4).unwrap();
        let cls = gaussian(5, 5);
        let upstream = TokenSeq::from_flat(2, 3, gaussian(6, 6)).unwrap();
        let loss = |w: &MapperWeights| -> f64 {
            let y = w.forward_cached(&cls).unwrap().output;
            tensor::dot(&y.data, &upstream.data)
        };
        let cache = w.forward_cached(&cls).unwrap();
        let mut pg = vec![0.0; w.data.len()];
        w.backward(&cache, &upstream, Some(&mut pg)).unwrap();
        let h = 1e-6;
        for k in (0..w.data.len()).step_by(3) {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.data[k] += h;
            minus.data[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (fd - pg[k]).abs() <= 1e-6 * pg[k].abs().max(1e-3),
                "param {k}: {fd} vs {}",
                pg[k]
            );
        }
    }

    #[test]
    fn affine_mapper_is_linear_in_range() {
        let c = MapperConfig { d_hidden: 5, ..cfg() };
        let m = gaussian(3, c.d_m * c.d_clip);
        let w = MapperWeights::affine(c, &m).unwrap();
        let x = gaussian(4, c.d_clip);
        let out = w.forward_cached(&x).unwrap().output;
        for t in 0..c.n_tokens {
            for r in 0..c.d_m {
                let want = tensor::dot(&m[r * c.d_clip..(r + 1) * c.d_clip], &x);
                assert!((out.row(t)[r] - want).abs() < 1e-9);
            }
        }
        assert!(MapperWeights::affine(MapperConfig { d_hidden: 4, ..cfg() }, &m).is_err());
    }
}
