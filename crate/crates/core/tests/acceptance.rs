//! One PASS/FAIL line per acceptance criterion, with wall time against the
//! runtime budget. Exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ghostbench::attack::{
    loss_and_grad, loss_total, optimize_from, probe_probability, AttackConfig, AttackContext, PROBABILITY_FLOOR,
};
use ghostbench::attack::TraceStatus;
use ghostbench::bridge::{gaussian, train_mapper, MapperCheckpoint, MapperConfig, MapperTrainConfig, MapperWeights};
use ghostbench::compose::{compositional_embedding, CompositionWeights, PromptSet, TargetSpec};
use ghostbench::diffusion::forward_noise;
use ghostbench::eval::fid::fid_from_features;
use ghostbench::eval::mitigate::{pope_prompt, select_checkpoint_pope, Checkpoint, PopeQuestion};
use ghostbench::eval::success::SuccessReport;
use ghostbench::eval::transfer::{matrix_from_verdicts, CachedVerdict, TransferItem, TransferSource, VerdictCache};
use ghostbench::eval::votes::{aggregate_votes, Group, Vote, VoteRecord};
use ghostbench::gateway::mock::{MockClip, MockMllm};
use ghostbench::gateway::{ClipBackend, Latent, MllmBackend, NoiseSchedule, ProbeMode, VisionInput};
use ghostbench::image::Image;
use ghostbench::run::config::example_config;
use ghostbench::run::fixture::{init_mock_workspace, WorkspaceSpec};
use ghostbench::run::manifest::{tally, ClassCounts, SampleRecord};
use ghostbench::run::pipeline::{resume, run_pipeline, RunContext, RunOptions};
use ghostbench::tensor::{EmbeddingVector, TokenSeq};
use ghostbench::verdict::{classify_sample, CandidateOutcome, SampleOutcome};
use ghostbench::{seed, Result};
use rand::Rng as _;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn vec_of(seed: u64, d: usize, scale: f64) -> EmbeddingVector {
    EmbeddingVector::new(gaussian(seed, d).into_iter().map(|v| v * scale).collect())
}

// Loss algebra

fn loss_algebra() -> Check {
    let mut rng = seed::rng(11);
    let (mut worst_rc, mut worst_at) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let d = 4 + (i as usize % 60);
        let c = vec_of(1000 + i, d, 1.0);
        let c0 = vec_of(2000 + i, d, 1.0);
        let ec = vec_of(3000 + i, d, 0.5);
        let p: f64 = match i % 10 {
            0 => 1e-15,
            1 => 1.0,
            _ => rng.random_range(1e-6..1.0),
        };
        let (lc, lr) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
        let got = loss_total(&c, &c0, &ec, p, lc, lr).map_err(e)?;

        let mut reg = 0.0;
        for k in 0..d {
            let diff = c.0[k] - c0.0[k];
            reg += diff * diff;
        }
        let (mut dot, mut nc, mut ne) = (0.0, 0.0, 0.0);
        for k in 0..d {
            dot += c.0[k] * ec.0[k];
            nc += c.0[k] * c.0[k];
            ne += ec.0[k] * ec.0[k];
        }
        let clip = dot / (nc.sqrt() * ne.sqrt());
        let adv = (1.0 / p.max(PROBABILITY_FLOOR)).ln();
        let total = adv + lc * clip + lr * reg;

        worst_rc = worst_rc.max(rel_err(got.reg, reg)).max(rel_err(got.clip, clip));
        worst_at = worst_at.max(rel_err(got.adv, adv)).max(rel_err(got.total, total));
        ensure(got.floored == (p < PROBABILITY_FLOOR), || format!("floor flag wrong at p={p}"))?;
    }
    ensure(worst_rc < 1e-12, || format!("reg/clip rel err {worst_rc:e}"))?;
    ensure(worst_at < 1e-9, || format!("adv/total rel err {worst_at:e}"))?;
    Ok(format!("max rel err reg/clip {worst_rc:.1e}, adv/total {worst_at:.1e}"))
}

// Gradient check

fn gradient_check() -> Check {
    let (d, n, dm) = (16, 2, 8);
    let prompts = PromptSet::builtin();
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mcfg = MapperConfig { d_clip: d, d_m: dm, n_tokens: n, d_hidden: 24, d_ctx: 6 };
        let mapper = MapperCheckpoint::new(MapperWeights::init(mcfg, 50 + i).map_err(e)?, Default::default()).map_err(e)?;
        let mllm = MockMllm::new(70 + i, dm, n).map_err(e)?;
        let e_comp = vec_of(90 + i, d, 1.0);
        let c0 = vec_of(110 + i, d, 1.0);
        let c = EmbeddingVector::new(c0.0.iter().zip(gaussian(130 + i, d)).map(|(a, b)| a + 0.3 * b).collect());
        let ctx = AttackContext { mapper: &mapper, mllm: &mllm, prompts: &prompts, object: "boat", e_comp: &e_comp };
        let cfg = AttackConfig { lambda_clip: 1.5, lambda_reg: 0.7, ..AttackConfig::qwen() };
        let prompt = prompts.render(i as usize % prompts.len(), "boat");
        let (_, _, grad) = loss_and_grad(&ctx, &c, &c0, &prompt, &cfg).map_err(e)?;

        let f = |x: &EmbeddingVector| -> Result<f64> {
            let p = probe_probability(&ctx, x, &prompt, cfg.probe_mode)?;
            Ok(loss_total(x, &c0, &e_comp, p, cfg.lambda_clip, cfg.lambda_reg)?.total)
        };
        let h = 1e-5;
        let mut fd = vec![0.0; d];
        for k in 0..d {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up.0[k] += h;
            dn.0[k] -= h;
            fd[k] = (f(&up).map_err(e)? - f(&dn).map_err(e)?) / (2.0 * h);
        }
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
    }
    ensure(worst < 1e-4, || format!("gradient rel err {worst:e}"))?;
    Ok(format!("max rel err {worst:.1e} over 20 instances"))
}

// Mapper recovery

fn mapper_recovery() -> Check {
    let (d, dm, n) = (16, 8, 2);
    let clip: Arc<dyn ClipBackend> = Arc::new(MockClip::new(3, d).map_err(e)?);
    let mllm = MockMllm::new(4, dm, n).map_err(e)?.with_linear_vision(clip.clone());
    let images: Vec<Image> = (0..500).map(|i| Image::synthetic(i, 8, 8)).collect();
    let mcfg = MapperConfig { d_clip: d, d_m: dm, n_tokens: n, d_hidden: 64, d_ctx: 8 };
    let tcfg = MapperTrainConfig {
        lr: 1e-2,
        epochs: 10,
        batch_size: 16,
        weight_decay: 0.0,
        t_max: 10,
        warmup_steps: 20,
    };
    let (_, stats) = train_mapper(&images, clip.as_ref(), &mllm, mcfg, &tcfg, 5).map_err(e)?;
    ensure(stats.epoch_losses.len() <= 10, || "more than 10 epochs".into())?;
    ensure(stats.final_loss < 1e-3, || format!("alignment MSE {:.2e} after 10 epochs", stats.final_loss))?;
    Ok(format!("alignment MSE {:.2e} after {} epochs", stats.final_loss, stats.epoch_losses.len()))
}

// Mock attack convergence

struct AttackBench {
    clip: MockClip,
    mllm: MockMllm,
    mapper: MapperCheckpoint,
    prompts: PromptSet,
}

impl AttackBench {
    fn new() -> std::result::Result<Self, String> {
        let (d, dm, n) = (16, 8, 2);
        let mcfg = MapperConfig { d_clip: d, d_m: dm, n_tokens: n, d_hidden: 32, d_ctx: 8 };
        Ok(Self {
            clip: MockClip::new(21, d).map_err(e)?,
            mllm: MockMllm::new(22, dm, n).map_err(e)?,
            mapper: MapperCheckpoint::new(MapperWeights::init(mcfg, 23).map_err(e)?, Default::default()).map_err(e)?,
            prompts: PromptSet::builtin(),
        })
    }

    fn e_comp(&self) -> Result<EmbeddingVector> {
        compositional_embedding(&TargetSpec::new("boat", vec!["a boat on a lake".into()]), &self.clip)
    }

    fn run(&self, sample: u64, cfg: &AttackConfig, e_comp: &EmbeddingVector) -> Result<ghostbench::attack::OptimizationTrace> {
        let c0 = self.clip.embed_image(&Image::synthetic(sample, 8, 8))?;
        let ctx = AttackContext {
            mapper: &self.mapper,
            mllm: &self.mllm,
            prompts: &self.prompts,
            object: "boat",
            e_comp,
        };
        optimize_from(&c0, &ctx, cfg, seed::sample_seed(9, &format!("boat/{sample}"), "attack"))
    }
}

fn attack_convergence() -> Check {
    let bench = AttackBench::new()?;
    let e_comp = bench.e_comp().map_err(e)?;
    let base = AttackConfig { lambda_clip: 0.0, lambda_reg: 0.0, max_steps: 100, ..AttackConfig::qwen() };
    let met = |tau: f64, steps: usize| -> std::result::Result<Vec<bool>, String> {
        let cfg = AttackConfig { tau_yes: tau, max_steps: steps, ..base };
        (0..100).map(|s| Ok(bench.run(s, &cfg, &e_comp).map_err(e)?.threshold_met())).collect()
    };
    let at08 = met(0.8, 100)?;
    let rate = at08.iter().filter(|m| **m).count();
    ensure(rate >= 95, || format!("{rate}/100 reached tau=0.8"))?;
    let count = |v: &[bool]| v.iter().filter(|m| **m).count();
    let mut sizes = Vec::new();
    // A short budget as well, where the two sets differ.
    for steps in [100, 55] {
        let (at09, at05) = (met(0.9, steps)?, met(0.5, steps)?);
        let violations = at09.iter().zip(&at05).filter(|(a, b)| **a && !**b).count();
        ensure(violations == 0, || format!("M={steps}: {violations} samples met 0.9 but not 0.5"))?;
        sizes.push(format!("M={steps}: {} within {}", count(&at09), count(&at05)));
    }
    Ok(format!("{rate}/100 at tau=0.8; tau=0.9 set within tau=0.5 set ({})", sizes.join(", ")))
}

// Lambda_clip trend

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn lambda_clip_trend() -> Check {
    let bench = AttackBench::new()?;
    let e_comp = bench.e_comp().map_err(e)?;
    let mut medians = Vec::new();
    for lc in [0.0, 5.0, 15.0] {
        let cfg = AttackConfig { lambda_clip: lc, lambda_reg: 0.0, ..AttackConfig::qwen() };
        let cos = (0..20)
            .map(|s| {
                let t = bench.run(s, &cfg, &e_comp).map_err(e)?;
                t.final_embedding.cosine(&e_comp).map_err(e)
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        medians.push(median(cos));
    }
    ensure(medians.windows(2).all(|w| w[1] <= w[0]), || format!("medians {medians:?} not non-increasing"))?;
    Ok(format!(
        "median cosine {:.3} / {:.3} / {:.3} at lambda_clip 0 / 5 / 15",
        medians[0], medians[1], medians[2]
    ))
}

// Forward noise

fn forward_noise_stats() -> Check {
    let schedule = NoiseSchedule::scaled_linear(1000, 0.00085, 0.012).map_err(e)?;
    let len = 100_000;
    let z0 = Latent::new(vec![len], vec![0.8; len]).map_err(e)?;
    let mut worst = 0.0f64;
    for t in [100, 400, 700] {
        let ab = schedule.alpha_bar(t).unwrap();
        let zt = forward_noise(&z0, t, &schedule, 77 + t as u64).map_err(e)?;
        let mean = zt.data.iter().sum::<f64>() / len as f64;
        let var = zt.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (len as f64 - 1.0);
        let (m_err, v_err) = (rel_err(mean, ab.sqrt() * 0.8), rel_err(var, 1.0 - ab));
        ensure(m_err < 0.05 && v_err < 0.05, || format!("t={t}: mean err {m_err:.3}, var err {v_err:.3}"))?;
        worst = worst.max(m_err).max(v_err);
    }
    let id = forward_noise(&z0, 0, &schedule, 5).map_err(e)?;
    ensure(id.data == z0.data, || "t=0 is not the identity".into())?;
    Ok(format!("max rel err {worst:.4} at t in {{100, 400, 700}}; t=0 exact"))
}

// Verdicts

fn brute_force(status: &TraceStatus, v: &[CandidateOutcome]) -> Option<SampleOutcome> {
    match status {
        TraceStatus::BudgetExhausted => v.is_empty().then_some(SampleOutcome::DiscardedThreshold),
        TraceStatus::NumericalFailure { .. } => v.is_empty().then_some(SampleOutcome::NumericalFailure),
        TraceStatus::ThresholdMet { .. } => {
            if v.is_empty() {
                None
            } else if v.contains(&CandidateOutcome::HallucinationSuccess) {
                Some(SampleOutcome::Success)
            } else if v.iter().all(|o| *o == CandidateOutcome::DiscardedDetector) {
                Some(SampleOutcome::DiscardedDetectorAll)
            } else {
                Some(SampleOutcome::NoFlip)
            }
        }
    }
}

fn verdicts_and_conservation() -> Check {
    for (det, yes, want) in [
        (false, false, CandidateOutcome::NoHallucination),
        (false, true, CandidateOutcome::HallucinationSuccess),
        (true, false, CandidateOutcome::DiscardedDetector),
        (true, true, CandidateOutcome::DiscardedDetector),
    ] {
        ensure(CandidateOutcome::from_flags(det, yes) == want, || format!("truth table at ({det}, {yes})"))?;
    }
    let outcomes = [
        CandidateOutcome::HallucinationSuccess,
        CandidateOutcome::DiscardedDetector,
        CandidateOutcome::NoHallucination,
    ];
    let statuses = [
        TraceStatus::ThresholdMet { step: 3 },
        TraceStatus::BudgetExhausted,
        TraceStatus::NumericalFailure { step: 2 },
    ];
    let mut seqs: Vec<Vec<CandidateOutcome>> = vec![vec![]];
    for len in 1..=3 {
        for code in 0..3usize.pow(len) {
            seqs.push((0..len).map(|k| outcomes[code / 3usize.pow(k) % 3]).collect());
        }
    }
    let mut checked = 0;
    for s in &statuses {
        for v in &seqs {
            let got = classify_sample(s, v).ok().map(|c| c.outcome);
            ensure(got == brute_force(s, v), || format!("{s:?} {v:?}: got {got:?}"))?;
            checked += 1;
        }
    }

    let dir = tempfile::tempdir().map_err(e)?;
    let ws = init_mock_workspace(dir.path(), &WorkspaceSpec { images: 60, k: 20, ..WorkspaceSpec::default() })
        .map_err(e)?;
    let ctx = RunContext::load(ws.config).map_err(e)?;
    let m = run_pipeline(&ctx, RunOptions::default()).map_err(e)?;
    ensure(m.records.len() == 40, || format!("{} samples, expected 40", m.records.len()))?;
    let mut considered = 0;
    let mut by_outcome: BTreeMap<SampleOutcome, usize> = BTreeMap::new();
    for r in &m.records {
        *by_outcome.entry(r.outcome).or_default() += 1;
        considered += usize::from(!matches!(r.outcome, SampleOutcome::PrescreenRejected | SampleOutcome::PrescreenError));
    }
    let summed: usize = [
        SampleOutcome::Success,
        SampleOutcome::DiscardedThreshold,
        SampleOutcome::DiscardedDetectorAll,
        SampleOutcome::NoFlip,
        SampleOutcome::NumericalFailure,
    ]
    .iter()
    .map(|o| by_outcome.get(o).copied().unwrap_or(0))
    .sum();
    let tallied: usize = tally(&m.records).values().map(ClassCounts::considered).sum();
    ensure(considered == summed && summed == tallied, || {
        format!("considered {considered}, outcome sum {summed}, tally {tallied}")
    })?;
    Ok(format!("{checked} sequences agree; 40-sample run considered = {considered} = sum of outcomes"))
}

// FID

fn gaussian_2d(seed_: u64, n: usize, mean: [f64; 2], chol: [[f64; 2]; 2]) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed_);
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            vec![mean[0] + chol[0][0] * a, mean[1] + chol[1][0] * a + chol[1][1] * b]
        })
        .collect()
}

fn cov_of(chol: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let l = chol;
    [
        [l[0][0] * l[0][0], l[0][0] * l[1][0]],
        [l[1][0] * l[0][0], l[1][0] * l[1][0] + l[1][1] * l[1][1]],
    ]
}

/// Closed form for 2x2: `tr sqrt(M) = sqrt(tr M + 2 sqrt(det M))` when M
/// has non-negative real eigenvalues.
fn frechet_2d(m1: [f64; 2], s1: [[f64; 2]; 2], m2: [f64; 2], s2: [[f64; 2]; 2]) -> f64 {
    let p = [
        [s1[0][0] * s2[0][0] + s1[0][1] * s2[1][0], s1[0][0] * s2[0][1] + s1[0][1] * s2[1][1]],
        [s1[1][0] * s2[0][0] + s1[1][1] * s2[1][0], s1[1][0] * s2[0][1] + s1[1][1] * s2[1][1]],
    ];
    let tr = p[0][0] + p[1][1];
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let tr_sqrt = (tr + 2.0 * det.sqrt()).sqrt();
    (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2) + s1[0][0] + s1[1][1] + s2[0][0] + s2[1][1] - 2.0 * tr_sqrt
}

fn fid_engine() -> Check {
    let (m1, l1) = ([0.0, 0.0], [[1.0, 0.0], [0.5, 0.8]]);
    let (m2, l2) = ([1.5, -0.5], [[1.6, 0.0], [-0.4, 0.6]]);
    let a = gaussian_2d(1, 10_000, m1, l1);
    let b = gaussian_2d(2, 10_000, m2, l2);
    let same = fid_from_features(&a, &a).map_err(e)?;
    ensure(same.abs() < 1e-6, || format!("identical sets gave {same:e}"))?;
    let ab = fid_from_features(&a, &b).map_err(e)?;
    let ba = fid_from_features(&b, &a).map_err(e)?;
    let want = frechet_2d(m1, cov_of(l1), m2, cov_of(l2));
    ensure(rel_err(ab, want) < 0.02, || format!("fid {ab} vs closed form {want}"))?;
    ensure((ab - ba).abs() < 1e-9, || format!("asymmetric: {ab} vs {ba}"))?;
    Ok(format!("identical {same:.1e}; {ab:.4} vs closed form {want:.4}; |ab-ba| {:.1e}", (ab - ba).abs()))
}

// Composition

fn composition() -> Check {
    let defaults = CompositionWeights::default();
    ensure((defaults.direct, defaults.generic, defaults.captions) == (0.3, 0.4, 0.3), || {
        format!("default weights {defaults:?}")
    })?;
    ensure(example_config().composition == defaults, || "example config weights differ".into())?;
    let clip = MockClip::new(8, 32).map_err(e)?;
    let emb = |t: &str| clip.embed_text(t).unwrap().0;
    let cases: Vec<(Vec<&str>, Vec<String>)> = vec![
        (vec!["a {class_name} in the wild", "a photo of the {class_name}", "{class_name} close up", "an image with a {class_name}", "extra {class_name}"], vec![
            "a red boat".into(),
            "boats in a harbor".into(),
            "a boat at sea".into(),
        ]),
        (vec!["a {class_name} in the wild", "a photo of the {class_name}"], vec![]),
        (vec![], vec!["a boat".into()]),
        (vec![], vec![]),
    ];
    let mut worst = 0.0f64;
    for (templates, captions) in &cases {
        let spec = TargetSpec::with_templates("boat", templates, captions.clone());
        let got = compositional_embedding(&spec, &clip).map_err(e)?;
        let generic: Vec<String> = templates.iter().take(4).map(|t| t.replace("{class_name}", "boat")).collect();
        let mut parts: Vec<(f64, Vec<String>)> = vec![(0.3, vec!["A photo of a boat".into()])];
        if !generic.is_empty() {
            parts.push((0.4, generic));
        }
        if !captions.is_empty() {
            parts.push((0.3, captions.clone()));
        }
        let present: f64 = parts.iter().map(|(w, _)| w).sum();
        let mut want = vec![0.0; 32];
        for (w, texts) in &parts {
            for t in texts {
                for (acc, v) in want.iter_mut().zip(emb(t)) {
                    *acc += w / present / texts.len() as f64 * v;
                }
            }
        }
        for (g, w) in got.0.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max abs err {worst:e}"))?;
    Ok(format!("weights (0.3, 0.4, 0.3); 4 source layouts, max abs err {worst:.1e}"))
}

// Manifest determinism

fn by_id(records: &[SampleRecord]) -> BTreeMap<String, SampleRecord> {
    records.iter().map(|r| (r.sample_id.clone(), r.clone())).collect()
}

fn manifest_determinism() -> Check {
    let spec = WorkspaceSpec { images: 40, k: 20, ..WorkspaceSpec::default() };
    let d1 = tempfile::tempdir().map_err(e)?;
    let ws = init_mock_workspace(d1.path(), &spec).map_err(e)?;
    let full = run_pipeline(&RunContext::load(ws.config).map_err(e)?, RunOptions::default()).map_err(e)?;

    let d2 = tempfile::tempdir().map_err(e)?;
    let ws = init_mock_workspace(d2.path(), &spec).map_err(e)?;
    let ctx = RunContext::load(ws.config.clone()).map_err(e)?;
    let part = run_pipeline(&ctx, RunOptions { max_samples: Some(13) }).map_err(e)?;
    ensure(!part.is_complete(), || "partial run claims completion".into())?;
    let mut cfg = ws.config.clone();
    cfg.workers = 1;
    let done = resume(&ws.config.manifest_path(), &RunContext::load(cfg).map_err(e)?, RunOptions::default())
        .map_err(e)?;
    ensure(done.is_complete(), || "resumed run incomplete".into())?;
    ensure(by_id(&done.records) == by_id(&full.records), || "record sets differ".into())?;
    Ok(format!("{} records identical after interrupt at 13 and resume", full.records.len()))
}

// Metric tallies

fn counts(success: usize, threshold: usize, det_all: usize, no_flip: usize, rejected: usize) -> ClassCounts {
    ClassCounts {
        success,
        discarded_threshold: threshold,
        discarded_detector_all: det_all,
        no_flip,
        prescreen_rejected: rejected,
        ..ClassCounts::default()
    }
}

fn metric_tallies() -> Check {
    // success_report on a scripted two-class fixture.
    let mut fx = BTreeMap::new();
    fx.insert("boat".to_string(), counts(3, 4, 1, 2, 5));
    fx.insert("vase".to_string(), counts(0, 2, 0, 0, 1));
    let r = SuccessReport::from_counts(&fx);
    ensure(r.classes[0].considered == 10 && r.classes[0].rate == Some(0.3), || format!("boat {:?}", r.classes[0]))?;
    ensure(r.classes[1].considered == 2 && r.classes[1].rate == Some(0.0), || format!("vase {:?}", r.classes[1]))?;
    ensure(r.overall.considered == 12 && r.overall.success == 3 && r.overall.rate == Some(0.25), || {
        format!("overall {:?}", r.overall)
    })?;

    // 9423 samples, 2816 hallucinations.
    let mut t1 = BTreeMap::new();
    t1.insert("all".to_string(), counts(2816, 9423 - 2816, 0, 0, 577));
    let r = SuccessReport::from_counts(&t1);
    let pct = r.overall.percent().unwrap();
    ensure(format!("{pct:.1}") == "29.9", || format!("9423-sample fixture gave {pct:.3}%"))?;

    // transfer matrix from a scripted cache.
    let item = |i: usize| TransferItem { id: format!("s{i}"), object: "boat".into(), image_hash: String::new() };
    let sources = vec![
        TransferSource { name: "qwen".into(), store_dir: Default::default(), items: (0..4).map(item).collect() },
        TransferSource { name: "llava".into(), store_dir: Default::default(), items: (0..5).map(item).collect() },
    ];
    let targets: Vec<String> = ["qwen", "llava", "glm"].map(String::from).to_vec();
    let mut cache = VerdictCache::default();
    let script: &[(&str, &str, &[Option<bool>])] = &[
        ("llava", "qwen", &[Some(true), Some(true), Some(false), None]),
        ("glm", "qwen", &[Some(true), Some(false), Some(false), Some(false)]),
        ("qwen", "llava", &[Some(true), Some(true), Some(true), Some(false), Some(true)]),
    ];
    for (t, s, answers) in script {
        for (i, a) in answers.iter().enumerate() {
            cache.verdicts.push(CachedVerdict {
                target: t.to_string(),
                source: s.to_string(),
                item: format!("s{i}"),
                prompt: String::new(),
                yes: *a,
            });
        }
    }
    cache.unreachable.insert("glm".into(), "timeout".into());
    let m = matrix_from_verdicts(&sources, &targets, &cache);
    let rate = |s: &str, t: &str| m.cell(s, t).and_then(|c| c.rate);
    ensure(rate("qwen", "llava") == Some(2.0 / 3.0), || format!("qwen>llava {:?}", rate("qwen", "llava")))?;
    ensure(rate("llava", "qwen") == Some(0.8), || format!("llava>qwen {:?}", rate("llava", "qwen")))?;
    ensure(m.cell("qwen", "glm").is_some_and(|c| c.rate.is_none()), || "unreachable target not absent".into())?;
    ensure(m.cell("qwen", "qwen").is_none(), || "diagonal present".into())?;

    // aggregate_votes on twelve scripted votes.
    let votes: &[(&str, Group, bool)] = &[
        ("a", Group::Control, true),
        ("a", Group::Control, true),
        ("a", Group::GhostA, true),
        ("a", Group::GhostB, false),
        ("b", Group::Control, true),
        ("b", Group::Control, false),
        ("b", Group::GhostA, false),
        ("b", Group::GhostB, true),
        ("c", Group::Control, false),
        ("c", Group::Control, false),
        ("c", Group::GhostA, true),
        ("c", Group::GhostB, true),
    ];
    let records: Vec<VoteRecord> = votes
        .iter()
        .enumerate()
        .map(|(i, (a, g, y))| VoteRecord {
            annotator: a.to_string(),
            image_id: format!("img{i}"),
            class: if i % 2 == 0 { "boat".into() } else { "vase".into() },
            group: *g,
            vote: if *y { Vote::Yes } else { Vote::No },
            timestamp: String::new(),
        })
        .collect();
    let agg = aggregate_votes(&records, 0.7);
    let g = |grp: Group| (agg.groups[&grp].yes, agg.groups[&grp].total);
    ensure(g(Group::Control) == (3, 6) && g(Group::GhostA) == (2, 3) && g(Group::GhostB) == (2, 3), || {
        format!("groups {:?}", agg.groups)
    })?;
    let flagged: Vec<&str> = agg.annotators.iter().filter(|a| a.flagged).map(|a| a.annotator.as_str()).collect();
    ensure(flagged == ["b", "c"], || format!("flagged {flagged:?}"))?;
    Ok("success report, 9423-sample fixture 29.9%, transfer matrix and vote aggregate match hand counts".into())
}

// POPE checkpoint selection

/// Answers from a fixed table keyed by `(image id, object)`.
struct Scripted {
    id: String,
    answers: BTreeMap<(u64, String), bool>,
}

impl MllmBackend for Scripted {
    fn id(&self) -> &str {
        &self.id
    }
    fn token_dims(&self) -> (usize, usize) {
        (1, 2)
    }
    fn encode_vision(&self, _: &Image) -> Result<TokenSeq> {
        Ok(TokenSeq::zeros(1, 2))
    }
    fn yes_probability(&self, _: &TokenSeq, _: &str, _: ProbeMode) -> Result<f64> {
        Ok(0.5)
    }
    fn respond(&self, input: VisionInput<'_>, prompt: &str) -> Result<String> {
        let VisionInput::Image(img) = input else { unreachable!() };
        let id: u64 = img.tags.iter().next().unwrap().parse().unwrap();
        let object = ["boat", "vase", "dog", "cup"].into_iter().find(|o| prompt == pope_prompt(o)).unwrap();
        Ok(if self.answers[&(id, object.to_string())] { "Yes" } else { "No" }.into())
    }
}

fn pope_selection() -> Check {
    let objects = ["boat", "vase", "dog", "cup"];
    let probe: Vec<PopeQuestion> = (0..10u64)
        .flat_map(|id| {
            objects.iter().enumerate().map(move |(k, o)| PopeQuestion {
                image_id: id,
                object: o.to_string(),
                label: (id as usize + k).is_multiple_of(2),
            })
        })
        .collect();
    // Each checkpoint flips a different number of gold answers.
    let make = |name: &str, wrong_pos: usize, wrong_neg: usize| {
        let (mut wp, mut wn) = (0, 0);
        let answers = probe
            .iter()
            .map(|q| {
                let flip = if q.label { wp += 1; wp <= wrong_pos } else { wn += 1; wn <= wrong_neg };
                ((q.image_id, q.object.clone()), q.label != flip)
            })
            .collect();
        Scripted { id: name.into(), answers }
    };
    // 20 gold yes / 20 gold no each.
    let ck = [make("e1", 6, 2), make("e2", 2, 5), make("e3", 4, 1)];
    let hand = |fn_: f64, fp: f64| {
        let tp = 20.0 - fn_;
        2.0 * tp / (2.0 * tp + fp + fn_)
    };
    let want = [hand(6.0, 2.0), hand(2.0, 5.0), hand(4.0, 1.0)];
    let best_hand = (0..3).max_by(|a, b| want[*a].total_cmp(&want[*b])).unwrap();
    let checkpoints: Vec<Checkpoint<'_>> = ck
        .iter()
        .enumerate()
        .map(|(i, m)| Checkpoint { name: m.id.clone(), epoch: i + 1, mllm: m })
        .collect();
    let load = |id: u64| Ok(Image::synthetic(id, 4, 4).with_tags([id.to_string()]));
    let sel = select_checkpoint_pope(&checkpoints, &probe, &load).map_err(e)?;
    for (row, w) in sel.table.iter().zip(want) {
        let f1 = row.f1.unwrap_or(f64::NAN);
        ensure((f1 - w).abs() < 1e-12, || format!("{}: f1 {f1} vs hand {w}", row.name))?;
    }
    ensure(sel.best_epoch == best_hand + 1, || format!("picked epoch {} not {}", sel.best_epoch, best_hand + 1))?;
    Ok(format!(
        "F1 {:.4} / {:.4} / {:.4}; picked epoch {}",
        want[0], want[1], want[2], sel.best_epoch
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion { name: "loss algebra", budget: Duration::from_secs(5), run: loss_algebra },
        Criterion { name: "gradient check", budget: Duration::from_secs(30), run: gradient_check },
        Criterion { name: "mapper recovery", budget: Duration::from_secs(60), run: mapper_recovery },
        Criterion { name: "mock attack convergence", budget: Duration::from_secs(120), run: attack_convergence },
        Criterion { name: "lambda_clip trend", budget: Duration::from_secs(120), run: lambda_clip_trend },
        Criterion { name: "forward-noise statistics", budget: Duration::from_secs(10), run: forward_noise_stats },
        Criterion { name: "verdict table and conservation", budget: Duration::from_secs(5), run: verdicts_and_conservation },
        Criterion { name: "FID engine", budget: Duration::from_secs(30), run: fid_engine },
        Criterion { name: "compositional embedding", budget: Duration::from_secs(1), run: composition },
        Criterion { name: "manifest determinism", budget: Duration::from_secs(60), run: manifest_determinism },
        Criterion { name: "metric tallies", budget: Duration::from_secs(5), run: metric_tallies },
        Criterion { name: "POPE checkpoint selection", budget: Duration::from_secs(1), run: pope_selection },
    ];
    let mut failed = 0;
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:<32} {:>8.2}s / {:>4}s  {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs(),
            detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
