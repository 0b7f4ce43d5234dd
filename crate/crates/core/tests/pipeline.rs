use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ghostbench::diffusion::start_timestep;
use ghostbench::gateway::{DenoiseRequest, DiffusionBackend, Latent, NoiseSchedule};
use ghostbench::image::Image;
use ghostbench::ingest::CandidatePool;
use ghostbench::run::fixture::{init_mock_workspace, WorkspaceSpec};
use ghostbench::run::manifest::{tally, RunManifest, SampleRecord};
use ghostbench::run::pipeline::{resume, run_pipeline, RunContext, RunOptions};
use ghostbench::run::store::ImageStore;
use ghostbench::seed;
use ghostbench::verdict::SampleOutcome;
use ghostbench::{Error, Result};

fn workspace(dir: &Path, images: usize, k: usize) -> ghostbench::run::fixture::MockWorkspace {
    init_mock_workspace(
        dir,
        &WorkspaceSpec {
            images,
            k,
            ..WorkspaceSpec::default()
        },
    )
    .unwrap()
}

fn by_id(records: &[SampleRecord]) -> BTreeMap<String, SampleRecord> {
    records.iter().map(|r| (r.sample_id.clone(), r.clone())).collect()
}

fn reference_run(images: usize, k: usize) -> RunManifest {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), images, k);
    let ctx = RunContext::load(ws.config).unwrap();
    run_pipeline(&ctx, RunOptions::default()).unwrap()
}

#[test]
fn full_mock_run_summary_matches_recount() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 60, 20);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    let manifest = run_pipeline(&ctx, RunOptions::default()).unwrap();
    assert_eq!(manifest.records.len(), 40);
    let summary = manifest.summary.as_ref().unwrap();
    assert!(summary.complete && summary.pending.is_empty());
    assert_eq!(summary.samples, 40);
    manifest.verify_summary().unwrap();

    // Independent recount straight from the file.
    let text = std::fs::read_to_string(ws.config.manifest_path()).unwrap();
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] == "sample" {
            let key = (v["class"].as_str().unwrap().to_string(), v["outcome"].as_str().unwrap().to_string());
            *counts.entry(key).or_default() += 1;
        }
    }
    for (class, c) in &summary.classes {
        let get = |o: SampleOutcome| counts.get(&(class.clone(), o.as_str().to_string())).copied().unwrap_or(0);
        assert_eq!(c.success, get(SampleOutcome::Success));
        assert_eq!(c.no_flip, get(SampleOutcome::NoFlip));
        assert_eq!(c.discarded_threshold, get(SampleOutcome::DiscardedThreshold));
        assert_eq!(c.discarded_detector_all, get(SampleOutcome::DiscardedDetectorAll));
        assert_eq!(c.prescreen_rejected, get(SampleOutcome::PrescreenRejected));
    }

    let store = ImageStore::open(&ws.config.output_dir).unwrap();
    for r in &manifest.records {
        for c in &r.candidates {
            assert!(store.contains(&c.image_hash), "missing {}", c.image_hash);
        }
    }
    assert!(ws.config.output_dir.join("config.json").is_file());
}

#[test]
fn qwen_profile_values_reach_records() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 40, 20);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    let attack = *ctx.attack().unwrap();
    assert_eq!(
        (attack.lr, attack.max_steps, attack.tau_yes, attack.attempts, attack.noise_level),
        (0.1, 100, 0.8, 4, 30)
    );
    let manifest = run_pipeline(&ctx, RunOptions::default()).unwrap();
    let start = start_timestep(30, 50, 1000).unwrap();
    let mut saw_candidate = false;
    for r in &manifest.records {
        if let Some(t) = &r.trace {
            assert!(t.steps_taken <= 100);
        }
        assert!(r.candidates.len() <= 4);
        for c in &r.candidates {
            saw_candidate = true;
            assert_eq!(c.params.noise_level, 30);
            assert_eq!(c.params.start_step, start);
            assert_eq!(c.params.guidance_scale, 5.0);
            assert_eq!(c.seed, seed::attempt_seed(ws.config.run_seed, &r.sample_id, c.attempt));
        }
    }
    assert!(saw_candidate, "no sample reached generation");
}

#[test]
fn empty_pool_gives_empty_complete_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 10, 5);
    for class in &ws.config.classes {
        let path = ws.config.pools_dir.join(CandidatePool::file_name(class));
        let mut pool = CandidatePool::load(&path).unwrap();
        pool.image_ids.clear();
        pool.scores = None;
        pool.save(&ws.config.pools_dir).unwrap();
    }
    let ctx = RunContext::load(ws.config).unwrap();
    let m = run_pipeline(&ctx, RunOptions::default()).unwrap();
    assert!(m.records.is_empty());
    let s = m.summary.unwrap();
    assert!(s.complete);
    assert_eq!(s.samples, 0);
}

#[test]
fn interrupted_then_resumed_equals_uninterrupted() {
    let reference = reference_run(40, 20);
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 40, 20);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    let partial = run_pipeline(&ctx, RunOptions { max_samples: Some(20) }).unwrap();
    assert_eq!(partial.records.len(), 20);
    let s = partial.summary.as_ref().unwrap();
    assert!(!s.complete);
    assert_eq!(s.pending.len(), 20);

    let mut cfg = ws.config.clone();
    cfg.workers = 1;
    let ctx = RunContext::load(cfg).unwrap();
    let done = resume(&ws.config.manifest_path(), &ctx, RunOptions::default()).unwrap();
    assert!(done.is_complete());
    done.verify_summary().unwrap();
    assert_eq!(by_id(&done.records), by_id(&reference.records));
}

#[test]
fn resume_of_complete_run_is_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 20, 5);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    run_pipeline(&ctx, RunOptions::default()).unwrap();
    let path = ws.config.manifest_path();
    let before = std::fs::read(&path).unwrap();
    let again = resume(&path, &ctx, RunOptions::default()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(again.records.len(), 10);
}

#[test]
fn hash_mismatch_refuses_and_leaves_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 20, 5);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    run_pipeline(&ctx, RunOptions { max_samples: Some(3) }).unwrap();
    let path = ws.config.manifest_path();
    let before = std::fs::read(&path).unwrap();
    let mut cfg = ws.config.clone();
    cfg.run_seed += 1;
    let other = RunContext::load(cfg).unwrap();
    let err = resume(&path, &other, RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn fresh_run_refuses_existing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 10, 2);
    let ctx = RunContext::load(ws.config.clone()).unwrap();
    run_pipeline(&ctx, RunOptions::default()).unwrap();
    assert!(run_pipeline(&ctx, RunOptions::default()).is_err());
}

/// Diffusion backend that becomes unreachable after `budget` denoise calls.
struct Flaky {
    inner: Arc<dyn DiffusionBackend>,
    budget: usize,
    calls: AtomicUsize,
}

impl DiffusionBackend for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
    fn vae_encode(&self, image: &Image) -> Result<Latent> {
        self.inner.vae_encode(image)
    }
    fn vae_decode(&self, latent: &Latent) -> Result<Image> {
        self.inner.vae_decode(latent)
    }
    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<Latent> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            return Err(Error::unavailable("flaky", "connection refused"));
        }
        self.inner.denoise(request)
    }
}

#[test]
fn outage_stops_cleanly_and_resume_completes() {
    let reference = reference_run(40, 20);
    let dir = tempfile::tempdir().unwrap();
    let ws = workspace(dir.path(), 40, 20);
    let mut ctx = RunContext::load(ws.config.clone()).unwrap();
    let healthy = ctx.backends.diffusion.clone();
    ctx.backends.diffusion = Arc::new(Flaky {
        inner: healthy.clone(),
        budget: 3,
        calls: AtomicUsize::new(0),
    });
    let err = run_pipeline(&ctx, RunOptions::default()).unwrap_err();
    assert!(err.is_backend_outage());
    assert_eq!(err.exit_code(), 3);

    let path = ws.config.manifest_path();
    let partial = RunManifest::load(&path).unwrap();
    let s = partial.summary.as_ref().unwrap();
    assert!(!s.complete);
    assert!(s.stopped.is_some());
    assert_eq!(s.pending.len() + partial.records.len(), 40);
    assert_eq!(s.classes, tally(&partial.records));

    ctx.backends.diffusion = healthy;
    let done = resume(&path, &ctx, RunOptions::default()).unwrap();
    assert!(done.is_complete());
    assert_eq!(by_id(&done.records), by_id(&reference.records));
}
