//! The attack pipeline over candidate pools: prescreen, optimize, generate,
//! judge, classify, append. Workers pull samples from a shared index and
//! hand finished records to a single manifest appender.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use crate::attack::{optimize_from, AttackConfig, AttackContext};
use crate::bridge::MapperCheckpoint;
use crate::compose::{compositional_embedding, load_generic_templates, mine_captions, PromptSet, TargetSpec, GENERIC_TEMPLATES, MAX_MINED_CAPTIONS};
use crate::diffusion::{attempt_generations, GenerationRequest};
use crate::error::{Error, Result};
use crate::gateway::{Backends, ClipBackend};
use crate::ingest::{AnnotatedCorpus, CandidatePool, ImageSource};
use crate::run::config::{build_backends, RunConfig};
use crate::run::manifest::{
    tally, CandidateRecord, ManifestHeader, ManifestLine, ManifestSummary, ManifestWriter, RunManifest, SampleRecord,
    MANIFEST_VERSION,
};
use crate::run::store::ImageStore;
use crate::seed;
use crate::tensor::EmbeddingVector;
use crate::verdict::{candidate_verdict, classify_sample, Classified, SampleOutcome, VerdictRow};

pub const CONFIG_SNAPSHOT: &str = "config.json";

pub fn sample_id(class: &str, image_id: u64) -> String {
    format!("{class}/{image_id}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub class: String,
    pub image_id: u64,
}

impl Job {
    pub fn sample_id(&self) -> String {
        sample_id(&self.class, self.image_id)
    }
}

/// Everything a run needs, already loaded.
pub struct RunContext {
    pub cfg: RunConfig,
    pub config_hash: String,
    pub backends: Backends,
    pub mapper: MapperCheckpoint,
    pub prompts: PromptSet,
    pub images: Arc<dyn ImageSource>,
    pub jobs: Vec<Job>,
    pub e_comp: BTreeMap<String, EmbeddingVector>,
    pub store: ImageStore,
}

impl RunContext {
    /// Loads corpus, pools, mapper and prompts named by `cfg`, connects the
    /// backends and computes one target embedding per class.
    pub fn load(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_artifacts()?;
        let backends = build_backends(&cfg)?;
        let mapper = MapperCheckpoint::load(&cfg.profile()?.mapper)?;
        let prompts = match &cfg.prompts_file {
            Some(p) => PromptSet::load(p)?,
            None => PromptSet::builtin(),
        };
        let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
        let e_comp = target_embeddings(&cfg, &corpus, backends.clip.as_ref())?;
        let mut pools = Vec::new();
        for class in &cfg.classes {
            let path = cfg.pools_dir.join(CandidatePool::file_name(class));
            let pool = CandidatePool::load(&path)
                .map_err(|e| Error::Config(format!("pool for {class:?}: {e}")))?;
            pools.push(pool);
        }
        Self::from_parts(cfg, backends, mapper, prompts, Arc::new(corpus), &pools, e_comp)
    }

    /// Assembles a context from in-memory parts.
    pub fn from_parts(
        cfg: RunConfig,
        backends: Backends,
        mapper: MapperCheckpoint,
        prompts: PromptSet,
        images: Arc<dyn ImageSource>,
        pools: &[CandidatePool],
        e_comp: BTreeMap<String, EmbeddingVector>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut jobs = Vec::new();
        let mut seen = BTreeSet::new();
        for pool in pools {
            if !e_comp.contains_key(&pool.object) {
                return Err(Error::Config(format!("no target embedding for {:?}", pool.object)));
            }
            for &id in &pool.image_ids {
                if seen.insert((pool.object.clone(), id)) {
                    jobs.push(Job {
                        class: pool.object.clone(),
                        image_id: id,
                    });
                }
            }
        }
        let config_hash = cfg.config_hash()?;
        let store = ImageStore::open(&cfg.output_dir)?;
        Ok(Self {
            cfg,
            config_hash,
            backends,
            mapper,
            prompts,
            images,
            jobs,
            e_comp,
            store,
        })
    }

    pub fn attack(&self) -> Result<&AttackConfig> {
        Ok(&self.cfg.profile()?.attack)
    }

    /// Probes each backend once and checks dimensions against the mapper.
    pub fn health_check(&self) -> Result<()> {
        let b = &self.backends;
        let m = self.mapper.config();
        let probe = b.clip.embed_text("health check")?;
        crate::tensor::check_dim("clip embedding", m.d_clip, probe.dim())?;
        let (n, d) = b.mllm.token_dims();
        if (n, d) != (m.n_tokens, m.d_m) {
            return Err(Error::Config(format!(
                "mapper emits {}x{} tokens but the victim expects {n}x{d}",
                m.n_tokens, m.d_m
            )));
        }
        if !b.mllm.supports_gradients() {
            return Err(Error::GradientUnavailable(b.mllm.id().to_string()));
        }
        Ok(())
    }

    fn header(&self) -> ManifestHeader {
        ManifestHeader {
            version: MANIFEST_VERSION,
            config_hash: self.config_hash.clone(),
            created: chrono::Utc::now().to_rfc3339(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            victim: self.cfg.victim.clone(),
            run_seed: self.cfg.run_seed,
        }
    }
}

/// One compositional target embedding per configured class.
pub fn target_embeddings(
    cfg: &RunConfig,
    corpus: &AnnotatedCorpus,
    clip: &dyn ClipBackend,
) -> Result<BTreeMap<String, EmbeddingVector>> {
    let templates = match &cfg.generic_templates_file {
        Some(p) => load_generic_templates(p)?,
        None => GENERIC_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    };
    let captions = corpus.caption_entries();
    let mut e_comp = BTreeMap::new();
    for class in &cfg.classes {
        let mined = mine_captions(&captions, class, MAX_MINED_CAPTIONS, clip)?;
        let mut spec = TargetSpec::with_templates(class, &templates, mined.into_iter().map(|m| m.caption).collect());
        spec.weights = cfg.composition;
        e_comp.insert(class.clone(), compositional_embedding(&spec, clip)?);
    }
    Ok(e_comp)
}

/// Processes one sample end to end.
pub fn process_sample(ctx: &RunContext, job: &Job) -> Result<SampleRecord> {
    let sid = job.sample_id();
    let run_seed = ctx.cfg.run_seed;
    let attack = ctx.attack()?;
    let b = &ctx.backends;
    let image = ctx.images.image(job.image_id)?;
    let mut record = SampleRecord {
        sample_id: sid.clone(),
        class: job.class.clone(),
        image_id: job.image_id,
        source_hash: image.content_hash()?,
        outcome: SampleOutcome::PrescreenRejected,
        images_generated: 0,
        images_filtered: 0,
        prescreen_prompt: None,
        trace: None,
        candidates: Vec::new(),
        generation_failures: Vec::new(),
        success_image: None,
        error: None,
    };

    let prompt = ctx.prompts.sample(&job.class, &mut seed::rng_for(run_seed, &sid, "prescreen"));
    record.prescreen_prompt = Some(prompt.clone());
    match b.mllm.verdict(&image, &prompt) {
        Ok(true) => return Ok(record),
        Ok(false) => {}
        Err(e) if e.is_backend_outage() => return Err(e),
        Err(e) if e.is_backend_failure() => {
            record.outcome = SampleOutcome::PrescreenError;
            record.error = Some(e.to_string());
            return Ok(record);
        }
        Err(e) => return Err(e),
    }

    let c0 = b.clip.embed_image(&image)?;
    let e_comp = &ctx.e_comp[&job.class];
    let actx = AttackContext {
        mapper: &ctx.mapper,
        mllm: b.mllm.as_ref(),
        prompts: &ctx.prompts,
        object: &job.class,
        e_comp,
    };
    let trace = optimize_from(&c0, &actx, attack, seed::sample_seed(run_seed, &sid, "attack"))?;
    let status = trace.status;
    let met = trace.threshold_met();
    let conditioning = trace.final_embedding.clone();
    record.trace = Some(if ctx.cfg.trace_full { trace } else { trace.thinned() });

    if !met {
        let c = classify_sample(&status, &[])?;
        record.outcome = c.outcome;
        return Ok(record);
    }

    let req = GenerationRequest {
        source: image,
        conditioning,
        noise_level: attack.noise_level,
        guidance_scale: attack.guidance_scale,
        num_inference_steps: attack.num_inference_steps,
        attempt_seeds: (0..attack.attempts).map(|a| seed::attempt_seed(run_seed, &sid, a)).collect(),
    };
    let report = attempt_generations(&req, b.diffusion.as_ref(), |cand| {
        let mut rng = seed::rng_for(run_seed, &format!("{sid}#{}", cand.attempt), "verdict");
        candidate_verdict(
            &cand.image,
            &job.class,
            b.detector.as_ref(),
            attack.detector_threshold,
            b.mllm.as_ref(),
            &ctx.prompts,
            &mut rng,
        )
    })?;

    for judged in &report.candidates {
        let hash = ctx.store.put(&judged.candidate.image)?;
        record.candidates.push(CandidateRecord {
            attempt: judged.candidate.attempt,
            seed: judged.candidate.seed,
            image_hash: hash,
            params: judged.candidate.params,
            verdict: judged.verdict.clone(),
        });
    }
    record.generation_failures = report.failures.clone();
    let outcomes = report.outcomes();
    let c = if outcomes.is_empty() {
        // Every attempt failed to produce a judged image.
        Classified {
            outcome: SampleOutcome::NoFlip,
            images_generated: 0,
            images_filtered: 0,
        }
    } else {
        classify_sample(&status, &outcomes)?
    };
    record.outcome = c.outcome;
    record.images_generated = c.images_generated;
    record.images_filtered = c.images_filtered;
    record.success_image = report.success.map(|i| record.candidates[i].image_hash.clone());
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many records have been appended in this invocation.
    pub max_samples: Option<usize>,
}

/// Starts a fresh run; refuses if the manifest already exists.
pub fn run_pipeline(ctx: &RunContext, opts: RunOptions) -> Result<RunManifest> {
    let path = ctx.cfg.manifest_path();
    if path.exists() {
        return Err(Error::Config(format!(
            "{} already exists; resume it instead",
            path.display()
        )));
    }
    ctx.health_check()?;
    write_snapshot(ctx)?;
    let mut writer = ManifestWriter::create(&path, &ctx.header())?;
    drive(ctx, &mut writer, Vec::new(), opts)?;
    RunManifest::load(&path)
}

/// Continues a run, processing only samples absent from the manifest.
pub fn resume(manifest_path: &Path, ctx: &RunContext, opts: RunOptions) -> Result<RunManifest> {
    let existing = RunManifest::load(manifest_path)?;
    if existing.header.config_hash != ctx.config_hash {
        return Err(Error::Config(format!(
            "config hash {} does not match manifest {}",
            ctx.config_hash, existing.header.config_hash
        )));
    }
    let done = existing.sample_ids();
    if existing.is_complete() && ctx.jobs.iter().all(|j| done.contains(&j.sample_id())) {
        return Ok(existing);
    }
    ctx.health_check()?;
    let mut writer = ManifestWriter::append_to(manifest_path)?;
    drive(ctx, &mut writer, existing.records, opts)?;
    RunManifest::load(manifest_path)
}

enum Event {
    Done(Box<SampleRecord>),
    Failed(String, Error),
}

fn drive(ctx: &RunContext, writer: &mut ManifestWriter, mut records: Vec<SampleRecord>, opts: RunOptions) -> Result<()> {
    let done: BTreeSet<String> = records.iter().map(|r| r.sample_id.clone()).collect();
    let todo: Vec<&Job> = ctx.jobs.iter().filter(|j| !done.contains(&j.sample_id())).collect();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = ctx.cfg.workers.clamp(1, todo.len().max(1));
    let mut stopped: Option<Error> = None;
    let mut appended = 0usize;

    std::thread::scope(|s| -> Result<()> {
        let (tx, rx) = mpsc::channel::<Event>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, todo) = (&next, &stop, &todo);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = todo.get(i) else { break };
                let event = match process_sample(ctx, job) {
                    Ok(r) => Event::Done(Box::new(r)),
                    Err(e) => Event::Failed(job.sample_id(), e),
                };
                if tx.send(event).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for event in rx {
            match event {
                Event::Done(r) => {
                    if stop.load(Ordering::SeqCst) {
                        continue;
                    }
                    writer.append(&ManifestLine::Sample(r.clone()))?;
                    records.push(*r);
                    appended += 1;
                    if opts.max_samples.is_some_and(|m| appended >= m) {
                        stop.store(true, Ordering::SeqCst);
                    }
                }
                Event::Failed(sid, e) => {
                    log::error!("sample {sid}: {e}");
                    if !stop.swap(true, Ordering::SeqCst) {
                        stopped = Some(e);
                    }
                }
            }
        }
        Ok(())
    })?;

    let finished: BTreeSet<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let pending: Vec<String> = ctx
        .jobs
        .iter()
        .map(Job::sample_id)
        .filter(|id| !finished.contains(id.as_str()))
        .collect();
    let summary = ManifestSummary {
        samples: records.len(),
        classes: tally(&records),
        complete: pending.is_empty() && stopped.is_none(),
        pending,
        stopped: stopped.as_ref().map(|e| e.to_string()),
        written: chrono::Utc::now().to_rfc3339(),
    };
    writer.append(&ManifestLine::Summary(summary))?;
    match stopped {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_snapshot(ctx: &RunContext) -> Result<()> {
    let path = ctx.cfg.output_dir.join(CONFIG_SNAPSHOT);
    let json = serde_json::to_vec_pretty(&ctx.cfg)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// One row per judged candidate, in manifest order.
pub fn verdict_rows(records: &[SampleRecord]) -> Vec<VerdictRow> {
    records
        .iter()
        .flat_map(|r| {
            r.candidates.iter().filter_map(move |c| {
                c.verdict.as_ref().map(|v| VerdictRow {
                    sample_id: r.sample_id.clone(),
                    class: r.class.clone(),
                    attempt: c.attempt,
                    seed: c.seed,
                    image_hash: c.image_hash.clone(),
                    detector_hit: v.detector_hit,
                    max_score: v.max_score,
                    mllm_yes: v.mllm_yes,
                    prompt: v.prompt.clone(),
                    outcome: v.outcome,
                })
            })
        })
        .collect()
}
