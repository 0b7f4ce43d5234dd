//! Subcommand implementations.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Subcommand};
use ghostbench::bridge::{select_mapper, train_mapper, MapperCheckpoint, MapperConfig, MapperTrainConfig, ProbeItem};
use ghostbench::compose::PromptSet;
use ghostbench::eval::fid::{fid_pair, FeatureExtractor, LinearExtractor, RemoteExtractor};
use ghostbench::eval::mitigate::{
    build_mitigation_dataset, build_pope_probe, downstream_eval, instruction_records, select_checkpoint_pope,
    write_jsonl, Checkpoint, DownstreamSuites, LoraConfig, MitigationDataset, MitigationParams, PopeSetting,
    PositiveCandidate, VqaItem,
};
use ghostbench::eval::report::{bar_chart_svg, line_plot_svg, write_json, write_text, Series};
use ghostbench::eval::success::{success_report, SuccessReport};
use ghostbench::eval::sweep::{add_paired_fid, run_sweep, SweepParam, SweepReport};
use ghostbench::eval::transfer::{
    matrix_from_verdicts, poll_verdicts, TransferMatrix, TransferSource, TransferTarget, VerdictCache,
};
use ghostbench::eval::votes::VoteLedger;
use ghostbench::gateway::remote::{Dispatcher, RemoteClient, RemoteFeatures};
use ghostbench::gateway::MllmBackend;
use ghostbench::image::Image;
use ghostbench::ingest::{ingest, parse_classes, AnnotatedCorpus, PoolMode};
use ghostbench::run::config::{build_backends, RunConfig};
use ghostbench::run::fixture::{init_mock_workspace, WorkspaceSpec};
use ghostbench::run::manifest::RunManifest;
use ghostbench::run::pipeline::{resume, run_pipeline, target_embeddings, verdict_rows, RunContext, RunOptions};
use ghostbench::run::session::{
    ghost_images, sample_per_object, split_training, AnnotationService, GroupPools, Mix, PoolImage, SessionSpec,
};
use ghostbench::run::store::ImageStore;
use ghostbench::verdict::write_verdicts_csv;
use ghostbench::{Error, Result};

use crate::serve::{router, AppState};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a self-contained workspace wired to mock backends.
    InitMock(InitMockArgs),
    /// Build per-class candidate pools from an annotated corpus.
    Ingest(IngestArgs),
    /// Train a CLIP-to-victim mapper on corpus images.
    TrainMapper(TrainMapperArgs),
    /// Pick the best of several mapper checkpoints on a labelled probe.
    SelectMapper(SelectMapperArgs),
    /// Run (or resume) the attack pipeline.
    Attack(AttackArgs),
    /// Per-class success statistics of a finished run.
    Eval(EvalArgs),
    /// Cross-model yes-rates on other victims' success images.
    Transfer(TransferArgs),
    /// Frechet distance between two image sets.
    Fid(FidArgs),
    /// Repeat a run over values of one attack parameter.
    Sweep(SweepArgs),
    /// Mitigation dataset, checkpoint selection and downstream evaluation.
    #[command(subcommand)]
    Mitigate(MitigateCommand),
    /// Serve the human-annotation API and UI bundle.
    ServeAnnotation(ServeAnnotationArgs),
    /// Render SVG charts from report JSON files.
    Report(ReportArgs),
    /// Serve the active profile's backends over the line protocol.
    ServeMocks(ServeMocksArgs),
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitMock(a) => init_mock(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::TrainMapper(a) => cmd_train_mapper(a),
        Command::SelectMapper(a) => cmd_select_mapper(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Fid(a) => cmd_fid(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Mitigate(c) => cmd_mitigate(c),
        Command::ServeAnnotation(a) => cmd_serve_annotation(a),
        Command::Report(a) => cmd_report(a),
        Command::ServeMocks(a) => cmd_serve_mocks(a),
    }
}

/// Missing or unreadable config files are configuration errors.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    use std::io::Write as _;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("stdout", e)),
        _ => Ok(()),
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn csv_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Args)]
pub struct InitMockArgs {
    /// Workspace directory to create.
    pub dir: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub images: usize,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "boat,vase")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

fn init_mock(a: InitMockArgs) -> Result<()> {
    let ws = init_mock_workspace(
        &a.dir,
        &WorkspaceSpec {
            images: a.images,
            classes: a.classes,
            k: a.k,
            seed: a.seed,
            workers: a.workers,
            ..WorkspaceSpec::default()
        },
    )?;
    println!("{}", ws.config_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus root; defaults to the config's corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// A class file (one per line) or a comma-separated list.
    #[arg(long)]
    pub classes: Option<String>,
    #[arg(long, default_value = "sorted")]
    pub mode: PoolMode,
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    /// Pools go to `<out>/pools`; defaults to the parent of the config's pools_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_classes(spec: &str) -> Result<Vec<String>> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(parse_classes(&text))
    } else {
        Ok(spec.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let backends = build_backends(&cfg)?;
    let corpus = AnnotatedCorpus::load(a.corpus.as_deref().unwrap_or(&cfg.corpus))?;
    let classes = match &a.classes {
        Some(s) => read_classes(s)?,
        None => cfg.classes.clone(),
    };
    let out = match a.out {
        Some(o) => o,
        None => manifest_dir(&cfg.pools_dir),
    };
    let pools = ingest(&corpus, &classes, a.mode, a.k, backends.clip.as_ref(), cfg.run_seed, cfg.workers, &out)?;
    for p in &pools {
        println!("{}\t{}", p.object, p.image_ids.len());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainMapperArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1024)]
    pub ctx: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Use at most this many corpus images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn corpus_images(corpus: &AnnotatedCorpus, limit: Option<usize>) -> Result<Vec<Image>> {
    corpus
        .entries
        .keys()
        .take(limit.unwrap_or(usize::MAX))
        .map(|&id| ghostbench::ingest::ImageSource::image(corpus, id))
        .collect()
}

fn cmd_train_mapper(a: TrainMapperArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let b = build_backends(&cfg)?;
    let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
    let images = corpus_images(&corpus, a.limit)?;
    let (n_tokens, d_m) = b.mllm.token_dims();
    let mcfg = MapperConfig {
        d_clip: b.clip.dims(),
        d_m,
        n_tokens,
        d_hidden: a.hidden,
        d_ctx: a.ctx,
    };
    let tcfg = MapperTrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        weight_decay: a.weight_decay,
        t_max: a.epochs,
        warmup_steps: a.warmup,
    };
    let (ckpt, stats) = train_mapper(&images, b.clip.as_ref(), b.mllm.as_ref(), mcfg, &tcfg, a.seed)?;
    ckpt.save(&a.out)?;
    print_json(&stats)
}

#[derive(Debug, Args)]
pub struct SelectMapperArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub candidates: Vec<PathBuf>,
    /// Probe items per class, half with the object present.
    #[arg(long, default_value_t = 20)]
    pub probe_per_class: usize,
    /// Accuracy table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn cmd_select_mapper(a: SelectMapperArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let b = build_backends(&cfg)?;
    let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
    let prompts = prompt_set(&cfg)?;
    let mut probe = Vec::new();
    for class in &cfg.classes {
        let half = a.probe_per_class / 2;
        let present = corpus.entries.values().filter(|e| e.labels.contains(class)).take(a.probe_per_class - half);
        let absent = corpus.entries.values().filter(|e| !e.labels.contains(class)).take(half);
        for (e, is_present) in present.map(|e| (e, true)).chain(absent.map(|e| (e, false))) {
            probe.push(ProbeItem {
                id: format!("{class}/{}", e.id),
                image: ghostbench::ingest::ImageSource::image(&corpus, e.id)?,
                object: class.clone(),
                present: is_present,
            });
        }
    }
    let candidates = a
        .candidates
        .iter()
        .map(|p| MapperCheckpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let sel = select_mapper(&candidates, &probe, b.clip.as_ref(), b.mllm.as_ref(), &prompts, a.seed)?;
    if let Some(out) = &a.out {
        sel.write_csv(csv_file(out)?)?;
    }
    for row in &sel.table {
        println!(
            "{}\thidden={}\tctx={}\taccuracy={:.2}",
            a.candidates[row.candidate].display(),
            row.d_hidden,
            row.d_ctx,
            100.0 * row.accuracy
        );
    }
    println!("best\t{}", a.candidates[sel.best].display());
    Ok(())
}

fn prompt_set(cfg: &RunConfig) -> Result<PromptSet> {
    match &cfg.prompts_file {
        Some(p) => PromptSet::load(p),
        None => Ok(PromptSet::builtin()),
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Continue an existing manifest instead of starting fresh.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many samples in this invocation.
    #[arg(long)]
    pub max_samples: Option<usize>,
    /// Override the config's worker count.
    #[arg(long)]
    pub workers: Option<usize>,
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    let ctx = RunContext::load(cfg)?;
    let opts = RunOptions {
        max_samples: a.max_samples,
    };
    let path = ctx.cfg.manifest_path();
    let manifest = if a.resume {
        resume(&path, &ctx, opts)?
    } else {
        run_pipeline(&ctx, opts)?
    };
    let mut rows = verdict_rows(&manifest.records);
    rows.sort_by(|a, b| (&a.class, sample_index(&a.sample_id), a.attempt).cmp(&(&b.class, sample_index(&b.sample_id), b.attempt)));
    write_verdicts_csv(&rows, csv_file(&ctx.cfg.output_dir.join("verdicts.csv"))?)?;
    match &manifest.summary {
        Some(s) => print_json(s),
        None => Ok(()),
    }
}

/// Numeric suffix of `class/index` ids, so `boat/10` sorts after `boat/9`.
fn sample_index(id: &str) -> (u64, &str) {
    let tail = id.rsplit('/').next().unwrap_or(id);
    (tail.parse().unwrap_or(u64::MAX), id)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for success.json and success.csv; defaults to the manifest's.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    let report = success_report(&manifest)?;
    let out = a.out.unwrap_or_else(|| manifest_dir(&a.manifest));
    write_json(&out.join("success.json"), &report)?;
    report.write_csv(csv_file(&out.join("success.csv"))?)?;
    report.write_csv(std::io::stdout())
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Config whose profiles name the target models.
    #[arg(long)]
    pub config: PathBuf,
    /// Manifests of the source victims.
    #[arg(long = "source", num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    /// Restrict targets to these profiles.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Verdict cache; reused when present, written otherwise.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// The victim model of each profile, by profile name.
fn profile_mllms(cfg: &RunConfig, names: &[String]) -> Vec<(String, Result<Arc<dyn MllmBackend>>)> {
    names
        .iter()
        .map(|name| {
            let mut c = cfg.clone();
            c.victim = name.clone();
            (name.clone(), build_backends(&c).map(|b| b.mllm))
        })
        .collect()
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let sources = a
        .sources
        .iter()
        .map(|p| Ok(TransferSource::from_manifest(&RunManifest::load(p)?, &manifest_dir(p))))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a.targets.unwrap_or_else(|| cfg.profiles.keys().cloned().collect());
    let cache = match &a.cache {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<VerdictCache>(&text).map_err(|e| Error::decode("verdict cache", e))?
        }
        _ => {
            let prompts = prompt_set(&cfg)?;
            let mut unreachable = BTreeMap::new();
            let mllms: Vec<(String, Arc<dyn MllmBackend>)> = profile_mllms(&cfg, &names)
                .into_iter()
                .filter_map(|(n, m)| match m {
                    Ok(m) => Some((n, m)),
                    Err(e) => {
                        log::warn!("target {n} unavailable: {e}");
                        unreachable.insert(n, e.to_string());
                        None
                    }
                })
                .collect();
            let targets: Vec<TransferTarget<'_>> = mllms
                .iter()
                .map(|(n, m)| TransferTarget {
                    name: n.clone(),
                    mllm: m.as_ref(),
                })
                .collect();
            let mut cache = poll_verdicts(&sources, &targets, &prompts, a.seed)?;
            cache.unreachable.extend(unreachable);
            if let Some(p) = &a.cache {
                write_json(p, &cache)?;
            }
            cache
        }
    };
    let matrix = matrix_from_verdicts(&sources, &names, &cache);
    write_json(&a.out.join("transfer.json"), &matrix)?;
    matrix.write_csv(csv_file(&a.out.join("transfer.csv"))?)?;
    matrix.write_csv(std::io::stdout())
}

#[derive(Debug, Args)]
pub struct FidArgs {
    /// A directory of PNG files, or a manifest (its success images).
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// `linear` or a remote feature endpoint `host:port`.
    #[arg(long, default_value = "linear")]
    pub extractor: String,
    #[arg(long, default_value_t = 2048)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn load_image_set(path: &Path) -> Result<Vec<Image>> {
    if path.is_file() {
        let m = RunManifest::load(path)?;
        let store = ImageStore::open(&manifest_dir(path))?;
        return m
            .records
            .iter()
            .filter_map(|r| r.success_image.as_ref())
            .map(|h| store.get(h))
            .collect();
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    files.iter().map(|p| Image::load(p)).collect()
}

fn extractor(spec: &str, dim: usize, grid: usize, seed: u64) -> Result<Box<dyn FeatureExtractor>> {
    if spec == "linear" {
        Ok(Box::new(LinearExtractor::new(seed, grid, dim)?))
    } else {
        let addr = spec.strip_prefix("tcp://").unwrap_or(spec);
        Ok(Box::new(RemoteExtractor {
            features: RemoteFeatures::new(RemoteClient::new(addr)),
            dim,
        }))
    }
}

fn cmd_fid(a: FidArgs) -> Result<()> {
    let set_a = load_image_set(&a.a)?;
    let set_b = load_image_set(&a.b)?;
    let ex = extractor(&a.extractor, a.dim, a.grid, a.seed)?;
    let fid = fid_pair(&set_a, &set_b, ex.as_ref())?;
    print_json(&serde_json::json!({ "fid": fid, "n_a": set_a.len(), "n_b": set_b.len() }))
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `tau`, `lambda-clip` or `lambda-reg`.
    #[arg(long)]
    pub param: SweepParam,
    /// Values to run; defaults to the standard grid for the parameter.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Add intersected-set FID between consecutive values.
    #[arg(long)]
    pub fid: bool,
    #[arg(long, default_value_t = 64)]
    pub fid_dim: usize,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let values = a.values.unwrap_or_else(|| a.param.default_values());
    let mut report = run_sweep(&cfg, a.param, &values, &a.out, &RunContext::load)?;
    if a.fid || a.param == SweepParam::LambdaReg {
        let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
        let ex = LinearExtractor::new(cfg.run_seed, 8, a.fid_dim)?;
        add_paired_fid(&mut report, &corpus, &ex)?;
    }
    write_json(&a.out.join("sweep.json"), &report)?;
    for p in &report.points {
        println!(
            "{}={}\tsuccess={}\tdetection={}",
            a.param.as_str(),
            p.value,
            fmt_pct(p.report.overall.rate),
            fmt_pct(p.detection_rate)
        );
    }
    Ok(())
}

fn fmt_pct(r: Option<f64>) -> String {
    r.map(|r| format!("{:.1}%", 100.0 * r)).unwrap_or_else(|| "n/a".into())
}

#[derive(Debug, Subcommand)]
pub enum MitigateCommand {
    /// Pair success images with synthesized positives and write
    /// instruction records.
    Build(MitigateBuildArgs),
    /// Score fine-tuned checkpoints on POPE and keep the best.
    SelectCheckpoint(SelectCheckpointArgs),
    /// Downstream suites for one model.
    Evaluate(MitigateEvalArgs),
}

#[derive(Debug, Args)]
pub struct MitigateBuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Manifests whose success images become negatives.
    #[arg(long = "manifest", num_args = 1.., required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Object-present corpus images considered per class.
    #[arg(long, default_value_t = 200)]
    pub positives: usize,
    #[arg(long, default_value_t = 0)]
    pub noise_level: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn cmd_mitigate(c: MitigateCommand) -> Result<()> {
    match c {
        MitigateCommand::Build(a) => mitigate_build(a),
        MitigateCommand::SelectCheckpoint(a) => mitigate_select(a),
        MitigateCommand::Evaluate(a) => mitigate_evaluate(a),
    }
}

fn mitigate_build(a: MitigateBuildArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let b = build_backends(&cfg)?;
    let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
    let e_comp = target_embeddings(&cfg, &corpus, b.clip.as_ref())?;
    let mut positives: BTreeMap<String, Vec<PositiveCandidate>> = BTreeMap::new();
    for class in &cfg.classes {
        let list = corpus
            .entries
            .values()
            .filter(|e| e.labels.contains(class))
            .take(a.positives)
            .map(|e| {
                Ok(PositiveCandidate {
                    id: e.id.to_string(),
                    image: ghostbench::ingest::ImageSource::image(&corpus, e.id)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        positives.insert(class.clone(), list);
    }
    let attack = &cfg.profile()?.attack;
    let params = MitigationParams {
        noise_level: a.noise_level,
        guidance_scale: attack.guidance_scale,
        num_inference_steps: attack.num_inference_steps,
        seed: a.seed,
        max_per_class: a.per_class,
    };
    let store = ImageStore::open(&a.out)?;
    let prompts = prompt_set(&cfg)?;
    let mut dataset = MitigationDataset::default();
    for path in &a.manifests {
        let m = RunManifest::load(path)?;
        let src = ImageStore::open(&manifest_dir(path))?;
        let part = build_mitigation_dataset(&m, &positives, &e_comp, b.clip.as_ref(), b.diffusion.as_ref(), &store, &params)?;
        for p in &part.pairs {
            store.put_png(&src.get_png(&p.negative_image)?)?;
        }
        dataset.pairs.extend(part.pairs);
        dataset.rotated.extend(part.rotated);
        dataset.skipped.extend(part.skipped);
    }
    write_json(&a.out.join("pairs.json"), &dataset)?;
    write_jsonl(&a.out.join("instructions.jsonl"), &instruction_records(&dataset, &store, &prompts, a.seed)?)?;
    write_json(&a.out.join("lora.json"), &LoraConfig::default())?;
    println!("pairs\t{}", dataset.pairs.len());
    if !dataset.rotated.is_empty() {
        println!("rotated\t{}", dataset.rotated.join(","));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SelectCheckpointArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `EPOCH=ENDPOINT`, one per checkpoint; the endpoint replaces the
    /// profile's mllm backend.
    #[arg(long = "checkpoint", num_args = 1.., required = true)]
    pub checkpoints: Vec<String>,
    /// POPE Random questions (half present, half absent).
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn mllm_at(cfg: &RunConfig, endpoint: &str) -> Result<Arc<dyn MllmBackend>> {
    let mut c = cfg.clone();
    c.profile_mut()?.backends.mllm = endpoint.to_string();
    Ok(build_backends(&c)?.mllm)
}

fn corpus_loader(corpus: &AnnotatedCorpus) -> impl Fn(u64) -> Result<Image> + '_ {
    move |id| ghostbench::ingest::ImageSource::image(corpus, id)
}

fn mitigate_select(a: SelectCheckpointArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
    let probe = build_pope_probe(&corpus, PopeSetting::Random, a.samples.div_ceil(2), 1, a.seed)?;
    let mut loaded = Vec::new();
    for spec in &a.checkpoints {
        let (epoch, endpoint) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint must be EPOCH=ENDPOINT, got {spec:?}")))?;
        let epoch: usize = epoch
            .parse()
            .map_err(|_| Error::Config(format!("bad epoch in {spec:?}")))?;
        loaded.push((epoch, endpoint.to_string(), mllm_at(&cfg, endpoint)?));
    }
    let checkpoints: Vec<Checkpoint<'_>> = loaded
        .iter()
        .map(|(epoch, name, m)| Checkpoint {
            name: name.clone(),
            epoch: *epoch,
            mllm: m.as_ref(),
        })
        .collect();
    let sel = select_checkpoint_pope(&checkpoints, &probe, &corpus_loader(&corpus))?;
    if let Some(out) = &a.out {
        write_json(out, &sel)?;
    }
    print_json(&sel)
}

#[derive(Debug, Args)]
pub struct MitigateEvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Model endpoint; defaults to the profile's mllm.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Manifests of other victims for the cross-model yes-rate.
    #[arg(long = "ghost")]
    pub ghost: Vec<PathBuf>,
    /// POPE questions per setting; 0 skips POPE.
    #[arg(long, default_value_t = 1000)]
    pub pope_samples: usize,
    /// JSONL of `{image_id, question, answers}`.
    #[arg(long)]
    pub vqa: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::decode("jsonl record", e)))
        .collect()
}

fn mitigate_evaluate(a: MitigateEvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mllm = match &a.endpoint {
        Some(e) => mllm_at(&cfg, e)?,
        None => build_backends(&cfg)?.mllm,
    };
    let corpus = AnnotatedCorpus::load(&cfg.corpus)?;
    let mut suites = DownstreamSuites::default();
    for p in &a.ghost {
        suites
            .ghost_sources
            .push(TransferSource::from_manifest(&RunManifest::load(p)?, &manifest_dir(p)));
    }
    if a.pope_samples > 0 {
        for setting in PopeSetting::ALL {
            suites
                .pope
                .insert(setting, build_pope_probe(&corpus, setting, a.pope_samples.div_ceil(2), 1, a.seed)?);
        }
    }
    if let Some(p) = &a.vqa {
        suites.vqa = read_jsonl::<VqaItem>(p)?;
    }
    let prompts = prompt_set(&cfg)?;
    let report = downstream_eval(mllm.as_ref(), &suites, &prompts, &corpus_loader(&corpus), a.seed)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

#[derive(Debug, Args)]
pub struct ServeAnnotationArgs {
    /// Manifest of the first GHOST group.
    #[arg(long)]
    pub ghost_a: PathBuf,
    #[arg(long)]
    pub ghost_b: PathBuf,
    /// `pairs.json` written by `mitigate build`; its positives are the
    /// control images.
    #[arg(long)]
    pub control: PathBuf,
    #[arg(long)]
    pub ledger: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Built UI bundle served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, env = "GHOSTBENCH_OPERATOR_TOKEN")]
    pub operator_token: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub size: usize,
    #[arg(long, default_value_t = 5)]
    pub training: usize,
    /// GHOST images sampled per object per group.
    #[arg(long, default_value_t = 50)]
    pub per_object: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn annotation_state(a: &ServeAnnotationArgs) -> Result<AppState> {
    let ma = RunManifest::load(&a.ghost_a)?;
    let mb = RunManifest::load(&a.ghost_b)?;
    let text = std::fs::read_to_string(&a.control).map_err(|e| Error::io(&a.control, e))?;
    let pairs: MitigationDataset = serde_json::from_str(&text).map_err(|e| Error::decode("pairs.json", e))?;
    let control: Vec<PoolImage> = pairs
        .pairs
        .iter()
        .map(|p| PoolImage {
            image_hash: p.positive_image.clone(),
            object: p.class.clone(),
        })
        .collect();
    let mut pools = GroupPools {
        control,
        ghost_a: sample_per_object(&ghost_images(&ma), a.per_object, a.seed),
        ghost_b: sample_per_object(&ghost_images(&mb), a.per_object, a.seed ^ 1),
    };
    let training = split_training(&mut pools, a.training);
    let spec = SessionSpec {
        size: a.size,
        mix: Mix::default(),
        training: a.training,
    };
    let service = AnnotationService::new(pools, training, spec, a.seed, VoteLedger::open(&a.ledger)?);
    Ok(AppState {
        service,
        stores: vec![
            ImageStore::open(&manifest_dir(&a.ghost_a))?,
            ImageStore::open(&manifest_dir(&a.ghost_b))?,
            ImageStore::open(&manifest_dir(&a.control))?,
        ],
        operator_token: a.operator_token.clone(),
    })
}

fn cmd_serve_annotation(a: ServeAnnotationArgs) -> Result<()> {
    let state = Arc::new(annotation_state(&a)?);
    let app = router(state, a.static_dir.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(crate::serve::serve(&a.addr, app))
        .map_err(|e| Error::unavailable("annotation-service", e.to_string()))
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `success.json` from `eval`.
    #[arg(long)]
    pub success: Option<PathBuf>,
    /// `sweep.json` from `sweep`.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    /// `transfer.json` from `transfer`.
    #[arg(long)]
    pub transfer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(what, e))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if a.success.is_none() && a.sweep.is_none() && a.transfer.is_none() {
        return Err(Error::Config("nothing to report: pass --success, --sweep or --transfer".into()));
    }
    if let Some(p) = &a.success {
        let r: SuccessReport = read_json(p, "success report")?;
        let bars: Vec<(String, Option<f64>)> = r.classes.iter().map(|c| (c.class.clone(), c.percent())).collect();
        let title = match &r.victim {
            Some(v) => format!("Success rate per class ({v})"),
            None => "Success rate per class".into(),
        };
        write_text(&a.out.join("success.svg"), &bar_chart_svg(&title, "success rate (%)", &bars))?;
    }
    if let Some(p) = &a.sweep {
        let r: SweepReport = read_json(p, "sweep report")?;
        let svg = line_plot_svg(
            &format!("Sweep over {}", r.param.as_str()),
            r.param.as_str(),
            "%",
            &[r.success_series(), r.detection_series()],
        );
        write_text(&a.out.join("sweep.svg"), &svg)?;
        if !r.paired_fid.is_empty() {
            let series = vec![Series {
                name: "FID (intersected)".into(),
                points: r.paired_fid.iter().map(|f| (f.value_b, f.fid_b)).collect(),
            }];
            write_text(&a.out.join("sweep_fid.svg"), &line_plot_svg("Paired FID", r.param.as_str(), "FID", &series))?;
        }
    }
    if let Some(p) = &a.transfer {
        let m: TransferMatrix = read_json(p, "transfer matrix")?;
        let bars: Vec<(String, Option<f64>)> = m
            .cells
            .iter()
            .map(|c| (format!("{}>{}", c.source, c.target), c.rate.map(|r| 100.0 * r)))
            .collect();
        write_text(&a.out.join("transfer.svg"), &bar_chart_svg("Transfer yes-rate", "yes-rate (%)", &bars))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ServeMocksArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    pub addr: String,
}

fn cmd_serve_mocks(a: ServeMocksArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let b = build_backends(&cfg)?;
    let ex = Arc::new(LinearExtractor::new(cfg.run_seed, 8, 64)?);
    let dispatcher = Dispatcher {
        clip: Some(b.clip),
        mllm: Some(b.mllm),
        diffusion: Some(b.diffusion),
        detector: Some(b.detector),
        features: Some(Arc::new(move |img: &Image| ex.extract(img))),
    };
    let listener = TcpListener::bind(&a.addr).map_err(|e| Error::io(&a.addr, e))?;
    eprintln!("serving mock backends on {}", a.addr);
    dispatcher.serve(listener).map_err(|e| Error::io(&a.addr, e))
}
