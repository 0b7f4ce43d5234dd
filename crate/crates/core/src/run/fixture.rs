//! A self-contained mock workspace: synthetic corpus, pools, a mapper
//! checkpoint and a run config wired to mock backends.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bridge::{CheckpointStats, MapperCheckpoint, MapperConfig, MapperWeights};
use crate::error::{Error, Result};
use crate::gateway::mock::{MockClip, MockMllm};
use crate::gateway::ClipBackend;
use crate::image::Image;
use crate::ingest::{ingest, write_corpus, AnnotatedCorpus, PoolMode};
use crate::run::config::{example_config, RunConfig};

pub const CONFIG_FILE: &str = "ghostbench.json";
/// Sharper than the default mock so untouched images mostly answer "No" and
/// the default regularization weights still leave room to flip.
pub const FIXTURE_LOGIT_GAIN: f64 = 8.0;
pub const FIXTURE_LOGIT_BIAS: f64 = -4.0;
pub const FIXTURE_INSERTION_THRESHOLD: f64 = 0.2;
const DISTRACTORS: [&str; 3] = ["dog", "cup", "bench"];

#[derive(Debug, Clone)]
pub struct MockWorkspace {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct WorkspaceSpec {
    pub images: usize,
    pub classes: Vec<String>,
    /// Pool size per class.
    pub k: usize,
    pub seed: u64,
    pub workers: usize,
    pub image_size: u32,
}

impl Default for WorkspaceSpec {
    fn default() -> Self {
        Self {
            images: 40,
            classes: vec!["boat".into(), "vase".into()],
            k: 20,
            seed: 0,
            workers: 4,
            image_size: 8,
        }
    }
}

/// Mean of the mock victim's per-token vision maps, row-major
/// `d_m x d_clip`: the map a perfectly trained mapper would learn.
pub fn victim_vision_map(seed: u64, d_m: usize, n_tokens: usize, clip: &Arc<dyn ClipBackend>) -> Result<Vec<f64>> {
    let mllm = MockMllm::new(seed, d_m, n_tokens)?.with_linear_vision(clip.clone());
    let maps = mllm.linear_vision_maps().expect("linear vision configured");
    let mut mean = vec![0.0; maps[0].len()];
    for map in maps {
        mean.iter_mut().zip(map).for_each(|(a, b)| *a += b / n_tokens as f64);
    }
    Ok(mean)
}

/// Writes the workspace under `root` and returns the loaded config.
pub fn init_mock_workspace(root: &Path, spec: &WorkspaceSpec) -> Result<MockWorkspace> {
    if spec.classes.is_empty() {
        return Err(Error::Config("no classes".into()));
    }
    let mut categories: Vec<String> = spec.classes.clone();
    categories.extend(DISTRACTORS.iter().map(|s| s.to_string()));
    let corpus_dir = root.join("corpus");
    let mut items = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let id = i as u64 + 1;
        let label = &categories[i % categories.len()];
        let other = DISTRACTORS[i % DISTRACTORS.len()];
        let image = Image::synthetic(spec.seed.wrapping_add(id), spec.image_size, spec.image_size);
        let captions = vec![format!("a {label} next to a {other}")];
        items.push((id, image, vec![label.clone()], captions));
    }
    write_corpus(&corpus_dir, &items, &categories)?;

    let mut cfg = example_config();
    cfg.run_seed = spec.seed;
    cfg.workers = spec.workers.max(1);
    cfg.classes = spec.classes.clone();
    cfg.corpus = PathBuf::from("corpus");
    cfg.pools_dir = PathBuf::from("pools");
    cfg.output_dir = PathBuf::from("out");
    cfg.mock.seed = spec.seed;
    cfg.mock.logit_gain = FIXTURE_LOGIT_GAIN;
    cfg.mock.logit_bias = FIXTURE_LOGIT_BIAS;
    cfg.mock.insertion_threshold = Some(FIXTURE_INSERTION_THRESHOLD);
    let d_clip = cfg.mock.d_clip;
    let clip: Arc<dyn ClipBackend> = Arc::new(MockClip::new(cfg.mock.seed, d_clip)?);
    for (name, profile) in cfg.profiles.iter_mut() {
        let mcfg = MapperConfig {
            d_clip,
            d_m: profile.d_m,
            n_tokens: profile.n_tokens,
            d_hidden: d_clip.max(32),
            d_ctx: 8,
        };
        let weights = MapperWeights::affine(mcfg, &victim_vision_map(cfg.mock.seed, profile.d_m, profile.n_tokens, &clip)?)?;
        let ckpt = MapperCheckpoint::new(weights, CheckpointStats::default())?;
        profile.mapper = PathBuf::from(format!("mappers/{name}.gmap"));
        let path = root.join(&profile.mapper);
        std::fs::create_dir_all(path.parent().expect("mapper path has a parent")).map_err(|e| Error::io(root, e))?;
        ckpt.save(&path)?;
    }

    let corpus = AnnotatedCorpus::load(&corpus_dir)?;
    // `ingest` writes into `<out>/pools`.
    ingest(&corpus, &spec.classes, PoolMode::Sorted, spec.k, clip.as_ref(), spec.seed, spec.workers, root)?;

    let config_path = root.join(CONFIG_FILE);
    let json = serde_json::to_vec_pretty(&cfg)?;
    std::fs::write(&config_path, json).map_err(|e| Error::io(&config_path, e))?;
    let config = RunConfig::load(&config_path)?;
    Ok(MockWorkspace {
        root: root.to_path_buf(),
        config_path,
        config,
    })
}
