//! Run configuration: one JSON document with a `profiles` map of victims.
//! `GHOSTBENCH_BACKEND_<ROLE>` overrides the active profile's endpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::compose::CompositionWeights;
use crate::error::{Error, Result};
use crate::gateway::mock::{MockClip, MockDetector, MockDiffusion, MockMllm, MockVerdictRule};
use crate::gateway::remote::{RemoteClient, RemoteClip, RemoteDetector, RemoteDiffusion, RemoteMllm};
use crate::gateway::{Backends, ClipBackend, ProbeMode};
use crate::seed::sha256_hex;

pub const ENV_PREFIX: &str = "GHOSTBENCH_BACKEND_";
pub const ROLES: [&str; 4] = ["clip", "mllm", "diffusion", "detector"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoints {
    pub clip: String,
    pub mllm: String,
    pub diffusion: String,
    pub detector: String,
}

impl BackendEndpoints {
    pub fn mock() -> Self {
        Self {
            clip: "mock".into(),
            mllm: "mock".into(),
            diffusion: "mock".into(),
            detector: "mock".into(),
        }
    }

    fn slot(&mut self, role: &str) -> &mut String {
        match role {
            "clip" => &mut self.clip,
            "mllm" => &mut self.mllm,
            "diffusion" => &mut self.diffusion,
            _ => &mut self.detector,
        }
    }

    /// Applies overrides from `lookup(GHOSTBENCH_BACKEND_<ROLE>)`.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for role in ROLES {
            if let Some(v) = lookup(&format!("{ENV_PREFIX}{}", role.to_ascii_uppercase())) {
                *self.slot(role) = v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimProfile {
    pub backends: BackendEndpoints,
    pub mapper: PathBuf,
    pub n_tokens: usize,
    pub d_m: usize,
    #[serde(default)]
    pub yes_variants: Vec<String>,
    pub attack: AttackConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockVision {
    /// Vision tokens are a fixed linear map of the mock CLIP embedding.
    Linear,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockRule {
    Probability,
    TagInPrompt,
    AlwaysYes,
    AlwaysNo,
}

/// Settings for `mock` endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockSettings {
    pub seed: u64,
    pub d_clip: usize,
    pub vision: MockVision,
    pub rule: MockRule,
    pub diffusion_steps: usize,
    /// Cosine above which the mock decoder inserts a class into the image.
    pub insertion_threshold: Option<f64>,
    pub logit_gain: f64,
    pub logit_bias: f64,
}

impl Default for MockSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            d_clip: 16,
            vision: MockVision::Linear,
            rule: MockRule::Probability,
            diffusion_steps: 1000,
            insertion_threshold: Some(0.5),
            logit_gain: 1.0,
            logit_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub output_dir: PathBuf,
    pub victim: String,
    pub profiles: BTreeMap<String, VictimProfile>,
    pub classes: Vec<String>,
    pub corpus: PathBuf,
    pub pools_dir: PathBuf,
    #[serde(default)]
    pub trace_full: bool,
    #[serde(default)]
    pub prompts_file: Option<PathBuf>,
    #[serde(default)]
    pub generic_templates_file: Option<PathBuf>,
    #[serde(default)]
    pub composition: CompositionWeights,
    #[serde(default)]
    pub mock: MockSettings,
}

fn default_workers() -> usize {
    4
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Reads the file, resolves relative paths against its directory and
    /// applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus);
        fix(&mut self.pools_dir);
        if let Some(p) = self.prompts_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.generic_templates_file.as_mut() {
            fix(p);
        }
        for profile in self.profiles.values_mut() {
            fix(&mut profile.mapper);
        }
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let victim = self.victim.clone();
        if let Some(p) = self.profiles.get_mut(&victim) {
            p.backends.apply_overrides(lookup);
        }
    }

    pub fn profile(&self) -> Result<&VictimProfile> {
        self.profiles
            .get(&self.victim)
            .ok_or_else(|| Error::Config(format!("no profile named {:?}", self.victim)))
    }

    pub fn profile_mut(&mut self) -> Result<&mut VictimProfile> {
        let victim = self.victim.clone();
        self.profiles
            .get_mut(&victim)
            .ok_or_else(|| Error::Config(format!("no profile named {victim:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.profile()?;
        p.attack.validate()?;
        self.composition.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("no target classes".into()));
        }
        if p.n_tokens == 0 || p.d_m == 0 {
            return Err(Error::Config("profile token dims must be positive".into()));
        }
        for role in ROLES {
            let spec = match role {
                "clip" => &p.backends.clip,
                "mllm" => &p.backends.mllm,
                "diffusion" => &p.backends.diffusion,
                _ => &p.backends.detector,
            };
            BackendSpec::parse(spec)?;
        }
        Ok(())
    }

    /// Checks referenced files exist.
    pub fn check_artifacts(&self) -> Result<()> {
        let p = self.profile()?;
        let mut required = vec![&p.mapper, &self.corpus, &self.pools_dir];
        required.extend(self.prompts_file.iter());
        required.extend(self.generic_templates_file.iter());
        for path in required {
            if !path.exists() {
                return Err(Error::Config(format!("missing artifact {}", path.display())));
            }
        }
        Ok(())
    }

    /// Hash of everything that affects sample records. Worker count and the
    /// output location are excluded so a run can be resumed with different
    /// parallelism or after moving its directory.
    pub fn config_hash(&self) -> Result<String> {
        let mut canon = self.clone();
        canon.workers = 0;
        canon.output_dir = PathBuf::new();
        let value = serde_json::to_value(&canon)?;
        Ok(sha256_hex(&serde_json::to_vec(&value)?))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("manifest.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Mock,
    Remote(String),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mock" {
            return Ok(Self::Mock);
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Self::Remote(addr.to_string()))
            }
            _ => Err(Error::Config(format!(
                "backend endpoint must be `mock` or `tcp://host:port`, got {s:?}"
            ))),
        }
    }
}

/// Connects (or constructs) the four backends of the active profile.
pub fn build_backends(cfg: &RunConfig) -> Result<Backends> {
    let p = cfg.profile()?;
    let m = &cfg.mock;
    let clip: Arc<dyn ClipBackend> = match BackendSpec::parse(&p.backends.clip)? {
        BackendSpec::Mock => Arc::new(MockClip::new(m.seed, m.d_clip)?),
        BackendSpec::Remote(addr) => Arc::new(RemoteClip::connect(RemoteClient::new(addr))?),
    };
    let mllm: Arc<dyn crate::gateway::MllmBackend> = match BackendSpec::parse(&p.backends.mllm)? {
        BackendSpec::Mock => {
            let mut mllm = MockMllm::new(m.seed, p.d_m, p.n_tokens)?
                .with_logit(m.logit_gain, m.logit_bias)
                .with_rule(match m.rule {
                MockRule::Probability => MockVerdictRule::Probability,
                MockRule::TagInPrompt => MockVerdictRule::TagInPrompt,
                MockRule::AlwaysYes => MockVerdictRule::Always(true),
                MockRule::AlwaysNo => MockVerdictRule::Always(false),
            });
            if m.vision == MockVision::Linear {
                mllm = mllm.with_linear_vision(clip.clone());
            }
            if p.attack.probe_mode == ProbeMode::AfterThinkToken {
                mllm = mllm.with_answer_format(ProbeMode::AfterThinkToken);
            }
            Arc::new(mllm)
        }
        BackendSpec::Remote(addr) => {
            Arc::new(RemoteMllm::connect(RemoteClient::new(addr), p.yes_variants.clone())?)
        }
    };
    let diffusion: Arc<dyn crate::gateway::DiffusionBackend> = match BackendSpec::parse(&p.backends.diffusion)? {
        BackendSpec::Mock => {
            let d = MockDiffusion::with_total_steps(m.seed, m.diffusion_steps);
            Arc::new(match m.insertion_threshold {
                Some(t) => d.with_insertion(clip.clone(), cfg.classes.clone(), t),
                None => d,
            })
        }
        BackendSpec::Remote(addr) => Arc::new(RemoteDiffusion::connect(RemoteClient::new(addr))?),
    };
    let detector: Arc<dyn crate::gateway::DetectorBackend> = match BackendSpec::parse(&p.backends.detector)? {
        BackendSpec::Mock => Arc::new(MockDetector::new(cfg.classes.clone())),
        BackendSpec::Remote(addr) => Arc::new(RemoteDetector::connect(RemoteClient::new(addr))?),
    };
    Ok(Backends {
        clip,
        mllm,
        diffusion,
        detector,
    }
    .gated())
}

/// A ready-to-edit example config using mock backends.
pub fn example_config() -> RunConfig {
    let mut profiles = BTreeMap::new();
    for (name, attack) in [
        ("qwen", AttackConfig::qwen()),
        ("llava", AttackConfig::llava()),
        ("glm", AttackConfig::glm()),
    ] {
        profiles.insert(
            name.to_string(),
            VictimProfile {
                backends: BackendEndpoints::mock(),
                mapper: PathBuf::from(format!("mappers/{name}.gmap")),
                n_tokens: 2,
                d_m: 8,
                yes_variants: vec!["Yes".into(), "yes".into()],
                attack,
            },
        );
    }
    RunConfig {
        run_seed: 0,
        workers: 4,
        output_dir: PathBuf::from("out"),
        victim: "qwen".into(),
        profiles,
        classes: vec!["boat".into(), "vase".into()],
        corpus: PathBuf::from("corpus"),
        pools_dir: PathBuf::from("out/pools"),
        trace_full: false,
        prompts_file: None,
        generic_templates_file: None,
        composition: CompositionWeights::default(),
        mock: MockSettings::default(),
    }
}
