//! Target-object text embedding (`E_comp`) and the binary question prompts.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::ClipBackend;
use crate::seed::Rng;
use crate::tensor::{self, EmbeddingVector};

pub const MAX_GENERIC_TEMPLATES: usize = 4;
pub const MAX_MINED_CAPTIONS: usize = 5;

pub const GENERIC_TEMPLATES: [&str; 4] = [
    "A scene featuring a {class_name}",
    "An image showing a {class_name}",
    "A photograph with a {class_name}",
    "A picture containing a {class_name}",
];

pub const QUESTION_TEMPLATES: [&str; 6] = [
    "Do you see a {obj} in the image? Answer with `Yes' or `No'.",
    "Is there a {obj} here? Answer with `Yes' or `No'.",
    "Does the image contain a {obj}? Answer with `Yes' or `No'.",
    "Can you find a {obj} in this picture? Answer with `Yes' or `No'.",
    "Would you say there's a {obj} here? Answer with `Yes' or `No'.",
    "Is a {obj} present in this image? Answer with `Yes' or `No'.",
];

const CLASS_SLOT: &str = "{class_name}";
const OBJ_SLOT: &str = "{obj}";

pub fn direct_description(object: &str) -> String {
    format!("A photo of a {object}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionWeights {
    pub direct: f64,
    pub generic: f64,
    pub captions: f64,
}

impl Default for CompositionWeights {
    fn default() -> Self {
        Self {
            direct: 0.3,
            generic: 0.4,
            captions: 0.3,
        }
    }
}

impl CompositionWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.direct, self.generic, self.captions];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("composition weights must be non-negative: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("composition weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// The texts that make up `E_comp` for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub object: String,
    pub direct_description: String,
    /// Rendered generic-template phrases.
    pub generic: Vec<String>,
    pub captions: Vec<String>,
    #[serde(default)]
    pub weights: CompositionWeights,
}

impl TargetSpec {
    /// Direct description plus the first four generic templates and the
    /// given captions (truncated to five).
    pub fn new(object: &str, captions: Vec<String>) -> Self {
        Self::with_templates(object, &GENERIC_TEMPLATES, captions)
    }

    pub fn with_templates<S: AsRef<str>>(object: &str, templates: &[S], mut captions: Vec<String>) -> Self {
        captions.truncate(MAX_MINED_CAPTIONS);
        Self {
            object: object.to_string(),
            direct_description: direct_description(object),
            generic: templates
                .iter()
                .take(MAX_GENERIC_TEMPLATES)
                .map(|t| t.as_ref().replace(CLASS_SLOT, object))
                .collect(),
            captions,
            weights: CompositionWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.object.trim().is_empty() {
            return Err(Error::Config("target object name is empty".into()));
        }
        if self.generic.len() > MAX_GENERIC_TEMPLATES {
            return Err(Error::Config(format!(
                "{} generic phrases, at most {MAX_GENERIC_TEMPLATES} allowed",
                self.generic.len()
            )));
        }
        if self.captions.len() > MAX_MINED_CAPTIONS {
            return Err(Error::Config(format!(
                "{} captions, at most {MAX_MINED_CAPTIONS} allowed",
                self.captions.len()
            )));
        }
        Ok(())
    }

    /// `(weight, texts)` per source after redistributing the weight of
    /// empty sources proportionally onto the others.
    pub fn effective_sources(&self) -> Result<Vec<(f64, Vec<&str>)>> {
        let direct: Vec<&str> = if self.direct_description.trim().is_empty() {
            Vec::new()
        } else {
            vec![self.direct_description.as_str()]
        };
        let sources = [
            (self.weights.direct, direct),
            (self.weights.generic, self.generic.iter().map(String::as_str).collect()),
            (self.weights.captions, self.captions.iter().map(String::as_str).collect()),
        ];
        let present: f64 = sources
            .iter()
            .filter(|(_, texts)| !texts.is_empty())
            .map(|(w, _)| w)
            .sum();
        if present <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "no text sources with positive weight for {:?}",
                self.object
            )));
        }
        Ok(sources
            .into_iter()
            .filter(|(_, texts)| !texts.is_empty())
            .map(|(w, texts)| (w / present, texts))
            .collect())
    }
}

/// `E_comp = w_D E_D + sum_j (w_GT/N_GT) E_GT,j + sum_k (w_CC/N_CC) E_CC,k`.
pub fn compositional_embedding(spec: &TargetSpec, clip: &dyn ClipBackend) -> Result<EmbeddingVector> {
    spec.validate()?;
    let mut acc = vec![0.0; clip.dims()];
    for (weight, texts) in spec.effective_sources()? {
        let each = weight / texts.len() as f64;
        for text in texts {
            let e = clip.embed_text(text)?;
            tensor::check_dim("clip text embedding", acc.len(), e.dim())?;
            acc.iter_mut().zip(e.as_slice()).for_each(|(a, v)| *a += each * v);
        }
    }
    Ok(EmbeddingVector::new(acc))
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
}

/// True if `text` contains `object` (or its plural `{object}s`) as whole
/// words, case-insensitively.
pub fn mentions_object(text: &str, object: &str) -> bool {
    let needle: Vec<String> = words(object).collect();
    let Some((last, head)) = needle.split_last() else {
        return false;
    };
    let plural = format!("{last}s");
    let hay: Vec<String> = words(text).collect();
    hay.windows(needle.len()).any(|w| {
        let (w_last, w_head) = w.split_last().expect("non-empty window");
        w_head == head && (w_last == last || *w_last == plural)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub image_id: u64,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedCaption {
    pub image_id: u64,
    pub caption: String,
    pub similarity: f64,
}

/// Up to `k` captions mentioning `object`, by descending similarity to the
/// direct description, ties by ascending image id.
pub fn mine_captions(
    corpus: &[CaptionEntry],
    object: &str,
    k: usize,
    clip: &dyn ClipBackend,
) -> Result<Vec<MinedCaption>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let anchor = clip.embed_text(&direct_description(object))?;
    let mut mined = Vec::new();
    for entry in corpus.iter().filter(|e| mentions_object(&e.caption, object)) {
        let e = clip.embed_text(&entry.caption)?;
        mined.push(MinedCaption {
            image_id: entry.image_id,
            caption: entry.caption.clone(),
            similarity: e.cosine(&anchor)?,
        });
    }
    mined.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
            .then_with(|| a.caption.cmp(&b.caption))
    });
    mined.truncate(k);
    Ok(mined)
}

/// Binary question templates with an `{obj}` slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptSet {
    templates: Vec<String>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        for t in &templates {
            if t.matches(OBJ_SLOT).count() != 1 {
                return Err(Error::Config(format!("template needs exactly one {OBJ_SLOT}: {t:?}")));
            }
            let lower = t.to_lowercase();
            if !(lower.contains("yes") && lower.contains("no")) {
                return Err(Error::Config(format!("template does not ask for Yes/No: {t:?}")));
            }
        }
        Ok(Self { templates })
    }

    pub fn builtin() -> Self {
        Self::new(QUESTION_TEMPLATES.iter().map(|s| s.to_string()).collect())
            .expect("built-in templates are valid")
    }

    /// One template per non-blank line.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn render(&self, index: usize, object: &str) -> String {
        self.templates[index].replace(OBJ_SLOT, object)
    }

    /// Uniform draw over templates, rendered with `object`.
    pub fn sample(&self, object: &str, rng: &mut Rng) -> String {
        self.render(self.sample_index(rng), object)
    }

    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.templates.len())
    }
}

impl TryFrom<Vec<String>> for PromptSet {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PromptSet> for Vec<String> {
    fn from(value: PromptSet) -> Self {
        value.templates
    }
}

/// Generic templates from a file, one per line; only the first four are used.
pub fn load_generic_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let templates: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if let Some(bad) = templates.iter().find(|t| !t.contains(CLASS_SLOT)) {
        return Err(Error::Config(format!("generic template lacks {CLASS_SLOT}: {bad:?}")));
    }
    Ok(templates)
}

/// Draws a rendered prompt and returns it with the advanced generator.
pub fn sample_prompt(prompts: &PromptSet, object: &str, mut rng: Rng) -> (String, Rng) {
    let p = prompts.sample(object, &mut rng);
    (p, rng)
}
