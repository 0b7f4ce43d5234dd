use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::MapperCheckpoint;
use crate::compose::words;
use crate::error::{Error, Result};
use crate::gateway::{ClipBackend, MllmBackend, VisionInput};
use crate::image::Image;

/// Rates a free-form response against reference annotations, on a 0 to 100
/// scale. An unavailable judge reports `Ok(None)`.
pub trait Judge: Send + Sync {
    fn name(&self) -> &str;
    fn rate(&self, response: &str, annotations: &[String]) -> Result<Option<f64>>;
}

/// Percentage of distinct annotation words that appear in the response.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordOverlapJudge;

impl Judge for WordOverlapJudge {
    fn name(&self) -> &str {
        "word-overlap"
    }

    fn rate(&self, response: &str, annotations: &[String]) -> Result<Option<f64>> {
        let reference: BTreeSet<String> = annotations.iter().flat_map(|a| words(a)).collect();
        if reference.is_empty() {
            return Err(Error::InvalidInput("judge needs non-empty annotations".into()));
        }
        let said: BTreeSet<String> = words(response).collect();
        let hit = reference.intersection(&said).count();
        Ok(Some(100.0 * hit as f64 / reference.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct JudgeItem {
    pub image: Image,
    pub annotations: Vec<String>,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub basic_real: f64,
    pub basic_reconstructed: f64,
    /// `100 * reconstructed / real`; absent when the real score is 0.
    pub relative: Option<f64>,
    pub items: usize,
}

impl JudgeReport {
    pub fn from_scores(basic_real: f64, basic_reconstructed: f64, items: usize) -> Self {
        Self {
            basic_real,
            basic_reconstructed,
            relative: (basic_real > 0.0).then(|| 100.0 * basic_reconstructed / basic_real),
            items,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum JudgeOutcome {
    Scored(JudgeReport),
    Skipped { reason: String },
}

/// Compares the judge's mean rating of answers on real images against
/// answers on `Pi(clip(x))` tokens.
pub fn judge_reconstruction(
    items: &[JudgeItem],
    clip: &dyn ClipBackend,
    mllm: &dyn MllmBackend,
    ckpt: &MapperCheckpoint,
    judge: &dyn Judge,
) -> Result<JudgeOutcome> {
    if items.is_empty() {
        return Err(Error::InvalidInput("judge probe set is empty".into()));
    }
    let (mut real, mut recon) = (0.0, 0.0);
    for item in items {
        let tokens = ckpt.forward(&clip.embed_image(&item.image)?)?;
        let pairs = [
            (VisionInput::Image(&item.image), &mut real),
            (VisionInput::Tokens(&tokens), &mut recon),
        ];
        for (input, acc) in pairs {
            let response = mllm.respond(input, &item.prompt)?;
            let rating = match judge.rate(&response, &item.annotations) {
                Ok(Some(r)) => r,
                Ok(None) => {
                    return Ok(JudgeOutcome::Skipped {
                        reason: format!("judge {} unavailable", judge.name()),
                    });
                }
                Err(e) if e.is_backend_failure() => {
                    return Ok(JudgeOutcome::Skipped {
                        reason: format!("judge {} failed: {e}", judge.name()),
                    });
                }
                Err(e) => return Err(e),
            };
            *acc += rating;
        }
    }
    let n = items.len() as f64;
    Ok(JudgeOutcome::Scored(JudgeReport::from_scores(real / n, recon / n, items.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_counts_distinct_words() {
        let j = WordOverlapJudge;
        let r = j
            .rate("A dog on the grass", &["a dog".into(), "green grass".into()])
            .unwrap();
        // reference {a, dog, green, grass}; hits {a, dog, grass}
        assert_eq!(r, Some(75.0));
    }

    #[test]
    fn equal_scores_relative_hundred() {
        let r = JudgeReport::from_scores(42.0, 42.0, 3);
        assert_eq!(r.relative, Some(100.0));
        assert_eq!(JudgeReport::from_scores(0.0, 1.0, 1).relative, None);
    }
}
