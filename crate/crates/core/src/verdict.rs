//! Candidate verdicts (detector plus victim answer) and per-sample terminal
//! outcomes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::TraceStatus;
use crate::compose::PromptSet;
use crate::error::{Error, Result};
use crate::gateway::{DetectorBackend, MllmBackend};
use crate::image::Image;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateOutcome {
    HallucinationSuccess,
    DiscardedDetector,
    NoHallucination,
}

impl CandidateOutcome {
    /// A detector hit discards the candidate whatever the victim says.
    pub fn from_flags(detector_hit: bool, mllm_yes: bool) -> Self {
        match (detector_hit, mllm_yes) {
            (true, _) => Self::DiscardedDetector,
            (false, true) => Self::HallucinationSuccess,
            (false, false) => Self::NoHallucination,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HallucinationSuccess => "hallucination-success",
            Self::DiscardedDetector => "discarded-detector",
            Self::NoHallucination => "no-hallucination",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateVerdict {
    pub detector_hit: bool,
    pub max_score: Option<f64>,
    pub mllm_yes: bool,
    pub prompt: String,
    pub answer: String,
    pub outcome: CandidateOutcome,
}

/// Runs the detector, then asks the victim with a sampled prompt.
pub fn candidate_verdict(
    image: &Image,
    object: &str,
    detector: &dyn DetectorBackend,
    threshold: f64,
    mllm: &dyn MllmBackend,
    prompts: &PromptSet,
    rng: &mut Rng,
) -> Result<CandidateVerdict> {
    let detections = detector.detect(image, object, threshold)?;
    let max_score = detections.iter().map(|d| d.score).reduce(f64::max);
    let detector_hit = max_score.is_some_and(|s| s >= threshold);
    let prompt = prompts.sample(object, rng);
    let answer = mllm.respond(crate::gateway::VisionInput::Image(image), &prompt)?;
    let mllm_yes = crate::gateway::parse_yes_no(&answer).ok_or_else(|| {
        Error::backend(mllm.id(), format!("answer is neither yes nor no: {answer:?}"))
    })?;
    Ok(CandidateVerdict {
        detector_hit,
        max_score,
        mllm_yes,
        prompt,
        answer,
        outcome: CandidateOutcome::from_flags(detector_hit, mllm_yes),
    })
}

/// True when the victim answers "No" on the untouched image.
pub fn prescreen(
    image: &Image,
    object: &str,
    mllm: &dyn MllmBackend,
    prompts: &PromptSet,
    rng: &mut Rng,
) -> Result<bool> {
    let prompt = prompts.sample(object, rng);
    Ok(!mllm.verdict(image, &prompt)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleOutcome {
    Success,
    DiscardedThreshold,
    DiscardedDetectorAll,
    NoFlip,
    PrescreenRejected,
    /// The prescreen call failed; excluded from all rates.
    PrescreenError,
    NumericalFailure,
}

impl SampleOutcome {
    pub const ALL: [SampleOutcome; 7] = [
        Self::Success,
        Self::DiscardedThreshold,
        Self::DiscardedDetectorAll,
        Self::NoFlip,
        Self::PrescreenRejected,
        Self::PrescreenError,
        Self::NumericalFailure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::DiscardedThreshold => "discarded-threshold",
            Self::DiscardedDetectorAll => "discarded-detector-all",
            Self::NoFlip => "no-flip",
            Self::PrescreenRejected => "prescreen-rejected",
            Self::PrescreenError => "prescreen-error",
            Self::NumericalFailure => "numerical-failure",
        }
    }

    /// Whether the sample entered optimization (counts as considered).
    pub fn is_considered(self) -> bool {
        !matches!(self, Self::PrescreenRejected | Self::PrescreenError)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classified {
    pub outcome: SampleOutcome,
    pub images_generated: usize,
    pub images_filtered: usize,
}

/// Terminal class of a sample that passed prescreening.
pub fn classify_sample(status: &TraceStatus, verdicts: &[CandidateOutcome]) -> Result<Classified> {
    let images_generated = verdicts.len();
    let images_filtered = verdicts
        .iter()
        .filter(|v| **v == CandidateOutcome::DiscardedDetector)
        .count();
    let outcome = match status {
        TraceStatus::BudgetExhausted | TraceStatus::NumericalFailure { .. } if !verdicts.is_empty() => {
            return Err(Error::Contract(format!(
                "{} verdicts for a trace that never met the threshold",
                verdicts.len()
            )));
        }
        TraceStatus::BudgetExhausted => SampleOutcome::DiscardedThreshold,
        TraceStatus::NumericalFailure { .. } => SampleOutcome::NumericalFailure,
        TraceStatus::ThresholdMet { .. } if verdicts.is_empty() => {
            return Err(Error::Contract(
                "threshold met but no candidate verdicts supplied".into(),
            ));
        }
        TraceStatus::ThresholdMet { .. } => {
            if verdicts.contains(&CandidateOutcome::HallucinationSuccess) {
                SampleOutcome::Success
            } else if images_filtered == images_generated {
                SampleOutcome::DiscardedDetectorAll
            } else {
                SampleOutcome::NoFlip
            }
        }
    };
    Ok(Classified {
        outcome,
        images_generated,
        images_filtered,
    })
}

/// One audit row per generated candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub sample_id: String,
    pub class: String,
    pub attempt: usize,
    pub seed: u64,
    pub image_hash: String,
    pub detector_hit: bool,
    pub max_score: Option<f64>,
    pub mllm_yes: bool,
    pub prompt: String,
    pub outcome: CandidateOutcome,
}

pub fn write_verdicts_csv<W: Write>(rows: &[VerdictRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::InvalidInput(format!("verdict csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("verdicts.csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_table() {
        use CandidateOutcome::*;
        assert_eq!(CandidateOutcome::from_flags(true, true), DiscardedDetector);
        assert_eq!(CandidateOutcome::from_flags(true, false), DiscardedDetector);
        assert_eq!(CandidateOutcome::from_flags(false, true), HallucinationSuccess);
        assert_eq!(CandidateOutcome::from_flags(false, false), NoHallucination);
    }

    #[test]
    fn classifier_branches() {
        use CandidateOutcome::*;
        let met = TraceStatus::ThresholdMet { step: 3 };
        let c = classify_sample(&TraceStatus::BudgetExhausted, &[]).unwrap();
        assert_eq!(c.outcome, SampleOutcome::DiscardedThreshold);
        let c = classify_sample(&met, &[NoHallucination, HallucinationSuccess]).unwrap();
        assert_eq!((c.outcome, c.images_generated), (SampleOutcome::Success, 2));
        let c = classify_sample(&met, &[DiscardedDetector; 4]).unwrap();
        assert_eq!((c.outcome, c.images_filtered), (SampleOutcome::DiscardedDetectorAll, 4));
        let c = classify_sample(&met, &[DiscardedDetector, NoHallucination]).unwrap();
        assert_eq!(c.outcome, SampleOutcome::NoFlip);
        assert!(classify_sample(&TraceStatus::BudgetExhausted, &[NoHallucination]).is_err());
        assert!(classify_sample(&met, &[]).is_err());
    }
}
