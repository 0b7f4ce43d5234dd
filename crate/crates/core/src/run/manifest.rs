//! Append-only JSONL run manifest: a header line, one line per sample and
//! summary lines. A run that stops early ends with an incomplete summary;
//! resuming appends more samples and a fresh summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::OptimizationTrace;
use crate::diffusion::{AttemptFailure, GenerationParams};
use crate::error::{Error, Result};
use crate::verdict::{CandidateVerdict, SampleOutcome};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub config_hash: String,
    pub created: String,
    pub tool_version: String,
    pub victim: String,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub attempt: usize,
    pub seed: u64,
    pub image_hash: String,
    pub params: GenerationParams,
    /// Absent when the verdict backends failed on this candidate.
    pub verdict: Option<CandidateVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub class: String,
    pub image_id: u64,
    pub source_hash: String,
    pub outcome: SampleOutcome,
    pub images_generated: usize,
    pub images_filtered: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescreen_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<OptimizationTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generation_failures: Vec<AttemptFailure>,
    /// Hash of the first hallucination-success image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("record {}: {m}", self.sample_id)));
        if self.sample_id.is_empty() || self.class.is_empty() {
            return bad("empty sample id or class".into());
        }
        if self.images_generated != self.candidates.iter().filter(|c| c.verdict.is_some()).count() {
            return bad("images_generated disagrees with candidates".into());
        }
        if self.images_filtered > self.images_generated {
            return bad("more filtered than generated images".into());
        }
        if (self.outcome == SampleOutcome::Success) != self.success_image.is_some() {
            return bad("success image present iff outcome is success".into());
        }
        if let Some(h) = &self.success_image {
            if !self.candidates.iter().any(|c| &c.image_hash == h) {
                return bad("success image is not among the candidates".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub success: usize,
    pub discarded_threshold: usize,
    pub discarded_detector_all: usize,
    pub no_flip: usize,
    pub prescreen_rejected: usize,
    pub prescreen_error: usize,
    pub numerical_failure: usize,
    pub images_generated: usize,
    pub images_filtered: usize,
}

impl ClassCounts {
    pub fn add(&mut self, r: &SampleRecord) {
        match r.outcome {
            SampleOutcome::Success => self.success += 1,
            SampleOutcome::DiscardedThreshold => self.discarded_threshold += 1,
            SampleOutcome::DiscardedDetectorAll => self.discarded_detector_all += 1,
            SampleOutcome::NoFlip => self.no_flip += 1,
            SampleOutcome::PrescreenRejected => self.prescreen_rejected += 1,
            SampleOutcome::PrescreenError => self.prescreen_error += 1,
            SampleOutcome::NumericalFailure => self.numerical_failure += 1,
        }
        self.images_generated += r.images_generated;
        self.images_filtered += r.images_filtered;
    }

    /// Samples that entered optimization.
    pub fn considered(&self) -> usize {
        self.success
            + self.discarded_threshold
            + self.discarded_detector_all
            + self.no_flip
            + self.numerical_failure
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub samples: usize,
    pub classes: BTreeMap<String, ClassCounts>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopped: Option<String>,
    pub written: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Sample(Box<SampleRecord>),
    Summary(ManifestSummary),
}

pub fn parse_line(line: &str) -> Result<ManifestLine> {
    serde_json::from_str(line).map_err(|e| Error::decode("manifest line", e))
}

pub fn tally(records: &[SampleRecord]) -> BTreeMap<String, ClassCounts> {
    let mut out: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for r in records {
        out.entry(r.class.clone()).or_default().add(r);
    }
    out
}

/// A parsed manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub summary: Option<ManifestSummary>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = None;
        let mut records = Vec::new();
        let mut summary = None;
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_line(line)? {
                ManifestLine::Header(h) if n == 0 => header = Some(h),
                ManifestLine::Header(_) => {
                    return Err(Error::decode("manifest", format!("header on line {}", n + 1)));
                }
                _ if header.is_none() => {
                    return Err(Error::decode("manifest", "first line is not a header"));
                }
                ManifestLine::Sample(r) => {
                    r.validate()?;
                    if !seen.insert(r.sample_id.clone()) {
                        return Err(Error::Contract(format!("duplicate sample {}", r.sample_id)));
                    }
                    records.push(*r);
                }
                ManifestLine::Summary(s) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| Error::decode("manifest", "empty manifest"))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::decode("manifest", format!("unsupported version {}", header.version)));
        }
        Ok(Self {
            header,
            records,
            summary,
        })
    }

    /// Parses and tolerates a torn final line from a crash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trimmed = if text.ends_with('\n') || text.is_empty() {
            &text[..]
        } else {
            match text.rfind('\n') {
                Some(i) if parse_line(&text[i + 1..]).is_err() => {
                    log::warn!("dropping torn last line of {}", path.display());
                    &text[..=i]
                }
                _ => &text[..],
            }
        };
        Self::parse(trimmed)
    }

    /// Checks that the last summary (if any) matches the sample lines.
    pub fn verify_summary(&self) -> Result<()> {
        if let Some(s) = &self.summary {
            if s.samples != self.records.len() || s.classes != tally(&self.records) {
                return Err(Error::Contract("manifest summary disagrees with its sample lines".into()));
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.summary.as_ref().is_some_and(|s| s.complete)
    }

    pub fn sample_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.sample_id.clone()).collect()
    }
}

/// Appends lines with an fsync after each.
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
}

impl ManifestWriter {
    pub fn create(path: &Path, header: &ManifestHeader) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            file,
        };
        w.append(&ManifestLine::Header(header.clone()))?;
        Ok(w)
    }

    /// Opens an existing manifest for appending, cutting a torn last line.
    pub fn append_to(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
            f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, line: &ManifestLine) -> Result<()> {
        let mut bytes = serde_json::to_vec(line)?;
        bytes.push(b'\n');
        self.file
            .write_all(&bytes)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads sample lines only, streaming; for large manifests.
pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Ok(ManifestLine::Sample(r)) = parse_line(&line) {
            out.push(*r);
        }
    }
    Ok(out)
}
