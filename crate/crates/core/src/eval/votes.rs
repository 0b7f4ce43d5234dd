//! Human votes: an append-only JSONL ledger and its aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::success::ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "control")]
    Control,
    #[serde(rename = "ghost-A")]
    GhostA,
    #[serde(rename = "ghost-B")]
    GhostB,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Control, Group::GhostA, Group::GhostB];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Control => "control",
            Self::GhostA => "ghost-A",
            Self::GhostB => "ghost-B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Yes,
    No,
}

impl Vote {
    pub fn is_yes(self) -> bool {
        self == Vote::Yes
    }
}

impl std::str::FromStr for Vote {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Vote::Yes),
            "no" => Ok(Vote::No),
            other => Err(Error::InvalidInput(format!("vote must be yes or no, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub annotator: String,
    pub image_id: String,
    pub class: String,
    pub group: Group,
    pub vote: Vote,
    pub timestamp: String,
}

pub fn parse_vote_line(line: &str) -> Result<VoteRecord> {
    serde_json::from_str(line).map_err(|e| Error::decode("vote ledger line", e))
}

/// Reads every complete line; a torn final line is skipped.
pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_vote_line)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    Written,
    Duplicate,
}

struct LedgerState {
    file: File,
    seen: BTreeSet<(String, String)>,
}

/// Single serialized appender; each record is one fsynced line.
pub struct VoteLedger {
    path: PathBuf,
    state: Mutex<LedgerState>,
}

impl VoteLedger {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let existing = read_votes(path)?;
        if let Ok(text) = std::fs::read_to_string(path) {
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let seen = existing
            .into_iter()
            .map(|r| (r.annotator, r.image_id))
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            state: Mutex::new(LedgerState { file, seen }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn has_vote(&self, annotator: &str, image_id: &str) -> bool {
        let state = self.state.lock().expect("ledger lock");
        state.seen.contains(&(annotator.to_string(), image_id.to_string()))
    }

    pub fn append(&self, record: &VoteRecord) -> Result<Appended> {
        let mut state = self.state.lock().expect("ledger lock");
        let key = (record.annotator.clone(), record.image_id.clone());
        if state.seen.contains(&key) {
            return Ok(Appended::Duplicate);
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        state
            .file
            .write_all(&line)
            .and_then(|_| state.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))?;
        state.seen.insert(key);
        Ok(Appended::Written)
    }

    pub fn records(&self) -> Result<Vec<VoteRecord>> {
        let _guard = self.state.lock().expect("ledger lock");
        read_votes(&self.path)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct YesRate {
    pub yes: usize,
    pub total: usize,
    /// Absent when there are no votes.
    pub rate: Option<f64>,
}

impl YesRate {
    fn add(&mut self, vote: Vote) {
        self.total += 1;
        self.yes += usize::from(vote.is_yes());
        self.rate = ratio(self.yes, self.total);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStats {
    pub annotator: String,
    pub votes: usize,
    /// Yes-rate on control images, which always contain the object.
    pub control: YesRate,
    /// Below the control-accuracy floor; reported, never excluded.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteAggregate {
    pub groups: BTreeMap<Group, YesRate>,
    pub per_class: BTreeMap<String, BTreeMap<Group, YesRate>>,
    pub annotators: Vec<AnnotatorStats>,
    pub control_floor: f64,
}

pub const DEFAULT_CONTROL_FLOOR: f64 = 0.7;

pub fn aggregate_votes(records: &[VoteRecord], control_floor: f64) -> VoteAggregate {
    let mut groups: BTreeMap<Group, YesRate> = Group::ALL.iter().map(|g| (*g, YesRate::default())).collect();
    let mut per_class: BTreeMap<String, BTreeMap<Group, YesRate>> = BTreeMap::new();
    let mut by_annotator: BTreeMap<&str, (usize, YesRate)> = BTreeMap::new();
    for r in records {
        groups.entry(r.group).or_default().add(r.vote);
        per_class
            .entry(r.class.clone())
            .or_default()
            .entry(r.group)
            .or_default()
            .add(r.vote);
        let a = by_annotator.entry(&r.annotator).or_default();
        a.0 += 1;
        if r.group == Group::Control {
            a.1.add(r.vote);
        }
    }
    let annotators = by_annotator
        .into_iter()
        .map(|(name, (votes, control))| AnnotatorStats {
            annotator: name.to_string(),
            votes,
            control,
            flagged: control.rate.is_some_and(|r| r < control_floor),
        })
        .collect();
    VoteAggregate {
        groups,
        per_class,
        annotators,
        control_floor,
    }
}
