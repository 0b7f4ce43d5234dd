//! Transferability: how often other models answer "Yes" on one victim's
//! success images. The detector is not re-run; source images were already
//! cleared at generation time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compose::PromptSet;
use crate::error::Result;
use crate::eval::success::ratio;
use crate::gateway::MllmBackend;
use crate::run::manifest::RunManifest;
use crate::run::store::ImageStore;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferItem {
    pub id: String,
    pub object: String,
    pub image_hash: String,
}

/// Success images of one source victim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSource {
    pub name: String,
    /// Run output directory holding the images.
    pub store_dir: PathBuf,
    pub items: Vec<TransferItem>,
}

pub fn success_items(manifest: &RunManifest) -> Vec<TransferItem> {
    manifest
        .records
        .iter()
        .filter_map(|r| {
            r.success_image.as_ref().map(|h| TransferItem {
                id: r.sample_id.clone(),
                object: r.class.clone(),
                image_hash: h.clone(),
            })
        })
        .collect()
}

impl TransferSource {
    pub fn from_manifest(manifest: &RunManifest, store_dir: &Path) -> Self {
        Self {
            name: manifest.header.victim.clone(),
            store_dir: store_dir.to_path_buf(),
            items: success_items(manifest),
        }
    }

    pub fn store(&self) -> Result<ImageStore> {
        ImageStore::open(&self.store_dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedVerdict {
    pub target: String,
    pub source: String,
    pub item: String,
    pub prompt: String,
    /// `None` when this one call failed.
    pub yes: Option<bool>,
}

/// Target answers keyed by `(target, source, item)`, plus targets that
/// could not be reached. Serializable so a matrix can be recomputed
/// without re-polling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictCache {
    pub verdicts: Vec<CachedVerdict>,
    #[serde(default)]
    pub unreachable: BTreeMap<String, String>,
}

impl VerdictCache {
    fn index(&self) -> BTreeMap<(&str, &str, &str), Option<bool>> {
        self.verdicts
            .iter()
            .map(|v| ((v.target.as_str(), v.source.as_str(), v.item.as_str()), v.yes))
            .collect()
    }
}

pub struct TransferTarget<'a> {
    pub name: String,
    pub mllm: &'a dyn MllmBackend,
}

/// Asks every target about every off-diagonal source item. An outage on a
/// target marks it unreachable and skips its remaining items.
pub fn poll_verdicts(
    sources: &[TransferSource],
    targets: &[TransferTarget<'_>],
    prompts: &PromptSet,
    seed: u64,
) -> Result<VerdictCache> {
    let mut cache = VerdictCache::default();
    'targets: for t in targets {
        for s in sources.iter().filter(|s| s.name != t.name) {
            let store = s.store()?;
            for item in &s.items {
                let key = format!("{}/{}/{}", t.name, s.name, item.id);
                let prompt = prompts.sample(&item.object, &mut seed::rng_for(seed, &key, "transfer-prompt"));
                let image = store.get(&item.image_hash)?;
                let yes = match t.mllm.verdict(&image, &prompt) {
                    Ok(v) => Some(v),
                    Err(e) if e.is_backend_outage() => {
                        log::warn!("transfer target {} unreachable: {e}", t.name);
                        cache.unreachable.insert(t.name.clone(), e.to_string());
                        cache.verdicts.retain(|v| v.target != t.name);
                        continue 'targets;
                    }
                    Err(e) if e.is_backend_failure() => None,
                    Err(e) => return Err(e),
                };
                cache.verdicts.push(CachedVerdict {
                    target: t.name.clone(),
                    source: s.name.clone(),
                    item: item.id.clone(),
                    prompt,
                    yes,
                });
            }
        }
    }
    Ok(cache)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub yes: usize,
    /// Items with an answer; failed calls are excluded.
    pub answered: usize,
    pub failed: usize,
    /// Absent when the target was unreachable or nothing was answered.
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// Row-major over `sources x targets`, diagonal omitted.
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(&self, source: &str, target: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.source == source && c.target == target)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["source".to_string()];
        head.extend(self.targets.iter().cloned());
        w.write_record(&head).map_err(super::success::csv_err)?;
        for s in &self.sources {
            let mut row = vec![s.clone()];
            for t in &self.targets {
                row.push(match self.cell(s, t) {
                    Some(TransferCell { rate: Some(r), .. }) => format!("{:.1}", 100.0 * r),
                    Some(_) => "absent".into(),
                    None => "-".into(),
                });
            }
            w.write_record(&row).map_err(super::success::csv_err)?;
        }
        w.flush().map_err(|e| crate::Error::io("transfer csv", e))
    }
}

/// Pure function of the item sets and the cached answers.
pub fn matrix_from_verdicts(sources: &[TransferSource], targets: &[String], cache: &VerdictCache) -> TransferMatrix {
    let index = cache.index();
    let mut cells = Vec::new();
    for s in sources {
        for t in targets.iter().filter(|t| **t != s.name) {
            let mut cell = TransferCell {
                source: s.name.clone(),
                target: t.clone(),
                yes: 0,
                answered: 0,
                failed: 0,
                rate: None,
                absent_reason: None,
            };
            if let Some(reason) = cache.unreachable.get(t) {
                cell.absent_reason = Some(format!("target unreachable: {reason}"));
                cells.push(cell);
                continue;
            }
            for item in &s.items {
                match index.get(&(t.as_str(), s.name.as_str(), item.id.as_str())) {
                    Some(Some(yes)) => {
                        cell.answered += 1;
                        cell.yes += usize::from(*yes);
                    }
                    Some(None) => cell.failed += 1,
                    None => cell.failed += 1,
                }
            }
            cell.rate = ratio(cell.yes, cell.answered);
            if cell.rate.is_none() {
                cell.absent_reason = Some(if s.items.is_empty() {
                    "source has no success images".into()
                } else {
                    "no answered items".into()
                });
            }
            cells.push(cell);
        }
    }
    TransferMatrix {
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        targets: targets.to_vec(),
        cells,
    }
}

pub fn transfer_matrix(
    sources: &[TransferSource],
    targets: &[TransferTarget<'_>],
    prompts: &PromptSet,
    seed: u64,
) -> Result<(TransferMatrix, VerdictCache)> {
    let cache = poll_verdicts(sources, targets, prompts, seed)?;
    let names: Vec<String> = targets.iter().map(|t| t.name.clone()).collect();
    Ok((matrix_from_verdicts(sources, &names, &cache), cache))
}
