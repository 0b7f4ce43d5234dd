use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::MapperCheckpoint;
use crate::compose::PromptSet;
use crate::error::{Error, Result};
use crate::gateway::{ClipBackend, MllmBackend, VisionInput, parse_yes_no};
use crate::image::Image;
use crate::seed;

/// A labeled probe image: is `object` present?
#[derive(Debug, Clone)]
pub struct ProbeItem {
    pub id: String,
    pub image: Image,
    pub object: String,
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub candidate: usize,
    pub d_hidden: usize,
    pub d_ctx: usize,
    pub params: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: usize,
    pub table: Vec<AccuracyRow>,
}

impl Selection {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.table {
            w.serialize(row)
                .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("accuracy table", e))?;
        Ok(())
    }
}

/// Index of the highest accuracy; ties go to the smaller parameter count,
/// then to the earlier candidate.
pub fn pick_best(rows: &[AccuracyRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            b.accuracy
                .partial_cmp(&a.accuracy)
                .unwrap_or(Ordering::Equal)
                .then(a.params.cmp(&b.params))
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
}

fn check_probe(probe: &[ProbeItem]) -> Result<()> {
    if probe.is_empty() {
        return Err(Error::InvalidInput("mapper probe set is empty".into()));
    }
    let mut seen: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for item in probe {
        let e = seen.entry(item.object.as_str()).or_default();
        if item.present {
            e.0 = true;
        } else {
            e.1 = true;
        }
    }
    if let Some((class, _)) = seen.iter().find(|(_, (pos, neg))| !(*pos && *neg)) {
        return Err(Error::InvalidInput(format!(
            "probe class {class:?} needs both positive and negative images"
        )));
    }
    Ok(())
}

/// Scores each candidate by how often the victim's answer through
/// `Pi(clip(x))` matches the label. Every candidate sees the same prompt
/// per probe item.
pub fn select_mapper(
    candidates: &[MapperCheckpoint],
    probe: &[ProbeItem],
    clip: &dyn ClipBackend,
    mllm: &dyn MllmBackend,
    prompts: &PromptSet,
    seed: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no mapper candidates".into()));
    }
    check_probe(probe)?;
    let prepared = probe
        .iter()
        .map(|item| {
            let mut rng = seed::rng_for(seed, &item.id, "probe-prompt");
            Ok((clip.embed_image(&item.image)?, prompts.sample(&item.object, &mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(candidates.len());
    for (idx, ckpt) in candidates.iter().enumerate() {
        let mut correct = 0;
        for (item, (cls, prompt)) in probe.iter().zip(&prepared) {
            let tokens = ckpt.forward(cls)?;
            let answer = mllm.respond(VisionInput::Tokens(&tokens), prompt)?;
            let yes = parse_yes_no(&answer).ok_or_else(|| {
                Error::backend(mllm.id(), format!("answer is neither yes nor no: {answer:?}"))
            })?;
            if yes == item.present {
                correct += 1;
            }
        }
        table.push(AccuracyRow {
            candidate: idx,
            d_hidden: ckpt.config().d_hidden,
            d_ctx: ckpt.config().d_ctx,
            params: ckpt.param_count(),
            correct,
            total: probe.len(),
            accuracy: correct as f64 / probe.len() as f64,
        });
    }
    let best = pick_best(&table).expect("non-empty table");
    Ok(Selection { best, table })
}
