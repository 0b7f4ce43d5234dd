//! Mitigation workflow: paired fine-tuning data, POPE checkpoint selection
//! and downstream evaluation hooks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compose::PromptSet;
use crate::diffusion::{generate_conditioned, GenerationRequest};
use crate::error::{Error, Result};
use crate::eval::success::ratio;
use crate::gateway::{parse_yes_no, ClipBackend, DiffusionBackend, MllmBackend, VisionInput};
use crate::image::Image;
use crate::ingest::AnnotatedCorpus;
use crate::run::manifest::RunManifest;
use crate::run::store::ImageStore;
use crate::seed;
use crate::tensor::EmbeddingVector;

pub const CAPTION_PROMPT: &str = "Write a short caption for the given image.";

/// Fine-tuning settings handed to an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: usize,
    pub dropout: f64,
    pub optimizer: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub scheduler: String,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 8,
            alpha: 32,
            dropout: 0.05,
            optimizer: "adam".into(),
            learning_rate: 5e-6,
            epochs: 15,
            batch_size: 16,
            warmup_ratio: 0.10,
            scheduler: "cosine-with-warmup".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositiveCandidate {
    pub id: String,
    pub image: Image,
}

/// Positive ids by descending cosine to `e_comp`, ties by ascending id.
pub fn rank_positives(embeddings: &[(String, EmbeddingVector)], e_comp: &EmbeddingVector) -> Result<Vec<(String, f64)>> {
    let mut ranked = embeddings
        .iter()
        .map(|(id, e)| Ok((id.clone(), e.cosine(e_comp)?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

/// The top `n` of `ranked`, cycling from the top when there are fewer
/// than `n`. The flag reports reuse.
pub fn select_positives(ranked: &[(String, f64)], n: usize) -> (Vec<String>, bool) {
    if ranked.is_empty() {
        return (Vec::new(), n > 0);
    }
    let picked = (0..n).map(|i| ranked[i % ranked.len()].0.clone()).collect();
    (picked, n > ranked.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationPair {
    pub class: String,
    pub negative_id: String,
    pub negative_image: String,
    pub positive_source: String,
    pub positive_image: String,
    pub positive_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationParams {
    /// Noise level on the inference grid; 0 starts from pure noise.
    pub noise_level: usize,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub seed: u64,
    /// Cap on pairs per class; `None` uses every negative.
    pub max_per_class: Option<usize>,
}

impl Default for MitigationParams {
    fn default() -> Self {
        Self {
            noise_level: 0,
            guidance_scale: 5.0,
            num_inference_steps: 50,
            seed: 0,
            max_per_class: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MitigationDataset {
    pub pairs: Vec<MitigationPair>,
    /// Classes whose positive pool had to be reused.
    pub rotated: Vec<String>,
    /// Classes with negatives but no positives.
    pub skipped: Vec<String>,
}

/// Pairs each success image of `manifest` with a synthesized positive
/// conditioned on a top-ranked object-present image of the same class.
pub fn build_mitigation_dataset(
    manifest: &RunManifest,
    positives: &BTreeMap<String, Vec<PositiveCandidate>>,
    e_comp: &BTreeMap<String, EmbeddingVector>,
    clip: &dyn ClipBackend,
    diffusion: &dyn DiffusionBackend,
    store: &ImageStore,
    params: &MitigationParams,
) -> Result<MitigationDataset> {
    let mut negatives: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for r in &manifest.records {
        if let Some(h) = &r.success_image {
            negatives.entry(&r.class).or_default().push((&r.sample_id, h));
        }
    }
    let mut out = MitigationDataset::default();
    for (class, mut negs) in negatives {
        if let Some(cap) = params.max_per_class {
            negs.truncate(cap);
        }
        let pool = positives.get(class).map(Vec::as_slice).unwrap_or(&[]);
        if pool.is_empty() {
            log::warn!("no positives for class {class}; skipping {} negatives", negs.len());
            out.skipped.push(class.to_string());
            continue;
        }
        let target = e_comp
            .get(class)
            .ok_or_else(|| Error::InvalidInput(format!("no compositional embedding for {class}")))?;
        let embedded = pool
            .iter()
            .map(|p| Ok((p.id.clone(), clip.embed_image(&p.image)?)))
            .collect::<Result<Vec<_>>>()?;
        let ranked = rank_positives(&embedded, target)?;
        let (picked, rotated) = select_positives(&ranked, negs.len());
        if rotated {
            log::warn!("class {class}: {} positives for {} negatives, reusing", pool.len(), negs.len());
            out.rotated.push(class.to_string());
        }
        let by_id: BTreeMap<&str, (&PositiveCandidate, &EmbeddingVector)> = pool
            .iter()
            .zip(&embedded)
            .map(|(p, (_, e))| (p.id.as_str(), (p, e)))
            .collect();
        for ((neg_id, neg_hash), pos_id) in negs.into_iter().zip(picked) {
            let (pos, emb) = by_id[pos_id.as_str()];
            let s = seed::sample_seed(params.seed, neg_id, "mitigation-positive");
            let req = GenerationRequest {
                source: pos.image.clone(),
                conditioning: emb.clone(),
                noise_level: params.noise_level,
                guidance_scale: params.guidance_scale,
                num_inference_steps: params.num_inference_steps,
                attempt_seeds: vec![s],
            };
            let cand = generate_conditioned(&req, diffusion, 0)?;
            out.pairs.push(MitigationPair {
                class: class.to_string(),
                negative_id: neg_id.to_string(),
                negative_image: neg_hash.to_string(),
                positive_source: pos_id,
                positive_image: store.put(&cand.image)?,
                positive_seed: s,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image: String,
    pub prompt: String,
    pub answer: String,
}

/// Two records per pair, negative ("No") first.
pub fn instruction_records(
    dataset: &MitigationDataset,
    store: &ImageStore,
    prompts: &PromptSet,
    seed: u64,
) -> Result<Vec<InstructionRecord>> {
    let mut out = Vec::with_capacity(2 * dataset.pairs.len());
    for p in &dataset.pairs {
        for (hash, answer) in [(&p.negative_image, "No"), (&p.positive_image, "Yes")] {
            let key = format!("{}#{answer}", p.negative_id);
            out.push(InstructionRecord {
                image: store.path(hash)?.display().to_string(),
                prompt: prompts.sample(&p.class, &mut seed::rng_for(seed, &key, "instruction-prompt")),
                answer: answer.into(),
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

// POPE

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeSetting {
    Random,
    Popular,
    Adversarial,
}

impl PopeSetting {
    pub const ALL: [PopeSetting; 3] = [PopeSetting::Random, PopeSetting::Popular, PopeSetting::Adversarial];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: u64,
    pub object: String,
    pub label: bool,
}

/// Balanced probe: per image, up to `per_image` present objects and the
/// same number of absent ones chosen by `setting`.
pub fn build_pope_probe(
    corpus: &AnnotatedCorpus,
    setting: PopeSetting,
    images: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<PopeQuestion>> {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut co: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for e in corpus.entries.values() {
        for a in &e.labels {
            *freq.entry(a).or_default() += 1;
            for b in &e.labels {
                if a != b {
                    *co.entry(a).or_default().entry(b).or_default() += 1;
                }
            }
        }
    }
    let mut popular: Vec<&str> = corpus.categories.iter().map(String::as_str).collect();
    popular.sort_by(|a, b| freq.get(b).unwrap_or(&0).cmp(freq.get(a).unwrap_or(&0)).then(a.cmp(b)));

    let mut rng = seed::rng_for(seed, "pope", match setting {
        PopeSetting::Random => "random",
        PopeSetting::Popular => "popular",
        PopeSetting::Adversarial => "adversarial",
    });
    let mut ids: Vec<u64> = corpus.entries.keys().copied().collect();
    ids.shuffle(&mut rng);
    let mut out = Vec::new();
    for id in ids.into_iter().take(images) {
        let entry = &corpus.entries[&id];
        let present: Vec<&str> = entry.labels.iter().map(String::as_str).take(per_image).collect();
        let mut absent: Vec<&str> = match setting {
            PopeSetting::Random => {
                let mut c: Vec<&str> = popular.iter().copied().filter(|o| !entry.labels.contains(*o)).collect();
                c.sort_unstable();
                c.shuffle(&mut rng);
                c
            }
            PopeSetting::Popular => popular.iter().copied().filter(|o| !entry.labels.contains(*o)).collect(),
            PopeSetting::Adversarial => {
                let mut score: BTreeMap<&str, usize> = BTreeMap::new();
                for l in &entry.labels {
                    for (o, n) in co.get(l.as_str()).into_iter().flatten() {
                        *score.entry(o).or_default() += n;
                    }
                }
                let mut c: Vec<&str> = popular.iter().copied().filter(|o| !entry.labels.contains(*o)).collect();
                c.sort_by(|a, b| score.get(b).unwrap_or(&0).cmp(score.get(a).unwrap_or(&0)).then(a.cmp(b)));
                c
            }
        };
        absent.truncate(present.len());
        if absent.len() < present.len() {
            continue;
        }
        for o in present {
            out.push(PopeQuestion { image_id: id, object: o.into(), label: true });
        }
        for o in absent {
            out.push(PopeQuestion { image_id: id, object: o.into(), label: false });
        }
    }
    Ok(out)
}

pub fn pope_prompt(object: &str) -> String {
    format!("Is there a {object} in the image? Please answer Yes or No.")
}

/// Counts for the "Yes" class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Unparseable answers count as "No".
    pub fn add(&mut self, gold: bool, predicted_yes: bool) {
        match (gold, predicted_yes) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`; absent with no positives predicted or gold.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn yes_ratio(&self) -> Option<f64> {
        ratio(self.tp + self.fp, self.total())
    }
}

pub fn run_pope(
    mllm: &dyn MllmBackend,
    probe: &[PopeQuestion],
    load: &dyn Fn(u64) -> Result<Image>,
) -> Result<Confusion> {
    let mut c = Confusion::default();
    for q in probe {
        let image = load(q.image_id)?;
        let answer = mllm.respond(VisionInput::Image(&image), &pope_prompt(&q.object))?;
        c.add(q.label, parse_yes_no(&answer) == Some(true));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub name: String,
    pub epoch: usize,
    pub confusion: Confusion,
    pub f1: Option<f64>,
}

/// F1 argmax, ties to the earliest epoch. Checkpoints without an F1 never
/// win over one with an F1.
pub fn pick_checkpoint(scores: &[CheckpointScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (fb, fi) = (scores[b].f1.unwrap_or(f64::NEG_INFINITY), s.f1.unwrap_or(f64::NEG_INFINITY));
                if fi > fb || (fi == fb && s.epoch < scores[b].epoch) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub struct Checkpoint<'a> {
    pub name: String,
    pub epoch: usize,
    pub mllm: &'a dyn MllmBackend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSelection {
    pub best: String,
    pub best_epoch: usize,
    pub table: Vec<CheckpointScore>,
}

pub fn select_checkpoint_pope(
    checkpoints: &[Checkpoint<'_>],
    probe: &[PopeQuestion],
    load: &dyn Fn(u64) -> Result<Image>,
) -> Result<CheckpointSelection> {
    let table = checkpoints
        .iter()
        .map(|c| {
            let confusion = run_pope(c.mllm, probe, load)?;
            Ok(CheckpointScore {
                name: c.name.clone(),
                epoch: c.epoch,
                confusion,
                f1: confusion.f1(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let i = pick_checkpoint(&table).ok_or_else(|| Error::InvalidInput("no checkpoints".into()))?;
    Ok(CheckpointSelection {
        best: table[i].name.clone(),
        best_epoch: table[i].epoch,
        table,
    })
}

// Downstream suites

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaItem {
    pub image_id: u64,
    pub question: String,
    pub answers: Vec<String>,
}

fn normalize_answer(s: &str) -> String {
    s.trim()
        .trim_end_matches('.')
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match (after normalization) against any reference answer.
pub fn vqa_accuracy(
    mllm: &dyn MllmBackend,
    items: &[VqaItem],
    load: &dyn Fn(u64) -> Result<Image>,
) -> Result<Option<f64>> {
    let mut correct = 0;
    for item in items {
        let image = load(item.image_id)?;
        let pred = normalize_answer(&mllm.respond(VisionInput::Image(&image), &item.question)?);
        correct += usize::from(item.answers.iter().any(|a| normalize_answer(a) == pred));
    }
    Ok(ratio(correct, items.len()))
}

/// External caption metric (e.g. BERTScore).
pub trait CaptionScorer {
    fn score(&self, candidate: &str, references: &[String]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionItem {
    pub image_id: u64,
    pub references: Vec<String>,
}

pub fn caption_score(
    mllm: &dyn MllmBackend,
    items: &[CaptionItem],
    scorer: &dyn CaptionScorer,
    load: &dyn Fn(u64) -> Result<Image>,
) -> Result<Option<f64>> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for item in items {
        let image = load(item.image_id)?;
        let caption = mllm.respond(VisionInput::Image(&image), CAPTION_PROMPT)?;
        total += scorer.score(&caption, &item.references)?;
    }
    Ok(Some(total / items.len() as f64))
}

/// Yes-rate of `mllm` on GHOST images (lower is better).
pub fn ghost_yes_rate(
    mllm: &dyn MllmBackend,
    source: &super::transfer::TransferSource,
    prompts: &PromptSet,
    seed: u64,
) -> Result<Option<f64>> {
    let store = source.store()?;
    let mut yes = 0;
    for item in &source.items {
        let image = store.get(&item.image_hash)?;
        let prompt = prompts.sample(&item.object, &mut seed::rng_for(seed, &item.id, "ghost-eval-prompt"));
        yes += usize::from(mllm.verdict(&image, &prompt)?);
    }
    Ok(ratio(yes, source.items.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub settings: BTreeMap<PopeSetting, Confusion>,
    pub f1: BTreeMap<PopeSetting, Option<f64>>,
    pub accuracy: BTreeMap<PopeSetting, Option<f64>>,
    /// Mean over settings that have a value.
    pub macro_f1: Option<f64>,
    pub macro_accuracy: Option<f64>,
}

impl PopeReport {
    pub fn from_confusions(settings: BTreeMap<PopeSetting, Confusion>) -> Self {
        let f1: BTreeMap<_, _> = settings.iter().map(|(k, c)| (*k, c.f1())).collect();
        let accuracy: BTreeMap<_, _> = settings.iter().map(|(k, c)| (*k, c.accuracy())).collect();
        let mean = |m: &BTreeMap<PopeSetting, Option<f64>>| {
            let v: Vec<f64> = m.values().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            macro_f1: mean(&f1),
            macro_accuracy: mean(&accuracy),
            settings,
            f1,
            accuracy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    /// Per source victim.
    pub ghost_cross_model: BTreeMap<String, Option<f64>>,
    pub pope: Option<PopeReport>,
    pub vqa_accuracy: Option<f64>,
    pub caption_score: Option<f64>,
}

#[derive(Default)]
pub struct DownstreamSuites<'a> {
    pub ghost_sources: Vec<super::transfer::TransferSource>,
    pub pope: BTreeMap<PopeSetting, Vec<PopeQuestion>>,
    pub vqa: Vec<VqaItem>,
    pub captions: Vec<CaptionItem>,
    pub caption_scorer: Option<&'a dyn CaptionScorer>,
}

pub fn downstream_eval(
    mllm: &dyn MllmBackend,
    suites: &DownstreamSuites<'_>,
    prompts: &PromptSet,
    load: &dyn Fn(u64) -> Result<Image>,
    seed: u64,
) -> Result<DownstreamReport> {
    let mut report = DownstreamReport::default();
    for s in &suites.ghost_sources {
        report
            .ghost_cross_model
            .insert(s.name.clone(), ghost_yes_rate(mllm, s, prompts, seed)?);
    }
    if !suites.pope.is_empty() {
        let confusions = suites
            .pope
            .iter()
            .map(|(k, probe)| Ok((*k, run_pope(mllm, probe, load)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        report.pope = Some(PopeReport::from_confusions(confusions));
    }
    if !suites.vqa.is_empty() {
        report.vqa_accuracy = vqa_accuracy(mllm, &suites.vqa, load)?;
    }
    if let Some(scorer) = suites.caption_scorer {
        report.caption_score = caption_score(mllm, &suites.captions, scorer, load)?;
    }
    Ok(report)
}

/// Distinct ids in probe order; helper for loaders that prefetch.
pub fn probe_image_ids(probe: &[PopeQuestion]) -> Vec<u64> {
    let mut seen = BTreeSet::new();
    probe.iter().filter(|q| seen.insert(q.image_id)).map(|q| q.image_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_by_hand() {
        let c = Confusion { tp: 8, fp: 2, tn: 6, fn_: 4 };
        assert!((c.f1().unwrap() - 16.0 / 22.0).abs() < 1e-12);
        assert_eq!(Confusion::default().f1(), None);
    }

    #[test]
    fn ties_go_to_earliest_epoch() {
        let s = |epoch, f1| CheckpointScore {
            name: format!("e{epoch}"),
            epoch,
            confusion: Confusion::default(),
            f1,
        };
        assert_eq!(pick_checkpoint(&[s(3, Some(0.5)), s(1, Some(0.5)), s(2, None)]), Some(1));
        assert_eq!(pick_checkpoint(&[s(1, None), s(2, Some(0.1))]), Some(1));
        assert_eq!(pick_checkpoint(&[]), None);
    }

    #[test]
    fn rotation_flagged() {
        let ranked = vec![("a".to_string(), 0.9), ("b".to_string(), 0.5)];
        assert_eq!(select_positives(&ranked, 3), (vec!["a".into(), "b".into(), "a".into()], true));
        assert_eq!(select_positives(&ranked, 1), (vec!["a".into()], false));
    }

    #[test]
    fn lora_defaults() {
        let l = LoraConfig::default();
        assert_eq!((l.r, l.alpha, l.epochs, l.batch_size), (8, 32, 15, 16));
        assert_eq!((l.dropout, l.learning_rate, l.warmup_ratio), (0.05, 5e-6, 0.10));
    }
}
