//! COCO-style corpus loading and per-class candidate pools.
//!
//! A corpus directory holds `instances.json`, an optional `captions.json`
//! and the image files under `images/`. The parsed corpus is cached as a
//! JSONL index keyed by the content hash of the annotation files.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::CaptionEntry;
use crate::error::{Error, Result};
use crate::gateway::ClipBackend;
use crate::image::Image;
use crate::seed;

pub const INSTANCES_FILE: &str = "instances.json";
pub const CAPTIONS_FILE: &str = "captions.json";
pub const IMAGES_DIR: &str = "images";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoInstance {
    image_id: u64,
    category_id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoInstances {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoInstance>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoCaption {
    image_id: u64,
    caption: String,
}

#[derive(Debug, Deserialize)]
struct CocoCaptions {
    annotations: Vec<CocoCaption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: u64,
    pub file: String,
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    corpus_hash: String,
    categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedCorpus {
    pub root: PathBuf,
    pub categories: BTreeSet<String>,
    pub entries: BTreeMap<u64, CorpusEntry>,
    pub content_hash: String,
}

/// Parses COCO instances (and optional captions) JSON into entries.
pub fn parse_coco(instances: &[u8], captions: Option<&[u8]>) -> Result<(BTreeSet<String>, BTreeMap<u64, CorpusEntry>)> {
    let inst: CocoInstances =
        serde_json::from_slice(instances).map_err(|e| Error::decode("COCO instances", e))?;
    let mut cat_names = BTreeMap::new();
    for c in &inst.categories {
        if cat_names.insert(c.id, c.name.clone()).is_some() {
            return Err(Error::decode("COCO instances", format!("duplicate category id {}", c.id)));
        }
    }
    let mut entries = BTreeMap::new();
    for img in inst.images {
        if img.file_name.contains("..") || Path::new(&img.file_name).is_absolute() {
            return Err(Error::decode("COCO instances", format!("unsafe file name {:?}", img.file_name)));
        }
        let entry = CorpusEntry {
            id: img.id,
            file: img.file_name,
            labels: BTreeSet::new(),
            captions: Vec::new(),
        };
        if entries.insert(img.id, entry).is_some() {
            return Err(Error::decode("COCO instances", format!("duplicate image id {}", img.id)));
        }
    }
    for ann in inst.annotations {
        let name = cat_names.get(&ann.category_id).ok_or_else(|| {
            Error::decode("COCO instances", format!("unknown category id {}", ann.category_id))
        })?;
        let entry = entries.get_mut(&ann.image_id).ok_or_else(|| {
            Error::decode("COCO instances", format!("annotation for unknown image {}", ann.image_id))
        })?;
        entry.labels.insert(name.clone());
    }
    if let Some(bytes) = captions {
        let caps: CocoCaptions =
            serde_json::from_slice(bytes).map_err(|e| Error::decode("COCO captions", e))?;
        for c in caps.annotations {
            let entry = entries.get_mut(&c.image_id).ok_or_else(|| {
                Error::decode("COCO captions", format!("caption for unknown image {}", c.image_id))
            })?;
            entry.captions.push(c.caption);
        }
    }
    Ok((cat_names.into_values().collect(), entries))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

impl AnnotatedCorpus {
    /// Parses the COCO files under `root` and checks every image exists.
    pub fn load(root: &Path) -> Result<Self> {
        let instances = read(&root.join(INSTANCES_FILE))?;
        let captions_path = root.join(CAPTIONS_FILE);
        let captions = captions_path.exists().then(|| read(&captions_path)).transpose()?;
        let (categories, entries) = parse_coco(&instances, captions.as_deref())?;
        let corpus = Self {
            root: root.to_path_buf(),
            categories,
            entries,
            content_hash: content_hash(&instances, captions.as_deref()),
        };
        corpus.check_files()?;
        Ok(corpus)
    }

    /// Uses the cached index at `index` when its hash matches the corpus
    /// files, otherwise parses the corpus and rewrites the index.
    pub fn load_cached(root: &Path, index: &Path) -> Result<Self> {
        let instances = read(&root.join(INSTANCES_FILE))?;
        let captions_path = root.join(CAPTIONS_FILE);
        let captions = captions_path.exists().then(|| read(&captions_path)).transpose()?;
        let hash = content_hash(&instances, captions.as_deref());
        if index.exists() {
            match Self::read_index(root, index) {
                Ok(c) if c.content_hash == hash => return Ok(c),
                Ok(_) => log::info!("corpus changed; rebuilding {}", index.display()),
                Err(e) => log::warn!("ignoring unreadable index {}: {e}", index.display()),
            }
        }
        let corpus = Self::load(root)?;
        corpus.write_index(index)?;
        Ok(corpus)
    }

    pub fn write_index(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = IndexHeader {
            version: INDEX_VERSION,
            corpus_hash: self.content_hash.clone(),
            categories: self.categories.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for e in self.entries.values() {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read_index(root: &Path, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::decode("corpus index", "empty file"))?
            .map_err(|e| Error::io(path, e))?;
        let header: IndexHeader =
            serde_json::from_str(&first).map_err(|e| Error::decode("corpus index", e))?;
        if header.version != INDEX_VERSION {
            return Err(Error::decode("corpus index", format!("version {}", header.version)));
        }
        let mut entries = BTreeMap::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CorpusEntry =
                serde_json::from_str(&line).map_err(|e| Error::decode("corpus index", e))?;
            if entries.insert(e.id, e).is_some() {
                return Err(Error::decode("corpus index", "duplicate image id"));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            categories: header.categories,
            entries,
            content_hash: header.corpus_hash,
        })
    }

    pub fn image_path(&self, id: u64) -> Option<PathBuf> {
        self.entries
            .get(&id)
            .map(|e| self.root.join(IMAGES_DIR).join(&e.file))
    }

    pub fn check_files(&self) -> Result<()> {
        for e in self.entries.values() {
            let p = self.root.join(IMAGES_DIR).join(&e.file);
            if !p.is_file() {
                return Err(Error::InvalidInput(format!(
                    "image {} references missing file {}",
                    e.id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn caption_entries(&self) -> Vec<CaptionEntry> {
        self.entries
            .values()
            .flat_map(|e| {
                e.captions.iter().map(|c| CaptionEntry {
                    image_id: e.id,
                    caption: c.clone(),
                })
            })
            .collect()
    }
}

fn content_hash(instances: &[u8], captions: Option<&[u8]>) -> String {
    let mut h = Sha256::new();
    h.update((instances.len() as u64).to_le_bytes());
    h.update(instances);
    if let Some(c) = captions {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    hex::encode(h.finalize())
}

/// Loads images by id.
pub trait ImageSource: Send + Sync {
    fn image(&self, id: u64) -> Result<Image>;
}

impl ImageSource for AnnotatedCorpus {
    fn image(&self, id: u64) -> Result<Image> {
        let path = self
            .image_path(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown image id {id}")))?;
        let mut img = Image::load(&path)?;
        // Labels travel with the image so tag-aware mocks can see them.
        img.tags.extend(self.entries[&id].labels.iter().cloned());
        Ok(img)
    }
}

impl ImageSource for BTreeMap<u64, Image> {
    fn image(&self, id: u64) -> Result<Image> {
        self.get(&id)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("unknown image id {id}")))
    }
}

/// Ids of images whose labels exclude `object`.
pub fn select_negatives(corpus: &AnnotatedCorpus, object: &str) -> Result<Vec<u64>> {
    if !corpus.categories.contains(object) {
        return Err(Error::InvalidInput(format!("unknown label {object:?}")));
    }
    Ok(corpus
        .entries
        .values()
        .filter(|e| !e.labels.contains(object))
        .map(|e| e.id)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    Sorted,
    Random,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sorted" => Ok(Self::Sorted),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("pool mode must be sorted or random, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub object: String,
    pub mode: PoolMode,
    pub k: usize,
    pub image_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl CandidatePool {
    pub fn file_name(object: &str) -> String {
        let stem: String = object
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!("{stem}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::file_name(&self.object));
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::decode("candidate pool", e))
    }
}

fn dedup_sorted(pool: &[u64]) -> Result<Vec<u64>> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("candidate pool is empty".into()));
    }
    let set: BTreeSet<u64> = pool.iter().copied().collect();
    Ok(set.into_iter().collect())
}

/// Embeds each image with `workers` threads; results keep `ids` order.
pub fn embed_images(
    ids: &[u64],
    images: &dyn ImageSource,
    clip: &dyn ClipBackend,
    workers: usize,
) -> Result<Vec<crate::tensor::EmbeddingVector>> {
    let workers = workers.clamp(1, ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&id| clip.embed_image(&images.image(id)?))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for h in handles {
            out.extend(h.join().expect("embedding worker panicked")?);
        }
        Ok(out)
    })
}

/// Top `k` by cosine between image and bare object-name embeddings,
/// ties by ascending id.
pub fn rank_by_clip(
    pool: &[u64],
    object: &str,
    clip: &dyn ClipBackend,
    images: &dyn ImageSource,
    k: usize,
    workers: usize,
) -> Result<CandidatePool> {
    let ids = dedup_sorted(pool)?;
    let text = clip.embed_text(object)?;
    let embeddings = embed_images(&ids, images, clip, workers)?;
    let mut scored = ids
        .iter()
        .zip(&embeddings)
        .map(|(&id, e)| Ok((id, e.cosine(&text)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(CandidatePool {
        object: object.to_string(),
        mode: PoolMode::Sorted,
        k,
        image_ids: scored.iter().map(|s| s.0).collect(),
        scores: Some(scored.iter().map(|s| s.1).collect()),
        seed: None,
    })
}

/// Uniform draw of `min(k, |pool|)` ids without replacement.
pub fn random_pool(pool: &[u64], object: &str, k: usize, seed: u64) -> Result<CandidatePool> {
    let mut ids = dedup_sorted(pool)?;
    let mut rng = seed::rng(seed::derive(&[&seed.to_le_bytes(), b"random-pool", object.as_bytes()]));
    ids.shuffle(&mut rng);
    ids.truncate(k);
    Ok(CandidatePool {
        object: object.to_string(),
        mode: PoolMode::Random,
        k,
        image_ids: ids,
        scores: None,
        seed: Some(seed),
    })
}

/// Builds and saves one pool per class under `out_dir/pools`.
#[allow(clippy::too_many_arguments)]
pub fn ingest(
    corpus: &AnnotatedCorpus,
    classes: &[String],
    mode: PoolMode,
    k: usize,
    clip: &dyn ClipBackend,
    seed: u64,
    workers: usize,
    out_dir: &Path,
) -> Result<Vec<CandidatePool>> {
    let pools_dir = out_dir.join("pools");
    let mut pools = Vec::with_capacity(classes.len());
    for class in classes {
        let negatives = select_negatives(corpus, class)?;
        let pool = match mode {
            PoolMode::Sorted => rank_by_clip(&negatives, class, clip, corpus, k, workers)?,
            PoolMode::Random => random_pool(&negatives, class, k, seed)?,
        };
        pool.save(&pools_dir)?;
        pools.push(pool);
    }
    Ok(pools)
}

/// One class per non-blank line.
pub fn parse_classes(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Writes a minimal COCO-style corpus: mostly for tests and demos.
pub fn write_corpus(root: &Path, images: &[(u64, Image, Vec<String>, Vec<String>)], categories: &[String]) -> Result<()> {
    let img_dir = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let cat_id = |name: &str| categories.iter().position(|c| c == name).map(|i| i as u64 + 1);
    let mut coco_images = Vec::new();
    let mut anns = Vec::new();
    let mut caps = Vec::new();
    for (id, image, labels, captions) in images {
        let file = format!("{id:012}.png");
        let path = img_dir.join(&file);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&image.encode_png()?).map_err(|e| Error::io(&path, e))?;
        coco_images.push(serde_json::json!({"id": id, "file_name": file, "width": image.width, "height": image.height}));
        for l in labels {
            let cid = cat_id(l).ok_or_else(|| Error::InvalidInput(format!("label {l:?} not in categories")))?;
            anns.push(serde_json::json!({"image_id": id, "category_id": cid}));
        }
        for c in captions {
            caps.push(serde_json::json!({"image_id": id, "caption": c}));
        }
    }
    let cats: Vec<_> = categories
        .iter()
        .enumerate()
        .map(|(i, n)| serde_json::json!({"id": i + 1, "name": n}))
        .collect();
    let inst = serde_json::json!({"images": coco_images, "annotations": anns, "categories": cats});
    let p = root.join(INSTANCES_FILE);
    std::fs::write(&p, serde_json::to_vec(&inst)?).map_err(|e| Error::io(&p, e))?;
    let cap = serde_json::json!({"images": [], "annotations": caps});
    let p = root.join(CAPTIONS_FILE);
    std::fs::write(&p, serde_json::to_vec(&cap)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const INSTANCES: &str = r#"{"images":[{"id":1,"file_name":"a.png"},{"id":2,"file_name":"b.png"}],
        "annotations":[{"image_id":1,"category_id":7}],
        "categories":[{"id":7,"name":"boat"},{"id":8,"name":"vase"}]}"#;

    #[test]
    fn parses_labels_and_captions() {
        let caps = br#"{"annotations":[{"image_id":2,"caption":"A dog."}]}"#;
        let (cats, entries) = parse_coco(INSTANCES.as_bytes(), Some(caps)).unwrap();
        assert_eq!(cats.len(), 2);
        assert!(entries[&1].labels.contains("boat"));
        assert_eq!(entries[&2].captions, vec!["A dog.".to_string()]);
    }

    #[test]
    fn rejects_dangling_references() {
        let bad = INSTANCES.replace("\"category_id\":7", "\"category_id\":9");
        assert!(parse_coco(bad.as_bytes(), None).is_err());
        let caps = br#"{"annotations":[{"image_id":5,"caption":"x"}]}"#;
        assert!(parse_coco(INSTANCES.as_bytes(), Some(caps)).is_err());
        let unsafe_name = INSTANCES.replace("a.png", "../a.png");
        assert!(parse_coco(unsafe_name.as_bytes(), None).is_err());
    }

    #[test]
    fn random_pool_is_seeded() {
        let pool: Vec<u64> = (0..50).collect();
        let a = random_pool(&pool, "boat", 10, 3).unwrap();
        let b = random_pool(&pool, "boat", 10, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_ids.len(), 10);
        let all = random_pool(&pool, "boat", 80, 3).unwrap();
        let mut sorted = all.image_ids.clone();
        sorted.sort();
        assert_eq!(sorted, pool);
        assert!(random_pool(&[], "boat", 3, 1).is_err());
    }

    #[test]
    fn pool_file_names_are_safe() {
        assert_eq!(CandidatePool::file_name("traffic light"), "traffic_light.json");
        assert_eq!(CandidatePool::file_name("../x"), "___x.json");
    }
}
