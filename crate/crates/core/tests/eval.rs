use std::collections::{BTreeMap, BTreeSet};

use ghostbench::compose::PromptSet;
use ghostbench::eval::fid::fid_from_features;
use ghostbench::eval::mitigate::{rank_positives, select_positives, vqa_accuracy, Confusion, VqaItem};
use ghostbench::eval::transfer::{
    matrix_from_verdicts, transfer_matrix, TransferItem, TransferSource, TransferTarget, VerdictCache,
};
use ghostbench::eval::votes::{aggregate_votes, Group, Vote, VoteRecord};
use ghostbench::gateway::mock::MockMllm;
use ghostbench::gateway::{MllmBackend, ProbeMode, VisionInput};
use ghostbench::image::Image;
use ghostbench::run::session::{build_session, mix_counts, GroupPools, Mix, PoolImage, SessionSpec, TrainingExample};
use ghostbench::run::store::ImageStore;
use ghostbench::tensor::{EmbeddingVector, TokenSeq};
use ghostbench::{Error, Result};
use proptest::prelude::*;

/// Every call fails as an outage.
struct Down;

impl MllmBackend for Down {
    fn id(&self) -> &str {
        "down"
    }
    fn token_dims(&self) -> (usize, usize) {
        (1, 1)
    }
    fn encode_vision(&self, _: &Image) -> Result<TokenSeq> {
        Err(Error::unavailable("down", "connection refused"))
    }
    fn yes_probability(&self, _: &TokenSeq, _: &str, _: ProbeMode) -> Result<f64> {
        Err(Error::unavailable("down", "connection refused"))
    }
    fn respond(&self, _: VisionInput<'_>, _: &str) -> Result<String> {
        Err(Error::unavailable("down", "connection refused"))
    }
}

fn stored_source(root: &std::path::Path, name: &str, seed: u64, n: usize) -> TransferSource {
    let dir = root.join(name);
    let store = ImageStore::open(&dir).unwrap();
    let items = (0..n)
        .map(|i| TransferItem {
            id: format!("boat/{i}"),
            object: if i % 2 == 0 { "boat" } else { "vase" }.into(),
            image_hash: store.put(&Image::synthetic(seed * 1000 + i as u64, 8, 8)).unwrap(),
        })
        .collect();
    TransferSource { name: name.into(), store_dir: dir, items }
}

#[test]
fn transfer_matrix_matches_brute_force() {
    let tmp = tempfile::tempdir().unwrap();
    let sources = vec![stored_source(tmp.path(), "qwen", 1, 20), stored_source(tmp.path(), "llava", 2, 20)];
    let mocks: Vec<(String, MockMllm)> = ["qwen", "llava", "glm"]
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), MockMllm::new(40 + i as u64, 8, 2).unwrap().with_logit(4.0, 0.0)))
        .collect();
    let down = Down;
    let mut targets: Vec<TransferTarget> =
        mocks.iter().map(|(n, m)| TransferTarget { name: n.clone(), mllm: m as &dyn MllmBackend }).collect();
    targets.push(TransferTarget { name: "down".into(), mllm: &down });
    let prompts = PromptSet::new(vec!["Is there a {obj} here? Answer yes or no.".into()]).unwrap();

    let (m, cache) = transfer_matrix(&sources, &targets, &prompts, 7).unwrap();

    for s in &sources {
        let store = s.store().unwrap();
        for (t, mllm) in &mocks {
            if *t == s.name {
                assert!(m.cell(&s.name, t).is_none());
                continue;
            }
            let yes = s
                .items
                .iter()
                .filter(|it| {
                    let img = store.get(&it.image_hash).unwrap();
                    mllm.verdict(&img, &format!("Is there a {} here? Answer yes or no.", it.object)).unwrap()
                })
                .count();
            let cell = m.cell(&s.name, t).unwrap();
            assert_eq!((cell.yes, cell.answered, cell.failed), (yes, 20, 0), "{} -> {t}", s.name);
            assert_eq!(cell.rate, Some(yes as f64 / 20.0));
        }
        let cell = m.cell(&s.name, "down").unwrap();
        assert!(cell.rate.is_none() && cell.absent_reason.as_deref().unwrap().contains("unreachable"));
    }

    // Recomputing from the serialized cache is bit-identical.
    let json = serde_json::to_string(&cache).unwrap();
    let back: VerdictCache = serde_json::from_str(&json).unwrap();
    let names: Vec<String> = targets.iter().map(|t| t.name.clone()).collect();
    assert_eq!(serde_json::to_string(&matrix_from_verdicts(&sources, &names, &back)).unwrap(), serde_json::to_string(&m).unwrap());
}

#[test]
fn positives_rank_by_cosine_then_id() {
    let e_comp = EmbeddingVector::new(vec![1.0, 0.0, 0.0]);
    let raw: Vec<(String, Vec<f64>)> = vec![
        ("p5".into(), vec![0.0, 1.0, 0.0]),
        ("p1".into(), vec![1.0, 1.0, 0.0]),
        ("p3".into(), vec![2.0, 0.0, 0.0]),
        ("p0".into(), vec![-1.0, 0.2, 0.0]),
        ("p2".into(), vec![1.0, 0.0, 0.0]),
        ("p4".into(), vec![3.0, 1.0, 1.0]),
    ];
    let embeddings: Vec<(String, EmbeddingVector)> =
        raw.iter().map(|(id, v)| (id.clone(), EmbeddingVector::new(v.clone()))).collect();
    let ranked = rank_positives(&embeddings, &e_comp).unwrap();

    let mut oracle: Vec<(String, f64)> = raw
        .iter()
        .map(|(id, v)| (id.clone(), v[0] / v.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let ids: Vec<&str> = ranked.iter().map(|r| r.0.as_str()).collect();
    assert_eq!(ids, oracle.iter().map(|r| r.0.as_str()).collect::<Vec<_>>());
    assert_eq!(&ids[..2], ["p2", "p3"]);

    let (top4, reused) = select_positives(&ranked, 4);
    assert_eq!(top4, ids[..4].iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert!(!reused);
    let (eight, reused) = select_positives(&ranked, 8);
    assert!(reused);
    assert_eq!(eight[6..], eight[..2]);
}

/// Answers with the text tag of the image.
struct Echo;

impl MllmBackend for Echo {
    fn id(&self) -> &str {
        "echo"
    }
    fn token_dims(&self) -> (usize, usize) {
        (1, 1)
    }
    fn encode_vision(&self, _: &Image) -> Result<TokenSeq> {
        Ok(TokenSeq::zeros(1, 1))
    }
    fn yes_probability(&self, _: &TokenSeq, _: &str, _: ProbeMode) -> Result<f64> {
        Ok(0.5)
    }
    fn respond(&self, input: VisionInput<'_>, _: &str) -> Result<String> {
        let VisionInput::Image(img) = input else { unreachable!() };
        Ok(img.tags.iter().next().cloned().unwrap_or_default())
    }
}

#[test]
fn vqa_accuracy_counts_normalized_exact_matches() {
    let replies = ["Two.", "red", "  A   dog ", "yes", "3", "blue", "no", "cat", "", "Green"];
    let golds: [&[&str]; 10] = [
        &["two", "2"],
        &["Red"],
        &["a dog"],
        &["no"],
        &["three"],
        &["blue"],
        &["No."],
        &["dog"],
        &["none"],
        &["green", "lime"],
    ];
    let items: Vec<VqaItem> = golds
        .iter()
        .enumerate()
        .map(|(i, g)| VqaItem {
            image_id: i as u64,
            question: "?".into(),
            answers: g.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let load = |id: u64| Ok(Image::synthetic(id, 2, 2).with_tags([replies[id as usize]]));
    let acc = vqa_accuracy(&Echo, &items, &load).unwrap();
    assert_eq!(acc, Some(0.6));
    assert_eq!(vqa_accuracy(&Echo, &[], &load).unwrap(), None);
}

fn pool(prefix: &str, n: usize) -> Vec<PoolImage> {
    (0..n)
        .map(|i| PoolImage {
            image_hash: format!("{prefix}{i:03}"),
            object: ["boat", "vase", "dog"][i % 3].into(),
        })
        .collect()
}

#[test]
fn duplicate_pool_entries_shrink_the_session() {
    let mut control = pool("c", 5);
    control.extend(pool("c", 5));
    let pools = GroupPools { control, ghost_a: pool("a", 40), ghost_b: pool("b", 40) };
    let plan = build_session(&pools, &[], &SessionSpec { size: 100, mix: Mix::default(), training: 0 }, 1);
    assert_eq!(plan.count(Group::Control), 5);
    let largest = (0..=100).rev().find(|&s| mix_counts(s, &Mix::default())[0] <= 5).unwrap();
    assert_eq!(plan.items.len(), largest);
    assert!(plan.shrunk.is_some());
}

fn vote_record() -> impl Strategy<Value = VoteRecord> {
    (0..4usize, 0..30usize, 0..3usize, 0..3usize, any::<bool>()).prop_map(|(a, img, class, g, yes)| VoteRecord {
        annotator: format!("ann{a}"),
        image_id: format!("img{img}"),
        class: ["boat", "vase", "dog"][class].into(),
        group: Group::ALL[g],
        vote: if yes { Vote::Yes } else { Vote::No },
        timestamp: String::new(),
    })
}

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n)
}

proptest! {
    #[test]
    fn vote_aggregate_ignores_order(records in prop::collection::vec(vote_record(), 0..60), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = aggregate_votes(&records, 0.7);
        prop_assert_eq!(&a, &aggregate_votes(&shuffled, 0.7));
        let total: usize = a.groups.values().map(|r| r.total).sum();
        prop_assert_eq!(total, records.len());
        let yes = records.iter().filter(|r| r.vote.is_yes()).count();
        prop_assert_eq!(a.groups.values().map(|r| r.yes).sum::<usize>(), yes);
    }

    #[test]
    fn session_mix_and_training_are_disjoint(
        size in 5..120usize,
        training in 0..8usize,
        seed in any::<u64>(),
        w in (0.05..1.0f64, 0.05..1.0f64, 0.05..1.0f64),
    ) {
        let mix = Mix { control: w.0, ghost_a: w.1, ghost_b: w.2 };
        let pools = GroupPools { control: pool("c", 130), ghost_a: pool("a", 130), ghost_b: pool("b", 130) };
        let train: Vec<TrainingExample> = pool("t", 10)
            .into_iter()
            .enumerate()
            .map(|(i, image)| TrainingExample { image, label: i % 2 == 0 })
            .collect();
        let spec = SessionSpec { size, mix, training };
        let plan = build_session(&pools, &train, &spec, seed);
        prop_assert_eq!(&plan, &build_session(&pools, &train, &spec, seed));
        prop_assert_eq!(plan.items.len(), size);
        prop_assert!(plan.shrunk.is_none());
        prop_assert_eq!(plan.training.len(), training);

        let counts = mix_counts(size, &mix);
        let total = w.0 + w.1 + w.2;
        for (i, g) in Group::ALL.iter().enumerate() {
            let target = size as f64 * [w.0, w.1, w.2][i] / total;
            prop_assert!((plan.count(*g) as f64 - target).abs() <= 1.0, "{:?}: {} vs {}", g, plan.count(*g), target);
            prop_assert_eq!(plan.count(*g), counts[i]);
        }
        let items: BTreeSet<&str> = plan.items.iter().map(|i| i.image.image_hash.as_str()).collect();
        prop_assert_eq!(items.len(), size);
        prop_assert!(plan.training.iter().all(|t| !items.contains(t.image.image_hash.as_str())));
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(a in features(8, 3), b in features(11, 3)) {
        let ab = fid_from_features(&a, &b).unwrap();
        let ba = fid_from_features(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
        prop_assert!(fid_from_features(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn confusion_metrics_agree(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..80)) {
        let mut c = Confusion::default();
        for (gold, pred) in &pairs {
            c.add(*gold, *pred);
        }
        prop_assert_eq!(c.total(), pairs.len());
        let tp = pairs.iter().filter(|p| p.0 && p.1).count() as f64;
        let predicted = pairs.iter().filter(|p| p.1).count() as f64;
        let gold = pairs.iter().filter(|p| p.0).count() as f64;
        match (c.precision(), c.recall(), c.f1()) {
            (Some(p), Some(r), Some(f)) if p + r > 0.0 => {
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
                prop_assert!((p - tp / predicted).abs() < 1e-12 && (r - tp / gold).abs() < 1e-12);
            }
            (_, _, Some(f)) => prop_assert_eq!(f, 0.0),
            (_, _, None) => prop_assert!(predicted == 0.0 && gold == 0.0),
        }
        if let Some(y) = c.yes_ratio() {
            prop_assert!((y - predicted / pairs.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn per_class_tallies_partition_the_groups() {
    let records: Vec<VoteRecord> = (0..30)
        .map(|i| VoteRecord {
            annotator: format!("a{}", i % 3),
            image_id: format!("i{i}"),
            class: ["boat", "vase"][i % 2].into(),
            group: Group::ALL[i % 3],
            vote: if i % 4 == 0 { Vote::Yes } else { Vote::No },
            timestamp: String::new(),
        })
        .collect();
    let agg = aggregate_votes(&records, 0.7);
    let mut sums: BTreeMap<Group, (usize, usize)> = BTreeMap::new();
    for per in agg.per_class.values() {
        for (g, r) in per {
            let e = sums.entry(*g).or_default();
            e.0 += r.yes;
            e.1 += r.total;
        }
    }
    for g in Group::ALL {
        assert_eq!(sums[&g], (agg.groups[&g].yes, agg.groups[&g].total));
    }
}
