//! Human-evaluation sessions: item mixes, and the state machine behind the
//! annotation HTTP service. Client-facing views never carry group labels.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::eval::votes::{aggregate_votes, Appended, Group, Vote, VoteAggregate, VoteLedger, VoteRecord};
use crate::run::manifest::RunManifest;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolImage {
    pub image_hash: String,
    pub object: String,
}

/// Success images of a run as annotation candidates.
pub fn ghost_images(manifest: &RunManifest) -> Vec<PoolImage> {
    manifest
        .records
        .iter()
        .filter_map(|r| {
            r.success_image.as_ref().map(|h| PoolImage {
                image_hash: h.clone(),
                object: r.class.clone(),
            })
        })
        .collect()
}

/// At most `n` images per object, drawn with a seeded shuffle.
pub fn sample_per_object(images: &[PoolImage], n: usize, seed: u64) -> Vec<PoolImage> {
    let mut by_object: BTreeMap<&str, Vec<&PoolImage>> = BTreeMap::new();
    for img in images {
        by_object.entry(&img.object).or_default().push(img);
    }
    let mut out = Vec::new();
    for (object, mut group) in by_object {
        group.sort();
        group.dedup();
        group.shuffle(&mut seed::rng_for(seed, object, "per-object-sample"));
        out.extend(group.into_iter().take(n).cloned());
    }
    out
}

/// Moves up to `count` labelled examples out of the pools: alternately a
/// control image ("Yes") and a GHOST image ("No"), taken from the end of
/// each pool so the session draw is unaffected by the split.
pub fn split_training(pools: &mut GroupPools, count: usize) -> Vec<TrainingExample> {
    let mut out = Vec::with_capacity(count);
    let mut turn = 0usize;
    while out.len() < count {
        let popped = match turn % 3 {
            0 => pools.control.pop().map(|image| TrainingExample { image, label: true }),
            1 => pools.ghost_a.pop().map(|image| TrainingExample { image, label: false }),
            _ => pools.ghost_b.pop().map(|image| TrainingExample { image, label: false }),
        };
        turn += 1;
        match popped {
            Some(t) => out.push(t),
            None if pools.control.is_empty() && pools.ghost_a.is_empty() && pools.ghost_b.is_empty() => break,
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub control: f64,
    pub ghost_a: f64,
    pub ghost_b: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            control: 0.2,
            ghost_a: 0.4,
            ghost_b: 0.4,
        }
    }
}

/// Per-group counts summing to `size`, by largest remainder (ties to the
/// earlier group).
pub fn mix_counts(size: usize, mix: &Mix) -> [usize; 3] {
    let w = [mix.control, mix.ghost_a, mix.ghost_b];
    let total: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|x| size as f64 * x / total).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = size - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupPools {
    pub control: Vec<PoolImage>,
    pub ghost_a: Vec<PoolImage>,
    pub ghost_b: Vec<PoolImage>,
}

impl GroupPools {
    fn get(&self, g: Group) -> &[PoolImage] {
        match g {
            Group::Control => &self.control,
            Group::GhostA => &self.ghost_a,
            Group::GhostB => &self.ghost_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub image: PoolImage,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItem {
    pub image: PoolImage,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub seed: u64,
    pub training: Vec<TrainingExample>,
    pub items: Vec<SessionItem>,
    /// Set when the pools could not fill the requested size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrunk: Option<String>,
}

impl SessionPlan {
    pub fn count(&self, g: Group) -> usize {
        self.items.iter().filter(|i| i.group == g).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub size: usize,
    pub mix: Mix,
    pub training: usize,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            size: 100,
            mix: Mix::default(),
            training: 5,
        }
    }
}

/// Draws a mixed, shuffled item list. If a group is short the whole
/// session shrinks to the largest size whose mix fits, and is flagged.
pub fn build_session(pools: &GroupPools, training: &[TrainingExample], spec: &SessionSpec, seed: u64) -> SessionPlan {
    let distinct = Group::ALL.map(|g| pools.get(g).iter().collect::<std::collections::BTreeSet<_>>().len());
    let fits = |s: usize| mix_counts(s, &spec.mix).iter().zip(distinct).all(|(n, have)| have >= *n);
    let mut size = spec.size;
    while size > 0 && !fits(size) {
        size -= 1;
    }
    let shrunk = (size < spec.size).then(|| {
        log::warn!("session shrunk from {} to {size} items", spec.size);
        format!("pools fill only {size} of {} items", spec.size)
    });
    let counts = mix_counts(size, &spec.mix);
    let mut items = Vec::with_capacity(size);
    for (g, n) in Group::ALL.iter().zip(counts) {
        let mut pool: Vec<&PoolImage> = pools.get(*g).iter().collect();
        pool.sort();
        pool.dedup();
        let mut rng = seed::rng_for(seed, g.as_str(), "session-draw");
        pool.shuffle(&mut rng);
        items.extend(pool.into_iter().take(n).map(|image| SessionItem {
            image: image.clone(),
            group: *g,
        }));
    }
    items.shuffle(&mut seed::rng_for(seed, "items", "session-order"));
    let mut train: Vec<TrainingExample> = training.to_vec();
    train.shuffle(&mut seed::rng_for(seed, "training", "session-order"));
    train.truncate(spec.training);
    SessionPlan {
        seed,
        training: train,
        items,
        shrunk,
    }
}

pub fn question(object: &str) -> String {
    format!("Is there a {object} in this image?")
}

pub fn image_url(hash: &str) -> String {
    format!("/images/{hash}.png")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Evaluation,
    Done,
}

/// What a client sees of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientItem {
    pub item_id: String,
    pub image_url: String,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingItemView {
    #[serde(flatten)]
    pub item: ClientItem,
    pub answer: Vote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStarted {
    pub session_id: String,
    pub training: Vec<TrainingItemView>,
    pub view: SessionView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub phase: Phase,
    pub item: Option<ClientItem>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteAck {
    /// Feedback on training items only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub view: SessionView,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            Self::NotFound(_) => 404,
            Self::Conflict(_) => 409,
            Self::BadRequest(_) => 400,
            Self::Forbidden(_) => 403,
            Self::Internal(_) => 500,
        }
    }
}

impl From<crate::Error> for ServiceError {
    fn from(e: crate::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

struct SessionState {
    id: String,
    annotator: String,
    plan: SessionPlan,
    training_done: usize,
    eval_done: usize,
}

impl SessionState {
    fn phase(&self) -> Phase {
        if self.training_done < self.plan.training.len() {
            Phase::Training
        } else if self.eval_done < self.plan.items.len() {
            Phase::Evaluation
        } else {
            Phase::Done
        }
    }

    fn training_id(i: usize) -> String {
        format!("t{i}")
    }

    fn eval_id(i: usize) -> String {
        format!("e{i}")
    }

    fn client_item(id: String, image: &PoolImage) -> ClientItem {
        ClientItem {
            item_id: id,
            image_url: image_url(&image.image_hash),
            question: question(&image.object),
        }
    }

    fn view(&self) -> SessionView {
        let total = self.plan.training.len() + self.plan.items.len();
        let phase = self.phase();
        let item = match phase {
            Phase::Training => Some(Self::client_item(
                Self::training_id(self.training_done),
                &self.plan.training[self.training_done].image,
            )),
            Phase::Evaluation => Some(Self::client_item(
                Self::eval_id(self.eval_done),
                &self.plan.items[self.eval_done].image,
            )),
            Phase::Done => None,
        };
        SessionView {
            session_id: self.id.clone(),
            phase,
            item,
            progress: Progress {
                done: self.training_done + self.eval_done,
                total,
            },
        }
    }
}

fn parse_item_id(id: &str) -> Option<(Phase, usize)> {
    let (phase, rest) = match id.split_at_checked(1)? {
        ("t", r) => (Phase::Training, r),
        ("e", r) => (Phase::Evaluation, r),
        _ => return None,
    };
    Some((phase, rest.parse().ok()?))
}

/// Builds each annotator's plan on demand from shared pools.
pub struct AnnotationService {
    pools: GroupPools,
    training: Vec<TrainingExample>,
    spec: SessionSpec,
    seed: u64,
    ledger: VoteLedger,
    control_floor: f64,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<SessionState>>>>,
}

impl AnnotationService {
    pub fn new(
        pools: GroupPools,
        training: Vec<TrainingExample>,
        spec: SessionSpec,
        seed: u64,
        ledger: VoteLedger,
    ) -> Self {
        Self {
            pools,
            training,
            spec,
            seed,
            ledger,
            control_floor: crate::eval::votes::DEFAULT_CONTROL_FLOOR,
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_control_floor(mut self, floor: f64) -> Self {
        self.control_floor = floor;
        self
    }

    pub fn session_id(&self, annotator: &str) -> String {
        let h = seed::sha256_hex(format!("{}\u{0}{annotator}", self.seed).as_bytes());
        h[..16].to_string()
    }

    pub fn plan_for(&self, annotator: &str) -> SessionPlan {
        let s = seed::sample_seed(self.seed, annotator, "annotation-session");
        build_session(&self.pools, &self.training, &self.spec, s)
    }

    /// Starts or resumes the annotator's session. Items already in the
    /// ledger count as done, so a restarted service resumes in place.
    pub fn start(&self, annotator: &str) -> Result<SessionStarted, ServiceError> {
        let annotator = annotator.trim();
        if annotator.is_empty() || annotator.len() > 128 {
            return Err(ServiceError::BadRequest("annotator id must be 1..=128 characters".into()));
        }
        let id = self.session_id(annotator);
        let state = {
            let mut sessions = self.sessions.lock().expect("session map lock");
            sessions
                .entry(id.clone())
                .or_insert_with(|| {
                    let plan = self.plan_for(annotator);
                    let eval_done = plan
                        .items
                        .iter()
                        .take_while(|i| self.ledger.has_vote(annotator, &i.image.image_hash))
                        .count();
                    let training_done = if eval_done > 0 { plan.training.len() } else { 0 };
                    Arc::new(Mutex::new(SessionState {
                        id: id.clone(),
                        annotator: annotator.to_string(),
                        plan,
                        training_done,
                        eval_done,
                    }))
                })
                .clone()
        };
        let s = state.lock().expect("session lock");
        let training = s
            .plan
            .training
            .iter()
            .enumerate()
            .map(|(i, t)| TrainingItemView {
                item: SessionState::client_item(SessionState::training_id(i), &t.image),
                answer: if t.label { Vote::Yes } else { Vote::No },
            })
            .collect();
        Ok(SessionStarted {
            session_id: id,
            training,
            view: s.view(),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id}")))
    }

    pub fn next(&self, id: &str) -> Result<SessionView, ServiceError> {
        let s = self.session(id)?;
        let view = s.lock().expect("session lock").view();
        Ok(view)
    }

    pub fn vote(&self, id: &str, item_id: &str, vote: Vote) -> Result<VoteAck, ServiceError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session lock");
        let (phase, index) =
            parse_item_id(item_id).ok_or_else(|| ServiceError::BadRequest(format!("bad item id {item_id:?}")))?;
        let current = s.phase();
        match phase {
            Phase::Training => {
                if index < s.training_done {
                    return Err(ServiceError::Conflict(format!("item {item_id} already answered")));
                }
                if index >= s.plan.training.len() || index != s.training_done {
                    return Err(ServiceError::BadRequest(format!("item {item_id} is not current")));
                }
                let correct = s.plan.training[index].label == vote.is_yes();
                s.training_done += 1;
                Ok(VoteAck {
                    correct: Some(correct),
                    view: s.view(),
                })
            }
            Phase::Evaluation => {
                if current == Phase::Training {
                    return Err(ServiceError::Forbidden("finish the training items first".into()));
                }
                if index < s.eval_done {
                    return Err(ServiceError::Conflict(format!("item {item_id} already answered")));
                }
                if index >= s.plan.items.len() || index != s.eval_done {
                    return Err(ServiceError::BadRequest(format!("item {item_id} is not current")));
                }
                let item = &s.plan.items[index];
                let record = VoteRecord {
                    annotator: s.annotator.clone(),
                    image_id: item.image.image_hash.clone(),
                    class: item.image.object.clone(),
                    group: item.group,
                    vote,
                    timestamp: chrono::Utc::now().to_rfc3339(),
                };
                match self.ledger.append(&record)? {
                    Appended::Written => {}
                    Appended::Duplicate => {
                        return Err(ServiceError::Conflict(format!(
                            "{} already voted on this image",
                            s.annotator
                        )));
                    }
                }
                s.eval_done += 1;
                Ok(VoteAck {
                    correct: None,
                    view: s.view(),
                })
            }
            Phase::Done => unreachable!("item ids parse to training or evaluation"),
        }
    }

    pub fn aggregate(&self) -> Result<VoteAggregate, ServiceError> {
        Ok(aggregate_votes(&self.ledger.records()?, self.control_floor))
    }

    /// Every image hash a session may reference.
    pub fn knows_image(&self, hash: &str) -> bool {
        let in_pool = |v: &[PoolImage]| v.iter().any(|p| p.image_hash == hash);
        in_pool(&self.pools.control)
            || in_pool(&self.pools.ghost_a)
            || in_pool(&self.pools.ghost_b)
            || self.training.iter().any(|t| t.image.image_hash == hash)
    }
}
