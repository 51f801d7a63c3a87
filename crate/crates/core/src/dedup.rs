//! Stage 3 of the funnel and the committed subject registry.
//!
//! [`DedupIndex`] keeps the committed key set, the embedding index, the
//! canon queue and the list of dequeued subjects behind one lock. A commit
//! updates all of them in one critical section, so no observer can see a
//! key registered without its subject queued, or the reverse.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::gateway::{Gateway, GenerationRequest};
use crate::prompts::{PromptError, PromptStage, TemplateSet};
use crate::types::{CandidateEntity, RejectionReason, Subject, SubjectStatus};

/// An entity whose key is registered. Serialized as one line of
/// `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommittedEntity {
    pub canonical_key: String,
    pub display_name: String,
    pub vector: Vec<f64>,
    pub wave: u32,
    pub hop: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommitResult {
    Committed,
    AlreadyPresent,
}

#[derive(Debug, Default)]
struct State {
    keys: HashSet<String>,
    entries: Vec<CommittedEntity>,
    /// Every committed subject in commit order, with its current status.
    subjects: Vec<Subject>,
    position: HashMap<String, usize>,
    queue: VecDeque<String>,
}

#[derive(Debug, Default)]
pub struct DedupIndex {
    state: RwLock<State>,
}

impl DedupIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds an index from persisted parts. Fails if they disagree.
    pub fn restore(
        entries: Vec<CommittedEntity>,
        subjects: Vec<Subject>,
        queue: Vec<String>,
    ) -> Result<Self, String> {
        let mut state = State::default();
        for e in &entries {
            if !state.keys.insert(e.canonical_key.clone()) {
                return Err(format!("index lists {:?} twice", e.canonical_key));
            }
        }
        for (i, s) in subjects.iter().enumerate() {
            if state.position.insert(s.canonical_key.clone(), i).is_some() {
                return Err(format!("subject {:?} listed twice", s.canonical_key));
            }
            if !state.keys.contains(&s.canonical_key) {
                return Err(format!("subject {:?} has no index entry", s.canonical_key));
            }
        }
        if state.position.len() != state.keys.len() {
            return Err("index and subject list differ".into());
        }
        for key in &queue {
            match state.position.get(key) {
                Some(&i) if subjects[i].status == SubjectStatus::Queued => {}
                _ => return Err(format!("queued key {key:?} is not a queued subject")),
            }
        }
        let queued = subjects.iter().filter(|s| s.status == SubjectStatus::Queued).count();
        if queued != queue.len() {
            return Err("queue does not match subject statuses".into());
        }
        state.entries = entries;
        state.subjects = subjects;
        state.queue = queue.into();
        Ok(DedupIndex { state: RwLock::new(state) })
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.state.read().keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.state.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The committed entity with the highest cosine to `vector`, by exact
    /// scan. Ties go to the earliest commit.
    pub fn nearest(&self, vector: &[f64]) -> Option<(String, String, f64)> {
        let state = self.state.read();
        nearest_in(&state.entries, vector).map(|(i, cos)| {
            let e = &state.entries[i];
            (e.canonical_key.clone(), e.display_name.clone(), cos)
        })
    }

    /// Registers `subject` and its vector and enqueues it, unless its key
    /// is already registered.
    pub fn commit(&self, subject: Subject, vector: Vec<f64>, wave: u32) -> CommitResult {
        let mut state = self.state.write();
        if !state.keys.insert(subject.canonical_key.clone()) {
            return CommitResult::AlreadyPresent;
        }
        state.entries.push(CommittedEntity {
            canonical_key: subject.canonical_key.clone(),
            display_name: subject.name.clone(),
            vector,
            wave,
            hop: subject.hop,
        });
        let idx = state.subjects.len();
        state.position.insert(subject.canonical_key.clone(), idx);
        state.queue.push_back(subject.canonical_key.clone());
        state.subjects.push(Subject { status: SubjectStatus::Queued, ..subject });
        CommitResult::Committed
    }

    /// Removes up to `n` subjects from the front of the queue.
    pub fn dequeue(&self, n: usize) -> Vec<Subject> {
        let mut state = self.state.write();
        let take = n.min(state.queue.len());
        let keys: Vec<String> = state.queue.drain(..take).collect();
        keys.iter()
            .map(|k| {
                let i = state.position[k];
                state.subjects[i].status = SubjectStatus::Generated;
                state.subjects[i].clone()
            })
            .collect()
    }

    pub fn set_status(&self, key: &str, status: SubjectStatus) {
        let mut state = self.state.write();
        if let Some(&i) = state.position.get(key) {
            state.subjects[i].status = status;
        }
    }

    pub fn queue_len(&self) -> usize {
        self.state.read().queue.len()
    }

    /// Queued subjects, front first.
    pub fn queued(&self) -> Vec<Subject> {
        let state = self.state.read();
        state.queue.iter().map(|k| state.subjects[state.position[k]].clone()).collect()
    }

    /// All committed subjects in commit order.
    pub fn subjects(&self) -> Vec<Subject> {
        self.state.read().subjects.clone()
    }

    pub fn entries(&self) -> Vec<CommittedEntity> {
        self.state.read().entries.clone()
    }

    /// Entries committed at or after position `from`.
    pub fn entries_from(&self, from: usize) -> Vec<CommittedEntity> {
        self.state.read().entries[from..].to_vec()
    }

    /// Checks, under the lock, that queued plus dequeued subjects carry
    /// pairwise distinct keys that match the registered key set.
    pub fn audit(&self) -> Result<(), String> {
        let state = self.state.read();
        let mut seen = HashSet::new();
        for s in &state.subjects {
            if !seen.insert(s.canonical_key.as_str()) {
                return Err(format!("duplicate subject key {:?}", s.canonical_key));
            }
        }
        let mut queued = HashSet::new();
        for k in &state.queue {
            if !queued.insert(k.as_str()) {
                return Err(format!("key {k:?} queued twice"));
            }
        }
        if seen.len() != state.keys.len() || !state.keys.iter().all(|k| seen.contains(k.as_str())) {
            return Err("registered keys and subjects differ".into());
        }
        Ok(())
    }
}

/// Index and cosine of the best match by linear scan.
pub fn nearest_in(entries: &[CommittedEntity], vector: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        let cos: f64 = e.vector.iter().zip(vector).map(|(a, b)| a * b).sum();
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((i, cos));
        }
    }
    best
}

/// Collapses candidates of one wave that share a canonical key. The
/// survivor is the proposal whose parent has the lowest hop, then the
/// lexicographically smallest parent name; the rest are rejected with
/// `duplicate_canonical`. Survivors keep their input order.
pub fn within_wave_dedup(candidates: Vec<CandidateEntity>) -> (Vec<CandidateEntity>, Vec<CandidateEntity>) {
    let mut winner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        let slot = winner.entry(c.canonical_key.as_str()).or_insert(i);
        let cur = &candidates[*slot];
        let rank = |c: &CandidateEntity| (c.parent_hop, c.parent_subject.clone(), c.phrase.clone());
        if rank(c) < rank(cur) {
            *slot = i;
        }
    }
    let keep: HashSet<usize> = winner.into_values().collect();
    let mut survivors = Vec::new();
    let mut rejected = Vec::new();
    for (i, mut c) in candidates.into_iter().enumerate() {
        if keep.contains(&i) {
            survivors.push(c);
        } else {
            c.reject(RejectionReason::DuplicateCanonical).expect("candidate is live");
            rejected.push(c);
        }
    }
    (survivors, rejected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arbitration {
    Same,
    Distinct,
    /// No usable answer; the caller rejects the candidate.
    Failed,
}

#[derive(Deserialize)]
struct ArbitrationReply {
    decision: String,
}

pub fn parse_arbitration(text: &str) -> Arbitration {
    match serde_json::from_str::<ArbitrationReply>(text.trim()) {
        Ok(r) if r.decision.eq_ignore_ascii_case("same") => Arbitration::Same,
        Ok(r) if r.decision.eq_ignore_ascii_case("distinct") => Arbitration::Distinct,
        _ => Arbitration::Failed,
    }
}

/// Asks the backend whether `candidate` names the same entity as
/// `existing_name`, showing it an excerpt of the proposing article.
#[allow(clippy::too_many_arguments)]
pub fn arbitrate(
    gateway: &Gateway,
    templates: &TemplateSet,
    config: &RunConfig,
    parent: &Subject,
    candidate: &CandidateEntity,
    existing_name: &str,
    parent_excerpt: &str,
) -> Result<Arbitration, PromptError> {
    let context = BTreeMap::from([
        ("candidate_name".to_string(), candidate.phrase.clone()),
        ("existing_name".to_string(), existing_name.to_string()),
        ("parent_excerpt".to_string(), parent_excerpt.to_string()),
    ]);
    let bundle = templates.render(PromptStage::Arbitration, config, parent, &context)?;
    let request = GenerationRequest::new(bundle, config.max_tokens, format!("arbitrate:{}", candidate.canonical_key));
    let result = gateway.complete(&request);
    Ok(match result.ok_text() {
        Some(text) => parse_arbitration(text),
        None => Arbitration::Failed,
    })
}

/// The first `max_chars` characters of `text`.
pub fn excerpt(text: &str, max_chars: usize) -> String {
    text.chars().take(max_chars).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{Fault, FaultStage, GraphWorld, MockBackend};
    use crate::gateway::RetryPolicy;
    use crate::types::CandidateStage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn proposal(name: &str, parent: &str, hop: u32) -> CandidateEntity {
        let mut parent = Subject::seed(parent).unwrap();
        parent.hop = hop;
        let mut c = CandidateEntity::raw(name, &parent, None);
        c.advance(CandidateStage::CanonSurvivor).unwrap();
        c.advance(CandidateStage::NerSurvivor).unwrap();
        c
    }

    #[test]
    fn three_parents_one_survivor() {
        let input = vec![
            proposal("Niels Bohr", "Copenhagen", 1),
            proposal("Niels Bohr", "Atomic Model", 1),
            proposal("Niels Bohr", "Nobel Prize", 1),
        ];
        let (survivors, rejected) = within_wave_dedup(input);
        assert_eq!(survivors.len(), 1);
        assert_eq!(survivors[0].parent_subject, "Atomic Model");
        assert_eq!(rejected.len(), 2);
        assert!(rejected.iter().all(|c| c.rejection_reason == Some(RejectionReason::DuplicateCanonical)));
    }

    #[test]
    fn min_hop_parent_wins_in_either_order() {
        let a = proposal("Niels Bohr", "Zeta", 2);
        let b = proposal("niels bohr", "Alpha", 3);
        let (s1, _) = within_wave_dedup(vec![a.clone(), b.clone()]);
        let (s2, _) = within_wave_dedup(vec![b, a]);
        assert_eq!(s1, s2);
        assert_eq!(s1[0].parent_subject, "Zeta");
    }

    #[test]
    fn distinct_keys_pass_unchanged() {
        let input = vec![proposal("A", "P", 1), proposal("B", "P", 1), proposal("C", "Q", 1)];
        let (s, r) = within_wave_dedup(input.clone());
        assert_eq!(s, input);
        assert!(r.is_empty());
    }

    fn random_unit(rng: &mut ChaCha20Rng, dims: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let index = DedupIndex::new();
        assert!(index.nearest(&[1.0, 0.0]).is_none());
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut vectors = Vec::new();
        for i in 0..100 {
            let v = random_unit(&mut rng, 16);
            let s = Subject::seed(&format!("Entity {i}")).unwrap();
            index.commit(s, v.clone(), 0);
            vectors.push(v);
        }
        for _ in 0..50 {
            let q = random_unit(&mut rng, 16);
            let mut best = (0, f64::NEG_INFINITY);
            for (i, v) in vectors.iter().enumerate() {
                let c: f64 = v.iter().zip(&q).map(|(a, b)| a * b).sum();
                if c > best.1 {
                    best = (i, c);
                }
            }
            let (key, _, cos) = index.nearest(&q).unwrap();
            assert_eq!(key, format!("entity {}", best.0));
            assert_eq!(cos, best.1);
        }
        let (_, _, self_cos) = index.nearest(&vectors[7]).unwrap();
        assert!((self_cos - 1.0).abs() < 1e-9);
    }

    #[test]
    fn concurrent_commits_of_one_key() {
        for _ in 0..50 {
            let index = Arc::new(DedupIndex::new());
            let results: Vec<CommitResult> = (0..2)
                .map(|_| {
                    let index = index.clone();
                    std::thread::spawn(move || index.commit(Subject::seed("Niels Bohr").unwrap(), vec![1.0], 1))
                })
                .collect::<Vec<_>>()
                .into_iter()
                .map(|h| h.join().unwrap())
                .collect();
            assert_eq!(results.iter().filter(|r| **r == CommitResult::Committed).count(), 1);
            assert_eq!(index.queue_len(), 1);
        }
    }

    #[test]
    fn audit_holds_under_concurrent_commit_and_dequeue() {
        let index = Arc::new(DedupIndex::new());
        let stop = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let auditor = {
            let (index, stop) = (index.clone(), stop.clone());
            std::thread::spawn(move || {
                let mut checks = 0;
                while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                    index.audit().unwrap();
                    checks += 1;
                }
                checks
            })
        };
        let writers: Vec<_> = (0..8)
            .map(|w| {
                let index = index.clone();
                std::thread::spawn(move || {
                    for i in 0..300 {
                        let name = format!("Entity {}", (i * 7 + w) % 400);
                        index.commit(Subject::seed(&name).unwrap(), vec![1.0], 0);
                        if i % 5 == 0 {
                            index.dequeue(2);
                        }
                    }
                })
            })
            .collect();
        for w in writers {
            w.join().unwrap();
        }
        stop.store(true, std::sync::atomic::Ordering::Relaxed);
        assert!(auditor.join().unwrap() > 0);
        index.audit().unwrap();
        assert_eq!(index.len(), 400);
    }

    #[test]
    fn restore_round_trip_and_corruption() {
        let index = DedupIndex::new();
        for name in ["A", "B", "C"] {
            index.commit(Subject::seed(name).unwrap(), vec![1.0], 0);
        }
        index.dequeue(1);
        let queue: Vec<String> = index.queued().into_iter().map(|s| s.canonical_key).collect();
        let restored = DedupIndex::restore(index.entries(), index.subjects(), queue.clone()).unwrap();
        assert_eq!(restored.subjects(), index.subjects());
        assert_eq!(restored.queued(), index.queued());
        let mut bad = index.entries();
        bad.push(bad[0].clone());
        assert!(DedupIndex::restore(bad, index.subjects(), queue).is_err());
    }

    #[test]
    fn arbitration_outcomes() {
        let config = RunConfig::general("Europe");
        let parent = Subject::seed("Europe").unwrap();
        let cand = proposal("Deutschland", "Europe", 0);
        let templates = TemplateSet::builtin();
        let g = Gateway::new(Arc::new(MockBackend::new(GraphWorld::new(), 0)), RetryPolicy::immediate(1), 2);
        assert_eq!(arbitrate(&g, &templates, &config, &parent, &cand, "Germany", "...").unwrap(), Arbitration::Same);
        assert_eq!(arbitrate(&g, &templates, &config, &parent, &cand, "France", "...").unwrap(), Arbitration::Distinct);

        let failing = MockBackend::new(GraphWorld::new(), 0).with_fault(
            FaultStage::Prompt(PromptStage::Arbitration),
            "Deutschland",
            Fault::AlwaysTransient,
        );
        let g = Gateway::new(Arc::new(failing), RetryPolicy::immediate(1), 2);
        assert_eq!(arbitrate(&g, &templates, &config, &parent, &cand, "Germany", "...").unwrap(), Arbitration::Failed);
        assert_eq!(parse_arbitration("maybe"), Arbitration::Failed);
    }

    #[test]
    fn index_line_round_trips() {
        let e = CommittedEntity { canonical_key: "k".into(), display_name: "K".into(), vector: vec![0.1, -0.123456789012345], wave: 2, hop: 3 };
        let line = serde_json::to_string(&e).unwrap();
        assert_eq!(serde_json::from_str::<CommittedEntity>(&line).unwrap(), e);
    }
}
