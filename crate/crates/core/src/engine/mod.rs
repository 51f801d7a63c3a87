//! Breadth-first materialization.
//!
//! A run proceeds in waves. Wave `t` takes every queued subject (all at
//! hop `t`), generates its article and pushes the article's links through
//! Stage 1 and Stage 2. Once every subject of the wave has been through
//! NER, a single committer runs Stage 3 over the wave's survivors in a
//! fixed order and commits new subjects for wave `t + 1`. The committer
//! order never depends on worker timing, so a run is reproducible under
//! any worker count and in both execution modes.

pub mod store;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::canonicalize;
use crate::config::{validate_config, ConfigError, ExecutionMode, RunConfig, Strategy};
use crate::dedup::{self, Arbitration, CommitResult, DedupIndex};
use crate::gateway::{BackendResult, FactSheet, Gateway, GenerationRequest};
use crate::prompts::{outline_block, PromptBundle, PromptError, PromptStage, TemplateSet};
use crate::sanitizer::{self, LoopVerdict, NerError, NerVerdict};
use crate::types::{
    Article, CandidateEntity, CandidateStage, FunnelCounts, FunnelRecorder, FunnelStats, RejectionReason, Subject,
    SubjectStatus,
};
use crate::wikitext;

use store::{Checkpoint, RunMetadata, RunState, RunStore};

/// A candidate with its (subject index, link position) tag.
type Tagged = ((usize, usize), CandidateEntity);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot embed the seed subject: {0}")]
    SeedEmbedding(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("run directory {0} already holds a run")]
    RunExists(String),
    #[error("run directory is not consistent: {0}")]
    Corrupt(String),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("duplicate-free invariant violated: {0}")]
    Invariant(String),
}

/// Summary returned by [`Engine::run`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub waves_completed: u32,
    pub generated_articles: u64,
    pub failed_subjects: u64,
    pub queued_subjects: u64,
    pub committed_subjects: u64,
    pub completed: bool,
    pub funnel: FunnelStats,
    pub run_dir: Option<PathBuf>,
}

/// What one subject produced during a wave.
#[derive(Debug, Default)]
struct SubjectOutput {
    article: Option<Article>,
    /// Candidates that ended before Stage 3, keyed by link position.
    finished: Vec<(usize, CandidateEntity)>,
    /// NER survivors, keyed by link position.
    survivors: Vec<(usize, CandidateEntity)>,
}

/// Stage 1/2 work prepared for one subject, before the NER calls.
struct Prepared {
    output: SubjectOutput,
    batches: Vec<Vec<(usize, CandidateEntity)>>,
}

pub struct Engine {
    config: RunConfig,
    gateway: Arc<Gateway>,
    templates: Arc<TemplateSet>,
    index: Arc<DedupIndex>,
    funnel: Arc<FunnelRecorder>,
    store: Option<RunStore>,
    state: RunState,
    audit: bool,
    articles: Vec<Article>,
    candidates: Vec<CandidateEntity>,
    index_persisted: usize,
}

impl Engine {
    /// An engine that keeps everything in memory.
    pub fn new(config: RunConfig, gateway: Arc<Gateway>, templates: Arc<TemplateSet>) -> Result<Self, EngineError> {
        let config = validate_config(config)?;
        let state = RunState {
            sequence: 0,
            next_wave: 0,
            dequeued: 0,
            generated: 0,
            failed: 0,
            completed: false,
            config_checksum: config.checksum(),
            offsets: BTreeMap::new(),
        };
        let mut engine = Engine {
            config,
            gateway,
            templates,
            index: Arc::new(DedupIndex::new()),
            funnel: Arc::new(FunnelRecorder::new()),
            store: None,
            state,
            audit: false,
            articles: Vec::new(),
            candidates: Vec::new(),
            index_persisted: 0,
        };
        engine.seed()?;
        Ok(engine)
    }

    /// An engine that persists to `dir`, which must not hold a run yet.
    pub fn create(
        config: RunConfig,
        gateway: Arc<Gateway>,
        templates: Arc<TemplateSet>,
        dir: &Path,
    ) -> Result<Self, EngineError> {
        let mut engine = Self::new(config, gateway, templates)?;
        let metadata = RunMetadata {
            config: engine.config.clone(),
            config_checksum: engine.config.checksum(),
            template_checksum: engine.templates.checksum(),
            template_files: engine.templates.file_checksums().clone(),
            backend: engine.gateway.backend().name().to_string(),
        };
        engine.store = Some(RunStore::create(dir, &metadata)?);
        engine.checkpoint()?;
        Ok(engine)
    }

    /// Reopens a persisted run. The template set must match the one the
    /// run started with.
    pub fn resume(dir: &Path, gateway: Arc<Gateway>, templates: Arc<TemplateSet>) -> Result<Self, EngineError> {
        let store = RunStore::open(dir)?;
        let loaded = store.load()?;
        if loaded.metadata.template_checksum != templates.checksum() {
            return Err(EngineError::ChecksumMismatch("prompt templates differ from the original run".into()));
        }
        let config = loaded.metadata.config;
        let queue_keys: Vec<String> = loaded.queue.iter().map(|s| s.canonical_key.clone()).collect();
        let index_len = loaded.index.len();
        let index = DedupIndex::restore(loaded.index, loaded.subjects, queue_keys).map_err(EngineError::Corrupt)?;
        if index.queued() != loaded.queue {
            return Err(EngineError::Corrupt("queue entries differ from subject records".into()));
        }
        Ok(Engine {
            config,
            gateway,
            templates,
            index: Arc::new(index),
            funnel: Arc::new(FunnelRecorder::from_stats(loaded.funnel)),
            store: Some(store),
            state: loaded.state,
            audit: false,
            articles: Vec::new(),
            candidates: Vec::new(),
            index_persisted: index_len,
        })
    }

    /// Checks the duplicate-free invariant after every commit.
    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn index(&self) -> Arc<DedupIndex> {
        self.index.clone()
    }

    pub fn funnel(&self) -> Arc<FunnelRecorder> {
        self.funnel.clone()
    }

    pub fn funnel_snapshot(&self) -> FunnelStats {
        self.funnel.snapshot()
    }

    /// Articles generated by this engine instance, in generation order.
    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    /// Final state of every candidate seen by this engine instance.
    pub fn candidates(&self) -> &[CandidateEntity] {
        &self.candidates
    }

    pub fn run_dir(&self) -> Option<&Path> {
        self.store.as_ref().map(RunStore::dir)
    }

    fn seed(&mut self) -> Result<(), EngineError> {
        let seed = Subject::seed(&self.config.seed_subject).map_err(|_| ConfigError::EmptySeed)?;
        let vector = self
            .gateway
            .embed(std::slice::from_ref(&seed.name))
            .map_err(|e| EngineError::SeedEmbedding(e.to_string()))?
            .remove(0);
        self.index.commit(seed, vector, 0);
        Ok(())
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<RunReport, EngineError> {
        self.run_waves(None)
    }

    /// Runs at most `limit` waves, checkpointing after each.
    pub fn run_waves(&mut self, limit: Option<u32>) -> Result<RunReport, EngineError> {
        let mut done = 0;
        while !self.state.completed && limit.is_none_or(|l| done < l) {
            self.step()?;
            done += 1;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            waves_completed: self.state.next_wave,
            generated_articles: self.state.generated,
            failed_subjects: self.state.failed,
            queued_subjects: self.index.queue_len() as u64,
            committed_subjects: self.index.len() as u64,
            completed: self.state.completed,
            funnel: self.funnel.snapshot(),
            run_dir: self.run_dir().map(Path::to_path_buf),
        }
    }

    fn budget_left(&self) -> u64 {
        match self.config.article_budget {
            Some(b) => b.saturating_sub(self.state.dequeued),
            None => u64::MAX,
        }
    }

    fn budget_reached(&self) -> bool {
        self.budget_left() == 0
    }

    /// Processes one wave, or marks the run complete.
    fn step(&mut self) -> Result<(), EngineError> {
        let take = self.budget_left().min(self.index.queue_len() as u64) as usize;
        if take == 0 {
            self.state.completed = true;
            return self.checkpoint();
        }
        let wave = self.state.next_wave;
        let subjects = self.index.dequeue(take);
        self.state.dequeued += subjects.len() as u64;
        log::info!("wave {wave}: {} subjects", subjects.len());

        let outputs = match self.config.execution_mode {
            ExecutionMode::Online => self.online_wave(&subjects),
            ExecutionMode::Batch => self.batch_wave(&subjects),
        };

        let mut finished: BTreeMap<(usize, usize), CandidateEntity> = BTreeMap::new();
        let mut survivors: Vec<Tagged> = Vec::new();
        let mut wave_articles = Vec::new();
        for (i, (subject, out)) in subjects.iter().zip(outputs).enumerate() {
            match out.article {
                Some(article) => {
                    self.state.generated += 1;
                    wave_articles.push(article);
                }
                None => {
                    self.state.failed += 1;
                    self.index.set_status(&subject.canonical_key, SubjectStatus::Failed);
                }
            }
            finished.extend(out.finished.into_iter().map(|(p, c)| ((i, p), c)));
            survivors.extend(out.survivors.into_iter().map(|(p, c)| ((i, p), c)));
        }
        survivors.sort_by_key(|(id, _)| *id);
        let plain: Vec<String> = wave_articles.iter().map(|a| wikitext::strip_markup(&a.wikitext)).collect();
        let excerpt_of = |name: &str| -> String {
            wave_articles
                .iter()
                .zip(&plain)
                .find(|(a, _)| a.subject.name == name)
                .map(|(_, p)| dedup::excerpt(p, self.config.arbitration_excerpt_chars as usize))
                .unwrap_or_default()
        };

        let committed_before = self.index.len();
        let results = self.commit_phase(wave, &subjects, survivors, &excerpt_of)?;
        finished.extend(results);

        self.state.next_wave += 1;
        if self.index.queue_len() == 0 || self.budget_reached() {
            self.state.completed = true;
        }
        let wave_candidates: Vec<CandidateEntity> = finished.into_values().collect();
        self.candidates.extend(wave_candidates.iter().cloned());
        self.persist(&wave_articles, &wave_candidates)?;
        self.articles.extend(wave_articles);
        log::info!(
            "wave {wave} done: {} new subjects, funnel {:?}",
            self.index.len() - committed_before,
            self.funnel.snapshot().totals
        );
        Ok(())
    }

    fn checkpoint(&mut self) -> Result<(), EngineError> {
        self.persist(&[], &[])
    }

    fn persist(&mut self, articles: &[Article], candidates: &[CandidateEntity]) -> Result<(), EngineError> {
        let new_index = self.index.entries_from(self.index_persisted);
        self.index_persisted += new_index.len();
        let Some(store) = &self.store else { return Ok(()) };
        let subjects = self.index.subjects();
        let queue = self.index.queued();
        let funnel = self.funnel.snapshot();
        self.state = store.checkpoint(&Checkpoint {
            state: &self.state,
            subjects: &subjects,
            queue: &queue,
            funnel: &funnel,
            new_articles: articles,
            new_candidates: candidates,
            new_index: &new_index,
        })?;
        Ok(())
    }

    fn render(
        &self,
        stage: PromptStage,
        subject: &Subject,
        context: BTreeMap<String, String>,
    ) -> Result<PromptBundle, PromptError> {
        self.templates.render(stage, &self.config, subject, &context)
    }

    fn request(&self, bundle: PromptBundle, tag: String) -> GenerationRequest {
        GenerationRequest::new(bundle, self.config.max_tokens, tag)
    }

    fn grounding_request(&self, subject: &Subject) -> Option<GenerationRequest> {
        if !self.config.self_grounding {
            return None;
        }
        match self.render(PromptStage::SelfGrounding, subject, BTreeMap::new()) {
            Ok(b) => Some(self.request(b, format!("ground:{}", subject.canonical_key))),
            Err(e) => {
                log::warn!("no fact sheet for {}: {e}", subject.name);
                None
            }
        }
    }

    fn read_grounding(&self, subject: &Subject, result: Option<BackendResult>) -> Option<FactSheet> {
        let result = result?;
        let parsed = match result.ok_text() {
            Some(text) => crate::gateway::parse_fact_sheet(text, self.config.confidence_threshold()),
            None => Err(crate::gateway::GroundingError::Backend(result.last_error.unwrap_or_default())),
        };
        match parsed {
            Ok(sheet) => Some(sheet),
            Err(e) => {
                log::warn!("continuing without a fact sheet for {}: {e}", subject.name);
                None
            }
        }
    }

    fn outline_request(&self, subject: &Subject) -> Option<GenerationRequest> {
        match self.render(PromptStage::Outline, subject, BTreeMap::new()) {
            Ok(b) => Some(self.request(b, format!("outline:{}", subject.canonical_key))),
            Err(e) => {
                log::warn!("cannot render outline prompt for {}: {e}", subject.name);
                None
            }
        }
    }

    fn read_outline(&self, subject: &Subject, result: &BackendResult) -> Option<Vec<String>> {
        let parsed = result.ok_text().and_then(parse_outline);
        if parsed.is_none() {
            log::warn!("subject {} failed: no usable outline", subject.name);
        }
        parsed
    }

    fn elicitation_request(
        &self,
        subject: &Subject,
        outline: &[String],
        sheet: Option<&FactSheet>,
    ) -> Option<GenerationRequest> {
        let context = BTreeMap::from([("outline_block".to_string(), outline_block(outline))]);
        match self.render(PromptStage::Elicitation, subject, context) {
            Ok(mut b) => {
                if let Some(sheet) = sheet {
                    b.user_text.push_str("\n\n");
                    b.user_text.push_str(&sheet.render_block());
                }
                Some(self.request(b, format!("elicit:{}", subject.canonical_key)))
            }
            Err(e) => {
                log::warn!("cannot render elicitation prompt for {}: {e}", subject.name);
                None
            }
        }
    }

    fn read_article(&self, subject: &Subject, outline: Vec<String>, result: &BackendResult) -> Option<Article> {
        match result.ok_text() {
            Some(text) if !text.trim().is_empty() => {
                let article = Article::from_wikitext(subject.clone(), outline, text.to_string(), self.config.strategy);
                if !wikitext::outline_conformance(&article) {
                    log::debug!("article for {} does not follow its outline", subject.name);
                }
                Some(article)
            }
            _ => {
                log::warn!("subject {} failed: elicitation {:?}", subject.name, result.outcome);
                None
            }
        }
    }

    /// Stage 1, loop filter and confidence gate for one article.
    fn prepare(&self, subject: &Subject, article: Option<Article>) -> Prepared {
        let Some(article) = article else {
            return Prepared { output: SubjectOutput::default(), batches: Vec::new() };
        };
        let mut counts = FunnelCounts { generated_articles: 1, ..Default::default() };
        let mut finished = Vec::new();
        let mut live = Vec::new();
        let mut seen = HashSet::new();
        for (pos, link) in article.wikilinks.iter().enumerate() {
            let phrase = link.target.split_whitespace().collect::<Vec<_>>().join(" ");
            let confidence = match self.config.strategy {
                Strategy::Baseline => None,
                Strategy::Calibrated => link.confidence,
            };
            let mut c = CandidateEntity::raw(&phrase, subject, confidence);
            counts.raw_candidates += 1;
            let key = c.canonical_key.clone();
            if key.is_empty() || !seen.insert(key.clone()) || self.index.contains_key(&key) {
                c.reject(RejectionReason::DuplicateCanonical).expect("raw");
                finished.push((pos, c));
                continue;
            }
            c.advance(CandidateStage::CanonSurvivor).expect("raw");
            counts.after_canonical += 1;
            if sanitizer::loop_filter(&c, subject, self.config.root_subject.as_deref()) == LoopVerdict::Reject {
                c.reject(RejectionReason::LoopPattern).expect("live");
                counts.loop_rejections += 1;
                finished.push((pos, c));
                continue;
            }
            live.push((pos, c));
        }
        if self.config.strategy == Strategy::Calibrated {
            let threshold = self.config.confidence_threshold();
            let (passed, rejected): (Vec<_>, Vec<_>) =
                live.into_iter().partition(|(_, c)| c.confidence.is_some_and(|v| v >= threshold));
            for (pos, mut c) in rejected {
                c.reject(RejectionReason::BelowThreshold).expect("live");
                counts.below_threshold_rejections += 1;
                finished.push((pos, c));
            }
            live = passed;
        }
        self.funnel.record(subject.hop, counts);
        let batches = live.chunks(self.config.ner_batch_size as usize).map(<[_]>::to_vec).collect();
        Prepared {
            output: SubjectOutput { article: Some(article), finished, survivors: Vec::new() },
            batches,
        }
    }

    fn ner_request(&self, subject: &Subject, batch: &[(usize, CandidateEntity)]) -> Result<GenerationRequest, PromptError> {
        let members: Vec<CandidateEntity> = batch.iter().map(|(_, c)| c.clone()).collect();
        sanitizer::ner_request(&self.templates, &members, subject, &self.config)
    }

    fn read_ner(
        &self,
        subject: &Subject,
        batch: Vec<(usize, CandidateEntity)>,
        outcome: Result<Vec<NerVerdict>, NerError>,
        output: &mut SubjectOutput,
    ) {
        if let Err(e) = &outcome {
            log::warn!("NER batch for {} rejected: {e}", subject.name);
        }
        let (positions, members): (Vec<usize>, Vec<CandidateEntity>) = batch.into_iter().unzip();
        let judged = sanitizer::apply_ner(members, &outcome, self.config.confidence_threshold());
        let mut passed = 0;
        for (pos, c) in positions.into_iter().zip(judged) {
            if c.is_rejected() {
                output.finished.push((pos, c));
            } else {
                passed += 1;
                output.survivors.push((pos, c));
            }
        }
        self.funnel.record(subject.hop, FunnelCounts { after_ner: passed, ..Default::default() });
    }

    fn run_ner_batch(&self, subject: &Subject, batch: &[(usize, CandidateEntity)]) -> Result<Vec<NerVerdict>, NerError> {
        let request = self.ner_request(subject, batch)?;
        let result = self.gateway.complete(&request);
        ner_outcome(&result, batch, self.config.strategy)
    }

    /// One subject end to end up to the NER calls, used by online workers.
    fn generate(&self, subject: &Subject) -> Option<Article> {
        let sheet = self.grounding_request(subject).map(|r| self.gateway.complete(&r));
        let sheet = self.read_grounding(subject, sheet);
        let request = self.outline_request(subject)?;
        let outline = self.read_outline(subject, &self.gateway.complete(&request))?;
        let request = self.elicitation_request(subject, &outline, sheet.as_ref())?;
        let result = self.gateway.complete(&request);
        self.read_article(subject, outline, &result)
    }

    /// Elicitation and NER worker pools connected by channels. Each subject
    /// flows to NER as soon as its article is parsed.
    fn online_wave(&self, subjects: &[Subject]) -> Vec<SubjectOutput> {
        enum Done {
            Prepared(usize, SubjectOutput),
            Ner(usize, Vec<(usize, CandidateEntity)>, Result<Vec<NerVerdict>, NerError>),
        }
        let (job_tx, job_rx) = crossbeam_channel::unbounded::<usize>();
        for i in 0..subjects.len() {
            job_tx.send(i).expect("receiver alive");
        }
        drop(job_tx);
        let (ner_tx, ner_rx) = crossbeam_channel::unbounded::<(usize, Vec<(usize, CandidateEntity)>)>();
        let (done_tx, done_rx) = crossbeam_channel::unbounded::<Done>();

        let mut outputs: Vec<SubjectOutput> = subjects.iter().map(|_| SubjectOutput::default()).collect();
        let mut ner_results = Vec::new();
        std::thread::scope(|scope| {
            for _ in 0..self.config.elicitation_workers {
                let (job_rx, ner_tx, done_tx) = (job_rx.clone(), ner_tx.clone(), done_tx.clone());
                scope.spawn(move || {
                    for i in job_rx {
                        let article = self.generate(&subjects[i]);
                        let prepared = self.prepare(&subjects[i], article);
                        for batch in prepared.batches {
                            ner_tx.send((i, batch)).expect("NER pool alive");
                        }
                        done_tx.send(Done::Prepared(i, prepared.output)).expect("collector alive");
                    }
                });
            }
            drop(ner_tx);
            for _ in 0..self.config.ner_workers {
                let (ner_rx, done_tx) = (ner_rx.clone(), done_tx.clone());
                scope.spawn(move || {
                    for (i, batch) in ner_rx {
                        let outcome = self.run_ner_batch(&subjects[i], &batch);
                        done_tx.send(Done::Ner(i, batch, outcome)).expect("collector alive");
                    }
                });
            }
            drop(done_tx);
            for done in done_rx {
                match done {
                    Done::Prepared(i, out) => {
                        let slot = &mut outputs[i];
                        slot.article = out.article;
                        slot.finished.extend(out.finished);
                    }
                    Done::Ner(i, batch, outcome) => ner_results.push((i, batch, outcome)),
                }
            }
        });
        for (i, batch, outcome) in ner_results {
            let mut out = std::mem::take(&mut outputs[i]);
            self.read_ner(&subjects[i], batch, outcome, &mut out);
            outputs[i] = out;
        }
        outputs
    }

    /// Each stage runs as one group for the whole wave before the next
    /// stage starts.
    fn batch_wave(&self, subjects: &[Subject]) -> Vec<SubjectOutput> {
        let grounding: Vec<Option<GenerationRequest>> = subjects.iter().map(|s| self.grounding_request(s)).collect();
        let mut grounding_results = self.run_group(&grounding);
        let sheets: Vec<Option<FactSheet>> =
            subjects.iter().zip(grounding_results.iter_mut()).map(|(s, r)| self.read_grounding(s, r.take())).collect();

        let outline_reqs: Vec<Option<GenerationRequest>> = subjects.iter().map(|s| self.outline_request(s)).collect();
        let outline_results = self.run_group(&outline_reqs);
        let outlines: Vec<Option<Vec<String>>> = subjects
            .iter()
            .zip(&outline_results)
            .map(|(s, r)| r.as_ref().and_then(|r| self.read_outline(s, r)))
            .collect();

        let article_reqs: Vec<Option<GenerationRequest>> = subjects
            .iter()
            .zip(&outlines)
            .zip(&sheets)
            .map(|((s, o), sheet)| o.as_ref().and_then(|o| self.elicitation_request(s, o, sheet.as_ref())))
            .collect();
        let article_results = self.run_group(&article_reqs);

        let mut outputs = Vec::with_capacity(subjects.len());
        let mut jobs = Vec::new();
        for (i, ((subject, outline), result)) in subjects.iter().zip(outlines).zip(article_results).enumerate() {
            let article = match (outline, result) {
                (Some(outline), Some(result)) => self.read_article(subject, outline, &result),
                _ => None,
            };
            let prepared = self.prepare(subject, article);
            jobs.extend(prepared.batches.into_iter().map(|b| (i, b)));
            outputs.push(prepared.output);
        }

        let ner_reqs: Vec<Option<GenerationRequest>> =
            jobs.iter().map(|(i, b)| self.ner_request(&subjects[*i], b).ok()).collect();
        let ner_results = self.run_group(&ner_reqs);
        for ((i, batch), result) in jobs.into_iter().zip(ner_results) {
            let outcome = match result {
                Some(r) => ner_outcome(&r, &batch, self.config.strategy),
                None => Err(NerError::Parse("prompt could not be rendered".into())),
            };
            let mut out = std::mem::take(&mut outputs[i]);
            self.read_ner(&subjects[i], batch, outcome, &mut out);
            outputs[i] = out;
        }
        outputs
    }

    fn run_group(&self, requests: &[Option<GenerationRequest>]) -> Vec<Option<BackendResult>> {
        let present: Vec<GenerationRequest> = requests.iter().flatten().cloned().collect();
        let mut results = self.gateway.complete_all(&present).into_iter();
        requests.iter().map(|r| r.as_ref().map(|_| results.next().expect("one result per request"))).collect()
    }

    /// Stage 3 and commit, serialized, for one wave's NER survivors.
    fn commit_phase(
        &self,
        wave: u32,
        subjects: &[Subject],
        survivors: Vec<Tagged>,
        excerpt_of: &dyn Fn(&str) -> String,
    ) -> Result<Vec<Tagged>, EngineError> {
        let mut finished = Vec::new();
        let (ids, candidates): (Vec<(usize, usize)>, Vec<CandidateEntity>) = survivors.into_iter().unzip();
        let id_of: BTreeMap<(String, String), (usize, usize)> = ids
            .iter()
            .zip(&candidates)
            .map(|(id, c)| ((c.parent_subject.clone(), c.canonical_key.clone()), *id))
            .collect();
        let id = |c: &CandidateEntity| id_of[&(c.parent_subject.clone(), c.canonical_key.clone())];

        let (unique, collapsed) = dedup::within_wave_dedup(candidates);
        finished.extend(collapsed.into_iter().map(|c| (id(&c), c)));
        if unique.is_empty() {
            return Ok(finished);
        }

        let names: Vec<String> = unique.iter().map(|c| c.phrase.clone()).collect();
        let vectors = match self.gateway.embed(&names) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("embedding failed for wave {wave}: {e}");
                None
            }
        };
        let parent_of = |name: &str| subjects.iter().find(|s| s.name == name).cloned();
        let threshold = self.config.similarity_threshold().as_f64();

        for (n, mut c) in unique.into_iter().enumerate() {
            let cid = id(&c);
            let hop = c.parent_hop;
            let Some(vector) = vectors.as_ref().map(|v| v[n].clone()) else {
                c.reject(RejectionReason::ArbitrationFailure).expect("live");
                finished.push((cid, c));
                continue;
            };
            let parent = parent_of(&c.parent_subject).expect("survivor has a parent in this wave");
            if let Some((_, existing, cos)) = self.index.nearest(&vector) {
                if cos >= threshold {
                    let decision = dedup::arbitrate(
                        &self.gateway,
                        &self.templates,
                        &self.config,
                        &parent,
                        &c,
                        &existing,
                        &excerpt_of(&parent.name),
                    )
                    .unwrap_or(Arbitration::Failed);
                    match decision {
                        Arbitration::Same => {
                            c.reject(RejectionReason::SemanticDuplicate).expect("live");
                            finished.push((cid, c));
                            continue;
                        }
                        Arbitration::Failed => {
                            c.reject(RejectionReason::ArbitrationFailure).expect("live");
                            finished.push((cid, c));
                            continue;
                        }
                        Arbitration::Distinct => {}
                    }
                }
            }
            c.advance(CandidateStage::SimSurvivor).expect("ner survivor");
            let child_hop = hop + 1;
            let capped = self.config.depth_cap.is_some_and(|d| child_hop > d) || self.budget_reached();
            if capped {
                self.funnel.record(hop, FunnelCounts { after_similarity: 1, ..Default::default() });
                finished.push((cid, c));
                continue;
            }
            let child = Subject::child(&c.phrase, &parent.name, parent.hop).expect("key is non-empty");
            match self.index.commit(child, vector, wave) {
                CommitResult::Committed => {
                    c.advance(CandidateStage::Committed).expect("sim survivor");
                    self.funnel.record(hop, FunnelCounts { after_similarity: 1, queued_subjects: 1, ..Default::default() });
                }
                CommitResult::AlreadyPresent => {
                    self.funnel.record(hop, FunnelCounts { after_similarity: 1, ..Default::default() });
                    c.stage = CandidateStage::NerSurvivor;
                    c.reject(RejectionReason::DuplicateCanonical).expect("live");
                }
            }
            if self.audit {
                self.index.audit().map_err(EngineError::Invariant)?;
            }
            finished.push((cid, c));
        }
        Ok(finished)
    }
}

fn ner_outcome(
    result: &BackendResult,
    batch: &[(usize, CandidateEntity)],
    strategy: Strategy,
) -> Result<Vec<NerVerdict>, NerError> {
    let text = result.ok_text().ok_or_else(|| NerError::Backend(result.last_error.clone().unwrap_or_default()))?;
    let phrases: Vec<String> = batch.iter().map(|(_, c)| c.phrase.clone()).collect();
    sanitizer::parse_ner_reply(text, &phrases, strategy)
}

#[derive(Deserialize)]
struct OutlineReply {
    sections: Vec<String>,
}

/// Reads `{"sections": [...]}`, dropping blank titles.
pub fn parse_outline(text: &str) -> Option<Vec<String>> {
    let t = text.trim();
    let body = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|r| r.strip_suffix("```"))
        .unwrap_or(t);
    let reply: OutlineReply = serde_json::from_str(body.trim()).ok()?;
    let sections: Vec<String> =
        reply.sections.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    (!sections.is_empty()).then_some(sections)
}

/// The canonical key set of a subject list, for comparisons in tests and
/// reports.
pub fn subject_keys(subjects: &[Subject]) -> Vec<String> {
    let mut keys: Vec<String> = subjects.iter().map(|s| canonicalize(&s.name)).collect();
    keys.sort();
    keys
}
