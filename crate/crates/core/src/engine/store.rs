//! Run directory persistence.
//!
//! Append-only files (`articles.jsonl`, `candidates.jsonl`, `index.jsonl`)
//! grow once per wave. Snapshot files (`subjects.jsonl`, `queues.jsonl`,
//! `funnel.json`) are staged, then `run_state.json` is replaced, then the
//! staged files are moved into place. `run_state.json` is the commit
//! point: it records the byte length of every append-only file, and a
//! resume truncates them back to those lengths.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::config::RunConfig;
use crate::dedup::CommittedEntity;
use crate::types::{Article, CandidateEntity, FunnelStats, Subject};

pub const CONFIG_FILE: &str = "config.json";
pub const SUBJECTS_FILE: &str = "subjects.jsonl";
pub const ARTICLES_FILE: &str = "articles.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const FUNNEL_FILE: &str = "funnel.json";
pub const INDEX_FILE: &str = "index.jsonl";
pub const QUEUES_FILE: &str = "queues.jsonl";
pub const STATE_FILE: &str = "run_state.json";

const APPEND_FILES: [&str; 3] = [ARTICLES_FILE, CANDIDATES_FILE, INDEX_FILE];
const SNAPSHOT_FILES: [&str; 3] = [SUBJECTS_FILE, QUEUES_FILE, FUNNEL_FILE];

/// Contents of `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: RunConfig,
    pub config_checksum: String,
    pub template_checksum: String,
    pub template_files: BTreeMap<String, String>,
    pub backend: String,
}

/// Contents of `run_state.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    /// Incremented by every checkpoint.
    pub sequence: u64,
    pub next_wave: u32,
    pub dequeued: u64,
    pub generated: u64,
    pub failed: u64,
    pub completed: bool,
    pub config_checksum: String,
    pub offsets: BTreeMap<String, u64>,
}

/// One line of `queues.jsonl`: a queued subject and its place in line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub position: u64,
    pub subject: Subject,
}

/// Everything a checkpoint writes.
pub struct Checkpoint<'a> {
    pub state: &'a RunState,
    pub subjects: &'a [Subject],
    pub queue: &'a [Subject],
    pub funnel: &'a FunnelStats,
    pub new_articles: &'a [Article],
    pub new_candidates: &'a [CandidateEntity],
    pub new_index: &'a [CommittedEntity],
}

/// Everything a resume reads back.
pub struct Loaded {
    pub metadata: RunMetadata,
    pub state: RunState,
    pub subjects: Vec<Subject>,
    pub queue: Vec<Subject>,
    pub funnel: FunnelStats,
    pub index: Vec<CommittedEntity>,
}

#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EngineError + '_ {
    move |e| EngineError::Io(path.display().to_string(), e)
}

impl RunStore {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Prepares a fresh run directory. Refuses to reuse one that already
    /// holds a run.
    pub fn create(dir: &Path, metadata: &RunMetadata) -> Result<Self, EngineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let store = RunStore { dir: dir.to_path_buf() };
        if store.path(STATE_FILE).exists() || store.path(CONFIG_FILE).exists() {
            return Err(EngineError::RunExists(dir.display().to_string()));
        }
        for name in APPEND_FILES {
            let path = store.path(name);
            File::create(&path).map_err(io_err(&path))?;
        }
        store.write_atomic(CONFIG_FILE, &to_pretty(metadata))?;
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Self, EngineError> {
        let store = RunStore { dir: dir.to_path_buf() };
        if !store.path(STATE_FILE).exists() {
            return Err(EngineError::Corrupt(format!("{} has no {STATE_FILE}", dir.display())));
        }
        Ok(store)
    }

    fn staging_dir(&self, sequence: u64) -> PathBuf {
        self.dir.join(format!(".staging-{sequence}"))
    }

    pub fn checkpoint(&self, cp: &Checkpoint<'_>) -> Result<RunState, EngineError> {
        let mut state = cp.state.clone();
        state.sequence += 1;
        self.append_lines(ARTICLES_FILE, cp.new_articles)?;
        self.append_lines(CANDIDATES_FILE, cp.new_candidates)?;
        self.append_lines(INDEX_FILE, cp.new_index)?;
        for name in APPEND_FILES {
            let path = self.path(name);
            let len = fs::metadata(&path).map_err(io_err(&path))?.len();
            state.offsets.insert(name.to_string(), len);
        }

        let staging = self.staging_dir(state.sequence);
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let queue: Vec<QueueEntry> = cp
            .queue
            .iter()
            .enumerate()
            .map(|(i, s)| QueueEntry { position: i as u64, subject: s.clone() })
            .collect();
        let staged = [
            (SUBJECTS_FILE, jsonl(cp.subjects)),
            (QUEUES_FILE, jsonl(&queue)),
            (FUNNEL_FILE, to_pretty(cp.funnel)),
        ];
        for (name, body) in &staged {
            let path = staging.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
        }
        self.write_atomic(STATE_FILE, &to_pretty(&state))?;
        self.promote(&staging)?;
        Ok(state)
    }

    fn promote(&self, staging: &Path) -> Result<(), EngineError> {
        for name in SNAPSHOT_FILES {
            let from = staging.join(name);
            if from.exists() {
                fs::rename(&from, self.path(name)).map_err(io_err(&from))?;
            }
        }
        fs::remove_dir_all(staging).map_err(io_err(staging))
    }

    fn append_lines<T: Serialize>(&self, name: &str, items: &[T]) -> Result<(), EngineError> {
        if items.is_empty() {
            return Ok(());
        }
        let path = self.path(name);
        let mut file = OpenOptions::new().append(true).open(&path).map_err(io_err(&path))?;
        file.write_all(jsonl(items).as_bytes()).map_err(io_err(&path))
    }

    fn write_atomic(&self, name: &str, body: &str) -> Result<(), EngineError> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, body).map_err(io_err(&tmp))?;
        let path = self.path(name);
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Reads a run back, repairing an interrupted checkpoint and
    /// truncating append-only files to the committed lengths.
    pub fn load(&self) -> Result<Loaded, EngineError> {
        let metadata: RunMetadata = read_json(&self.path(CONFIG_FILE))?;
        let state: RunState = read_json(&self.path(STATE_FILE))?;
        if metadata.config.checksum() != metadata.config_checksum {
            return Err(EngineError::ChecksumMismatch("config.json was modified".into()));
        }
        if state.config_checksum != metadata.config_checksum {
            return Err(EngineError::ChecksumMismatch("run state belongs to a different config".into()));
        }

        for entry in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let entry = entry.map_err(io_err(&self.dir))?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(mark) = name.strip_prefix(".staging-") {
                if mark == state.sequence.to_string() {
                    self.promote(&entry.path())?;
                } else {
                    fs::remove_dir_all(entry.path()).map_err(io_err(&entry.path()))?;
                }
            }
        }

        for name in APPEND_FILES {
            let path = self.path(name);
            let want = *state
                .offsets
                .get(name)
                .ok_or_else(|| EngineError::Corrupt(format!("run state has no offset for {name}")))?;
            let file = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            let have = file.metadata().map_err(io_err(&path))?.len();
            if have < want {
                return Err(EngineError::Corrupt(format!("{name} is shorter than its recorded length")));
            }
            if have > want {
                file.set_len(want).map_err(io_err(&path))?;
            }
        }

        let subjects: Vec<Subject> = read_jsonl(&self.path(SUBJECTS_FILE))?;
        let queue: Vec<QueueEntry> = read_jsonl(&self.path(QUEUES_FILE))?;
        let funnel: FunnelStats = read_json(&self.path(FUNNEL_FILE))?;
        let index: Vec<CommittedEntity> = read_jsonl(&self.path(INDEX_FILE))?;
        for (i, q) in queue.iter().enumerate() {
            if q.position != i as u64 {
                return Err(EngineError::Corrupt(format!("{QUEUES_FILE} positions are out of order")));
            }
        }
        Ok(Loaded { metadata, state, subjects, queue: queue.into_iter().map(|q| q.subject).collect(), funnel, index })
    }

    pub fn read_articles(&self) -> Result<Vec<Article>, EngineError> {
        read_jsonl(&self.path(ARTICLES_FILE))
    }

    pub fn read_candidates(&self) -> Result<Vec<CandidateEntity>, EngineError> {
        read_jsonl(&self.path(CANDIDATES_FILE))
    }

    pub fn read_subjects(&self) -> Result<Vec<Subject>, EngineError> {
        read_jsonl(&self.path(SUBJECTS_FILE))
    }

    pub fn read_funnel(&self) -> Result<FunnelStats, EngineError> {
        read_json(&self.path(FUNNEL_FILE))
    }

    pub fn read_metadata(&self) -> Result<RunMetadata, EngineError> {
        read_json(&self.path(CONFIG_FILE))
    }

    pub fn read_state(&self) -> Result<RunState, EngineError> {
        read_json(&self.path(STATE_FILE))
    }
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, EngineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| EngineError::Corrupt(format!("{}: {e}", path.display())))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EngineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| EngineError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}
