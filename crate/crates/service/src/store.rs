//! In-memory sessions and parliaments backed by one JSON-lines log each.
//!
//! Every mutation appends its event to the log (synced) before the reply
//! goes out. Per-entry mutexes serialize writers; the maps themselves are
//! only locked long enough to look an entry up or insert one.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rla_core::api::{EscalateRequest, EscalateResponse, MemberInput, MemberUpdate, ParliamentRequest, ParliamentView, SessionSummary};
use rla_core::parliament::{ByMethod, ConstituencyStatus, Escalation, HandCount, ParliamentConfig, ParliamentState, Proportional};
use rla_core::sampling::Seed;
use rla_core::session::{EventLog, EventRecord, LogError, Recovered, Session, SessionInputs};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ApiError;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {reason}")]
    Replay { path: PathBuf, reason: String },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub fn session_log_path(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join("sessions").join(format!("{id}.jsonl"))
}

pub fn parliament_log_path(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join("parliaments").join(format!("{id}.jsonl"))
}

pub struct SessionEntry {
    pub session: Session,
    log: EventLog,
}

impl SessionEntry {
    /// Applies a command and logs its event. Nothing changes if either step fails.
    pub fn apply(
        &mut self,
        command: impl FnOnce(&mut Session) -> Result<EventRecord, rla_core::session::SessionError>,
    ) -> Result<EventRecord, ApiError> {
        let mut next = self.session.clone();
        let record = command(&mut next)?;
        self.log.append(&record)?;
        self.session = next;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParliamentEvent {
    Created { parliament_id: String, request: ParliamentRequest },
    MemberUpdated { id: String, update: MemberUpdate },
    Escalation { increments: BTreeMap<String, Escalation> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParliamentRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub event: ParliamentEvent,
}

pub struct ParliamentEntry {
    id: String,
    config: ParliamentConfig,
    members: Vec<MemberInput>,
    seq: u64,
    log: EventLog,
}

impl ParliamentEntry {
    fn apply_update(&mut self, cid: &str, update: &MemberUpdate) -> Result<(), ApiError> {
        let member = self
            .members
            .iter_mut()
            .find(|m| m.status.id == cid)
            .ok_or_else(|| ApiError::not_found("constituency", cid))?;
        if member.session_id.is_some() {
            return Err(ApiError::unprocessable(format!("constituency {cid} follows its session; update the session instead")));
        }
        if let Some(p) = update.p_value {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ApiError::unprocessable(format!("p-value {p} outside (0, 1]")));
            }
            member.status.p_value = p;
        }
        if let Some(n) = update.n_c {
            member.status.n_c = n;
        }
        if let Some(h) = update.hand_count {
            member.status.hand_count = h;
        }
        Ok(())
    }

    fn append(&mut self, event: ParliamentEvent) -> Result<(), ApiError> {
        self.seq += 1;
        let record = ParliamentRecord { seq: self.seq, timestamp: Utc::now(), event };
        self.log.append(&record).inspect_err(|_| self.seq -= 1)?;
        Ok(())
    }
}

pub struct AppState {
    data_dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    /// Seed of every session, so no two sessions share a sample stream.
    seeds: Mutex<HashMap<Seed, String>>,
    parliaments: RwLock<HashMap<String, Arc<Mutex<ParliamentEntry>>>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    /// Opens the store, replaying every log under `data_dir`. A torn final
    /// record is cut off with a warning; any other damage is an error.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<AppState, StoreError> {
        let data_dir = data_dir.into();
        let state = AppState {
            data_dir,
            sessions: RwLock::default(),
            seeds: Mutex::default(),
            parliaments: RwLock::default(),
        };
        for path in log_files(&state.data_dir.join("sessions"))? {
            let (log, recovered): (_, Recovered<EventRecord>) = EventLog::open(&path)?;
            warn_truncated(&path, recovered.truncated_bytes);
            let session = Session::replay(&recovered.records).map_err(|e| StoreError::Replay { path: path.clone(), reason: e.to_string() })?;
            let id = session.id().to_owned();
            lock(&state.seeds).insert(session.inputs().seed.clone(), id.clone());
            state.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(SessionEntry { session, log })));
        }
        for path in log_files(&state.data_dir.join("parliaments"))? {
            let (log, recovered): (_, Recovered<ParliamentRecord>) = EventLog::open(&path)?;
            warn_truncated(&path, recovered.truncated_bytes);
            let entry = state.replay_parliament(log, recovered.records).map_err(|e| StoreError::Replay { path: path.clone(), reason: e.message })?;
            state.parliaments.write().unwrap().insert(entry.id.clone(), Arc::new(Mutex::new(entry)));
        }
        tracing::info!(
            sessions = state.sessions.read().unwrap().len(),
            parliaments = state.parliaments.read().unwrap().len(),
            "store opened at {}",
            state.data_dir.display()
        );
        Ok(state)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn session(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        self.sessions.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn with_session<R>(&self, id: &str, f: impl FnOnce(&mut SessionEntry) -> Result<R, ApiError>) -> Result<R, ApiError> {
        let entry = self.session(id)?;
        let mut guard = lock(&entry);
        f(&mut guard)
    }

    pub fn create_session(&self, inputs: SessionInputs) -> Result<Session, ApiError> {
        let (session, created) = Session::create(inputs)?;
        let id = session.id().to_owned();
        let mut sessions = self.sessions.write().unwrap();
        let mut seeds = lock(&self.seeds);
        if let Some(other) = seeds.get(&session.inputs().seed) {
            return Err(ApiError::unprocessable(format!("seed {} is already used by session {other}", session.inputs().seed)));
        }
        let mut log = EventLog::create(session_log_path(&self.data_dir, &id))?;
        log.append(&created)?;
        seeds.insert(session.inputs().seed.clone(), id.clone());
        sessions.insert(id, Arc::new(Mutex::new(SessionEntry { session: session.clone(), log })));
        Ok(session)
    }

    pub fn list_sessions(&self) -> Vec<SessionSummary> {
        let entries: Vec<_> = self.sessions.read().unwrap().values().cloned().collect();
        let mut rows: Vec<SessionSummary> = entries
            .iter()
            .map(|e| {
                let s = &lock(e).session;
                SessionSummary {
                    session_id: s.id().to_owned(),
                    constituency_id: s.contest().constituency_id().to_owned(),
                    method: s.inputs().method,
                    ballots_inspected: s.ballots_inspected(),
                    p_value: s.p_value(),
                    verdict: s.verdict(),
                }
            })
            .collect();
        rows.sort_by(|a, b| a.constituency_id.cmp(&b.constituency_id).then_with(|| a.session_id.cmp(&b.session_id)));
        rows
    }

    pub fn create_parliament(&self, request: ParliamentRequest) -> Result<ParliamentView, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.check_parliament(&request)?;
        let mut log = EventLog::create(parliament_log_path(&self.data_dir, &id))?;
        let entry_of = |log| ParliamentEntry { id: id.clone(), config: request.config, members: request.constituencies.clone(), seq: 0, log };
        let record = ParliamentRecord { seq: 0, timestamp: Utc::now(), event: ParliamentEvent::Created { parliament_id: id.clone(), request: request.clone() } };
        log.append(&record)?;
        let entry = entry_of(log);
        let view = self.view(&entry)?;
        self.parliaments.write().unwrap().insert(id, Arc::new(Mutex::new(entry)));
        Ok(view)
    }

    fn check_parliament(&self, request: &ParliamentRequest) -> Result<(), ApiError> {
        for m in &request.constituencies {
            if let Some(sid) = &m.session_id {
                self.session(sid).map_err(|_| ApiError::unprocessable(format!("constituency {} links unknown session {sid:?}", m.status.id)))?;
            }
        }
        self.state_of(&request.config, &request.constituencies).map(drop)
    }

    fn replay_parliament(&self, log: EventLog, records: Vec<ParliamentRecord>) -> Result<ParliamentEntry, ApiError> {
        let mut records = records.into_iter();
        let Some(ParliamentRecord { seq: 0, event: ParliamentEvent::Created { parliament_id, request }, .. }) = records.next() else {
            return Err(ApiError::unprocessable("log does not start with a created event"));
        };
        self.check_parliament(&request)?;
        let mut entry = ParliamentEntry { id: parliament_id, config: request.config, members: request.constituencies, seq: 0, log };
        for record in records {
            if record.seq != entry.seq + 1 {
                return Err(ApiError::unprocessable(format!("sequence gap at {}", record.seq)));
            }
            entry.seq = record.seq;
            match &record.event {
                ParliamentEvent::Created { .. } => return Err(ApiError::unprocessable("second created event")),
                ParliamentEvent::MemberUpdated { id, update } => entry.apply_update(id, update)?,
                ParliamentEvent::Escalation { .. } => {}
            }
        }
        Ok(entry)
    }

    fn state_of(&self, config: &ParliamentConfig, members: &[MemberInput]) -> Result<ParliamentState, ApiError> {
        let statuses = members
            .iter()
            .map(|m| match &m.session_id {
                Some(sid) => {
                    let entry = self.session(sid)?;
                    let live = lock(&entry).session.constituency_status(m.status.reportedly_won);
                    Ok(ConstituencyStatus { id: m.status.id.clone(), ..live })
                }
                None => Ok(m.status.clone()),
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(ParliamentState::new(*config, statuses)?)
    }

    fn view(&self, entry: &ParliamentEntry) -> Result<ParliamentView, ApiError> {
        let state = self.state_of(&entry.config, &entry.members)?;
        Ok(ParliamentView { parliament_id: entry.id.clone(), evaluation: state.evaluate(), table: state.table() })
    }

    fn parliament(&self, id: &str) -> Result<Arc<Mutex<ParliamentEntry>>, ApiError> {
        self.parliaments.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found("parliament", id))
    }

    pub fn parliament_view(&self, id: &str) -> Result<ParliamentView, ApiError> {
        let entry = self.parliament(id)?;
        let guard = lock(&entry);
        self.view(&guard)
    }

    pub fn update_member(&self, id: &str, cid: &str, update: MemberUpdate) -> Result<ParliamentView, ApiError> {
        let entry = self.parliament(id)?;
        let mut guard = lock(&entry);
        let before = guard.members.clone();
        guard.apply_update(cid, &update)?;
        if let Err(e) = self.state_of(&guard.config, &guard.members) {
            guard.members = before;
            return Err(e);
        }
        if let Err(e) = guard.append(ParliamentEvent::MemberUpdated { id: cid.to_owned(), update }) {
            guard.members = before;
            return Err(e);
        }
        self.view(&guard)
    }

    /// Computes increments under the request's policy and, when committing,
    /// raises the target of every linked session.
    pub fn escalate(&self, id: &str, request: EscalateRequest) -> Result<EscalateResponse, ApiError> {
        let entry = self.parliament(id)?;
        let mut guard = lock(&entry);
        let state = self.state_of(&guard.config, &guard.members)?;
        let polling = request.fraction.map(Proportional::new).transpose()?.unwrap_or_default();
        let comparison = request.comparison_fraction.map(Proportional::new).transpose()?.unwrap_or(polling);
        let increments = state.escalate(&ByMethod { polling, comparison })?;
        let projected_work = increments.values().map(|e| e.increment).sum();
        if request.commit {
            for member in &guard.members {
                let (Some(sid), Some(step)) = (&member.session_id, increments.get(&member.status.id)) else { continue };
                if step.increment > 0 {
                    self.with_session(sid, |e| e.apply(|s| s.escalate_to(step.to)).map(drop))?;
                }
            }
            guard.append(ParliamentEvent::Escalation { increments: increments.clone() })?;
        }
        Ok(EscalateResponse { committed: request.commit, increments, projected_work })
    }

    /// Hand count recorded against an unlinked member.
    pub fn member_hand_count(&self, id: &str, cid: &str, result: HandCount) -> Result<ParliamentView, ApiError> {
        self.update_member(id, cid, MemberUpdate { hand_count: Some(result), ..MemberUpdate::default() })
    }
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let read = match std::fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::Io(dir.to_owned(), e)),
    };
    let mut files = Vec::new();
    for item in read {
        let path = item.map_err(|e| StoreError::Io(dir.to_owned(), e))?.path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn warn_truncated(path: &Path, bytes: u64) {
    if bytes > 0 {
        tracing::warn!("{}: cut {bytes} bytes of a torn final record", path.display());
    }
}
