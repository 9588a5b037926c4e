//! Audit sessions as a fold over an append-only event log.
//!
//! A session is created from frozen inputs (contest, manifest, risk limit,
//! seed) and advanced only by events. Every command produces exactly one
//! event, applied through the same code path used for replay, so the state
//! after a restart is the state before it. Replay also checks that each
//! recorded observation reproduces its logged p-value bit for bit.
//!
//! Logs are JSON lines, one event per line, one file per session.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ComparisonConfig, ComparisonError, ComparisonSnapshot, ComparisonState, Discrepancy, InvalidPolicy, DEFAULT_GAMMA};
use crate::manifest::{consistency_check, BallotManifest, BundleListing, Location, ManifestError, PreferenceManifest};
use crate::model::Contest;
use crate::observation::Observation;
use crate::parliament::{ConstituencyStatus, HandCount};
use crate::polling::{BravoSnapshot, BravoState, PollingError};
use crate::sampling::{SampledBallot, SamplingError, Seed, SeededSampler};
use crate::{AuditMethod, Verdict};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Polling(#[from] PollingError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("comparison audits need a preference manifest")]
    MissingPreferenceManifest,
    #[error("ballot {index} lies beyond the manifest; record it as PHANTOM")]
    PhantomExpected { index: u64 },
    #[error("the session has concluded with {0}")]
    Concluded(Verdict),
    #[error("a hand count has already been recorded")]
    HandCounted,
    #[error("observation is for draw {got}, but draw {expected} is pending")]
    StaleCounter { expected: u64, got: u64 },
    #[error("hand count result must be ConfirmedReported or OverturnedReported")]
    EmptyHandCount,
    #[error("event log: {0}")]
    Log(#[from] LogError),
    #[error("replay diverged at event {seq}: {reason}")]
    ReplayMismatch { seq: u64, reason: String },
}

impl SessionError {
    /// Whether the error is a conflict with the session's state rather than
    /// bad input.
    pub fn is_conflict(&self) -> bool {
        matches!(
            self,
            SessionError::Concluded(_)
                | SessionError::HandCounted
                | SessionError::StaleCounter { .. }
                | SessionError::Polling(PollingError::AuditConcluded)
                | SessionError::Comparison(ComparisonError::AuditConcluded)
        )
    }
}

/// Manifest supplied with a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "bundles", rename_all = "snake_case")]
pub enum ManifestInput {
    Ballot(BallotManifest),
    Preference(PreferenceManifest),
}

impl BundleListing for ManifestInput {
    fn listed_total(&self) -> u64 {
        match self {
            ManifestInput::Ballot(m) => m.listed_total(),
            ManifestInput::Preference(m) => m.listed_total(),
        }
    }

    fn locate(&self, index: u64, upper_bound: u64) -> Result<Location, ManifestError> {
        match self {
            ManifestInput::Ballot(m) => m.locate(index, upper_bound),
            ManifestInput::Preference(m) => m.locate(index, upper_bound),
        }
    }
}

/// Everything fixed at session creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInputs {
    pub method: AuditMethod,
    pub contest: Contest,
    /// Optional for ballot polling: without one, the tallied ballots form a
    /// single bundle named after the constituency.
    #[serde(default)]
    pub manifest: Option<ManifestInput>,
    pub risk_limit: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub seed: Seed,
    #[serde(default)]
    pub work_threshold: Option<u64>,
    #[serde(default)]
    pub invalid_policy: InvalidPolicy,
}

impl SessionInputs {
    /// Session ids are derived from the seed and constituency, so the same
    /// inputs always land in the same log file.
    pub fn session_id(&self) -> String {
        let digest = self.seed.derive(&[b"session", self.contest.constituency_id().as_bytes()]);
        hex::encode(&digest[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollingRecord {
    pub counter: u64,
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_id: Option<String>,
    pub observed: Observation,
    #[serde(rename = "post_log_T", serialize_with = "crate::json::finite_map", deserialize_with = "crate::json::nullable_map")]
    pub post_log_t: BTreeMap<String, f64>,
    pub post_p: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub counter: u64,
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimed: Option<String>,
    pub observed: Observation,
    pub discrepancy: Discrepancy,
    pub o1: u64,
    pub o2: u64,
    pub u1: u64,
    pub u2: u64,
    pub p_value: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObservationRecord {
    Comparison(ComparisonRecord),
    Polling(PollingRecord),
}

impl ObservationRecord {
    pub fn counter(&self) -> u64 {
        match self {
            ObservationRecord::Comparison(r) => r.counter,
            ObservationRecord::Polling(r) => r.counter,
        }
    }

    pub fn observed(&self) -> &Observation {
        match self {
            ObservationRecord::Comparison(r) => &r.observed,
            ObservationRecord::Polling(r) => &r.observed,
        }
    }

    pub fn p_value(&self) -> f64 {
        match self {
            ObservationRecord::Comparison(r) => r.p_value,
            ObservationRecord::Polling(r) => r.post_p,
        }
    }

    pub fn verdict(&self) -> Verdict {
        match self {
            ObservationRecord::Comparison(r) => r.verdict,
            ObservationRecord::Polling(r) => r.verdict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created { session_id: String, inputs: Box<SessionInputs> },
    Observation(ObservationRecord),
    /// Sample-size target raised by a parliamentary escalation.
    Escalation { from: u64, to: u64 },
    HandCount { result: HandCount },
    /// Operator decision to stop sampling and count by hand.
    Verdict { verdict: Verdict },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub timestamp: chrono::DateTime<chrono::Utc>,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone)]
enum Audit {
    Polling(BravoState),
    Comparison(ComparisonState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditDetail {
    BallotPolling(BravoSnapshot),
    Comparison(ComparisonSnapshot),
}

/// Status snapshot shown to operators and returned by the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub method: AuditMethod,
    pub constituency_id: String,
    pub seed: Seed,
    pub risk_limit: f64,
    pub gamma: Option<f64>,
    /// Sequence number of the last applied event.
    pub seq: u64,
    pub ballots_inspected: u64,
    pub p_value: f64,
    pub verdict: Verdict,
    pub concluded: bool,
    pub hand_count: HandCount,
    pub target_sample: Option<u64>,
    /// The ballot to retrieve next, while the session continues.
    pub next_ballot: Option<SampledBallot>,
    pub detail: AuditDetail,
    /// P-value after each observation.
    pub p_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    inputs: SessionInputs,
    listing: ManifestInput,
    sampler: SeededSampler,
    audit: Audit,
    pending: SampledBallot,
    hand_count: HandCount,
    target_sample: Option<u64>,
    seq: u64,
    p_history: Vec<f64>,
}

impl Session {
    /// Validates inputs and returns the session with its `created` event.
    pub fn create(inputs: SessionInputs) -> Result<(Session, EventRecord), SessionError> {
        let id = inputs.session_id();
        let session = Self::from_inputs(id.clone(), inputs.clone())?;
        let record = EventRecord { seq: 0, timestamp: chrono::Utc::now(), event: Event::Created { session_id: id, inputs: Box::new(inputs) } };
        Ok((session, record))
    }

    fn from_inputs(id: String, inputs: SessionInputs) -> Result<Session, SessionError> {
        let contest = &inputs.contest;
        let bound = contest.ballot_upper_bound();
        let audit = match inputs.method {
            AuditMethod::BallotPolling => Audit::Polling(BravoState::new(contest, inputs.risk_limit, inputs.work_threshold)?),
            AuditMethod::Comparison => {
                let Some(ManifestInput::Preference(manifest)) = &inputs.manifest else {
                    return Err(SessionError::MissingPreferenceManifest);
                };
                consistency_check(manifest, contest)?;
                let config = ComparisonConfig {
                    gamma: inputs.gamma.unwrap_or(DEFAULT_GAMMA),
                    invalid_policy: inputs.invalid_policy,
                    work_threshold: inputs.work_threshold,
                    ..ComparisonConfig::new(inputs.risk_limit)
                };
                Audit::Comparison(ComparisonState::new(contest, config)?)
            }
        };
        let listing = match &inputs.manifest {
            Some(m) => m.clone(),
            None => ManifestInput::Ballot(BallotManifest::new([(contest.constituency_id().to_owned(), contest.tallied_ballots())])?),
        };
        if listing.listed_total() > bound {
            return Err(ManifestError::BoundExceeded { listed: listing.listed_total(), bound }.into());
        }
        let mut sampler = SeededSampler::new(inputs.seed.clone(), bound)?;
        let pending = sampler.next_ballot(&listing)?;
        Ok(Session { id, inputs, listing, sampler, audit, pending, hand_count: HandCount::None, target_sample: None, seq: 0, p_history: Vec::new() })
    }

    /// Rebuilds a session from its log, checking every recorded value.
    pub fn replay(records: &[EventRecord]) -> Result<Session, SessionError> {
        let mismatch = |seq: u64, reason: &str| SessionError::ReplayMismatch { seq, reason: reason.to_owned() };
        let (first, rest) = records.split_first().ok_or_else(|| mismatch(0, "empty log"))?;
        let Event::Created { session_id, inputs } = &first.event else {
            return Err(mismatch(first.seq, "log does not start with a created event"));
        };
        if first.seq != 0 {
            return Err(mismatch(first.seq, "first sequence number is not 0"));
        }
        let mut session = Self::from_inputs(session_id.clone(), (**inputs).clone())?;
        for record in rest {
            if record.seq != session.seq + 1 {
                return Err(mismatch(record.seq, &format!("expected sequence number {}", session.seq + 1)));
            }
            let produced = match &record.event {
                Event::Created { .. } => return Err(mismatch(record.seq, "second created event")),
                Event::Observation(logged) => session.observe(logged.observed().clone(), Some(logged.counter()))?,
                Event::Escalation { to, .. } => session.escalate_to(*to)?,
                Event::HandCount { result } => session.record_hand_count(*result)?,
                Event::Verdict { .. } => session.halt()?,
            };
            if produced.event != record.event {
                return Err(mismatch(record.seq, "recomputed event differs from the log"));
            }
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn inputs(&self) -> &SessionInputs {
        &self.inputs
    }

    pub fn contest(&self) -> &Contest {
        &self.inputs.contest
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    /// The ballot the auditor should retrieve next.
    pub fn pending(&self) -> &SampledBallot {
        &self.pending
    }

    pub fn p_value(&self) -> f64 {
        match &self.audit {
            Audit::Polling(s) => s.p_value(),
            Audit::Comparison(s) => s.p_value(),
        }
    }

    pub fn ballots_inspected(&self) -> u64 {
        match &self.audit {
            Audit::Polling(s) => s.ballots_inspected(),
            Audit::Comparison(s) => s.ballots_inspected(),
        }
    }

    fn audit_verdict(&self) -> Verdict {
        match &self.audit {
            Audit::Polling(s) => s.verdict(),
            Audit::Comparison(s) => s.verdict(),
        }
    }

    /// Audit verdict; a hand count ends the audit as a full hand count
    /// unless the risk limit had already been met.
    pub fn verdict(&self) -> Verdict {
        match (self.audit_verdict(), self.hand_count) {
            (Verdict::Continue, HandCount::None) => Verdict::Continue,
            (Verdict::Continue, _) => Verdict::FullHandCount,
            (v, _) => v,
        }
    }

    pub fn is_concluded(&self) -> bool {
        self.verdict().is_concluded()
    }

    pub fn hand_count(&self) -> HandCount {
        self.hand_count
    }

    fn next_record(&mut self, event: Event) -> EventRecord {
        self.seq += 1;
        EventRecord { seq: self.seq, timestamp: chrono::Utc::now(), event }
    }

    /// Records the interpretation of the pending ballot. `expected_counter`
    /// guards against double submission of the same entry.
    pub fn observe(&mut self, observed: Observation, expected_counter: Option<u64>) -> Result<EventRecord, SessionError> {
        if self.hand_count != HandCount::None {
            return Err(SessionError::HandCounted);
        }
        let verdict = self.verdict();
        if verdict.is_concluded() {
            return Err(SessionError::Concluded(verdict));
        }
        if let Some(got) = expected_counter {
            if got != self.pending.counter {
                return Err(SessionError::StaleCounter { expected: self.pending.counter, got });
            }
        }
        let pending = self.pending.clone();
        if pending.location.is_phantom() && observed != Observation::Phantom {
            return Err(SessionError::PhantomExpected { index: pending.index });
        }
        let bundle_id = pending.location.bundle_id().map(str::to_owned);
        let record = match &mut self.audit {
            Audit::Polling(state) => {
                let verdict = state.observe(&observed)?;
                ObservationRecord::Polling(PollingRecord {
                    counter: pending.counter,
                    index: pending.index,
                    bundle_id,
                    observed,
                    post_log_t: state.log_statistics(),
                    post_p: state.p_value(),
                    verdict,
                })
            }
            Audit::Comparison(state) => {
                let step = state.audit_ballot(&pending.location, &observed)?;
                let c = state.counts();
                ObservationRecord::Comparison(ComparisonRecord {
                    counter: pending.counter,
                    index: pending.index,
                    bundle_id,
                    claimed: pending.location.claimed().map(str::to_owned),
                    observed,
                    discrepancy: step.discrepancy,
                    o1: c.o1,
                    o2: c.o2,
                    u1: c.u1,
                    u2: c.u2,
                    p_value: step.p_value,
                    verdict: step.verdict,
                })
            }
        };
        self.p_history.push(record.p_value());
        self.pending = self.sampler.next_ballot(&self.listing)?;
        Ok(self.next_record(Event::Observation(record)))
    }

    /// Operator stop: the audit ends with a full hand count.
    pub fn halt(&mut self) -> Result<EventRecord, SessionError> {
        let verdict = self.verdict();
        if verdict.is_concluded() {
            return Err(SessionError::Concluded(verdict));
        }
        match &mut self.audit {
            Audit::Polling(s) => s.halt(),
            Audit::Comparison(s) => s.halt(),
        }
        Ok(self.next_record(Event::Verdict { verdict: self.verdict() }))
    }

    pub fn record_hand_count(&mut self, result: HandCount) -> Result<EventRecord, SessionError> {
        if result == HandCount::None {
            return Err(SessionError::EmptyHandCount);
        }
        if self.hand_count != HandCount::None {
            return Err(SessionError::HandCounted);
        }
        self.hand_count = result;
        Ok(self.next_record(Event::HandCount { result }))
    }

    /// Raises the sample-size target.
    pub fn escalate_to(&mut self, to: u64) -> Result<EventRecord, SessionError> {
        if self.hand_count != HandCount::None {
            return Err(SessionError::HandCounted);
        }
        let from = self.target_sample.unwrap_or_else(|| self.ballots_inspected());
        self.target_sample = Some(to);
        Ok(self.next_record(Event::Escalation { from, to }))
    }

    pub fn status(&self) -> SessionStatus {
        let verdict = self.verdict();
        SessionStatus {
            session_id: self.id.clone(),
            method: self.inputs.method,
            constituency_id: self.contest().constituency_id().to_owned(),
            seed: self.inputs.seed.clone(),
            risk_limit: self.inputs.risk_limit,
            gamma: match &self.audit {
                Audit::Comparison(s) => Some(s.params().gamma),
                Audit::Polling(_) => None,
            },
            seq: self.seq,
            ballots_inspected: self.ballots_inspected(),
            p_value: self.p_value(),
            verdict,
            concluded: verdict.is_concluded(),
            hand_count: self.hand_count,
            target_sample: self.target_sample,
            next_ballot: (!verdict.is_concluded()).then(|| self.pending.clone()),
            detail: match &self.audit {
                Audit::Polling(s) => AuditDetail::BallotPolling(s.snapshot()),
                Audit::Comparison(s) => AuditDetail::Comparison(s.snapshot()),
            },
            p_history: self.p_history.clone(),
        }
    }

    /// This session's row in a parliamentary audit.
    pub fn constituency_status(&self, reportedly_won: bool) -> ConstituencyStatus {
        ConstituencyStatus {
            id: self.contest().constituency_id().to_owned(),
            reportedly_won,
            method: self.inputs.method.into(),
            p_value: self.p_value().max(f64::MIN_POSITIVE),
            n_c: self.ballots_inspected(),
            hand_count: self.hand_count,
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path} line {line}: {source}")]
    Corrupt { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{0} already exists")]
    Exists(PathBuf),
}

/// Result of opening an existing log.
#[derive(Debug)]
pub struct Recovered<T = EventRecord> {
    pub records: Vec<T>,
    /// Bytes of a torn final record that were cut off, if any.
    pub truncated_bytes: u64,
}

/// Append-only JSON-lines event log.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    pub fn create(path: impl AsRef<Path>) -> Result<EventLog, LogError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| LogError::Io { path: path.clone(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err)?;
        }
        let file = OpenOptions::new().append(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::AlreadyExists {
                LogError::Exists(path.clone())
            } else {
                io_err(e)
            }
        })?;
        Ok(EventLog { path, file })
    }

    /// Opens a log for appending. A final line that does not parse is a
    /// record torn by a crash: it is cut off and reported. A bad line
    /// anywhere else is corruption and fails the open.
    pub fn open<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<(EventLog, Recovered<T>), LogError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| LogError::Io { path: path.clone(), source };
        let mut file = OpenOptions::new().read(true).write(true).open(&path).map_err(io_err)?;
        let mut content = Vec::new();
        file.read_to_end(&mut content).map_err(io_err)?;

        let mut records = Vec::new();
        let mut good_end = 0usize;
        let mut offset = 0usize;
        let mut lines = content.split_inclusive(|&b| b == b'\n').peekable();
        let mut line_no = 0;
        while let Some(line) = lines.next() {
            line_no += 1;
            let start = offset;
            offset += line.len();
            let text = line.strip_suffix(b"\n").unwrap_or(line);
            if text.iter().all(u8::is_ascii_whitespace) {
                good_end = offset;
                continue;
            }
            match serde_json::from_slice::<T>(text) {
                Ok(r) => {
                    records.push(r);
                    good_end = offset;
                }
                Err(_) if lines.peek().is_none() => {
                    good_end = start;
                    break;
                }
                Err(source) => return Err(LogError::Corrupt { path, line: line_no, source }),
            }
        }
        let truncated_bytes = (content.len() - good_end) as u64;
        if truncated_bytes > 0 {
            file.set_len(good_end as u64).map_err(io_err)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err)?;
        // a complete final record written without its newline
        if good_end > 0 && content[good_end - 1] != b'\n' {
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok((EventLog { path, file }, Recovered { records, truncated_bytes }))
    }

    /// Writes one record and syncs it to disk before returning.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(record).map_err(|e| LogError::Io { path: self.path.clone(), source: e.into() })?;
        line.push(b'\n');
        let io_err = |source| LogError::Io { path: self.path.clone(), source };
        self.file.write_all(&line).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
