//! The prompt loop: show the next ballot, read its interpretation, report
//! the updated p-value.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rla_client::{Client, ClientError};
use rla_core::api::ObservationResponse;
use rla_core::manifest::Location;
use rla_core::observation::Observation;
use rla_core::session::{EventLog, EventRecord, Recovered, Session, SessionError, SessionInputs, SessionStatus};
use rla_core::{Contest, Verdict};
use rla_service::store::session_log_path;

/// Where the session lives: in this process with a log under the data
/// directory, or on a server.
pub trait Backend {
    fn status(&mut self) -> Result<SessionStatus>;
    /// Outer error: give up. Inner error: tell the auditor and ask again.
    fn observe(&mut self, observed: Observation, counter: u64) -> Result<Result<Recorded, String>>;
    fn halt(&mut self) -> Result<()>;
}

pub struct Recorded {
    pub response: ObservationResponse,
    /// What `--json` prints for this observation.
    pub json: String,
}

pub struct Local {
    session: Session,
    log: EventLog,
}

impl Local {
    pub fn open(inputs: SessionInputs, data_dir: &Path, resume: bool) -> Result<Local> {
        let path = session_log_path(data_dir, &inputs.session_id());
        if resume {
            let (log, recovered): (_, Recovered<EventRecord>) =
                EventLog::open(&path).with_context(|| format!("no session log to resume at {}", path.display()))?;
            if recovered.truncated_bytes > 0 {
                eprintln!("warning: cut {} bytes of a torn final record from {}", recovered.truncated_bytes, path.display());
            }
            let session = Session::replay(&recovered.records)?;
            if session.inputs() != &inputs {
                bail!("{} was started with different inputs", path.display());
            }
            return Ok(Local { session, log });
        }
        if path.exists() {
            bail!("session log {} already exists; pass --resume to continue it", path.display());
        }
        let (session, created) = Session::create(inputs)?;
        let mut log = EventLog::create(&path)?;
        log.append(&created)?;
        Ok(Local { session, log })
    }

    fn apply(&mut self, command: impl FnOnce(&mut Session) -> Result<EventRecord, SessionError>) -> Result<Result<EventRecord, String>> {
        let mut next = self.session.clone();
        let record = match command(&mut next) {
            Ok(r) => r,
            Err(SessionError::Log(e)) => return Err(e.into()),
            Err(e) => return Ok(Err(e.to_string())),
        };
        self.log.append(&record)?;
        self.session = next;
        Ok(Ok(record))
    }
}

impl Backend for Local {
    fn status(&mut self) -> Result<SessionStatus> {
        Ok(self.session.status())
    }

    fn observe(&mut self, observed: Observation, counter: u64) -> Result<Result<Recorded, String>> {
        let record = match self.apply(|s| s.observe(observed, Some(counter)))? {
            Ok(r) => r,
            Err(msg) => return Ok(Err(msg)),
        };
        let rla_core::session::Event::Observation(observation) = &record.event else {
            unreachable!("observe logs an observation event")
        };
        let s = &self.session;
        let response = ObservationResponse {
            seq: record.seq,
            record: observation.clone(),
            p_value: s.p_value(),
            verdict: s.verdict(),
            next_ballot: (!s.is_concluded()).then(|| s.pending().clone()),
        };
        Ok(Ok(Recorded { response, json: serde_json::to_string(&record)? }))
    }

    fn halt(&mut self) -> Result<()> {
        self.apply(|s| s.halt())?.map_err(anyhow::Error::msg)?;
        Ok(())
    }
}

pub struct Remote {
    client: Client,
    id: String,
}

impl Remote {
    pub fn open(client: Client, inputs: SessionInputs, resume: bool) -> Result<Remote> {
        let id = inputs.session_id();
        if resume {
            let status = client.session(&id).with_context(|| format!("resuming session {id}"))?;
            if status.seed != inputs.seed || status.constituency_id != inputs.contest.constituency_id() {
                bail!("server session {id} was started with different inputs");
            }
            return Ok(Remote { client, id });
        }
        let status = client.create_session(&inputs)?;
        Ok(Remote { client, id: status.session_id })
    }
}

impl Backend for Remote {
    fn status(&mut self) -> Result<SessionStatus> {
        Ok(self.client.session(&self.id)?)
    }

    fn observe(&mut self, observed: Observation, counter: u64) -> Result<Result<Recorded, String>> {
        match self.client.observe(&self.id, observed, Some(counter)) {
            Ok(response) => {
                let json = serde_json::to_string(&response)?;
                Ok(Ok(Recorded { response, json }))
            }
            Err(e @ ClientError::Api { .. }) if e.status().is_some_and(|s| s.as_u16() == 422) => Ok(Err(e.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    fn halt(&mut self) -> Result<()> {
        self.client.halt(&self.id)?;
        Ok(())
    }
}

pub enum Outcome {
    Concluded(Verdict),
    Paused,
}

const HELP: &str = "enter the candidate id (or its number), `invalid`, or `phantom`; \
`status` shows progress, `halt` stops for a full hand count, `quit` pauses";

/// Human-facing text: stdout normally, stderr under `--json` so stdout
/// carries only JSON lines.
struct Console<'a> {
    out: &'a mut dyn Write,
    json: bool,
}

impl Console<'_> {
    fn say(&mut self, args: std::fmt::Arguments) -> std::io::Result<()> {
        if self.json {
            let mut err = std::io::stderr();
            err.write_fmt(args)?;
            err.flush()
        } else {
            self.out.write_fmt(args)?;
            self.out.flush()
        }
    }
}

/// Runs the loop until the audit concludes or the auditor quits.
pub fn run(backend: &mut dyn Backend, contest: &Contest, json: bool, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Outcome> {
    let mut con = Console { out, json };
    let mut status = backend.status()?;
    con.say(format_args!(
        "session {} ({}), {} ballots inspected, P = {}\n{HELP}\n",
        status.session_id,
        status.method.as_str(),
        status.ballots_inspected,
        fmt_p(status.p_value)
    ))?;
    loop {
        if status.concluded {
            con.say(format_args!("audit concluded: {}\n", status.verdict))?;
            return Ok(Outcome::Concluded(status.verdict));
        }
        let ballot = status.next_ballot.clone().context("no next ballot for a continuing session")?;
        let observed = match &ballot.location {
            Location::Phantom => {
                con.say(format_args!("draw {}: index {} lies beyond the manifest, recorded as PHANTOM\n", ballot.counter + 1, ballot.index))?;
                Observation::Phantom
            }
            Location::Ballot { bundle_id, offset, claimed } => {
                let claim = claimed.as_ref().map(|c| format!(", recorded as {c}")).unwrap_or_default();
                con.say(format_args!("draw {}: ballot {} = bundle {bundle_id} #{offset}{claim} > ", ballot.counter + 1, ballot.index))?;
                let mut line = String::new();
                if input.read_line(&mut line)? == 0 {
                    con.say(format_args!("\n"))?;
                    return Ok(Outcome::Paused);
                }
                match line.trim() {
                    "quit" | "q" | "exit" => return Ok(Outcome::Paused),
                    "help" | "?" => {
                        con.say(format_args!("{HELP}\n"))?;
                        continue;
                    }
                    "status" => {
                        con.say(format_args!("{} ballots inspected, P = {}, {}\n", status.ballots_inspected, fmt_p(status.p_value), status.verdict))?;
                        continue;
                    }
                    "halt" => {
                        backend.halt()?;
                        status = backend.status()?;
                        continue;
                    }
                    entry => match interpret(entry, contest) {
                        Ok(o) => o,
                        Err(msg) => {
                            con.say(format_args!("  {msg}\n"))?;
                            continue;
                        }
                    },
                }
            }
        };
        match backend.observe(observed, ballot.counter)? {
            Ok(recorded) => {
                if json {
                    writeln!(con.out, "{}", recorded.json)?;
                    con.out.flush()?;
                }
                con.say(format_args!("  P = {}  {}\n", fmt_p(recorded.response.p_value), recorded.response.verdict))?;
                status = backend.status()?;
            }
            Err(msg) => con.say(format_args!("  not recorded: {msg}\n"))?,
        }
    }
}

/// Parses one entry: a candidate id (any case), a 1-based candidate
/// number, `invalid`, or `phantom`.
pub fn interpret(entry: &str, contest: &Contest) -> Result<Observation, String> {
    if entry.is_empty() {
        return Err(HELP.to_owned());
    }
    if let Ok(n) = entry.parse::<usize>() {
        return match n.checked_sub(1).filter(|&i| i < contest.candidate_count()) {
            Some(i) => Ok(Observation::Vote(contest.candidate_id(i).to_owned())),
            None => Err(format!("no candidate number {n}; there are {}", contest.candidate_count())),
        };
    }
    let observed: Observation = entry.parse().map_err(|e| format!("{e}"))?;
    match observed {
        Observation::Vote(id) => (0..contest.candidate_count())
            .map(|i| contest.candidate_id(i))
            .find(|c| c.eq_ignore_ascii_case(&id))
            .map(|c| Observation::Vote(c.to_owned()))
            .ok_or_else(|| format!("unknown candidate {id:?}")),
        other => Ok(other),
    }
}

pub fn fmt_p(p: f64) -> String {
    if p >= 1e-4 {
        format!("{p:.6}")
    } else {
        format!("{p:.3e}")
    }
}
