//! Request and response bodies of the HTTP interface under `/api/v1`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::observation::Observation;
use crate::parliament::{ConstituencyRow, ConstituencyStatus, Escalation, Evaluation, HandCount, ParliamentConfig};
use crate::sampling::SampledBallot;
use crate::session::ObservationRecord;
use crate::{AuditMethod, Verdict};

pub const PREFIX: &str = "/api/v1";

/// Body of `POST /sessions/{id}/observations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRequest {
    pub observed: Observation,
    /// Draw counter of the ballot being reported; a mismatch is rejected
    /// so a repeated submission cannot be counted twice.
    #[serde(default)]
    pub counter: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationResponse {
    pub seq: u64,
    pub record: ObservationRecord,
    pub p_value: f64,
    pub verdict: Verdict,
    pub next_ballot: Option<SampledBallot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandCountRequest {
    pub result: HandCount,
}

/// One row of `GET /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub constituency_id: String,
    pub method: AuditMethod,
    pub ballots_inspected: u64,
    pub p_value: f64,
    pub verdict: Verdict,
}

/// A parliament member. With `session_id` set, the p-value, sample size,
/// method and hand count are read live from that session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInput {
    #[serde(flatten)]
    pub status: ConstituencyStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

/// Body of `POST /parliament`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParliamentRequest {
    pub config: ParliamentConfig,
    pub constituencies: Vec<MemberInput>,
}

/// Body of `POST /parliament/{id}/constituencies/{cid}` for members not
/// linked to a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemberUpdate {
    #[serde(default)]
    pub p_value: Option<f64>,
    #[serde(default)]
    pub n_c: Option<u64>,
    #[serde(default)]
    pub hand_count: Option<HandCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParliamentView {
    pub parliament_id: String,
    #[serde(flatten)]
    pub evaluation: Evaluation,
    pub table: Vec<ConstituencyRow>,
}

/// Body of `POST /parliament/{id}/escalate`. Fractions default to 0.25.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscalateRequest {
    #[serde(default)]
    pub fraction: Option<f64>,
    /// Overrides `fraction` for comparison members.
    #[serde(default)]
    pub comparison_fraction: Option<f64>,
    /// When false, only previews the increments.
    #[serde(default = "yes")]
    pub commit: bool,
}

impl Default for EscalateRequest {
    fn default() -> Self {
        EscalateRequest { fraction: None, comparison_fraction: None, commit: true }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscalateResponse {
    pub committed: bool,
    pub increments: BTreeMap<String, Escalation>,
    /// Ballots still to inspect across all members to reach the new targets.
    pub projected_work: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
