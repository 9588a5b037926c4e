//! Risk-limiting audits for single-winner plurality constituencies and for
//! the parliamentary majority those constituencies add up to.
//!
//! Constituency audits come in two flavours: ballot polling ([`polling`])
//! and ballot-level comparison against sorted bundles ([`comparison`]).
//! Each yields a sequential p-value; [`parliament`] combines them.

pub mod api;
pub mod comparison;
pub mod manifest;
pub mod model;
pub mod observation;
pub mod parliament;
pub mod polling;
pub mod sampling;
pub mod session;
pub mod simulator;
pub mod stats;

use serde::{Deserialize, Serialize};

pub use model::{Candidate, Contest, ContestResult, Margins, ModelError};
pub use observation::Observation;
pub use sampling::{Seed, SeededSampler};

/// Constituency audit method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMethod {
    BallotPolling,
    Comparison,
}

impl AuditMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditMethod::BallotPolling => "ballot_polling",
            AuditMethod::Comparison => "comparison",
        }
    }
}

impl From<AuditMethod> for parliament::MethodLabel {
    fn from(m: AuditMethod) -> Self {
        match m {
            AuditMethod::BallotPolling => parliament::MethodLabel::BallotPolling,
            AuditMethod::Comparison => parliament::MethodLabel::Comparison,
        }
    }
}

/// Outcome of a constituency audit after the latest ballot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Continue,
    RiskLimitMet,
    /// The work threshold was reached or the operator stopped the audit.
    FullHandCount,
}

impl Verdict {
    pub fn is_concluded(self) -> bool {
        self != Verdict::Continue
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Continue => "Continue",
            Verdict::RiskLimitMet => "RiskLimitMet",
            Verdict::FullHandCount => "FullHandCount",
        })
    }
}

pub(crate) mod json {
    //! JSON has no infinities. Log statistics of a loser with no reported
    //! votes can reach minus infinity, which is written as null.

    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn finite_map<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k, v.is_finite().then_some(*v))))
    }

    pub fn nullable_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, Option<f64>>::deserialize(d)?;
        Ok(raw.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NEG_INFINITY))).collect())
    }
}
