//! What an auditor reads off a retrieved ballot.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{Contest, INVALID_LABEL, PHANTOM_LABEL};

/// Manual interpretation of one sampled ballot.
///
/// Serialized as the candidate id, or as `"PHANTOM"` / `"INVALID"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Observation {
    Vote(String),
    /// A physically present ballot with no valid vote.
    Invalid,
    /// The ballot is not in the manifest or cannot be found.
    Phantom,
}

impl Observation {
    pub fn as_str(&self) -> &str {
        match self {
            Observation::Vote(id) => id,
            Observation::Invalid => INVALID_LABEL,
            Observation::Phantom => PHANTOM_LABEL,
        }
    }

    /// Resolves candidate ids against the contest.
    pub fn resolve(&self, contest: &Contest) -> Option<Observed> {
        Some(match self {
            Observation::Vote(id) => Observed::Candidate(contest.index_of(id)?),
            Observation::Invalid => Observed::Invalid,
            Observation::Phantom => Observed::Phantom,
        })
    }
}

/// An observation with the candidate resolved to its contest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Observed {
    Candidate(usize),
    Invalid,
    Phantom,
}

impl FromStr for Observation {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Ok(if s.eq_ignore_ascii_case(PHANTOM_LABEL) {
            Observation::Phantom
        } else if s.eq_ignore_ascii_case(INVALID_LABEL) {
            Observation::Invalid
        } else {
            Observation::Vote(s.to_owned())
        })
    }
}

impl fmt::Display for Observation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Observation {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Observation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap_or_else(|never| match never {}))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_are_case_insensitive() {
        assert_eq!("phantom".parse::<Observation>().unwrap(), Observation::Phantom);
        assert_eq!(" INVALID ".parse::<Observation>().unwrap(), Observation::Invalid);
        assert_eq!("Priya".parse::<Observation>().unwrap(), Observation::Vote("Priya".into()));
    }

    #[test]
    fn serializes_as_plain_string() {
        assert_eq!(serde_json::to_string(&Observation::Phantom).unwrap(), "\"PHANTOM\"");
        let o: Observation = serde_json::from_str("\"Shyam\"").unwrap();
        assert_eq!(o, Observation::Vote("Shyam".into()));
    }
}
