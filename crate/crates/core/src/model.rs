//! Contest results, validation and margins.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved label for invalid or rejected ballots.
pub const INVALID_LABEL: &str = "INVALID";
/// Reserved label for a manifest position with no retrievable ballot.
pub const PHANTOM_LABEL: &str = "PHANTOM";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("a contest needs at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("candidate ids must be non-empty")]
    EmptyCandidateId,
    #[error("candidate id {0:?} appears more than once")]
    DuplicateCandidate(String),
    #[error("candidate id {0:?} is reserved")]
    ReservedCandidateId(String),
    #[error("votes reported for unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("reported winner {0:?} does not hold a strict plurality")]
    TiedOrWrongWinner(String),
    #[error("{total} tallied ballots exceed the trusted upper bound {bound}")]
    BoundExceeded { total: u64, bound: u64 },
    #[error("the ballot upper bound must be positive")]
    ZeroUpperBound,
    #[error("population size {population} is smaller than the {tallied} tallied ballots")]
    PopulationTooSmall { population: u64, tallied: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub name: String,
}

/// Reported result for one constituency, as published before the audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContestResult {
    pub constituency_id: String,
    pub candidates: Vec<Candidate>,
    pub reported_votes: BTreeMap<String, u64>,
    pub reported_winner: String,
    /// Trusted bound on the number of ballots cast, independent of the voting system.
    pub ballot_upper_bound: u64,
    #[serde(default)]
    pub invalid_votes: u64,
}

impl ContestResult {
    /// Checks every invariant and returns the validated contest.
    pub fn validate(self) -> Result<Contest, ModelError> {
        Contest::try_from(self)
    }

    pub fn votes_for(&self, id: &str) -> u64 {
        self.reported_votes.get(id).copied().unwrap_or(0)
    }
}

/// A contest whose reported winner holds a strict plurality and whose
/// tallies fit under the ballot upper bound.
///
/// Candidate order follows `ContestResult::candidates`; all index-based
/// accessors use that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ContestResult", into = "ContestResult")]
pub struct Contest {
    result: ContestResult,
    votes: Vec<u64>,
    winner: usize,
}

impl TryFrom<ContestResult> for Contest {
    type Error = ModelError;

    fn try_from(result: ContestResult) -> Result<Self, ModelError> {
        let count = result.candidates.len();
        if count < 2 {
            return Err(ModelError::TooFewCandidates(count));
        }
        let mut seen = HashSet::with_capacity(count);
        for c in &result.candidates {
            if c.id.is_empty() {
                return Err(ModelError::EmptyCandidateId);
            }
            if c.id == INVALID_LABEL || c.id == PHANTOM_LABEL {
                return Err(ModelError::ReservedCandidateId(c.id.clone()));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(ModelError::DuplicateCandidate(c.id.clone()));
            }
        }
        if let Some(unknown) = result.reported_votes.keys().find(|id| !seen.contains(id.as_str())) {
            return Err(ModelError::UnknownCandidate(unknown.clone()));
        }
        let winner = result
            .candidates
            .iter()
            .position(|c| c.id == result.reported_winner)
            .ok_or_else(|| ModelError::TiedOrWrongWinner(result.reported_winner.clone()))?;
        let votes: Vec<u64> = result.candidates.iter().map(|c| result.votes_for(&c.id)).collect();
        let top = votes[winner];
        if votes.iter().enumerate().any(|(i, &v)| i != winner && v >= top) {
            return Err(ModelError::TiedOrWrongWinner(result.reported_winner.clone()));
        }
        if result.ballot_upper_bound == 0 {
            return Err(ModelError::ZeroUpperBound);
        }
        let total = votes.iter().sum::<u64>() + result.invalid_votes;
        if total > result.ballot_upper_bound {
            return Err(ModelError::BoundExceeded { total, bound: result.ballot_upper_bound });
        }
        Ok(Contest { result, votes, winner })
    }
}

impl From<Contest> for ContestResult {
    fn from(c: Contest) -> Self {
        c.result
    }
}

impl Contest {
    pub fn result(&self) -> &ContestResult {
        &self.result
    }

    pub fn constituency_id(&self) -> &str {
        &self.result.constituency_id
    }

    pub fn candidate_count(&self) -> usize {
        self.votes.len()
    }

    pub fn candidate_id(&self, index: usize) -> &str {
        &self.result.candidates[index].id
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.result.candidates.iter().position(|c| c.id == id)
    }

    pub fn winner_index(&self) -> usize {
        self.winner
    }

    pub fn winner(&self) -> &str {
        &self.result.reported_winner
    }

    /// Candidate indices of the reported losers, in contest order.
    pub fn loser_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.votes.len()).filter(move |&i| i != self.winner)
    }

    pub fn votes(&self, index: usize) -> u64 {
        self.votes[index]
    }

    pub fn invalid_votes(&self) -> u64 {
        self.result.invalid_votes
    }

    /// Valid plus invalid reported ballots.
    pub fn tallied_ballots(&self) -> u64 {
        self.votes.iter().sum::<u64>() + self.result.invalid_votes
    }

    pub fn ballot_upper_bound(&self) -> u64 {
        self.result.ballot_upper_bound
    }

    /// Margins diluted over the trusted upper bound, the population audits sample from.
    pub fn margins(&self) -> Margins {
        // the upper bound is never below the tallied total for a validated contest
        self.margins_over(self.ballot_upper_bound()).expect("validated contest")
    }

    /// Winner-minus-loser margins, diluted over `population_size` ballots.
    pub fn margins_over(&self, population_size: u64) -> Result<Margins, ModelError> {
        let tallied = self.tallied_ballots();
        if population_size < tallied || population_size == 0 {
            return Err(ModelError::PopulationTooSmall { population: population_size, tallied });
        }
        let top = self.votes[self.winner];
        let pairwise: BTreeMap<String, u64> = self
            .loser_indices()
            .map(|i| (self.candidate_id(i).to_owned(), top - self.votes[i]))
            .collect();
        let smallest = pairwise.values().copied().min().expect("at least one loser");
        Ok(Margins { pairwise, smallest, population: population_size })
    }
}

/// Winner-loser vote differences for one contest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Margins {
    /// Keyed by loser id.
    pub pairwise: BTreeMap<String, u64>,
    pub smallest: u64,
    pub population: u64,
}

impl Margins {
    /// Exact diluted margin: smallest margin over population size.
    pub fn diluted(&self) -> Ratio<u64> {
        Ratio::new(self.smallest, self.population)
    }

    pub fn diluted_f64(&self) -> f64 {
        self.smallest as f64 / self.population as f64
    }
}

impl fmt::Display for Margins {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "smallest margin {} of {} ballots (mu = {})", self.smallest, self.population, self.diluted_f64())
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn priya_fixture_validates() {
        let c = priya().validate().unwrap();
        assert_eq!(c.winner(), "Priya");
        assert_eq!(c.loser_indices().count(), 2);
    }

    #[test]
    fn exact_tie_is_rejected() {
        let err = contest(&[("A", 10), ("B", 10)], "A", 20).validate().unwrap_err();
        assert_eq!(err, ModelError::TiedOrWrongWinner("A".into()));
    }

    #[test]
    fn wrong_winner_is_rejected() {
        let err = contest(&[("A", 9), ("B", 10)], "A", 20).validate().unwrap_err();
        assert!(matches!(err, ModelError::TiedOrWrongWinner(_)));
    }

    #[test]
    fn tallies_over_bound_are_rejected() {
        let err = contest(&[("A", 15), ("B", 10)], "A", 20).validate().unwrap_err();
        assert_eq!(err, ModelError::BoundExceeded { total: 25, bound: 20 });
    }

    #[test]
    fn invalid_votes_count_toward_bound() {
        let mut c = contest(&[("A", 15), ("B", 5)], "A", 20);
        c.invalid_votes = 1;
        assert!(matches!(c.validate(), Err(ModelError::BoundExceeded { total: 21, .. })));
    }

    #[test]
    fn structural_errors() {
        assert_eq!(contest(&[("A", 1)], "A", 5).validate().unwrap_err(), ModelError::TooFewCandidates(1));
        assert_eq!(
            contest(&[("A", 2), ("A", 1)], "A", 5).validate().unwrap_err(),
            ModelError::DuplicateCandidate("A".into())
        );
        assert_eq!(contest(&[("", 2), ("B", 1)], "B", 5).validate().unwrap_err(), ModelError::EmptyCandidateId);
        assert!(matches!(
            contest(&[("INVALID", 2), ("B", 1)], "INVALID", 5).validate(),
            Err(ModelError::ReservedCandidateId(_))
        ));
        let mut c = contest(&[("A", 2), ("B", 1)], "A", 5);
        c.reported_votes.insert("Z".into(), 1);
        assert_eq!(c.validate().unwrap_err(), ModelError::UnknownCandidate("Z".into()));
    }

    #[test]
    fn priya_margins() {
        let m = priya().validate().unwrap().margins_over(100_000).unwrap();
        assert_eq!(m.smallest, 20_000);
        assert_eq!(m.diluted(), Ratio::new(1, 5));
        assert_eq!(m.pairwise["Shyam"], 20_000);
        assert_eq!(m.pairwise["Ramith"], 30_000);
    }

    #[test]
    fn two_candidate_margin() {
        let m = contest(&[("A", 60), ("B", 40)], "A", 100).validate().unwrap().margins_over(100).unwrap();
        assert_eq!(m.diluted(), Ratio::new(1, 5));
    }

    #[test]
    fn margin_is_minimum_over_pairs() {
        let m = contest(&[("A", 51), ("B", 49), ("C", 0)], "A", 100).validate().unwrap().margins_over(100).unwrap();
        assert_eq!(m.smallest, 2);
        assert_eq!(m.diluted(), Ratio::new(1, 50));
        assert_eq!(m.pairwise["C"], 51);
    }

    #[test]
    fn population_below_tally_is_rejected() {
        let c = contest(&[("A", 60), ("B", 40)], "A", 100).validate().unwrap();
        assert_eq!(c.margins_over(99).unwrap_err(), ModelError::PopulationTooSmall { population: 99, tallied: 100 });
    }

    #[test]
    fn json_shape() {
        let json = r#"{"constituency_id":"X","candidates":[{"id":"A","name":"Alpha"},{"id":"B","name":"Beta"}],
            "reported_votes":{"A":6,"B":4},"reported_winner":"A","ballot_upper_bound":12,"invalid_votes":1}"#;
        let c: Contest = serde_json::from_str(json).unwrap();
        assert_eq!(c.invalid_votes(), 1);
        let bad = json.replace("\"A\":6", "\"A\":4");
        assert!(serde_json::from_str::<Contest>(&bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn diluted_margin_in_unit_interval(votes in proptest::collection::vec(0u64..10_000, 2..6), slack in 0u64..1000) {
                let top = *votes.iter().max().unwrap();
                prop_assume!(votes.iter().filter(|&&v| v == top).count() == 1);
                let ids: Vec<String> = (0..votes.len()).map(|i| format!("c{i}")).collect();
                let winner = ids[votes.iter().position(|&v| v == top).unwrap()].clone();
                let pairs: Vec<(&str, u64)> = ids.iter().map(|s| s.as_str()).zip(votes.iter().copied()).collect();
                let total: u64 = votes.iter().sum();
                let c = contest(&pairs, &winner, total + slack).validate().unwrap();
                let m = c.margins();
                let second = votes.iter().copied().filter(|&v| v != top).max().unwrap_or(0);
                prop_assert_eq!(m.smallest, top - second);
                prop_assert!(m.smallest > 0);
                prop_assert!(m.diluted() <= Ratio::from_integer(1));
                prop_assert_eq!(m.diluted(), Ratio::new(top - second, total + slack));
            }
        }
    }
}
