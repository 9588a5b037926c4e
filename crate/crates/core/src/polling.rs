//! BRAVO ballot-polling audit for a single-winner plurality contest, with
//! phantom ballots scored against the reported winner.
//!
//! Each (winner, loser) pair keeps a likelihood ratio T that is multiplied
//! by `2s` for a winner vote and `2(1 - s)` for a vote for that loser or a
//! phantom, where `s = v_w / (v_w + v_l)`. Statistics are held as the two
//! event counts per pair, and `log T` is recomputed from them, so a state
//! rebuilt from a draw log is bit-identical to the original.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Contest;
use crate::observation::{Observation, Observed};
use crate::sampling::Seed;
use crate::Verdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PollingError {
    #[error("risk limit must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("the audit has already concluded")]
    AuditConcluded,
    #[error("{0:?} is not a candidate in this contest")]
    UnknownCandidate(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Pair {
    loser: usize,
    share: f64,
    ln_up: f64,
    ln_down: f64,
    favourable: u64,
    adverse: u64,
    rejected_at: Option<u64>,
}

impl Pair {
    fn new(contest: &Contest, loser: usize) -> Self {
        let w = contest.votes(contest.winner_index()) as f64;
        let l = contest.votes(loser) as f64;
        let share = w / (w + l);
        Pair { loser, share, ln_up: (2.0 * share).ln(), ln_down: (2.0 * (1.0 - share)).ln(), favourable: 0, adverse: 0, rejected_at: None }
    }

    fn log_t(&self) -> f64 {
        let mut total = 0.0;
        if self.favourable > 0 {
            total += self.favourable as f64 * self.ln_up;
        }
        if self.adverse > 0 {
            total += self.adverse as f64 * self.ln_down;
        }
        total
    }

    /// Smallest number of consecutive winner votes that reaches `threshold`.
    fn winner_votes_to_reach(&self, threshold: f64) -> u64 {
        if threshold <= 0.0 {
            return 0;
        }
        let mut n = (threshold / self.ln_up).ceil().max(0.0) as u64;
        while n > 0 && (n - 1) as f64 * self.ln_up >= threshold {
            n -= 1;
        }
        while (n as f64) * self.ln_up < threshold {
            n += 1;
        }
        n
    }
}

/// Sequential BRAVO state for one constituency.
#[derive(Debug, Clone, PartialEq)]
pub struct BravoState {
    contest: Contest,
    pairs: Vec<Pair>,
    risk_limit: f64,
    /// `ln(1/alpha)`; a pair is rejected once `log T` reaches it.
    log_threshold: f64,
    work_threshold: u64,
    inspected: u64,
    halted: bool,
}

impl BravoState {
    /// Fresh state with every T = 1. `work_threshold` defaults to the
    /// ballot upper bound and is clamped to it.
    pub fn new(contest: &Contest, risk_limit: f64, work_threshold: Option<u64>) -> Result<Self, PollingError> {
        if !(risk_limit > 0.0 && risk_limit < 1.0) {
            return Err(PollingError::InvalidAlpha(risk_limit));
        }
        let bound = contest.ballot_upper_bound();
        Ok(BravoState {
            pairs: contest.loser_indices().map(|l| Pair::new(contest, l)).collect(),
            contest: contest.clone(),
            risk_limit,
            log_threshold: -risk_limit.ln(),
            work_threshold: work_threshold.unwrap_or(bound).min(bound),
            inspected: 0,
            halted: false,
        })
    }

    pub fn contest(&self) -> &Contest {
        &self.contest
    }

    pub fn risk_limit(&self) -> f64 {
        self.risk_limit
    }

    pub fn work_threshold(&self) -> u64 {
        self.work_threshold
    }

    pub fn ballots_inspected(&self) -> u64 {
        self.inspected
    }

    /// Conditional vote share `s` for each loser.
    pub fn shares(&self) -> BTreeMap<String, f64> {
        self.pairs.iter().map(|p| (self.loser_id(p), p.share)).collect()
    }

    pub fn log_statistics(&self) -> BTreeMap<String, f64> {
        self.pairs.iter().map(|p| (self.loser_id(p), p.log_t())).collect()
    }

    /// Losers whose null hypothesis has been rejected, with the draw at which it happened.
    pub fn rejected(&self) -> BTreeMap<String, u64> {
        self.pairs.iter().filter_map(|p| p.rejected_at.map(|n| (self.loser_id(p), n))).collect()
    }

    fn loser_id(&self, p: &Pair) -> String {
        self.contest.candidate_id(p.loser).to_owned()
    }

    pub fn all_rejected(&self) -> bool {
        self.pairs.iter().all(|p| p.rejected_at.is_some())
    }

    pub fn verdict(&self) -> Verdict {
        if self.all_rejected() {
            Verdict::RiskLimitMet
        } else if self.halted || self.inspected >= self.work_threshold {
            Verdict::FullHandCount
        } else {
            Verdict::Continue
        }
    }

    /// Conservative sequential p-value, `min(1, max_l 1/T_wl)`.
    pub fn p_value(&self) -> f64 {
        let worst = self.pairs.iter().map(Pair::log_t).fold(f64::INFINITY, f64::min);
        (-worst).exp().min(1.0)
    }

    /// Operator decision to stop sampling and count everything by hand.
    pub fn halt(&mut self) {
        if self.verdict() == Verdict::Continue {
            self.halted = true;
        }
    }

    pub fn observe(&mut self, observation: &Observation) -> Result<Verdict, PollingError> {
        let observed = observation
            .resolve(&self.contest)
            .ok_or_else(|| PollingError::UnknownCandidate(observation.as_str().to_owned()))?;
        self.observe_resolved(observed)
    }

    pub fn observe_resolved(&mut self, observed: Observed) -> Result<Verdict, PollingError> {
        if self.verdict() != Verdict::Continue {
            return Err(PollingError::AuditConcluded);
        }
        self.inspected += 1;
        let winner = self.contest.winner_index();
        for pair in self.pairs.iter_mut().filter(|p| p.rejected_at.is_none()) {
            match observed {
                Observed::Candidate(c) if c == winner => pair.favourable += 1,
                Observed::Candidate(c) if c == pair.loser => pair.adverse += 1,
                Observed::Phantom => pair.adverse += 1,
                Observed::Candidate(_) | Observed::Invalid => {}
            }
            if pair.log_t() >= self.log_threshold {
                pair.rejected_at = Some(self.inspected);
            }
        }
        Ok(self.verdict())
    }

    pub fn snapshot(&self) -> BravoSnapshot {
        BravoSnapshot {
            ballots_inspected: self.inspected,
            p_value: self.p_value(),
            shares: self.shares(),
            log_t: self.log_statistics(),
            rejected: self.rejected(),
            verdict: self.verdict(),
        }
    }
}

/// Read-only status view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BravoSnapshot {
    pub ballots_inspected: u64,
    pub p_value: f64,
    pub shares: BTreeMap<String, f64>,
    #[serde(rename = "log_T", serialize_with = "crate::json::finite_map", deserialize_with = "crate::json::nullable_map")]
    pub log_t: BTreeMap<String, f64>,
    pub rejected: BTreeMap<String, u64>,
    pub verdict: Verdict,
}

/// Smallest sample that confirms the outcome if every sampled ballot shows
/// the reported winner. `risk_limit` may be 1, which needs no ballots.
pub fn min_sample_all_winner(contest: &Contest, risk_limit: f64) -> Result<u64, PollingError> {
    if !(risk_limit > 0.0 && risk_limit <= 1.0) {
        return Err(PollingError::InvalidAlpha(risk_limit));
    }
    let threshold = -risk_limit.ln();
    Ok(contest
        .loser_indices()
        .map(|l| Pair::new(contest, l).winner_votes_to_reach(threshold))
        .max()
        .unwrap_or(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsnEstimate {
    pub trials: u64,
    pub mean: f64,
    pub std_error: f64,
    pub min: u64,
    pub max: u64,
}

/// Monte Carlo average sample number: draws ballots with replacement from
/// the reported distribution (invalid ballots included) until every pair is
/// rejected or the work threshold is reached.
pub fn asn_estimate(contest: &Contest, risk_limit: f64, trials: u64, seed: &Seed) -> Result<AsnEstimate, PollingError> {
    BravoState::new(contest, risk_limit, None)?;
    let trials = trials.max(1);
    let weights: Vec<(Observed, u64)> = (0..contest.candidate_count())
        .map(|i| (Observed::Candidate(i), contest.votes(i)))
        .chain(std::iter::once((Observed::Invalid, contest.invalid_votes())))
        .filter(|(_, w)| *w > 0)
        .collect();
    let total: u64 = weights.iter().map(|(_, w)| w).sum();
    let stops: Vec<u64> = {
        use rayon::prelude::*;
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::from_seed(seed.derive(&[b"asn", &t.to_be_bytes()]));
                let mut state = BravoState::new(contest, risk_limit, None).expect("validated above");
                while state.verdict() == Verdict::Continue {
                    let mut pick = rng.random_range(0..total);
                    let observed = weights
                        .iter()
                        .find(|(_, w)| {
                            if pick < *w {
                                true
                            } else {
                                pick -= w;
                                false
                            }
                        })
                        .map(|(o, _)| *o)
                        .expect("pick below total");
                    state.observe_resolved(observed).expect("audit continues");
                }
                state.ballots_inspected()
            })
            .collect()
    };
    let n = stops.len() as f64;
    let mean = stops.iter().sum::<u64>() as f64 / n;
    let var = if stops.len() > 1 { stops.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(AsnEstimate {
        trials,
        mean,
        std_error: (var / n).sqrt(),
        min: *stops.iter().min().expect("non-empty"),
        max: *stops.iter().max().expect("non-empty"),
    })
}
