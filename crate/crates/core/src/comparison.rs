//! Transitive ballot-level comparison audit over sorted ballot piles, using
//! the Kaplan-Markov bound with the discrepancy-category simplification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::Location;
use crate::model::{Contest, INVALID_LABEL};
use crate::observation::{Observation, Observed};
use crate::Verdict;

/// Error inflation factor used unless the operator picks another.
pub const DEFAULT_GAMMA: f64 = 1.03905;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComparisonError {
    #[error("bundle label {0:?} is neither a candidate nor INVALID")]
    UnknownBundleLabel(String),
    #[error("{0:?} is not a candidate in this contest")]
    UnknownCandidate(String),
    #[error("sampled ballot has no claimed interpretation")]
    MissingClaim,
    #[error("diluted margin must be positive, got {0}")]
    DegenerateMargin(f64),
    #[error("error inflation factor must be at least 1, got {0}")]
    InvalidGamma(f64),
    #[error("risk limit must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("the audit has already concluded")]
    AuditConcluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Discrepancy {
    TwoOverstatement,
    OneOverstatement,
    Neutral,
    OneUnderstatement,
    TwoUnderstatement,
    None,
}

/// How an invalid ballot found during the audit is scored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidPolicy {
    /// Blank-vote rules: invalid in the winner's pile overstates by one,
    /// in a loser's pile it is neutral (or a one-vote understatement when
    /// there are only two candidates).
    #[default]
    BlankVote,
    /// Score every unexpected invalid ballot like a phantom.
    Adverse,
}

/// Classifies the difference between a ballot's pile label and what the
/// auditor reads from it.
pub fn classify(claimed: &str, observed: &Observation, contest: &Contest, policy: InvalidPolicy) -> Result<Discrepancy, ComparisonError> {
    let claimed = resolve_label(claimed, contest)?;
    let observed = observed
        .resolve(contest)
        .ok_or_else(|| ComparisonError::UnknownCandidate(observed.as_str().to_owned()))?;
    Ok(classify_resolved(claimed, observed, contest, policy))
}

/// Maps a bundle label to a candidate index, `None` meaning the INVALID pile.
pub fn resolve_label(label: &str, contest: &Contest) -> Result<Option<usize>, ComparisonError> {
    if label == INVALID_LABEL {
        return Ok(None);
    }
    contest.index_of(label).map(Some).ok_or_else(|| ComparisonError::UnknownBundleLabel(label.to_owned()))
}

/// Category from the change each winner-loser margin would undergo if the
/// claimed interpretation were corrected to the observed one.
pub fn classify_resolved(claimed: Option<usize>, observed: Observed, contest: &Contest, policy: InvalidPolicy) -> Discrepancy {
    let observed = match observed {
        Observed::Phantom => return Discrepancy::TwoOverstatement,
        Observed::Candidate(c) => Some(c),
        Observed::Invalid if policy == InvalidPolicy::Adverse && claimed.is_some() => {
            return Discrepancy::TwoOverstatement
        }
        Observed::Invalid => None,
    };
    if observed == claimed {
        return Discrepancy::None;
    }
    let w = contest.winner_index();
    let credit = |label: Option<usize>, cand: usize| i32::from(label == Some(cand));
    let (mut lowest, mut highest) = (i32::MAX, i32::MIN);
    for l in contest.loser_indices() {
        let change = credit(observed, w) - credit(observed, l) - credit(claimed, w) + credit(claimed, l);
        lowest = lowest.min(change);
        highest = highest.max(change);
    }
    match lowest {
        i32::MIN..=-2 => Discrepancy::TwoOverstatement,
        -1 => Discrepancy::OneOverstatement,
        0 => Discrepancy::Neutral,
        1 => Discrepancy::OneUnderstatement,
        _ if highest >= 2 => Discrepancy::TwoUnderstatement,
        _ => unreachable!("margin changes are bounded by two"),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyCounts {
    pub o1: u64,
    pub o2: u64,
    pub u1: u64,
    pub u2: u64,
    pub neutral: u64,
}

impl DiscrepancyCounts {
    pub fn record(&mut self, d: Discrepancy) {
        match d {
            Discrepancy::TwoOverstatement => self.o2 += 1,
            Discrepancy::OneOverstatement => self.o1 += 1,
            Discrepancy::Neutral => self.neutral += 1,
            Discrepancy::OneUnderstatement => self.u1 += 1,
            Discrepancy::TwoUnderstatement => self.u2 += 1,
            Discrepancy::None => {}
        }
    }
}

/// Parameters frozen before the first ballot is examined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmParams {
    pub risk_limit: f64,
    pub gamma: f64,
    pub diluted_margin: f64,
}

impl KmParams {
    pub fn new(risk_limit: f64, gamma: f64, diluted_margin: f64) -> Result<Self, ComparisonError> {
        if !(risk_limit > 0.0 && risk_limit < 1.0) {
            return Err(ComparisonError::InvalidAlpha(risk_limit));
        }
        if !(1.0..f64::INFINITY).contains(&gamma) {
            return Err(ComparisonError::InvalidGamma(gamma));
        }
        if diluted_margin.is_nan() || diluted_margin <= 0.0 {
            return Err(ComparisonError::DegenerateMargin(diluted_margin));
        }
        Ok(KmParams { risk_limit, gamma, diluted_margin })
    }

    /// `ln(1 / (1 - 1/(2 gamma)))`, the cost of a 1-vote overstatement.
    pub fn o1_weight(&self) -> f64 {
        -(1.0 - 1.0 / (2.0 * self.gamma)).ln()
    }

    /// `ln(1 / (1 - 1/gamma))`; infinite when gamma = 1.
    pub fn o2_weight(&self) -> f64 {
        -(1.0 - 1.0 / self.gamma).ln()
    }

    pub fn u1_weight(&self) -> f64 {
        (1.0 + 1.0 / (2.0 * self.gamma)).ln()
    }

    pub fn u2_weight(&self) -> f64 {
        (1.0 + 1.0 / self.gamma).ln()
    }

    /// Net discrepancy penalty; zero-count terms are skipped so that
    /// gamma = 1 with no 2-vote overstatements stays finite.
    fn penalty(&self, c: &DiscrepancyCounts) -> f64 {
        let term = |count: u64, weight: f64| if count == 0 { 0.0 } else { count as f64 * weight };
        term(c.o1, self.o1_weight()) + term(c.o2, self.o2_weight()) - term(c.u1, self.u1_weight()) - term(c.u2, self.u2_weight())
    }

    /// Right-hand side of the stopping inequality, before rounding up.
    pub fn required_sample(&self, counts: &DiscrepancyCounts) -> f64 {
        2.0 * self.gamma / self.diluted_margin * (self.penalty(counts) - self.risk_limit.ln())
    }

    /// Smallest n satisfying the stopping rule, or `Unbounded` when no
    /// sample short of a full hand count can.
    pub fn stopping_threshold(&self, counts: &DiscrepancyCounts) -> Threshold {
        let rhs = self.required_sample(counts);
        if rhs.is_nan() || rhs == f64::INFINITY {
            return Threshold::Unbounded;
        }
        Threshold::Finite(rhs.max(0.0).ceil() as u64)
    }

    pub fn log_p_value(&self, n: u64, counts: &DiscrepancyCounts) -> f64 {
        let shrink = if n == 0 { 0.0 } else { n as f64 * self.diluted_margin / (2.0 * self.gamma) };
        self.penalty(counts) - shrink
    }

    /// Kaplan-Markov sequential p-value after `n` ballots, capped at 1.
    pub fn p_value(&self, n: u64, counts: &DiscrepancyCounts) -> f64 {
        let log_p = self.log_p_value(n, counts);
        if log_p.is_nan() {
            return 1.0;
        }
        log_p.min(0.0).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Finite(u64),
    Unbounded,
}

/// Session configuration for a comparison audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub risk_limit: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub invalid_policy: InvalidPolicy,
    #[serde(default)]
    pub work_threshold: Option<u64>,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

impl ComparisonConfig {
    pub fn new(risk_limit: f64) -> Self {
        ComparisonConfig { risk_limit, gamma: DEFAULT_GAMMA, invalid_policy: InvalidPolicy::default(), work_threshold: None }
    }
}

/// Result of auditing one ballot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditStep {
    pub discrepancy: Discrepancy,
    pub p_value: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonState {
    contest: Contest,
    params: KmParams,
    policy: InvalidPolicy,
    counts: DiscrepancyCounts,
    inspected: u64,
    work_threshold: u64,
    halted: bool,
}

impl ComparisonState {
    /// The diluted margin is taken over the contest's ballot upper bound,
    /// which is the population indices are drawn from.
    pub fn new(contest: &Contest, config: ComparisonConfig) -> Result<Self, ComparisonError> {
        let params = KmParams::new(config.risk_limit, config.gamma, contest.margins().diluted_f64())?;
        let bound = contest.ballot_upper_bound();
        Ok(ComparisonState {
            contest: contest.clone(),
            params,
            policy: config.invalid_policy,
            counts: DiscrepancyCounts::default(),
            inspected: 0,
            work_threshold: config.work_threshold.unwrap_or(bound).min(bound),
            halted: false,
        })
    }

    pub fn contest(&self) -> &Contest {
        &self.contest
    }

    pub fn params(&self) -> &KmParams {
        &self.params
    }

    pub fn counts(&self) -> &DiscrepancyCounts {
        &self.counts
    }

    pub fn ballots_inspected(&self) -> u64 {
        self.inspected
    }

    pub fn p_value(&self) -> f64 {
        self.params.p_value(self.inspected, &self.counts)
    }

    pub fn stopping_threshold(&self) -> Threshold {
        self.params.stopping_threshold(&self.counts)
    }

    pub fn verdict(&self) -> Verdict {
        if self.p_value() <= self.params.risk_limit {
            Verdict::RiskLimitMet
        } else if self.halted || self.inspected >= self.work_threshold {
            Verdict::FullHandCount
        } else {
            Verdict::Continue
        }
    }

    pub fn halt(&mut self) {
        if self.verdict() == Verdict::Continue {
            self.halted = true;
        }
    }

    /// Classifies and records one sampled ballot. A phantom location is
    /// scored as a phantom whatever was entered.
    pub fn audit_ballot(&mut self, location: &Location, observed: &Observation) -> Result<AuditStep, ComparisonError> {
        let (claimed, observed) = match location {
            Location::Phantom => (None, Observed::Phantom),
            Location::Ballot { claimed, .. } => {
                let claimed = claimed.as_deref().ok_or(ComparisonError::MissingClaim)?;
                let observed = observed
                    .resolve(&self.contest)
                    .ok_or_else(|| ComparisonError::UnknownCandidate(observed.as_str().to_owned()))?;
                (resolve_label(claimed, &self.contest)?, observed)
            }
        };
        self.audit_resolved(claimed, observed)
    }

    pub fn audit_resolved(&mut self, claimed: Option<usize>, observed: Observed) -> Result<AuditStep, ComparisonError> {
        if self.verdict() != Verdict::Continue {
            return Err(ComparisonError::AuditConcluded);
        }
        Ok(self.record(claimed, observed))
    }

    /// Records a ballot regardless of the current verdict. Parliamentary
    /// audits keep sampling a constituency after its own risk limit is met.
    pub fn record(&mut self, claimed: Option<usize>, observed: Observed) -> AuditStep {
        let discrepancy = classify_resolved(claimed, observed, &self.contest, self.policy);
        self.counts.record(discrepancy);
        self.inspected += 1;
        AuditStep { discrepancy, p_value: self.p_value(), verdict: self.verdict() }
    }

    pub fn snapshot(&self) -> ComparisonSnapshot {
        ComparisonSnapshot {
            ballots_inspected: self.inspected,
            counts: self.counts,
            gamma: self.params.gamma,
            diluted_margin: self.params.diluted_margin,
            p_value: self.p_value(),
            stopping_threshold: self.stopping_threshold(),
            verdict: self.verdict(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSnapshot {
    pub ballots_inspected: u64,
    #[serde(flatten)]
    pub counts: DiscrepancyCounts,
    pub gamma: f64,
    pub diluted_margin: f64,
    pub p_value: f64,
    pub stopping_threshold: Threshold,
    pub verdict: Verdict,
}
