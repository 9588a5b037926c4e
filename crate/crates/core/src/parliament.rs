//! Auditing a parliamentary majority by combining independent constituency
//! p-values with Fisher's function.
//!
//! If the reported party or coalition `w` won the set `W` of constituencies
//! and needs `majority` seats, the outcome can only be wrong if `w` truly
//! lost every constituency in some subset of `W` of size
//! `m = |W| - (majority - 1)`. The audit confirms once no such subset
//! survives: a subset is removed when a hand count confirms one of its
//! members, or when its Fisher statistic clears the chi-square quantile
//! with `2m` degrees of freedom.
//!
//! The collection of m-subsets is never materialized. Every subset's
//! statistic is a sum of per-constituency terms `-2 ln P_c`, so the
//! smallest statistic over subsets of the not-yet-confirmed members is the
//! sum of their m smallest terms, i.e. of the m largest p-values. The
//! collection is empty exactly when that minimum clears the threshold.
//! [`set_collection_oracle`] keeps the literal enumeration for checking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{chi2_quantile, fisher_term};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParliamentError {
    #[error("risk limit must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("majority {majority} must exceed half of {seats} seats and not exceed them")]
    InvalidMajority { seats: u32, majority: u32 },
    #[error("{constituencies} constituencies listed for {seats} seats")]
    TooManyConstituencies { seats: u32, constituencies: usize },
    #[error("constituency id {0:?} appears more than once")]
    DuplicateConstituency(String),
    #[error("constituency {id:?} has p-value {p} outside (0, 1]")]
    InvalidP { id: String, p: f64 },
    #[error("reported winner holds {won} seats, short of the {majority} needed")]
    NoReportedMajority { won: usize, majority: u32 },
    #[error("set enumeration limited to |W| <= {max_w} and m <= {max_m}")]
    TooLarge { max_w: usize, max_m: usize },
    #[error("escalation applies only while the audit continues")]
    NotContinuing,
    #[error("escalation fraction must be finite and non-negative, got {0}")]
    InvalidFraction(f64),
    #[error("unknown constituency {0:?}")]
    UnknownConstituency(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParliamentConfig {
    pub total_seats: u32,
    /// Seats needed to govern; defaults to `floor(total_seats / 2) + 1`.
    #[serde(default)]
    pub majority: Option<u32>,
    pub risk_limit: f64,
}

impl ParliamentConfig {
    pub fn new(total_seats: u32, risk_limit: f64) -> Self {
        ParliamentConfig { total_seats, majority: None, risk_limit }
    }

    pub fn majority(&self) -> u32 {
        self.majority.unwrap_or(self.total_seats / 2 + 1)
    }

    fn validate(&self) -> Result<(), ParliamentError> {
        let majority = self.majority();
        if 2 * u64::from(majority) <= u64::from(self.total_seats) || majority > self.total_seats {
            return Err(ParliamentError::InvalidMajority { seats: self.total_seats, majority });
        }
        if !(self.risk_limit > 0.0 && self.risk_limit < 1.0) {
            return Err(ParliamentError::InvalidAlpha(self.risk_limit));
        }
        Ok(())
    }
}

/// Result of a full hand count in one constituency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HandCount {
    #[default]
    #[serde(alias = "none")]
    None,
    #[serde(alias = "confirmed_reported")]
    ConfirmedReported,
    #[serde(alias = "overturned_reported")]
    OverturnedReported,
}

/// Audit method label, recorded for reporting and escalation policies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodLabel {
    BallotPolling,
    Comparison,
    /// Any other method producing a sequentially valid p-value.
    #[serde(untagged)]
    Other(String),
}

fn default_true() -> bool {
    true
}

fn default_p() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituencyStatus {
    pub id: String,
    #[serde(default = "default_true")]
    pub reportedly_won: bool,
    #[serde(default = "default_method")]
    pub method: MethodLabel,
    /// Sequential p-value for "the reported winner here is wrong"; 1 before any data.
    #[serde(default = "default_p")]
    pub p_value: f64,
    #[serde(default)]
    pub n_c: u64,
    #[serde(default)]
    pub hand_count: HandCount,
}

fn default_method() -> MethodLabel {
    MethodLabel::BallotPolling
}

impl ConstituencyStatus {
    pub fn new(id: impl Into<String>, p_value: f64) -> Self {
        ConstituencyStatus {
            id: id.into(),
            reportedly_won: true,
            method: default_method(),
            p_value,
            n_c: 0,
            hand_count: HandCount::None,
        }
    }

    /// P-value as it enters the Fisher statistic: an overturned hand count
    /// is no evidence against the null, so it counts as 1.
    pub fn effective_p(&self) -> f64 {
        match self.hand_count {
            HandCount::OverturnedReported => 1.0,
            _ => self.p_value,
        }
    }
}

/// The parliament state file: configuration plus one row per constituency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParliamentFile {
    pub config: ParliamentConfig,
    pub constituencies: Vec<ConstituencyStatus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParliamentVerdict {
    Confirmed,
    Continue,
    FullHandCountRequired,
}

/// A validated snapshot of every constituency's audit status.
#[derive(Debug, Clone, PartialEq)]
pub struct ParliamentState {
    config: ParliamentConfig,
    statuses: Vec<ConstituencyStatus>,
    m: usize,
    threshold: f64,
}

impl ParliamentState {
    pub fn new(config: ParliamentConfig, statuses: Vec<ConstituencyStatus>) -> Result<Self, ParliamentError> {
        config.validate()?;
        if statuses.len() > config.total_seats as usize {
            return Err(ParliamentError::TooManyConstituencies { seats: config.total_seats, constituencies: statuses.len() });
        }
        let mut seen = HashSet::new();
        for s in &statuses {
            if !seen.insert(s.id.as_str()) {
                return Err(ParliamentError::DuplicateConstituency(s.id.clone()));
            }
            if !(s.p_value > 0.0 && s.p_value <= 1.0) {
                return Err(ParliamentError::InvalidP { id: s.id.clone(), p: s.p_value });
            }
        }
        let won = statuses.iter().filter(|s| s.reportedly_won).count();
        let majority = config.majority();
        if won < majority as usize {
            return Err(ParliamentError::NoReportedMajority { won, majority });
        }
        let m = won - (majority as usize - 1);
        let threshold = chi2_quantile(2 * m as u32, 1.0 - config.risk_limit);
        Ok(ParliamentState { config, statuses, m, threshold })
    }

    pub fn from_file(file: ParliamentFile) -> Result<Self, ParliamentError> {
        Self::new(file.config, file.constituencies)
    }

    pub fn to_file(&self) -> ParliamentFile {
        ParliamentFile { config: self.config, constituencies: self.statuses.clone() }
    }

    pub fn config(&self) -> &ParliamentConfig {
        &self.config
    }

    pub fn statuses(&self) -> &[ConstituencyStatus] {
        &self.statuses
    }

    /// Minimum number of reportedly won constituencies that must all be
    /// wrong for the parliamentary outcome to be wrong.
    pub fn m(&self) -> usize {
        self.m
    }

    /// `chi2_{2m}(1 - alpha)`.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn status_mut(&mut self, id: &str) -> Result<&mut ConstituencyStatus, ParliamentError> {
        self.statuses
            .iter_mut()
            .find(|s| s.id == id)
            .ok_or_else(|| ParliamentError::UnknownConstituency(id.to_owned()))
    }

    /// Replaces a p-value, keeping the state valid.
    pub fn set_p_value(&mut self, id: &str, p: f64) -> Result<(), ParliamentError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ParliamentError::InvalidP { id: id.to_owned(), p });
        }
        self.status_mut(id)?.p_value = p;
        Ok(())
    }

    /// Members of W not confirmed by a hand count, sorted by effective
    /// p-value descending (ties by id).
    fn active(&self) -> Vec<&ConstituencyStatus> {
        let mut active: Vec<&ConstituencyStatus> = self
            .statuses
            .iter()
            .filter(|s| s.reportedly_won && s.hand_count != HandCount::ConfirmedReported)
            .collect();
        active.sort_by(|a, b| by_effective_p_desc(a, b));
        active
    }

    pub fn evaluate(&self) -> Evaluation {
        let overturned = self
            .statuses
            .iter()
            .filter(|s| s.reportedly_won && s.hand_count == HandCount::OverturnedReported)
            .count();
        let active = self.active();
        let mut eval = Evaluation {
            verdict: ParliamentVerdict::Continue,
            m: self.m,
            threshold: self.threshold,
            x2_min: None,
            reported_seats: self.statuses.iter().filter(|s| s.reportedly_won).count(),
            active: active.len(),
            overturned,
            drivers: Vec::new(),
        };
        if overturned >= self.m {
            eval.verdict = ParliamentVerdict::FullHandCountRequired;
            return eval;
        }
        if active.len() < self.m {
            eval.verdict = ParliamentVerdict::Confirmed;
            return eval;
        }
        let drivers = &active[..self.m];
        let x2 = sum_terms(drivers.iter().map(|s| s.effective_p()));
        eval.x2_min = Some(x2);
        eval.drivers = drivers.iter().map(|s| s.id.clone()).collect();
        eval.verdict = if x2 >= self.threshold { ParliamentVerdict::Confirmed } else { ParliamentVerdict::Continue };
        eval
    }

    /// Constituencies that still appear in some surviving subset, empty
    /// unless the audit continues. The subset containing `c` with the
    /// smallest statistic pairs `c` with the m - 1 other active members of
    /// largest effective p-value, so `c` survives iff that subset does.
    pub fn surviving_members(&self) -> Vec<&ConstituencyStatus> {
        if self.evaluate().verdict != ParliamentVerdict::Continue {
            return Vec::new();
        }
        let active = self.active();
        active
            .iter()
            .enumerate()
            .filter(|&(i, c)| {
                let partners = active.iter().enumerate().filter(|&(j, _)| j != i).take(self.m - 1).map(|(_, o)| o.effective_p());
                sum_terms(std::iter::once(c.effective_p()).chain(partners)) < self.threshold
            })
            .map(|(_, c)| *c)
            .collect()
    }

    /// Sample-size increments under `policy` for every constituency.
    /// Constituencies outside the surviving subsets get 0.
    pub fn escalate(&self, policy: &dyn EscalationPolicy) -> Result<BTreeMap<String, Escalation>, ParliamentError> {
        if self.evaluate().verdict != ParliamentVerdict::Continue {
            return Err(ParliamentError::NotContinuing);
        }
        let surviving: HashSet<&str> = self.surviving_members().iter().map(|s| s.id.as_str()).collect();
        Ok(self
            .statuses
            .iter()
            .map(|s| {
                let increment = if surviving.contains(s.id.as_str()) { policy.increment(s) } else { 0 };
                (s.id.clone(), Escalation { from: s.n_c, to: s.n_c + increment, increment })
            })
            .collect())
    }

    /// Rows sorted the way reports show them: effective p-value descending,
    /// so the first `m` active rows are those driving `x2_min`.
    pub fn table(&self) -> Vec<ConstituencyRow> {
        let mut rows: Vec<&ConstituencyStatus> = self.statuses.iter().collect();
        rows.sort_by(|a, b| by_effective_p_desc(a, b));
        rows.into_iter()
            .map(|s| ConstituencyRow {
                id: s.id.clone(),
                reportedly_won: s.reportedly_won,
                method: s.method.clone(),
                p_value: s.p_value,
                effective_p: s.effective_p(),
                n_c: s.n_c,
                hand_count: s.hand_count,
            })
            .collect()
    }
}

fn by_effective_p_desc(a: &ConstituencyStatus, b: &ConstituencyStatus) -> Ordering {
    b.effective_p().total_cmp(&a.effective_p()).then_with(|| a.id.cmp(&b.id))
}

/// Fisher statistic summed in a canonical order (ascending p), so that
/// equal multisets of p-values give bit-identical sums.
fn sum_terms(ps: impl Iterator<Item = f64>) -> f64 {
    let mut ps: Vec<f64> = ps.collect();
    ps.sort_by(|a, b| a.total_cmp(b));
    ps.into_iter().map(fisher_term).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub verdict: ParliamentVerdict,
    pub m: usize,
    pub threshold: f64,
    /// Smallest Fisher statistic over surviving subsets, when any survive.
    pub x2_min: Option<f64>,
    pub reported_seats: usize,
    /// Members of W not confirmed by hand count.
    pub active: usize,
    pub overturned: usize,
    /// The m constituencies whose p-values make up `x2_min`.
    pub drivers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituencyRow {
    pub id: String,
    pub reportedly_won: bool,
    pub method: MethodLabel,
    pub p_value: f64,
    pub effective_p: f64,
    pub n_c: u64,
    pub hand_count: HandCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Escalation {
    pub from: u64,
    pub to: u64,
    pub increment: u64,
}

/// Decides how much to grow one constituency's sample.
pub trait EscalationPolicy {
    fn increment(&self, status: &ConstituencyStatus) -> u64;
}

/// Grows every surviving sample by a fixed fraction, rounding up, and by at
/// least one ballot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportional {
    fraction: f64,
}

impl Proportional {
    pub fn new(fraction: f64) -> Result<Self, ParliamentError> {
        if !(fraction >= 0.0 && fraction.is_finite()) {
            return Err(ParliamentError::InvalidFraction(fraction));
        }
        Ok(Proportional { fraction })
    }
}

impl Default for Proportional {
    fn default() -> Self {
        Proportional { fraction: 0.25 }
    }
}

impl EscalationPolicy for Proportional {
    fn increment(&self, status: &ConstituencyStatus) -> u64 {
        ((status.n_c as f64 * self.fraction).ceil() as u64).max(1)
    }
}

/// Like [`Proportional`], but comparison audits, which gain more per
/// ballot, grow by a different fraction than ballot-polling ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ByMethod {
    pub polling: Proportional,
    pub comparison: Proportional,
}

impl EscalationPolicy for ByMethod {
    fn increment(&self, status: &ConstituencyStatus) -> u64 {
        match status.method {
            MethodLabel::Comparison => self.comparison.increment(status),
            _ => self.polling.increment(status),
        }
    }
}

pub const ORACLE_MAX_W: usize = 20;
pub const ORACLE_MAX_M: usize = 5;

/// Literal evaluation over every m-subset of W, for desk-scale checks of
/// [`ParliamentState::evaluate`].
pub fn set_collection_oracle(state: &ParliamentState) -> Result<ParliamentVerdict, ParliamentError> {
    Ok(match surviving_collection(state)? {
        None => ParliamentVerdict::FullHandCountRequired,
        Some(c) if c.is_empty() => ParliamentVerdict::Confirmed,
        Some(_) => ParliamentVerdict::Continue,
    })
}

/// Union of the surviving subsets found by [`set_collection_oracle`]'s
/// enumeration; empty unless the audit continues.
pub fn surviving_members_oracle(state: &ParliamentState) -> Result<BTreeSet<String>, ParliamentError> {
    Ok(surviving_collection(state)?.into_iter().flatten().flatten().map(|c| c.id.clone()).collect())
}

/// The collection after removal steps, or `None` when some subset was
/// entirely overturned by hand counts.
fn surviving_collection(state: &ParliamentState) -> Result<Option<Vec<Vec<&ConstituencyStatus>>>, ParliamentError> {
    let won: Vec<&ConstituencyStatus> = state.statuses.iter().filter(|s| s.reportedly_won).collect();
    if won.len() > ORACLE_MAX_W || state.m > ORACLE_MAX_M {
        return Err(ParliamentError::TooLarge { max_w: ORACLE_MAX_W, max_m: ORACLE_MAX_M });
    }
    let mut collection: Vec<Vec<&ConstituencyStatus>> = won.iter().copied().combinations(state.m).collect();
    // every member of some subset was hand counted and overturned
    if collection.iter().any(|set| set.iter().all(|c| c.hand_count == HandCount::OverturnedReported)) {
        return Ok(None);
    }
    for c in &won {
        if c.hand_count == HandCount::ConfirmedReported {
            collection.retain(|set| !set.iter().any(|member| member.id == c.id));
        }
    }
    collection.retain(|set| sum_terms(set.iter().map(|c| c.effective_p())) < state.threshold);
    Ok(Some(collection))
}
