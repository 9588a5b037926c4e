//! Monte Carlo harness: synthetic elections with injected reporting errors,
//! audited end to end many times over to measure risk and workload.
//!
//! An election is generated once per scenario and held fixed; only the
//! audit's sampling randomness varies between trials, which is the
//! probability the risk limit speaks about.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comparison::{ComparisonConfig, ComparisonError, ComparisonState, InvalidPolicy, DEFAULT_GAMMA};
use crate::manifest::{consistency_check, PreferenceManifest};
use crate::model::{Candidate, Contest, ContestResult, ModelError, INVALID_LABEL};
use crate::observation::Observed;
use crate::parliament::{
    ConstituencyStatus, HandCount, ParliamentConfig, ParliamentError, ParliamentState, ParliamentVerdict, Proportional,
};
use crate::polling::{BravoState, PollingError};
use crate::sampling::{Seed, SeededSampler};
use crate::{AuditMethod, Verdict};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("infeasible election spec {id:?}: {reason}")]
    InfeasibleSpec { id: String, reason: String },
    #[error("scenario lists no constituencies")]
    EmptyScenario,
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("constituency id {0:?} appears more than once")]
    DuplicateConstituency(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Polling(#[from] PollingError),
    #[error(transparent)]
    Comparison(#[from] ComparisonError),
    #[error(transparent)]
    Parliament(#[from] ParliamentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Ballots whose true interpretation is `from` but which were sorted into
/// the `to` pile. Either side may be `INVALID`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Misfile {
    pub from: String,
    pub to: String,
    pub count: u64,
}

/// Whether the reported winner really won.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Correct,
    /// Some loser has at least as many true votes as the reported winner.
    Wrong,
}

fn default_bundle_size() -> u64 {
    500
}

/// One synthetic constituency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionSpec {
    pub id: String,
    /// True votes per candidate; the keys are the candidate ids.
    pub true_votes: BTreeMap<String, u64>,
    #[serde(default)]
    pub true_invalid: u64,
    #[serde(default)]
    pub misfiles: Vec<Misfile>,
    /// Slots counted in the trusted bound whose ballots are not listed.
    #[serde(default)]
    pub phantom_gap: u64,
    /// Reported tallies when they differ from the sorted piles.
    #[serde(default)]
    pub reported_votes: Option<BTreeMap<String, u64>>,
    #[serde(default)]
    pub reported_invalid: Option<u64>,
    #[serde(default = "default_bundle_size")]
    pub bundle_size: u64,
    /// Required truth of the reported outcome; generation fails otherwise.
    #[serde(default)]
    pub truth: Option<Truth>,
}

impl ElectionSpec {
    pub fn new(id: impl Into<String>, true_votes: &[(&str, u64)]) -> Self {
        ElectionSpec {
            id: id.into(),
            true_votes: true_votes.iter().map(|(c, v)| ((*c).to_owned(), *v)).collect(),
            true_invalid: 0,
            misfiles: Vec::new(),
            phantom_gap: 0,
            reported_votes: None,
            reported_invalid: None,
            bundle_size: default_bundle_size(),
            truth: None,
        }
    }

    pub fn misfile(mut self, from: &str, to: &str, count: u64) -> Self {
        self.misfiles.push(Misfile { from: from.to_owned(), to: to.to_owned(), count });
        self
    }

    pub fn expect(mut self, truth: Truth) -> Self {
        self.truth = Some(truth);
        self
    }
}

/// A listed ballot: the pile it was sorted into and what it really shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub claimed: Option<usize>,
    pub actual: Observed,
}

/// A generated constituency: reported result, sorted-pile manifest and the
/// physical ballot behind every manifest position.
#[derive(Debug, Clone)]
pub struct Election {
    pub contest: Contest,
    pub manifest: PreferenceManifest,
    pub true_votes: BTreeMap<String, u64>,
    pub truth: Truth,
    positions: Vec<Position>,
}

impl Election {
    /// What retrieving ballot `index` (1-based) yields.
    pub fn retrieve(&self, index: u64) -> Position {
        match self.positions.get((index - 1) as usize) {
            Some(p) => *p,
            None => Position { claimed: None, actual: Observed::Phantom },
        }
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn listed(&self) -> u64 {
        self.positions.len() as u64
    }
}

fn infeasible(spec: &ElectionSpec, reason: impl Into<String>) -> SimulationError {
    SimulationError::InfeasibleSpec { id: spec.id.clone(), reason: reason.into() }
}

/// Builds the physical ballots, sorts them into piles with the requested
/// misfiles, and derives the reported result. Deterministic in `seed`.
pub fn generate_election(spec: &ElectionSpec, seed: &Seed) -> Result<Election, SimulationError> {
    let ids: Vec<&String> = spec.true_votes.keys().collect();
    // label slot k < ids.len() is a candidate, the last slot is INVALID
    let invalid_slot = ids.len();
    let slot_of = |label: &str| -> Result<usize, SimulationError> {
        if label == INVALID_LABEL {
            return Ok(invalid_slot);
        }
        ids.iter().position(|id| id.as_str() == label).ok_or_else(|| infeasible(spec, format!("unknown label {label:?}")))
    };
    let slots = invalid_slot + 1;
    // pile[claimed][actual] ballot counts
    let mut piles = vec![vec![0u64; slots]; slots];
    for (k, id) in ids.iter().enumerate() {
        piles[k][k] = spec.true_votes[*id];
    }
    piles[invalid_slot][invalid_slot] = spec.true_invalid;
    for m in &spec.misfiles {
        let (from, to) = (slot_of(&m.from)?, slot_of(&m.to)?);
        if piles[from][from] < m.count {
            return Err(infeasible(spec, format!("cannot misfile {} {} ballots, only {} left", m.count, m.from, piles[from][from])));
        }
        piles[from][from] -= m.count;
        piles[to][from] += m.count;
    }

    let to_observed = |slot: usize| if slot == invalid_slot { Observed::Invalid } else { Observed::Candidate(slot) };
    let to_claim = |slot: usize| (slot != invalid_slot).then_some(slot);
    let mut rng = ChaCha8Rng::from_seed(seed.derive(&[b"election", spec.id.as_bytes()]));
    let bundle_size = spec.bundle_size.max(1);
    let mut positions = Vec::new();
    let mut rows = Vec::new();
    for (claimed, actuals) in piles.iter().enumerate() {
        let mut pile: Vec<Position> = actuals
            .iter()
            .enumerate()
            .flat_map(|(actual, &n)| {
                std::iter::repeat_n(Position { claimed: to_claim(claimed), actual: to_observed(actual) }, n as usize)
            })
            .collect();
        pile.shuffle(&mut rng);
        let label = if claimed == invalid_slot { INVALID_LABEL } else { ids[claimed].as_str() };
        for (part, chunk) in pile.chunks(bundle_size as usize).enumerate() {
            rows.push((format!("{label}-{:04}", part + 1), label.to_owned(), chunk.len() as u64));
        }
        positions.extend(pile);
    }
    let manifest = PreferenceManifest::new(rows).expect("generated bundle ids are unique");

    let pile_size = |slot: usize| piles[slot].iter().sum::<u64>();
    let reported_votes: BTreeMap<String, u64> = match &spec.reported_votes {
        Some(r) => r.clone(),
        None => ids.iter().enumerate().map(|(k, id)| ((*id).clone(), pile_size(k))).collect(),
    };
    let reported_invalid = spec.reported_invalid.unwrap_or_else(|| pile_size(invalid_slot));
    let winner = {
        let top = reported_votes.values().copied().max().unwrap_or(0);
        let leaders: Vec<&String> = reported_votes.iter().filter(|(_, v)| **v == top).map(|(k, _)| k).collect();
        match leaders.as_slice() {
            [one] => (*one).clone(),
            _ => return Err(infeasible(spec, "reported tallies have no strict winner")),
        }
    };
    let result = ContestResult {
        constituency_id: spec.id.clone(),
        candidates: ids.iter().map(|id| Candidate { id: (*id).clone(), name: (*id).clone() }).collect(),
        reported_votes,
        reported_winner: winner.clone(),
        ballot_upper_bound: positions.len() as u64 + spec.phantom_gap,
        invalid_votes: reported_invalid,
    };
    let contest = Contest::try_from(result).map_err(|e| infeasible(spec, e.to_string()))?;

    let true_w = spec.true_votes[&winner];
    let truth = if spec.true_votes.iter().any(|(id, &v)| *id != winner && v >= true_w) { Truth::Wrong } else { Truth::Correct };
    if let Some(want) = spec.truth {
        if want != truth {
            return Err(infeasible(spec, format!("reported outcome is {truth:?}, spec requires {want:?}")));
        }
    }
    Ok(Election { contest, manifest, true_votes: spec.true_votes.clone(), truth, positions })
}

/// Constituency entry of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituencyScenario {
    #[serde(flatten)]
    pub election: ElectionSpec,
    pub method: AuditMethod,
    /// Sample size at which the audit gives up and counts by hand; defaults to N.
    #[serde(default)]
    pub work_threshold: Option<u64>,
    #[serde(default = "default_true")]
    pub reportedly_won: bool,
    #[serde(default)]
    pub invalid_policy: InvalidPolicy,
}

fn default_true() -> bool {
    true
}

fn default_initial_sample() -> u64 {
    20
}

fn default_escalation() -> f64 {
    0.25
}

/// Parliamentary layer: constituencies marked `reportedly_won` form W.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParliamentScenario {
    pub total_seats: u32,
    #[serde(default)]
    pub majority: Option<u32>,
    #[serde(default = "default_initial_sample")]
    pub initial_sample: u64,
    #[serde(default = "default_escalation")]
    pub escalation: f64,
}

/// A simulation scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: Seed,
    pub trials: u64,
    pub risk_limit: f64,
    #[serde(default)]
    pub gamma: Option<f64>,
    pub constituencies: Vec<ConstituencyScenario>,
    #[serde(default)]
    pub parliament: Option<ParliamentScenario>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialVerdict {
    Confirmed,
    FullHandCount,
}

/// Result of one simulated audit. Everything except `wall_time_us` is a
/// function of the scenario and master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub verdict: TrialVerdict,
    pub total_inspected: u64,
    pub sample_sizes: BTreeMap<String, u64>,
    /// Constituencies counted by hand inside a parliamentary audit.
    pub hand_counts: u32,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean: f64,
    pub std_error: f64,
    pub min: u64,
    pub median: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl SampleStats {
    pub fn from_samples(values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        let n = sorted.len() as f64;
        let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = if sorted.len() > 1 { sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        // nearest-rank quantiles
        let rank = |q: f64| sorted[((q * n).ceil() as usize).clamp(1, sorted.len()) - 1];
        Some(SampleStats {
            mean,
            std_error: (var / n).sqrt(),
            min: sorted[0],
            median: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: sorted[sorted.len() - 1],
        })
    }
}

/// Aggregate over all trials; deterministic given the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub trials: u64,
    pub risk_limit: f64,
    /// Whether the reported outcome being audited is wrong.
    pub outcome_wrong: bool,
    pub confirmed: u64,
    pub full_hand_count: u64,
    pub confirm_rate: f64,
    pub confirm_rate_se: f64,
    /// `alpha + 3 * sqrt(alpha (1 - alpha) / trials)`.
    pub risk_bound: f64,
    /// For wrong outcomes: whether the confirm rate stays within `risk_bound`.
    pub risk_within_bound: Option<bool>,
    pub inspected: SampleStats,
    /// Per-constituency sample sizes grouped by audit method.
    pub per_method: BTreeMap<AuditMethod, SampleStats>,
    pub mean_hand_counts: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub summary: Summary,
    pub outcomes: Vec<TrialOutcome>,
    pub elapsed: Duration,
}

impl SimulationReport {
    /// Per-trial rows: trial, verdict, totals, then one column per constituency.
    pub fn to_csv(&self) -> Result<String, SimulationError> {
        let ids: Vec<&String> = self.outcomes.first().map(|o| o.sample_sizes.keys().collect()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["trial".to_owned(), "verdict".into(), "total_inspected".into(), "hand_counts".into(), "wall_time_us".into()];
        header.extend(ids.iter().map(|id| format!("n_{id}")));
        w.write_record(&header)?;
        for o in &self.outcomes {
            let mut row = vec![
                o.trial.to_string(),
                format!("{:?}", o.verdict),
                o.total_inspected.to_string(),
                o.hand_counts.to_string(),
                o.wall_time_us.to_string(),
            ];
            row.extend(ids.iter().map(|id| o.sample_sizes.get(*id).copied().unwrap_or(0).to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

struct Prepared<'a> {
    spec: &'a ConstituencyScenario,
    election: Election,
    /// Comparison audits refuse to start when the manifest disagrees with the report.
    consistent: bool,
    work_threshold: u64,
}

enum Audit {
    Polling(BravoState),
    Comparison(ComparisonState),
}

/// One constituency's audit inside one trial.
struct Run<'a> {
    prepared: &'a Prepared<'a>,
    sampler: SeededSampler,
    audit: Audit,
    /// Parliamentary audits keep sampling after the constituency's own limit.
    keep_going: bool,
}

impl<'a> Run<'a> {
    fn new(prepared: &'a Prepared<'a>, scenario: &Scenario, trial: u64, keep_going: bool) -> Result<Self, SimulationError> {
        let contest = &prepared.election.contest;
        let seed = Seed::from_bytes(scenario.seed.derive(&[b"trial", &trial.to_be_bytes(), contest.constituency_id().as_bytes()]));
        let sampler = SeededSampler::new(seed, contest.ballot_upper_bound()).expect("bound is positive");
        let audit = match prepared.spec.method {
            AuditMethod::BallotPolling => {
                // inside a parliament no pair is withdrawn early, so P_c keeps shrinking
                let alpha = if keep_going { f64::MIN_POSITIVE } else { scenario.risk_limit };
                Audit::Polling(BravoState::new(contest, alpha, Some(prepared.work_threshold))?)
            }
            AuditMethod::Comparison => {
                let config = ComparisonConfig {
                    gamma: scenario.gamma.unwrap_or(DEFAULT_GAMMA),
                    invalid_policy: prepared.spec.invalid_policy,
                    work_threshold: Some(prepared.work_threshold),
                    ..ComparisonConfig::new(scenario.risk_limit)
                };
                Audit::Comparison(ComparisonState::new(contest, config)?)
            }
        };
        Ok(Run { prepared, sampler, audit, keep_going })
    }

    fn inspected(&self) -> u64 {
        match &self.audit {
            Audit::Polling(s) => s.ballots_inspected(),
            Audit::Comparison(s) => s.ballots_inspected(),
        }
    }

    fn verdict(&self) -> Verdict {
        match &self.audit {
            Audit::Polling(s) => s.verdict(),
            Audit::Comparison(s) if self.keep_going => {
                if s.ballots_inspected() >= self.prepared.work_threshold { Verdict::FullHandCount } else { Verdict::Continue }
            }
            Audit::Comparison(s) => s.verdict(),
        }
    }

    fn p_value(&self) -> f64 {
        match &self.audit {
            Audit::Polling(s) => s.p_value(),
            Audit::Comparison(s) => s.p_value(),
        }
    }

    fn step(&mut self) {
        let index = self.sampler.next_index().index;
        let pos = self.prepared.election.retrieve(index);
        match &mut self.audit {
            Audit::Polling(s) => {
                s.observe_resolved(pos.actual).expect("stepped only while continuing");
            }
            Audit::Comparison(s) => {
                s.record(pos.claimed, pos.actual);
            }
        }
    }

    /// Samples until the audit concludes or `target` ballots are in.
    fn sample_to(&mut self, target: u64) {
        while self.inspected() < target && self.verdict() == Verdict::Continue {
            self.step();
        }
    }
}

fn prepare(scenario: &Scenario) -> Result<Vec<Prepared<'_>>, SimulationError> {
    if scenario.constituencies.is_empty() {
        return Err(SimulationError::EmptyScenario);
    }
    if scenario.trials == 0 {
        return Err(SimulationError::NoTrials);
    }
    let mut seen = std::collections::HashSet::new();
    scenario
        .constituencies
        .iter()
        .map(|spec| {
            if !seen.insert(spec.election.id.as_str()) {
                return Err(SimulationError::DuplicateConstituency(spec.election.id.clone()));
            }
            let election = generate_election(&spec.election, &scenario.seed)?;
            let bound = election.contest.ballot_upper_bound();
            let consistent = consistency_check(&election.manifest, &election.contest).is_ok();
            let work_threshold = spec.work_threshold.unwrap_or(bound).min(bound);
            Ok(Prepared { spec, election, consistent, work_threshold })
        })
        .collect()
}

/// Runs every trial and aggregates. Trials run in parallel and are merged
/// by index, so the outcome does not depend on the thread count.
pub fn run_trials(scenario: &Scenario) -> Result<SimulationReport, SimulationError> {
    let started = Instant::now();
    let prepared = prepare(scenario)?;
    // validates the parliamentary configuration once, before any trial
    let template = match &scenario.parliament {
        Some(p) => Some(parliament_template(scenario, p, &prepared)?),
        None => None,
    };
    for p in &prepared {
        Run::new(p, scenario, 0, template.is_some())?;
    }
    let outcomes: Vec<TrialOutcome> = (0..scenario.trials)
        .into_par_iter()
        .map(|t| {
            let start = Instant::now();
            let mut outcome = match (&scenario.parliament, &template) {
                (Some(p), Some(tpl)) => parliament_trial(scenario, p, tpl, &prepared, t),
                _ => independent_trial(scenario, &prepared, t),
            };
            outcome.wall_time_us = start.elapsed().as_micros() as u64;
            outcome
        })
        .collect();
    let outcome_wrong = match &template {
        Some(tpl) => true_seats(&prepared) < tpl.config().majority() as usize,
        None => prepared.iter().any(|p| p.election.truth == Truth::Wrong),
    };
    let summary = summarize(scenario, &prepared, &outcomes, outcome_wrong);
    Ok(SimulationReport { summary, outcomes, elapsed: started.elapsed() })
}

fn true_seats(prepared: &[Prepared<'_>]) -> usize {
    prepared.iter().filter(|p| p.spec.reportedly_won && p.election.truth == Truth::Correct).count()
}

/// Each constituency audited on its own; the trial confirms only if all do.
fn independent_trial(scenario: &Scenario, prepared: &[Prepared<'_>], trial: u64) -> TrialOutcome {
    let mut sample_sizes = BTreeMap::new();
    let mut all_met = true;
    for p in prepared {
        if p.spec.method == AuditMethod::Comparison && !p.consistent {
            all_met = false;
            sample_sizes.insert(p.spec.election.id.clone(), 0);
            continue;
        }
        let mut run = Run::new(p, scenario, trial, false).expect("validated in prepare");
        run.sample_to(u64::MAX);
        all_met &= run.verdict() == Verdict::RiskLimitMet;
        sample_sizes.insert(p.spec.election.id.clone(), run.inspected());
    }
    TrialOutcome {
        trial,
        verdict: if all_met { TrialVerdict::Confirmed } else { TrialVerdict::FullHandCount },
        total_inspected: sample_sizes.values().sum(),
        sample_sizes,
        hand_counts: 0,
        wall_time_us: 0,
    }
}

fn parliament_template(
    scenario: &Scenario,
    parliament: &ParliamentScenario,
    prepared: &[Prepared<'_>],
) -> Result<ParliamentState, SimulationError> {
    let config = ParliamentConfig { total_seats: parliament.total_seats, majority: parliament.majority, risk_limit: scenario.risk_limit };
    let statuses = prepared
        .iter()
        .map(|p| ConstituencyStatus {
            reportedly_won: p.spec.reportedly_won,
            method: p.spec.method.into(),
            ..ConstituencyStatus::new(p.spec.election.id.clone(), 1.0)
        })
        .collect();
    Proportional::new(parliament.escalation)?;
    Ok(ParliamentState::new(config, statuses)?)
}

/// The parliamentary loop: sample every member of W, evaluate, escalate the
/// survivors, and count a constituency by hand once its target passes the
/// work threshold.
fn parliament_trial(
    scenario: &Scenario,
    parliament: &ParliamentScenario,
    template: &ParliamentState,
    prepared: &[Prepared<'_>],
    trial: u64,
) -> TrialOutcome {
    let policy = Proportional::new(parliament.escalation).expect("validated in template");
    let mut state = template.clone();
    let mut runs: Vec<Run<'_>> = prepared.iter().map(|p| Run::new(p, scenario, trial, true).expect("validated")).collect();
    let mut targets: Vec<u64> = prepared.iter().map(|p| if p.spec.reportedly_won { parliament.initial_sample } else { 0 }).collect();
    let mut hand = vec![HandCount::None; prepared.len()];
    let mut hand_counts = 0;
    let verdict = loop {
        for (i, run) in runs.iter_mut().enumerate() {
            if hand[i] == HandCount::None {
                run.sample_to(targets[i]);
            }
            let status = state.status_mut(&prepared[i].spec.election.id).expect("same ids");
            status.n_c = run.inspected();
            status.hand_count = hand[i];
            // a p-value can underflow after very long runs of favourable ballots
            status.p_value = run.p_value().max(f64::MIN_POSITIVE);
        }
        match state.evaluate().verdict {
            ParliamentVerdict::Confirmed => break TrialVerdict::Confirmed,
            ParliamentVerdict::FullHandCountRequired => break TrialVerdict::FullHandCount,
            ParliamentVerdict::Continue => {}
        }
        let increments = state.escalate(&policy).expect("verdict is Continue");
        for (i, p) in prepared.iter().enumerate() {
            let inc = increments[&p.spec.election.id];
            if inc.increment == 0 || hand[i] != HandCount::None {
                continue;
            }
            targets[i] = inc.to;
            if inc.to > p.work_threshold || runs[i].verdict() == Verdict::FullHandCount {
                hand[i] = match p.election.truth {
                    Truth::Correct => HandCount::ConfirmedReported,
                    Truth::Wrong => HandCount::OverturnedReported,
                };
                hand_counts += 1;
            }
        }
    };
    let sample_sizes: BTreeMap<String, u64> =
        prepared.iter().zip(&runs).map(|(p, r)| (p.spec.election.id.clone(), r.inspected())).collect();
    TrialOutcome { trial, verdict, total_inspected: sample_sizes.values().sum(), sample_sizes, hand_counts, wall_time_us: 0 }
}

fn summarize(scenario: &Scenario, prepared: &[Prepared<'_>], outcomes: &[TrialOutcome], outcome_wrong: bool) -> Summary {
    let n = outcomes.len() as f64;
    let confirmed = outcomes.iter().filter(|o| o.verdict == TrialVerdict::Confirmed).count() as u64;
    let rate = confirmed as f64 / n;
    let alpha = scenario.risk_limit;
    let risk_bound = alpha + 3.0 * (alpha * (1.0 - alpha) / n).sqrt();
    let totals: Vec<u64> = outcomes.iter().map(|o| o.total_inspected).collect();
    let mut by_method: BTreeMap<AuditMethod, Vec<u64>> = BTreeMap::new();
    for o in outcomes {
        for p in prepared {
            if let Some(&size) = o.sample_sizes.get(&p.spec.election.id) {
                by_method.entry(p.spec.method).or_default().push(size);
            }
        }
    }
    Summary {
        name: scenario.name.clone(),
        trials: outcomes.len() as u64,
        risk_limit: alpha,
        outcome_wrong,
        confirmed,
        full_hand_count: outcomes.len() as u64 - confirmed,
        confirm_rate: rate,
        confirm_rate_se: (rate * (1.0 - rate) / n).sqrt(),
        risk_bound,
        risk_within_bound: outcome_wrong.then_some(rate <= risk_bound),
        inspected: SampleStats::from_samples(&totals).expect("at least one trial"),
        per_method: by_method.into_iter().filter_map(|(m, v)| SampleStats::from_samples(&v).map(|s| (m, s))).collect(),
        mean_hand_counts: outcomes.iter().map(|o| o.hand_counts as f64).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> Seed {
        Seed::from_hex("5eed").unwrap()
    }

    fn priya_spec() -> ElectionSpec {
        ElectionSpec::new("PC-001", &[("Priya", 50_000), ("Shyam", 30_000), ("Ramith", 20_000)])
    }

    fn scenario(method: AuditMethod, spec: ElectionSpec, trials: u64) -> Scenario {
        Scenario {
            name: "test".into(),
            seed: seed(),
            trials,
            risk_limit: 0.05,
            gamma: None,
            constituencies: vec![ConstituencyScenario {
                election: spec,
                method,
                work_threshold: None,
                reportedly_won: true,
                invalid_policy: InvalidPolicy::default(),
            }],
            parliament: None,
        }
    }

    #[test]
    fn zero_error_manifest_matches_truth() {
        let e = generate_election(&priya_spec(), &seed()).unwrap();
        let implied = e.manifest.implied_tallies();
        for (id, v) in &e.true_votes {
            assert_eq!(implied[id], *v);
        }
        assert_eq!(e.contest.winner(), "Priya");
        assert_eq!(e.truth, Truth::Correct);
        assert!(e.positions().iter().all(|p| p.actual == Observed::Candidate(p.claimed.unwrap())));
    }

    #[test]
    fn misfiles_land_exactly() {
        let spec = priya_spec().misfile("Shyam", "Priya", 100);
        let e = generate_election(&spec, &seed()).unwrap();
        let priya = e.contest.index_of("Priya").unwrap();
        let shyam = e.contest.index_of("Shyam").unwrap();
        let count = e.positions().iter().filter(|p| p.claimed == Some(priya) && p.actual == Observed::Candidate(shyam)).count();
        assert_eq!(count, 100);
        assert_eq!(e.contest.votes(priya), 50_100);
        assert_eq!(e.contest.votes(shyam), 29_900);
    }

    #[test]
    fn flipping_needs_enough_misfiles() {
        // reported 50000/30000/20000 with k Shyam ballots hidden in Priya's pile
        let hidden = |k: u64| {
            ElectionSpec::new("PC-001", &[("Priya", 50_000 - k), ("Shyam", 30_000 + k), ("Ramith", 20_000)])
                .misfile("Shyam", "Priya", k)
                .expect(Truth::Wrong)
        };
        assert!(matches!(generate_election(&hidden(9_999), &seed()), Err(SimulationError::InfeasibleSpec { .. })));
        let e = generate_election(&hidden(10_000), &seed()).unwrap();
        assert_eq!(e.contest.votes(e.contest.winner_index()), 50_000);
        assert_eq!(e.truth, Truth::Wrong);
    }

    #[test]
    fn infeasible_specs() {
        let over = priya_spec().misfile("Ramith", "Priya", 20_001);
        assert!(matches!(generate_election(&over, &seed()), Err(SimulationError::InfeasibleSpec { .. })));
        let tie = ElectionSpec::new("t", &[("A", 10), ("B", 10)]);
        assert!(matches!(generate_election(&tie, &seed()), Err(SimulationError::InfeasibleSpec { .. })));
        let unknown = priya_spec().misfile("Nobody", "Priya", 1);
        assert!(matches!(generate_election(&unknown, &seed()), Err(SimulationError::InfeasibleSpec { .. })));
    }

    #[test]
    fn phantom_gap_extends_the_bound() {
        let mut spec = ElectionSpec::new("g", &[("A", 60), ("B", 40)]);
        spec.phantom_gap = 5;
        let e = generate_election(&spec, &seed()).unwrap();
        assert_eq!(e.contest.ballot_upper_bound(), 105);
        assert_eq!(e.retrieve(101).actual, Observed::Phantom);
        assert_ne!(e.retrieve(100).actual, Observed::Phantom);
    }

    #[test]
    fn invalid_ballots_go_to_their_own_pile() {
        let mut spec = ElectionSpec::new("i", &[("A", 60), ("B", 30)]);
        spec.true_invalid = 10;
        let e = generate_election(&spec.misfile("INVALID", "A", 4), &seed()).unwrap();
        assert_eq!(e.contest.invalid_votes(), 6);
        assert_eq!(e.contest.votes(e.contest.index_of("A").unwrap()), 64);
        assert_eq!(e.manifest.implied_tallies()["INVALID"], 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = priya_spec().misfile("Shyam", "Priya", 100);
        let a = generate_election(&spec, &seed()).unwrap();
        let b = generate_election(&spec, &seed()).unwrap();
        assert_eq!(a.positions(), b.positions());
        let c = generate_election(&spec, &Seed::from_hex("01").unwrap()).unwrap();
        assert_ne!(a.positions(), c.positions());
    }

    #[test]
    fn repeated_single_trial_is_identical() {
        let s = scenario(AuditMethod::BallotPolling, priya_spec(), 1);
        let strip = |mut o: TrialOutcome| {
            o.wall_time_us = 0;
            o
        };
        let a = run_trials(&s).unwrap();
        let b = run_trials(&s).unwrap();
        assert_eq!(strip(a.outcomes[0].clone()), strip(b.outcomes[0].clone()));
        assert_eq!(a.summary, b.summary);
        assert!(a.outcomes[0].total_inspected >= 14);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let s = scenario(AuditMethod::Comparison, priya_spec(), 64);
        let par = run_trials(&s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| run_trials(&s)).unwrap();
        assert_eq!(par.summary, serial.summary);
    }

    #[test]
    fn correct_outcome_polling_confirms() {
        let r = run_trials(&scenario(AuditMethod::BallotPolling, priya_spec(), 200)).unwrap();
        assert!(!r.summary.outcome_wrong);
        assert_eq!(r.summary.risk_within_bound, None);
        assert!(r.summary.confirm_rate > 0.95);
        assert!((r.summary.inspected.mean - 123.0).abs() < 30.0, "{}", r.summary.inspected.mean);
    }

    #[test]
    fn inconsistent_manifest_forces_hand_count() {
        let mut spec = priya_spec();
        spec.reported_votes = Some([("Priya".to_owned(), 30_000), ("Shyam".to_owned(), 50_000), ("Ramith".to_owned(), 20_000)].into());
        let r = run_trials(&scenario(AuditMethod::Comparison, spec, 5)).unwrap();
        assert_eq!(r.summary.full_hand_count, 5);
        assert_eq!(r.summary.inspected.max, 0);
    }

    #[test]
    fn csv_rows() {
        let r = run_trials(&scenario(AuditMethod::BallotPolling, priya_spec(), 3)).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "trial,verdict,total_inspected,hand_counts,wall_time_us,n_PC-001");
        assert!(lines[1].starts_with("0,Confirmed,"));
    }

    #[test]
    fn small_parliament_runs() {
        let mut constituencies = Vec::new();
        for i in 0..13 {
            let spec = ElectionSpec::new(format!("c{i:02}"), &[("W", 700), ("L", 300)]);
            constituencies.push(ConstituencyScenario {
                election: spec,
                method: if i % 2 == 0 { AuditMethod::BallotPolling } else { AuditMethod::Comparison },
                work_threshold: None,
                reportedly_won: true,
                invalid_policy: InvalidPolicy::default(),
            });
        }
        let s = Scenario {
            name: "parliament".into(),
            seed: seed(),
            trials: 20,
            risk_limit: 0.05,
            gamma: None,
            constituencies,
            parliament: Some(ParliamentScenario { total_seats: 21, majority: None, initial_sample: 20, escalation: 0.25 }),
        };
        let r = run_trials(&s).unwrap();
        assert!(!r.summary.outcome_wrong);
        assert_eq!(r.summary.confirmed, 20);
        assert_eq!(r.summary.per_method.len(), 2);
    }

    #[test]
    fn scenario_json_schema() {
        let json = r#"{
            "name": "priya",
            "seed": "ab12",
            "trials": 10,
            "risk_limit": 0.05,
            "constituencies": [{
                "id": "PC-001",
                "method": "comparison",
                "true_votes": {"Priya": 50000, "Shyam": 30000, "Ramith": 20000},
                "misfiles": [{"from": "Shyam", "to": "Priya", "count": 100}],
                "work_threshold": 2000
            }]
        }"#;
        let s: Scenario = serde_json::from_str(json).unwrap();
        assert_eq!(s.constituencies[0].election.misfiles[0].count, 100);
        assert_eq!(s.constituencies[0].election.bundle_size, 500);
        assert!(s.constituencies[0].reportedly_won);
        let back: Scenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
