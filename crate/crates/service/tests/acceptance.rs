//! Acceptance suite: one PASS/FAIL line per criterion, each checked against
//! an oracle coded here from first principles, with its time budget.
//! Exits nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rla_core::comparison::{DiscrepancyCounts, InvalidPolicy, KmParams, DEFAULT_GAMMA};
use rla_core::manifest::PreferenceManifest;
use rla_core::model::{Candidate, ContestResult};
use rla_core::parliament::{
    set_collection_oracle, ConstituencyStatus, HandCount, ParliamentConfig, ParliamentState, ParliamentVerdict,
};
use rla_core::polling::{asn_estimate, min_sample_all_winner, BravoState};
use rla_core::session::{EventLog, EventRecord, ManifestInput, Recovered, Session, SessionInputs};
use rla_core::simulator::{run_trials, Scenario};
use rla_core::stats::chi2_quantile;
use rla_core::{AuditMethod, Contest, Observation, Seed, Verdict};
use rla_service::AppState;
use serde_json::json;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "priya-fixture", budget: Duration::from_secs(1), check: priya_fixture },
        Criterion { name: "asn-reproduction", budget: Duration::from_secs(60), check: asn_reproduction },
        Criterion { name: "km-stopping-rule-equivalence", budget: Duration::from_secs(30), check: km_equivalence },
        Criterion { name: "overstatement-cost-ratio", budget: Duration::from_secs(1), check: cost_ratio },
        Criterion { name: "single-constituency-risk", budget: Duration::from_secs(600), check: single_constituency_risk },
        Criterion { name: "parliament-reduction-vs-naive", budget: Duration::from_secs(60), check: reduction_vs_naive },
        Criterion { name: "parliament-risk", budget: Duration::from_secs(600), check: parliament_risk },
        Criterion { name: "chi2-quantile", budget: Duration::from_secs(1), check: chi2_quantiles },
        Criterion { name: "replay-determinism", budget: Duration::from_secs(60), check: replay_determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.check)();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("{detail}; took {elapsed:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {} ({elapsed:.2?}): {detail}", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} ({elapsed:.2?}): {detail}", c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn contest(id: &str, votes: &[(&str, u64)], winner: &str, bound: u64) -> Contest {
    ContestResult {
        constituency_id: id.into(),
        candidates: votes.iter().map(|(c, _)| Candidate { id: (*c).into(), name: (*c).into() }).collect(),
        reported_votes: votes.iter().map(|(c, v)| ((*c).into(), *v)).collect(),
        reported_winner: winner.into(),
        ballot_upper_bound: bound,
        invalid_votes: 0,
    }
    .validate()
    .expect("valid contest")
}

fn priya() -> Contest {
    contest("PC-001", &[("Priya", 50_000), ("Shyam", 30_000), ("Ramith", 20_000)], "Priya", 100_000)
}

fn priya_fixture() -> Outcome {
    let c = priya();
    let shares = BravoState::new(&c, 0.05, None).map_err(|e| e.to_string())?.shares();
    let expect = [("Shyam", 50_000.0 / 80_000.0), ("Ramith", 50_000.0 / 70_000.0)];
    for (loser, share) in expect {
        let got = shares[loser];
        ensure((got - share).abs() <= 1e-12, || format!("share against {loser} is {got}, expected {share}"))?;
    }
    // smallest n with (2 s)^n >= 1/alpha for every loser, by repeated multiplication
    let mut n = 0u64;
    loop {
        let all = expect.iter().all(|(_, s)| (0..n).fold(1.0f64, |acc, _| acc * 2.0 * s) * 0.05 >= 1.0);
        if all {
            break;
        }
        n += 1;
    }
    let got = min_sample_all_winner(&c, 0.05).map_err(|e| e.to_string())?;
    ensure(got == n && n == 14, || format!("min all-winner sample {got}, oracle {n}"))?;
    Ok(format!("shares 0.625 / 0.714286, min sample {got}"))
}

fn asn_reproduction() -> Outcome {
    let trials = 10_000;
    let est = asn_estimate(&priya(), 0.05, trials, &Seed::from_hex("a5a5").unwrap()).map_err(|e| e.to_string())?;
    let (lo, hi) = (123.0 * 0.9, 123.0 * 1.1);
    ensure(est.mean >= lo && est.mean <= hi, || format!("ASN {:.2} outside [{lo:.1}, {hi:.1}]", est.mean))?;
    Ok(format!("ASN {:.2} +/- {:.2} over {trials} trials, target 123 +/- 10%", est.mean, est.std_error))
}

/// The stopping rule's right-hand side, written with ratio logarithms.
fn stopping_rhs(alpha: f64, gamma: f64, mu: f64, c: &DiscrepancyCounts) -> f64 {
    let weighted = |count: u64, num: f64, den: f64| if count == 0 { 0.0 } else { count as f64 * (num / den).ln() };
    let bracket = weighted(c.o1, 2.0 * gamma, 2.0 * gamma - 1.0) + weighted(c.o2, gamma, gamma - 1.0)
        - weighted(c.u1, 2.0 * gamma + 1.0, 2.0 * gamma)
        - weighted(c.u2, gamma + 1.0, gamma)
        + (1.0 / alpha).ln();
    2.0 * gamma / mu * bracket
}

fn km_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6d);
    let points = 100_000;
    let (mut boundary, mut unbounded) = (0, 0);
    for _ in 0..points {
        let gamma = if rng.random_bool(0.1) { 1.0 } else { rng.random_range(1.0..3.0) };
        let mu = 10f64.powf(rng.random_range(-3.0..0.0));
        let alpha = rng.random_range(0.001..0.3);
        let counts = DiscrepancyCounts {
            o1: rng.random_range(0..5),
            o2: if rng.random_bool(0.3) { rng.random_range(1..4) } else { 0 },
            u1: rng.random_range(0..5),
            u2: if rng.random_bool(0.2) { rng.random_range(1..3) } else { 0 },
            ..Default::default()
        };
        let rhs = stopping_rhs(alpha, gamma, mu, &counts);
        let n = if !rhs.is_finite() {
            unbounded += 1;
            rng.random_range(0..1_000_000)
        } else if rng.random_bool(0.5) {
            (rhs.max(0.0).ceil() as i64 + rng.random_range(-1..=1)).max(0) as u64
        } else {
            rng.random_range(0..=(2.0 * rhs.max(0.0)) as u64 + 10)
        };
        let params = KmParams::new(alpha, gamma, mu).map_err(|e| e.to_string())?;
        let stops = params.p_value(n, &counts) <= alpha;
        let holds = n as f64 >= rhs;
        if stops != holds {
            // the two sides may round differently only when n sits on the boundary
            let ulp = rhs.abs().max(1.0) * f64::EPSILON * 16.0;
            if (n as f64 - rhs).abs() <= ulp {
                boundary += 1;
                continue;
            }
            return Err(format!("n={n} counts={counts:?} gamma={gamma} mu={mu} alpha={alpha}: P<=alpha is {stops}, inequality {holds}"));
        }
    }
    Ok(format!("{points} tuples agree ({unbounded} unbounded, {boundary} boundary ties)"))
}

fn cost_ratio() -> Outcome {
    let params = KmParams::new(0.05, DEFAULT_GAMMA, 0.02).map_err(|e| e.to_string())?;
    let base = params.required_sample(&DiscrepancyCounts::default());
    let o1 = params.required_sample(&DiscrepancyCounts { o1: 1, ..Default::default() }) - base;
    let o2 = params.required_sample(&DiscrepancyCounts { o2: 1, ..Default::default() }) - base;
    let ratio = o2 / o1;
    let g = DEFAULT_GAMMA;
    let oracle = (g / (g - 1.0)).ln() / (2.0 * g / (2.0 * g - 1.0)).ln();
    ensure((4.9..=5.1).contains(&ratio), || format!("ratio {ratio:.4} outside [4.9, 5.1]"))?;
    ensure((ratio - oracle).abs() < 1e-9, || format!("ratio {ratio} differs from oracle {oracle}"))?;
    Ok(format!("o2 / o1 threshold increase = {ratio:.4} at gamma {g}"))
}

fn scenario(value: serde_json::Value) -> Scenario {
    serde_json::from_value(value).expect("scenario literal")
}

/// Runs a wrong-outcome scenario and checks its confirm rate against
/// `alpha + 3 sigma`, with sigma computed here.
fn risk_check(s: &Scenario) -> Outcome {
    let report = run_trials(s).map_err(|e| e.to_string())?;
    let sum = &report.summary;
    ensure(sum.outcome_wrong, || format!("{}: scenario outcome is not wrong", s.name))?;
    let a = s.risk_limit;
    let bound = a + 3.0 * (a * (1.0 - a) / s.trials as f64).sqrt();
    let rate = sum.confirmed as f64 / s.trials as f64;
    ensure(rate <= bound, || format!("{}: confirm rate {rate:.4} above {bound:.4}", s.name))?;
    Ok(format!("{} a={a}: {rate:.4} <= {bound:.4}", s.name))
}

fn single_constituency_risk() -> Outcome {
    let mut lines = Vec::new();
    for alpha in [0.05, 0.10] {
        // the reported winner only ties the true leader
        let polling = scenario(json!({
            "name": "polling-tie", "seed": "5101", "trials": 10_000, "risk_limit": alpha,
            "constituencies": [{
                "id": "PC-P", "true_votes": {"Priya": 4000, "Shyam": 4000, "Ramith": 2000},
                "reported_votes": {"Priya": 5000, "Shyam": 3000, "Ramith": 2000},
                "method": "ballot_polling", "work_threshold": 2000, "truth": "wrong"
            }]
        }));
        let comparison = scenario(json!({
            "name": "comparison-tie", "seed": "5102", "trials": 10_000, "risk_limit": alpha,
            "constituencies": [{
                "id": "PC-C", "true_votes": {"Priya": 4000, "Shyam": 4000, "Ramith": 2000},
                "misfiles": [{"from": "Shyam", "to": "Priya", "count": 1000}],
                "method": "comparison", "work_threshold": 2000, "truth": "wrong"
            }]
        }));
        // two candidates, loser truly ahead
        let two = scenario(json!({
            "name": "comparison-two-way", "seed": "5103", "trials": 10_000, "risk_limit": alpha,
            "constituencies": [{
                "id": "PC-T", "true_votes": {"A": 2480, "B": 2520},
                "misfiles": [{"from": "B", "to": "A", "count": 60}],
                "method": "comparison", "work_threshold": 2000, "truth": "wrong"
            }]
        }));
        for s in [polling, comparison, two] {
            lines.push(risk_check(&s)?);
        }
    }
    Ok(lines.join("; "))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Literal set-collection audit: enumerate every m-subset of W, discard
/// those with a confirmed hand count or a Fisher statistic at or above the
/// threshold, and decide from what is left.
fn naive_verdict(members: &[(f64, HandCount)], m: usize, threshold: f64) -> Option<ParliamentVerdict> {
    let sets = combinations(members.len(), m);
    if sets.iter().any(|s| s.iter().all(|&i| members[i].1 == HandCount::OverturnedReported)) {
        return Some(ParliamentVerdict::FullHandCountRequired);
    }
    let mut surviving = 0;
    for s in &sets {
        if s.iter().any(|&i| members[i].1 == HandCount::ConfirmedReported) {
            continue;
        }
        let x2: f64 = s
            .iter()
            .map(|&i| if members[i].1 == HandCount::OverturnedReported { 0.0 } else { -2.0 * members[i].0.ln() })
            .sum();
        if (x2 - threshold).abs() < 1e-9 {
            return None;
        }
        if x2 < threshold {
            surviving += 1;
        }
    }
    Some(if surviving == 0 { ParliamentVerdict::Confirmed } else { ParliamentVerdict::Continue })
}

fn reduction_vs_naive() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7061);
    let states = 20_000;
    let (mut tied, mut by_verdict) = (0, [0usize; 3]);
    for _ in 0..states {
        let m = rng.random_range(1..=4usize);
        let won = rng.random_range(m.max(2)..=12usize).max(2 * m - 1);
        let majority = won - m + 1;
        let seats = (2 * majority - 1).max(won);
        let alpha = rng.random_range(0.01..0.2);
        let members: Vec<(f64, HandCount)> = (0..won)
            .map(|_| {
                let p = match rng.random_range(0..4) {
                    0 => 1.0,
                    1 => rng.random_range(0.5..=1.0),
                    _ => 10f64.powf(rng.random_range(-4.0..0.0)),
                };
                let hc = match rng.random_range(0..10) {
                    0 => HandCount::ConfirmedReported,
                    1 => HandCount::OverturnedReported,
                    _ => HandCount::None,
                };
                (p, hc)
            })
            .collect();
        let statuses = members
            .iter()
            .enumerate()
            .map(|(i, &(p, hc))| ConstituencyStatus { hand_count: hc, ..ConstituencyStatus::new(format!("c{i:02}"), p) })
            .collect();
        let config = ParliamentConfig { total_seats: seats as u32, majority: Some(majority as u32), risk_limit: alpha };
        let state = ParliamentState::new(config, statuses).map_err(|e| e.to_string())?;
        ensure(state.m() == m, || format!("m = {} for |W| = {won}, majority {majority}; expected {m}", state.m()))?;
        let Some(naive) = naive_verdict(&members, m, even_df_quantile(2 * m as u32, 1.0 - alpha)) else {
            tied += 1;
            continue;
        };
        let fast = state.evaluate().verdict;
        ensure(fast == naive, || format!("{members:?} m={m} alpha={alpha}: reduction {fast:?}, naive {naive:?}"))?;
        let literal = set_collection_oracle(&state).map_err(|e| e.to_string())?;
        ensure(literal == naive, || format!("{members:?}: library enumeration {literal:?}, naive {naive:?}"))?;
        by_verdict[fast as usize] += 1;
    }
    Ok(format!(
        "{} states agree (confirmed {}, continue {}, full count {}; {tied} boundary ties skipped)",
        states - tied,
        by_verdict[ParliamentVerdict::Confirmed as usize],
        by_verdict[ParliamentVerdict::Continue as usize],
        by_verdict[ParliamentVerdict::FullHandCountRequired as usize]
    ))
}

fn parliament_scenario(alpha: f64, seed: &str) -> Scenario {
    let mut constituencies = Vec::new();
    for i in 0..10 {
        constituencies.push(if i % 2 == 0 {
            json!({"id": format!("OK{i}"), "true_votes": {"W": 620, "L": 380}, "method": "ballot_polling",
                   "work_threshold": 1000, "bundle_size": 100})
        } else {
            json!({"id": format!("OK{i}"), "true_votes": {"W": 1100, "L": 900}, "method": "comparison",
                   "work_threshold": 2000, "bundle_size": 100})
        });
    }
    // three reportedly won seats the coalition truly lost or tied
    constituencies.push(json!({"id": "BAD0", "true_votes": {"W": 500, "L": 500}, "reported_votes": {"W": 540, "L": 460},
        "method": "ballot_polling", "work_threshold": 1000, "bundle_size": 100, "truth": "wrong"}));
    constituencies.push(json!({"id": "BAD1", "true_votes": {"W": 1000, "L": 1000}, "misfiles": [{"from": "L", "to": "W", "count": 40}],
        "method": "comparison", "work_threshold": 2000, "bundle_size": 100, "truth": "wrong"}));
    constituencies.push(json!({"id": "BAD2", "true_votes": {"W": 490, "L": 510}, "reported_votes": {"W": 530, "L": 470},
        "method": "ballot_polling", "work_threshold": 1000, "bundle_size": 100, "truth": "wrong"}));
    constituencies.push(json!({"id": "LOST0", "true_votes": {"W": 400, "L": 600}, "method": "ballot_polling",
        "reportedly_won": false, "bundle_size": 100}));
    scenario(json!({
        "name": "parliament-21", "seed": seed, "trials": 10_000, "risk_limit": alpha,
        "constituencies": constituencies,
        "parliament": {"total_seats": 21, "majority": 11, "initial_sample": 20, "escalation": 0.25}
    }))
}

fn parliament_risk() -> Outcome {
    let mut lines = Vec::new();
    for (alpha, seed) in [(0.05, "b1"), (0.10, "b2")] {
        let s = parliament_scenario(alpha, seed);
        // |W| = 13 and majority 11 give m = 3, matching the three wrong seats
        let won = s.constituencies.iter().filter(|c| c.reportedly_won).count();
        ensure(won - 10 == 3, || format!("|W| = {won}"))?;
        lines.push(risk_check(&s)?);
    }
    Ok(lines.join("; "))
}

/// Chi-square CDF for even degrees of freedom 2k:
/// 1 - exp(-x/2) * sum_{j<k} (x/2)^j / j!.
fn even_df_cdf(x: f64, df: u32) -> f64 {
    let h = x / 2.0;
    let mut term = 1.0;
    let mut sum = 0.0;
    for j in 0..df / 2 {
        if j > 0 {
            term *= h / j as f64;
        }
        sum += term;
    }
    1.0 - (-h).exp() * sum
}

fn even_df_quantile(df: u32, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1000.0);
    for _ in 0..200 {
        let mid = (lo + hi) / 2.0;
        if even_df_cdf(mid, df) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

fn chi2_quantiles() -> Outcome {
    let mut parts = Vec::new();
    for df in [2, 4, 8, 58] {
        let got = chi2_quantile(df, 0.95);
        let oracle = even_df_quantile(df, 0.95);
        ensure((got - oracle).abs() <= 1e-6, || format!("df {df}: {got} vs oracle {oracle}"))?;
        parts.push(format!("df {df} = {got:.6}"));
    }
    Ok(parts.join(", "))
}

fn random_inputs(rng: &mut ChaCha8Rng, k: usize) -> SessionInputs {
    let method = if k.is_multiple_of(2) { AuditMethod::BallotPolling } else { AuditMethod::Comparison };
    let lead = rng.random_range(510..700);
    let c = contest(&format!("R-{k}"), &[("A", lead), ("B", 1000 - lead)], "A", 1000 + rng.random_range(0..20));
    let manifest = match method {
        AuditMethod::Comparison => Some(ManifestInput::Preference(PreferenceManifest::from_tallies(&c, 100))),
        AuditMethod::BallotPolling => None,
    };
    SessionInputs {
        method,
        contest: c,
        manifest,
        risk_limit: [0.05, 0.01, 1e-6][rng.random_range(0..3)],
        gamma: None,
        seed: Seed::from_bytes(rng.random::<[u8; 8]>().to_vec()),
        work_threshold: Some(rng.random_range(20..300)),
        invalid_policy: InvalidPolicy::default(),
    }
}

fn random_observation(rng: &mut ChaCha8Rng, session: &Session) -> Observation {
    let ballot = session.pending();
    if ballot.location.is_phantom() {
        return Observation::Phantom;
    }
    match rng.random_range(0..20) {
        0 => Observation::Invalid,
        1..=6 => Observation::Vote("B".into()),
        _ => Observation::Vote(ballot.location.claimed().unwrap_or("A").to_owned()),
    }
}

/// Drives a session to its end (or a step cap), returning its events and
/// the p-value after each one.
fn random_session(rng: &mut ChaCha8Rng, k: usize) -> Result<(Vec<EventRecord>, Vec<f64>), String> {
    let (mut session, created) = Session::create(random_inputs(rng, k)).map_err(|e| e.to_string())?;
    let mut events = vec![created];
    let mut ps = vec![session.p_value()];
    for _ in 0..rng.random_range(1..400) {
        if session.is_concluded() {
            break;
        }
        let record = if rng.random_bool(0.005) {
            session.halt()
        } else {
            let obs = random_observation(rng, &session);
            session.observe(obs, None)
        }
        .map_err(|e| e.to_string())?;
        events.push(record);
        ps.push(session.p_value());
    }
    if session.verdict() == Verdict::FullHandCount && rng.random_bool(0.5) {
        events.push(session.record_hand_count(HandCount::ConfirmedReported).map_err(|e| e.to_string())?);
        ps.push(session.p_value());
    }
    Ok((events, ps))
}

fn line_starts(bytes: &[u8]) -> Vec<usize> {
    std::iter::once(0).chain(bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i + 1)).collect()
}

fn reopen(path: &Path) -> Result<(Recovered<EventRecord>, Session), String> {
    let (_, recovered) = EventLog::open::<EventRecord>(path).map_err(|e| e.to_string())?;
    let session = Session::replay(&recovered.records).map_err(|e| e.to_string())?;
    Ok((recovered, session))
}

fn replay_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x7270);
    let sessions = 200;
    let mut events_total = 0;
    let mut torn = 0;
    for k in 0..sessions {
        let (events, ps) = random_session(&mut rng, k)?;
        events_total += events.len();
        let path = dir.path().join(format!("s{k}.jsonl"));
        let mut log = EventLog::create(&path).map_err(|e| e.to_string())?;
        for e in &events {
            log.append(e).map_err(|e| e.to_string())?;
        }
        drop(log);

        let (recovered, session) = reopen(&path)?;
        ensure(recovered.records == events, || format!("session {k}: reopened events differ"))?;
        let last = *ps.last().expect("created event");
        ensure(session.p_value().to_bits() == last.to_bits(), || format!("session {k}: replayed P {} vs live {last}", session.p_value()))?;

        // tear the final record at a random byte
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        let starts = line_starts(&bytes);
        let final_start = starts[starts.len() - 2];
        let cut = rng.random_range(final_start..bytes.len() - 1);
        fs::write(&path, &bytes[..cut]).map_err(|e| e.to_string())?;
        let (recovered, session) = reopen(&path)?;
        let kept = recovered.records.len();
        ensure(kept == events.len() - 1 && recovered.records[..] == events[..kept], || {
            format!("session {k}: cut at {cut} kept {kept} of {} records", events.len())
        })?;
        ensure(recovered.truncated_bytes == (cut - final_start) as u64, || format!("session {k}: truncated {} bytes", recovered.truncated_bytes))?;
        ensure(session.p_value().to_bits() == ps[kept - 1].to_bits(), || format!("session {k}: P after torn recovery differs"))?;
        torn += usize::from(cut > final_start);

        // damage before the tail is never silently dropped
        if starts.len() > 3 {
            let mut damaged = bytes.clone();
            damaged.insert(starts[1], b'#');
            fs::write(&path, &damaged).map_err(|e| e.to_string())?;
            ensure(EventLog::open::<EventRecord>(&path).is_err(), || format!("session {k}: corrupt middle record accepted"))?;
        }
    }
    let service = service_restart(&mut rng)?;
    Ok(format!("{sessions} sessions / {events_total} events replay bit-identically; {torn} torn tails recovered; {service}"))
}

/// The same property through the service's store: restart, tear, restart.
fn service_restart(rng: &mut ChaCha8Rng) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut live = Vec::new();
    {
        let state = AppState::open(dir.path()).map_err(|e| e.to_string())?;
        for k in 0..20 {
            let session = state.create_session(random_inputs(rng, k)).map_err(|e| e.message)?;
            let id = session.id().to_owned();
            let mut ps = vec![session.p_value()];
            for _ in 0..rng.random_range(1..150) {
                let p = state
                    .with_session(&id, |entry| {
                        if entry.session.is_concluded() {
                            return Ok(None);
                        }
                        let obs = random_observation(rng, &entry.session);
                        entry.apply(|s| s.observe(obs, None))?;
                        Ok(Some(entry.session.p_value()))
                    })
                    .map_err(|e| e.message)?;
                match p {
                    Some(p) => ps.push(p),
                    None => break,
                }
            }
            live.push((id, ps));
        }
    }
    let check = |state: &AppState, id: &str, want: f64| -> Result<(), String> {
        let got = state.with_session(id, |e| Ok(e.session.p_value())).map_err(|e| e.message)?;
        ensure(got.to_bits() == want.to_bits(), || format!("session {id}: P {got} after restart, expected {want}"))
    };
    let state = AppState::open(dir.path()).map_err(|e| e.to_string())?;
    for (id, ps) in &live {
        check(&state, id, *ps.last().expect("non-empty"))?;
    }
    drop(state);
    for (id, _) in &live {
        let path = rla_service::store::session_log_path(dir.path(), id);
        let bytes = fs::read(&path).map_err(|e| e.to_string())?;
        let starts = line_starts(&bytes);
        let final_start = starts[starts.len() - 2];
        fs::write(&path, &bytes[..final_start + (bytes.len() - final_start) / 2]).map_err(|e| e.to_string())?;
    }
    let state = AppState::open(dir.path()).map_err(|e| e.to_string())?;
    for (id, ps) in &live {
        check(&state, id, ps[ps.len() - 2])?;
    }
    Ok(format!("{} service sessions survive restart and a torn tail", live.len()))
}
