//! `rla`: plan, run and simulate risk-limiting audits.
//!
//! Exit status: 0 when a verdict is produced (or a session is paused),
//! 1 when the audit calls for a full hand count, 2 for bad input.

mod interactive;

use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rla_client::Client;
use rla_core::api::{MemberInput, ParliamentRequest, ParliamentView};
use rla_core::comparison::{ComparisonConfig, ComparisonState, DiscrepancyCounts, InvalidPolicy, Threshold, DEFAULT_GAMMA};
use rla_core::manifest::{consistency_check, BallotManifest, BundleListing, PreferenceManifest};
use rla_core::model::ContestResult;
use rla_core::parliament::{ByMethod, ParliamentFile, ParliamentState, ParliamentVerdict, Proportional};
use rla_core::polling::{asn_estimate, min_sample_all_winner, BravoState};
use rla_core::sampling::{Seed, SeededSampler};
use rla_core::session::{ManifestInput, SessionInputs};
use rla_core::simulator::{run_trials, Scenario};
use rla_core::{AuditMethod, Contest, Verdict};
use serde::Serialize;

use crate::interactive::{fmt_p, Local, Outcome, Remote};

#[derive(Parser)]
#[command(name = "rla", version, about = "Risk-limiting audits for plurality constituencies and parliaments")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ballot-polling audit of one constituency.
    Bravo(AuditArgs),
    /// Ballot-level comparison audit against a preference manifest.
    Comparison(AuditArgs),
    /// Evaluate a parliamentary majority from per-constituency p-values.
    Parliament(ParliamentArgs),
    /// Run Monte Carlo trials of a scenario file.
    Simulate(SimulateArgs),
    /// Print the sampled ballot sequence for a seed.
    Sample(SampleArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct AuditArgs {
    /// Reported result (JSON).
    #[arg(long)]
    results: PathBuf,
    /// Ballot manifest CSV for polling, preference manifest CSV for comparison.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    gamma: Option<f64>,
    /// Published random seed, in hex. Needed for sessions and for the
    /// ballot-polling ASN estimate.
    #[arg(long)]
    seed: Option<Seed>,
    /// Print sample-size estimates instead of starting a session.
    #[arg(long)]
    plan: bool,
    /// Continue the session these inputs started earlier.
    #[arg(long)]
    resume: bool,
    /// Monte Carlo trials for the ASN estimate in `--plan`.
    #[arg(long, default_value_t = 2000)]
    trials: u64,
    /// Sample size at which the audit gives up and calls for a hand count.
    #[arg(long)]
    work_threshold: Option<u64>,
    /// Comparison: score an unexpected invalid ballot like a phantom.
    #[arg(long)]
    invalid_adverse: bool,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Args)]
struct StoreArgs {
    /// Directory holding session logs.
    #[arg(long, env = "RLA_DATA_DIR", default_value = "rla-data")]
    data_dir: PathBuf,
    /// Run the session on a server instead of in this process.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct ParliamentArgs {
    /// Parliament state file (JSON): config plus one row per constituency.
    #[arg(long)]
    results: PathBuf,
    /// Also print the sample-size increments for the next round.
    #[arg(long)]
    escalate: bool,
    #[arg(long, default_value_t = 0.25)]
    fraction: f64,
    /// Growth fraction for comparison rows; defaults to `--fraction`.
    #[arg(long)]
    comparison_fraction: Option<f64>,
    /// Register the parliament with a server and print its view.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario's trial count.
    #[arg(long)]
    trials: Option<u64>,
    /// Write per-trial rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    seed: Seed,
    /// Population size N; taken from `--results` when omitted.
    #[arg(long)]
    population: Option<u64>,
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    count: u64,
    /// First draw counter.
    #[arg(long, default_value_t = 0)]
    start: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, env = "RLA_DATA_DIR", default_value = "rla-data")]
    data_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Bravo(args) => audit(AuditMethod::BallotPolling, args, cli.json),
        Command::Comparison(args) => audit(AuditMethod::Comparison, args, cli.json),
        Command::Parliament(args) => parliament(args, cli.json),
        Command::Simulate(args) => simulate(args, cli.json),
        Command::Sample(args) => sample(args, cli.json),
        Command::Serve(args) => serve(args),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn read_contest(path: &Path) -> Result<Contest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let result: ContestResult = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    result.validate().with_context(|| format!("validating {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn verdict_code(v: Verdict) -> u8 {
    match v {
        Verdict::FullHandCount => 1,
        _ => 0,
    }
}

fn audit(method: AuditMethod, args: AuditArgs, json: bool) -> Result<u8> {
    require_file(&args.results)?;
    if let Some(m) = &args.manifest {
        require_file(m)?;
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        bail!("--alpha must lie strictly between 0 and 1");
    }
    let contest = read_contest(&args.results)?;
    let manifest = match (method, &args.manifest) {
        (AuditMethod::Comparison, Some(path)) => {
            let m = PreferenceManifest::from_path(path).with_context(|| format!("reading {}", path.display()))?;
            consistency_check(&m, &contest).with_context(|| format!("checking {} against the reported result", path.display()))?;
            Some(ManifestInput::Preference(m))
        }
        (AuditMethod::Comparison, None) => bail!("comparison audits need --manifest with a preference manifest"),
        (AuditMethod::BallotPolling, Some(path)) => {
            Some(ManifestInput::Ballot(BallotManifest::from_path(path).with_context(|| format!("reading {}", path.display()))?))
        }
        (AuditMethod::BallotPolling, None) => None,
    };
    if let Some(m) = &manifest {
        if m.listed_total() > contest.ballot_upper_bound() {
            bail!("the manifest lists {} ballots, more than the upper bound {}", m.listed_total(), contest.ballot_upper_bound());
        }
    }
    if args.plan {
        return match method {
            AuditMethod::BallotPolling => plan_polling(&contest, &args, json),
            AuditMethod::Comparison => plan_comparison(&contest, &args, json),
        };
    }
    let seed = args.seed.clone().context("--seed is required to start a session")?;
    let inputs = SessionInputs {
        method,
        contest: contest.clone(),
        manifest,
        risk_limit: args.alpha,
        gamma: match method {
            AuditMethod::Comparison => Some(args.gamma.unwrap_or(DEFAULT_GAMMA)),
            AuditMethod::BallotPolling => None,
        },
        seed,
        work_threshold: args.work_threshold,
        invalid_policy: if args.invalid_adverse { InvalidPolicy::Adverse } else { InvalidPolicy::default() },
    };
    let mut backend: Box<dyn interactive::Backend> = match &args.store.server {
        Some(url) => Box::new(Remote::open(Client::new(url), inputs, args.resume)?),
        None => Box::new(Local::open(inputs, &args.store.data_dir, args.resume)?),
    };
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    match interactive::run(backend.as_mut(), &contest, json, &mut input, &mut out)? {
        Outcome::Concluded(v) => Ok(verdict_code(v)),
        Outcome::Paused => {
            eprintln!("paused; rerun with --resume to continue");
            Ok(0)
        }
    }
}

#[derive(Serialize)]
struct PollingPlan {
    constituency_id: String,
    risk_limit: f64,
    shares: BTreeMap<String, f64>,
    min_sample_all_winner: u64,
    asn: rla_core::polling::AsnEstimate,
}

fn plan_polling(contest: &Contest, args: &AuditArgs, json: bool) -> Result<u8> {
    let shares = BravoState::new(contest, args.alpha, None)?.shares();
    let plan = PollingPlan {
        constituency_id: contest.constituency_id().to_owned(),
        risk_limit: args.alpha,
        shares,
        min_sample_all_winner: min_sample_all_winner(contest, args.alpha)?,
        asn: asn_estimate(contest, args.alpha, args.trials, args.seed.as_ref().context("--seed is required for the ASN estimate")?)?,
    };
    if json {
        print_json(&plan)?;
        return Ok(0);
    }
    println!("ballot-polling plan for {} at risk limit {}", plan.constituency_id, plan.risk_limit);
    for (loser, s) in &plan.shares {
        println!("  winner share against {loser}: {s:.6}");
    }
    println!("minimum sample if every ballot shows the winner: {}", plan.min_sample_all_winner);
    println!(
        "average sample number ({} trials): {:.1} +/- {:.1} (range {}..{})",
        plan.asn.trials, plan.asn.mean, plan.asn.std_error, plan.asn.min, plan.asn.max
    );
    Ok(0)
}

#[derive(Serialize)]
struct ComparisonPlan {
    constituency_id: String,
    risk_limit: f64,
    gamma: f64,
    diluted_margin: f64,
    zero_discrepancy_threshold: Threshold,
    /// Extra ballots needed per discrepancy of each kind.
    cost: BTreeMap<&'static str, f64>,
}

fn plan_comparison(contest: &Contest, args: &AuditArgs, json: bool) -> Result<u8> {
    let config = ComparisonConfig { gamma: args.gamma.unwrap_or(DEFAULT_GAMMA), ..ComparisonConfig::new(args.alpha) };
    let state = ComparisonState::new(contest, config)?;
    let p = *state.params();
    let scale = 2.0 * p.gamma / p.diluted_margin;
    let plan = ComparisonPlan {
        constituency_id: contest.constituency_id().to_owned(),
        risk_limit: p.risk_limit,
        gamma: p.gamma,
        diluted_margin: p.diluted_margin,
        zero_discrepancy_threshold: p.stopping_threshold(&DiscrepancyCounts::default()),
        cost: [
            ("o1", scale * p.o1_weight()),
            ("o2", scale * p.o2_weight()),
            ("u1", -scale * p.u1_weight()),
            ("u2", -scale * p.u2_weight()),
        ]
        .into(),
    };
    if json {
        print_json(&plan)?;
        return Ok(0);
    }
    println!("comparison plan for {} at risk limit {}, gamma {}", plan.constituency_id, plan.risk_limit, plan.gamma);
    println!("diluted margin: {:.6}", plan.diluted_margin);
    match plan.zero_discrepancy_threshold {
        Threshold::Finite(n) => println!("ballots needed with no discrepancies: {n}"),
        Threshold::Unbounded => println!("no sample size suffices; count by hand"),
    }
    for (kind, cost) in &plan.cost {
        println!("  each {kind} changes the threshold by {cost:+.2} ballots");
    }
    Ok(0)
}

fn parliament(args: ParliamentArgs, json: bool) -> Result<u8> {
    require_file(&args.results)?;
    let text = std::fs::read_to_string(&args.results).with_context(|| format!("reading {}", args.results.display()))?;
    let file: ParliamentFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.results.display()))?;
    let view = match &args.server {
        Some(url) => {
            let request = ParliamentRequest {
                config: file.config,
                constituencies: file.constituencies.iter().cloned().map(|status| MemberInput { status, session_id: None }).collect(),
            };
            Client::new(url).create_parliament(&request)?
        }
        None => {
            let state = ParliamentState::from_file(file.clone())?;
            ParliamentView { parliament_id: String::new(), evaluation: state.evaluate(), table: state.table() }
        }
    };
    let escalation = if args.escalate && view.evaluation.verdict == ParliamentVerdict::Continue {
        let polling = Proportional::new(args.fraction)?;
        let comparison = args.comparison_fraction.map(Proportional::new).transpose()?.unwrap_or(polling);
        Some(ParliamentState::from_file(file)?.escalate(&ByMethod { polling, comparison })?)
    } else {
        None
    };
    let code = u8::from(view.evaluation.verdict == ParliamentVerdict::FullHandCountRequired);
    if json {
        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            view: &'a ParliamentView,
            #[serde(skip_serializing_if = "Option::is_none")]
            escalation: Option<&'a BTreeMap<String, rla_core::parliament::Escalation>>,
        }
        print_json(&Out { view: &view, escalation: escalation.as_ref() })?;
        return Ok(code);
    }
    let e = &view.evaluation;
    if !view.parliament_id.is_empty() {
        println!("parliament {}", view.parliament_id);
    }
    println!("reported seats {}, m = {}, active {}, overturned {}", e.reported_seats, e.m, e.active, e.overturned);
    match e.x2_min {
        Some(x2) => println!("X2_min = {x2:.4}, threshold = {:.4}", e.threshold),
        None => println!("threshold = {:.4}", e.threshold),
    }
    println!("verdict: {:?}", e.verdict);
    println!("{:<16} {:>5} {:>12} {:>12} {:>8}  hand count", "constituency", "won", "p", "effective p", "n");
    for row in &view.table {
        let step = escalation.as_ref().and_then(|m| m.get(&row.id)).map(|s| format!("  -> {}", s.to)).unwrap_or_default();
        println!(
            "{:<16} {:>5} {:>12} {:>12} {:>8}  {:?}{step}",
            row.id,
            if row.reportedly_won { "yes" } else { "no" },
            fmt_p(row.p_value),
            fmt_p(row.effective_p),
            row.n_c,
            row.hand_count
        );
    }
    Ok(code)
}

fn simulate(args: SimulateArgs, json: bool) -> Result<u8> {
    require_file(&args.scenario)?;
    let text = std::fs::read_to_string(&args.scenario).with_context(|| format!("reading {}", args.scenario.display()))?;
    let mut scenario: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing {}", args.scenario.display()))?;
    if let Some(t) = args.trials {
        scenario.trials = t;
    }
    let report = run_trials(&scenario)?;
    if let Some(path) = &args.csv {
        std::fs::write(path, report.to_csv()?).with_context(|| format!("writing {}", path.display()))?;
    }
    let s = &report.summary;
    if json {
        print_json(s)?;
        return Ok(0);
    }
    println!("{}: {} trials in {:.2?}", if s.name.is_empty() { "scenario" } else { &s.name }, s.trials, report.elapsed);
    println!(
        "confirmed {} ({:.4} +/- {:.4}), full hand count {}",
        s.confirmed, s.confirm_rate, s.confirm_rate_se, s.full_hand_count
    );
    if let Some(ok) = s.risk_within_bound {
        println!("reported outcome is wrong; confirm rate {} the bound {:.4}", if ok { "is within" } else { "EXCEEDS" }, s.risk_bound);
    }
    println!(
        "ballots inspected: mean {:.1}, median {}, p90 {}, p99 {}, max {}",
        s.inspected.mean, s.inspected.median, s.inspected.p90, s.inspected.p99, s.inspected.max
    );
    for (method, st) in &s.per_method {
        println!("  {}: mean {:.1} per constituency", method.as_str(), st.mean);
    }
    if s.mean_hand_counts > 0.0 {
        println!("mean constituencies counted by hand: {:.2}", s.mean_hand_counts);
    }
    Ok(0)
}

fn sample(args: SampleArgs, json: bool) -> Result<u8> {
    for p in args.results.iter().chain(&args.manifest) {
        require_file(p)?;
    }
    let contest = args.results.as_deref().map(read_contest).transpose()?;
    let population = match (args.population, &contest) {
        (Some(n), _) => n,
        (None, Some(c)) => c.ballot_upper_bound(),
        (None, None) => bail!("give --population or --results"),
    };
    let manifest: Option<Box<dyn BundleListing>> = match &args.manifest {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let header = text.lines().next().unwrap_or_default().trim();
            if header == PreferenceManifest::HEADER {
                Some(Box::new(PreferenceManifest::from_csv(text.as_bytes())?))
            } else {
                Some(Box::new(BallotManifest::from_csv(text.as_bytes())?))
            }
        }
    };
    let sampler = SeededSampler::resume(args.seed.clone(), population, args.start)?;
    let mut out = std::io::stdout().lock();
    for counter in args.start..args.start + args.count {
        let index = sampler.index_at(counter);
        let location = manifest.as_ref().map(|m| m.locate(index, population)).transpose()?;
        if json {
            #[derive(Serialize)]
            struct Row<'a> {
                counter: u64,
                index: u64,
                #[serde(skip_serializing_if = "Option::is_none")]
                location: Option<&'a rla_core::manifest::Location>,
            }
            serde_json::to_writer(&mut out, &Row { counter, index, location: location.as_ref() })?;
            writeln!(out)?;
            continue;
        }
        match location {
            None => writeln!(out, "{counter}\t{index}")?,
            Some(rla_core::manifest::Location::Phantom) => writeln!(out, "{counter}\t{index}\tPHANTOM")?,
            Some(rla_core::manifest::Location::Ballot { bundle_id, offset, claimed }) => {
                writeln!(out, "{counter}\t{index}\t{bundle_id}\t{offset}\t{}", claimed.unwrap_or_default())?
            }
        }
    }
    Ok(0)
}

fn serve(args: ServeArgs) -> Result<u8> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info,tower_http=info".into()))
        .with_writer(std::io::stderr)
        .init();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(rla_service::serve(SocketAddr::new(args.host, args.port), args.data_dir))?;
    Ok(0)
}
