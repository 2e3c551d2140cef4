//! The execution abstraction shared by the virtual-time and wall-clock
//! engines, plus the run protocols built on top of it.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate_server_runs, AggregateError, RunResult};
use crate::planner::{plan_for_scenario, QueryPlan};
use crate::query::{LatencyRecord, LoggedResponse, QueryTrace};
use crate::rng::{derive_seed, unit_f64, CounterRng, Stream};
use crate::schedule::{build_trace_with_seed, ScheduleError};
use crate::settings::{ModeKind, ScenarioKind, TestSettings};

/// Which responses the engine keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LoggingPolicy {
    Off,
    All,
    /// Each response is kept with `probability`, decided by the compliance
    /// stream of `seed` at counter `response_id`.
    Sampled {
        probability: f64,
        seed: u64,
    },
}

impl LoggingPolicy {
    /// Policy actually applied for `settings`: accuracy mode logs everything.
    pub fn effective(self, settings: &TestSettings) -> Self {
        match settings.mode() {
            ModeKind::Accuracy => LoggingPolicy::All,
            ModeKind::Performance => self,
        }
    }

    pub fn should_log(&self, response_id: u64) -> bool {
        match *self {
            LoggingPolicy::Off => false,
            LoggingPolicy::All => true,
            LoggingPolicy::Sampled { probability, seed } => {
                let key = CounterRng::stream_key(seed, Stream::Compliance);
                unit_f64(CounterRng::at(key, response_id)) < probability
            }
        }
    }

    /// Whether raw payload bytes are retained alongside digests.
    pub fn retains_payloads(&self) -> bool {
        matches!(self, LoggingPolicy::All)
    }
}

/// What a SUT is told about the run it is about to serve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunContext {
    pub scenario: ScenarioKind,
    pub mode: ModeKind,
    pub settings_digest: u64,
    pub trace_seed: u64,
    pub trace_digest: u64,
    pub loaded_sample_count: u64,
}

impl RunContext {
    pub fn new(settings: &TestSettings, trace: &QueryTrace) -> Self {
        Self {
            scenario: settings.scenario(),
            mode: settings.mode(),
            settings_digest: settings.digest(),
            trace_seed: trace.seed(),
            trace_digest: trace.digest(),
            loaded_sample_count: settings.spec().loaded_sample_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("SUT protocol violation: {0}")]
    Protocol(String),
    #[error("incomplete run: {missing} of {issued} queries never completed")]
    Incomplete { issued: u64, missing: u64 },
    #[error("SUT failure: {0}")]
    Sut(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Everything one run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub result: RunResult,
    /// One record per completed query, in issue order.
    pub records: Vec<LatencyRecord>,
    /// First response id of each record's query.
    pub first_response_ids: Vec<u64>,
    pub responses: Vec<LoggedResponse>,
    pub trace_seed: u64,
    pub trace_digest: u64,
}

/// Runs one trace against a SUT.
pub trait Harness {
    fn sut_name(&self) -> &str;

    fn execute(
        &mut self,
        settings: &TestSettings,
        trace: &QueryTrace,
        logging: LoggingPolicy,
    ) -> Result<RunOutcome, RunError>;
}

impl<H: Harness + ?Sized> Harness for &mut H {
    fn sut_name(&self) -> &str {
        (**self).sut_name()
    }

    fn execute(
        &mut self,
        settings: &TestSettings,
        trace: &QueryTrace,
        logging: LoggingPolicy,
    ) -> Result<RunOutcome, RunError> {
        (**self).execute(settings, trace, logging)
    }
}

/// Seed of the `index`-th repetition of a scenario; the first run uses the
/// configured seed itself.
pub fn run_seed(settings: &TestSettings, index: u32) -> u64 {
    let seed = settings.spec().rng_seed;
    if index == 0 {
        seed
    } else {
        derive_seed(seed, u64::from(index))
    }
}

/// All runs of one performance measurement and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRuns {
    pub plan: QueryPlan,
    pub runs: Vec<RunOutcome>,
    pub aggregate: RunResult,
}

/// Number of runs the scenario requires.
pub fn required_runs(settings: &TestSettings) -> u32 {
    match settings.scenario() {
        ScenarioKind::Server => settings.spec().server_run_count,
        _ => 1,
    }
}

/// Full performance protocol: Server repeats `server_run_count` times with
/// derived seeds and reports the minimum; other scenarios run once.
pub fn run_performance<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    logging: LoggingPolicy,
) -> Result<ScenarioRuns, RunError> {
    let settings = settings.with_mode(ModeKind::Performance);
    let plan = plan_for_scenario(&settings);
    let mut runs = Vec::new();
    for i in 0..required_runs(&settings) {
        let trace = build_trace_with_seed(&settings, &plan, run_seed(&settings, i))?;
        runs.push(harness.execute(&settings, &trace, logging)?);
    }
    let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
    let aggregate = aggregate_server_runs(&results)?;
    Ok(ScenarioRuns {
        plan,
        runs,
        aggregate,
    })
}

/// Single performance run with an explicit trace seed.
pub fn run_once<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    seed: u64,
    logging: LoggingPolicy,
) -> Result<RunOutcome, RunError> {
    let plan = plan_for_scenario(settings);
    let trace = build_trace_with_seed(settings, &plan, seed)?;
    harness.execute(settings, &trace, logging)
}

/// Digest of every sample's response from an accuracy-mode pass.
pub type AccuracyLog = BTreeMap<u64, u64>;

/// Accuracy-mode pass over the whole loaded sample set.
pub fn run_accuracy<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
) -> Result<(RunOutcome, AccuracyLog), RunError> {
    let settings = settings.with_mode(ModeKind::Accuracy);
    let plan = plan_for_scenario(&settings);
    let trace = build_trace_with_seed(&settings, &plan, settings.spec().rng_seed)?;
    let outcome = harness.execute(&settings, &trace, LoggingPolicy::All)?;
    let log = outcome
        .responses
        .iter()
        .map(|r| (r.sample_index, r.payload_digest))
        .collect();
    Ok((outcome, log))
}
