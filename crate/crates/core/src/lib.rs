//! Core of the inference load generator.
//!
//! Everything in this crate is pure computation over in-memory values: test
//! settings and their validation, statistical query planning, deterministic
//! trace generation, scenario metrics and validity rules, simulated systems
//! under test, a virtual-time engine, the compliance tests and the
//! maximum-load search drivers. IO, wall-clock execution, log files and the
//! command line live in the `loadgen` crate.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod compliance;
pub mod digest;
pub mod harness;
pub mod metrics;
pub mod planner;
pub mod query;
pub mod rng;
pub mod schedule;
pub mod search;
pub mod settings;
pub mod sim_engine;
pub mod simsut;

pub use compliance::{ComplianceConfig, ComplianceTest, ComplianceVerdict, Evidence};
pub use digest::{fnv1a64, Fnv1a64};
pub use harness::{Harness, LoggingPolicy, RunContext, RunError, RunOutcome, ScenarioRuns};
pub use metrics::{RunResult, ScenarioMetric};
pub use planner::{norm_inv, plan_for_scenario, required_query_count, QueryPlan};
pub use query::{
    LatencyRecord, LoggedResponse, Query, QueryRef, QueryTrace, SampleResponse, SampleSlice,
    SampleSpan,
};
pub use rng::{CounterRng, Stream};
pub use schedule::{build_trace, ArrivalProcess};
pub use settings::{
    settings_digest, ModeKind, SampleSelection, ScenarioKind, SettingsError, SettingsSpec,
    TestSettings,
};
pub use sim_engine::{CompletionSink, VirtualHarness, VirtualSut};
pub use simsut::{SimProfile, SimSut};

/// Nanoseconds per second.
pub const NS_PER_SEC: u64 = 1_000_000_000;
/// Nanoseconds per millisecond.
pub const NS_PER_MS: u64 = 1_000_000;
