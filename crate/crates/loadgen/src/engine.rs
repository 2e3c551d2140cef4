//! Wall-clock execution engine.

use std::sync::Arc;
use std::time::{Duration, Instant};

use loadgen_core::metrics::evaluate_run;
use loadgen_core::{
    ArrivalProcess, Harness, LatencyRecord, LoggingPolicy, ModeKind, QueryTrace, RunContext,
    RunError, RunOutcome, TestSettings,
};

use crate::recorder::{Clock, RunRecorder};
use crate::sut::{Completer, SutContract};

/// Capacity reserved for response ids when the trace is re-issued cyclically.
const CYCLIC_RESPONSE_CAPACITY: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Overrides the post-flush grace period (5x the latency bound, or 30 s).
    pub grace: Option<Duration>,
    /// Holds Offline runs open until the minimum duration has elapsed.
    pub pad_offline: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            grace: None,
            pad_offline: true,
        }
    }
}

/// [`Harness`] that drives a [`SutContract`] in real time.
pub struct WallClockHarness<S> {
    sut: S,
    config: EngineConfig,
}

impl<S: SutContract> WallClockHarness<S> {
    pub fn new(sut: S) -> Self {
        Self::with_config(sut, EngineConfig::default())
    }

    pub fn with_config(sut: S, config: EngineConfig) -> Self {
        Self { sut, config }
    }

    pub fn sut(&self) -> &S {
        &self.sut
    }

    fn grace(&self, settings: &TestSettings) -> Duration {
        self.config
            .grace
            .unwrap_or_else(|| match settings.spec().latency_bound_ns {
                Some(b) => Duration::from_nanos(b.saturating_mul(5)),
                None => Duration::from_secs(30),
            })
    }
}

/// Sleeps most of the way, then yields until `target_ns` on `clock`.
fn wait_until(clock: &Clock, target_ns: u64) {
    loop {
        let now = clock.now_ns();
        if now >= target_ns {
            return;
        }
        let left = target_ns - now;
        if left > 2_000_000 {
            std::thread::sleep(Duration::from_nanos(left - 1_500_000));
        } else {
            std::thread::yield_now();
        }
    }
}

/// Yields until `done` reports a value or `deadline` passes.
fn poll<T>(deadline: Instant, mut done: impl FnMut() -> Option<T>) -> Option<T> {
    let mut spins = 0u32;
    loop {
        if let Some(v) = done() {
            return Some(v);
        }
        if Instant::now() >= deadline {
            return None;
        }
        spins += 1;
        if spins < 64 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(50));
        }
    }
}

struct Issued {
    query_id: u64,
    first_response_id: u64,
    sample_count: u64,
    scheduled_ns: u64,
    issue_ns: u64,
    skipped: u64,
}

impl<S: SutContract> Harness for WallClockHarness<S> {
    fn sut_name(&self) -> &str {
        self.sut.name()
    }

    fn execute(
        &mut self,
        settings: &TestSettings,
        trace: &QueryTrace,
        logging: LoggingPolicy,
    ) -> Result<RunOutcome, RunError> {
        let s = settings.spec();
        let logging = logging.effective(settings);
        let performance = s.mode == ModeKind::Performance;
        let process = ArrivalProcess::for_settings(settings);
        let grace = self.grace(settings);
        let sut_err = |e: crate::sut::SutError| RunError::Sut(e.0);

        let ctx = RunContext::new(settings, trace);
        let loaded: Vec<u64> = (0..s.loaded_sample_count).collect();
        self.sut.begin_run(&ctx).map_err(sut_err)?;
        self.sut.load_samples(&loaded).map_err(sut_err)?;

        let (resp_cap, query_cap) = match process {
            ArrivalProcess::Sequential => (CYCLIC_RESPONSE_CAPACITY, CYCLIC_RESPONSE_CAPACITY),
            _ => (trace.response_id_end(), trace.len() as u64),
        };
        let mut recorder = RunRecorder::new(Clock::start(), logging, resp_cap, query_cap);
        recorder.preallocate(trace.response_id_end(), trace.len() as u64);
        recorder.restart_clock();
        let clock = recorder.clock();
        let recorder = Arc::new(recorder);
        let completer = Completer::new(Arc::clone(&recorder));
        let mut issued: Vec<Issued> = Vec::with_capacity(trace.len());

        let issue = |i: usize,
                     cycle: u64,
                     scheduled_ns: u64,
                     issued: &mut Vec<Issued>|
         -> Result<(), RunError> {
            let q = trace.view(i, cycle);
            let seq = issued.len() as u64;
            if !recorder.register(seq, q.response_ids.start, q.samples.iter()) {
                return Err(RunError::Precondition("recorder capacity exhausted".into()));
            }
            let issue_ns = clock.now_ns();
            self.sut.issue_query(&q, &completer);
            issued.push(Issued {
                query_id: q.query_id,
                first_response_id: q.response_ids.start,
                sample_count: q.samples.len() as u64,
                scheduled_ns,
                issue_ns,
                skipped: 0,
            });
            Ok(())
        };
        let stalled = |issued: &Vec<Issued>| RunError::Incomplete {
            issued: issued.len() as u64,
            missing: recorder.outstanding(),
        };

        match process {
            ArrivalProcess::Sequential => {
                let mut cycle = 0u64;
                'outer: loop {
                    for i in 0..trace.len() {
                        let scheduled = clock.now_ns();
                        issue(i, cycle, scheduled, &mut issued)?;
                        let seq = issued.len() as u64 - 1;
                        let done = poll(Instant::now() + grace, || recorder.query_done(seq))
                            .ok_or_else(|| stalled(&issued))?;
                        let n = issued.len() as u64;
                        // Same window the metrics measure: first issue to last completion.
                        let window = done.saturating_sub(issued[0].issue_ns);
                        if n >= trace.len() as u64 && (!performance || window >= s.min_duration_ns)
                        {
                            break 'outer;
                        }
                    }
                    cycle += 1;
                }
            }
            ArrivalProcess::FixedInterval { interval_ns } => {
                let mut shift = 0u64;
                for i in 0..trace.len() {
                    let tick = trace.queries()[i].scheduled_issue_ns + shift;
                    wait_until(&clock, tick);
                    issue(i, 0, tick, &mut issued)?;
                    let seq = issued.len() as u64 - 1;
                    let done = poll(Instant::now() + grace, || recorder.query_done(seq))
                        .ok_or_else(|| stalled(&issued))?;
                    // The query ran past `skipped` following ticks.
                    let skipped = done.saturating_sub(tick).saturating_sub(1) / interval_ns;
                    issued[seq as usize].skipped = skipped;
                    shift += skipped * interval_ns;
                }
            }
            ArrivalProcess::Poisson { .. } | ArrivalProcess::SingleBatch => {
                for i in 0..trace.len() {
                    let t = trace.queries()[i].scheduled_issue_ns;
                    wait_until(&clock, t);
                    issue(i, 0, t, &mut issued)?;
                }
            }
        }

        self.sut.flush().map_err(sut_err)?;
        let deadline = Instant::now() + grace;
        poll(deadline, || (recorder.outstanding() == 0).then_some(()))
            .ok_or_else(|| stalled(&issued))?;
        if performance && self.config.pad_offline && process == ArrivalProcess::SingleBatch {
            wait_until(&clock, s.min_duration_ns);
        }
        self.sut.unload_samples(&loaded).map_err(sut_err)?;

        let (unknown, duplicate) = (
            recorder.unknown_completions(),
            recorder.duplicate_completions(),
        );
        if unknown + duplicate > 0 {
            return Err(RunError::Protocol(format!(
                "{unknown} completion(s) for unknown response ids, {duplicate} duplicate completion(s)"
            )));
        }

        let mut records = Vec::with_capacity(issued.len());
        let mut responses = Vec::new();
        for (seq, q) in issued.iter().enumerate() {
            let done = recorder.query_done(seq as u64).expect("quiescent");
            records.push(
                LatencyRecord::new(
                    q.query_id,
                    q.scheduled_ns,
                    q.issue_ns,
                    done,
                    q.sample_count,
                    q.skipped,
                )
                .map_err(|e| RunError::Protocol(e.to_string()))?,
            );
            recorder.logged_responses(
                q.first_response_id,
                q.sample_count,
                q.query_id,
                &mut responses,
            );
        }
        let result = evaluate_run(settings, &records);
        Ok(RunOutcome {
            result,
            records,
            first_response_ids: issued.iter().map(|q| q.first_response_id).collect(),
            responses,
            trace_seed: trace.seed(),
            trace_digest: trace.digest(),
        })
    }
}
