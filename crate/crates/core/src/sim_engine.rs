//! Virtual-time engine.
//!
//! Runs a trace against a [`VirtualSut`] on a simulated clock. The SUT
//! reports completion timestamps at issue time, so statutory run lengths
//! (60 s, hundreds of thousands of queries) execute in milliseconds.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::harness::{Harness, LoggingPolicy, RunContext, RunError, RunOutcome};
use crate::metrics::evaluate_run;
use crate::query::{LatencyRecord, LoggedResponse, QueryRef, QueryTrace};
use crate::schedule::ArrivalProcess;
use crate::settings::{ModeKind, TestSettings};

/// Receives per-sample completions from a virtual SUT.
pub trait CompletionSink {
    fn complete(&mut self, response_id: u64, complete_ns: u64, payload_digest: u64);

    /// Whether the digest of `response_id` is kept. SUTs may pass a dummy
    /// digest when it is not.
    fn logs(&self, _response_id: u64) -> bool {
        true
    }
}

/// A SUT that lives on the virtual clock.
///
/// `issue` must report a completion for every response id of the query
/// before returning, stamped with a virtual time at or after `now_ns`.
pub trait VirtualSut {
    fn name(&self) -> &str;
    fn begin_run(&mut self, _ctx: &RunContext) {}
    /// Untimed.
    fn load_samples(&mut self, _indices: &[u64]) {}
    fn unload_samples(&mut self, _indices: &[u64]) {}
    fn issue(&mut self, query: &QueryRef<'_>, now_ns: u64, sink: &mut dyn CompletionSink);
    fn flush(&mut self) {}
}

impl<S: VirtualSut + ?Sized> VirtualSut for alloc::boxed::Box<S> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn begin_run(&mut self, ctx: &RunContext) {
        (**self).begin_run(ctx)
    }
    fn load_samples(&mut self, indices: &[u64]) {
        (**self).load_samples(indices)
    }
    fn unload_samples(&mut self, indices: &[u64]) {
        (**self).unload_samples(indices)
    }
    fn issue(&mut self, query: &QueryRef<'_>, now_ns: u64, sink: &mut dyn CompletionSink) {
        (**self).issue(query, now_ns, sink)
    }
    fn flush(&mut self) {
        (**self).flush()
    }
}

/// [`Harness`] over a virtual-time SUT.
#[derive(Clone, Debug)]
pub struct VirtualHarness<S> {
    sut: S,
}

impl<S: VirtualSut> VirtualHarness<S> {
    pub fn new(sut: S) -> Self {
        Self { sut }
    }

    pub fn sut(&self) -> &S {
        &self.sut
    }

    pub fn into_inner(self) -> S {
        self.sut
    }
}

/// Collects completions of the query currently in flight.
struct QuerySink<'a, 'q> {
    query: &'a QueryRef<'q>,
    issue_ns: u64,
    done: Vec<bool>,
    remaining: usize,
    complete_ns: u64,
    logging: LoggingPolicy,
    responses: &'a mut Vec<LoggedResponse>,
    violations: &'a mut Vec<String>,
}

impl CompletionSink for QuerySink<'_, '_> {
    fn logs(&self, response_id: u64) -> bool {
        self.logging.should_log(response_id)
    }

    fn complete(&mut self, response_id: u64, complete_ns: u64, payload_digest: u64) {
        let Some(sample_index) = self.query.sample_for(response_id) else {
            self.violations
                .push(format!("completion for unknown response id {response_id}"));
            return;
        };
        let slot = (response_id - self.query.response_ids.start) as usize;
        if self.done[slot] {
            self.violations.push(format!(
                "duplicate completion for response id {response_id}"
            ));
            return;
        }
        if complete_ns < self.issue_ns {
            self.violations.push(format!(
                "response id {response_id} completed before its query was issued"
            ));
            return;
        }
        self.done[slot] = true;
        self.remaining -= 1;
        self.complete_ns = self.complete_ns.max(complete_ns);
        if self.logging.should_log(response_id) {
            self.responses.push(LoggedResponse {
                response_id,
                query_id: self.query.query_id,
                sample_index,
                payload_digest,
                payload: None,
            });
        }
    }
}

struct Issuer<'a, S> {
    sut: &'a mut S,
    logging: LoggingPolicy,
    done: Vec<bool>,
    records: Vec<LatencyRecord>,
    first_response_ids: Vec<u64>,
    responses: Vec<LoggedResponse>,
    violations: Vec<String>,
    incomplete: u64,
}

impl<S: VirtualSut> Issuer<'_, S> {
    /// Issues one query at `now_ns`; returns its completion time.
    fn issue(
        &mut self,
        query: &QueryRef<'_>,
        scheduled_ns: u64,
        now_ns: u64,
        skipped: impl Fn(u64) -> u64,
    ) -> u64 {
        let n = query.samples.len();
        let mut done = core::mem::take(&mut self.done);
        done.clear();
        done.resize(n, false);
        let mut sink = QuerySink {
            query,
            issue_ns: now_ns,
            done,
            remaining: n,
            complete_ns: now_ns,
            logging: self.logging,
            responses: &mut self.responses,
            violations: &mut self.violations,
        };
        self.sut.issue(query, now_ns, &mut sink);
        let (remaining, complete_ns) = (sink.remaining, sink.complete_ns);
        self.done = sink.done;
        if remaining > 0 {
            self.incomplete += 1;
            return now_ns;
        }
        let record = LatencyRecord::new(
            query.query_id,
            scheduled_ns,
            now_ns,
            complete_ns,
            n as u64,
            skipped(complete_ns),
        )
        .expect("sink rejects completions before issue");
        self.records.push(record);
        self.first_response_ids.push(query.response_ids.start);
        complete_ns
    }
}

impl<S: VirtualSut> Harness for VirtualHarness<S> {
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
        let ctx = RunContext::new(settings, trace);
        let loaded: Vec<u64> = (0..s.loaded_sample_count).collect();
        self.sut.begin_run(&ctx);
        self.sut.load_samples(&loaded);

        let mut issuer = Issuer {
            sut: &mut self.sut,
            logging,
            done: Vec::new(),
            records: Vec::with_capacity(trace.len()),
            first_response_ids: Vec::with_capacity(trace.len()),
            responses: Vec::new(),
            violations: Vec::new(),
            incomplete: 0,
        };
        let performance = s.mode == ModeKind::Performance;

        match ArrivalProcess::for_settings(settings) {
            ArrivalProcess::Sequential => {
                // Re-issue the trace cyclically until both the count and the
                // duration floors are met. A full cycle that does not advance
                // the clock cannot ever reach the duration floor.
                let mut now = 0u64;
                let mut cycle = 0u64;
                let mut cycle_start = 0u64;
                'outer: loop {
                    for i in 0..trace.len() {
                        let q = trace.view(i, cycle);
                        now = issuer.issue(&q, now, now, |_| 0);
                        let issued = cycle * trace.len() as u64 + i as u64 + 1;
                        if !performance && issued >= trace.len() as u64 {
                            break 'outer;
                        }
                        if issued >= trace.len() as u64 && now >= s.min_duration_ns {
                            break 'outer;
                        }
                    }
                    if now == cycle_start {
                        break;
                    }
                    cycle_start = now;
                    cycle += 1;
                }
            }
            ArrivalProcess::FixedInterval { interval_ns } => {
                // A query still running at the following tick skips that tick
                // (and any further ones it spans); the remaining schedule slips
                // by the skipped intervals.
                let mut shift = 0u64;
                for i in 0..trace.len() {
                    let q = trace.view(i, 0);
                    let tick = trace.queries()[i].scheduled_issue_ns + shift;
                    let skipped = |done: u64| (done - tick).saturating_sub(1) / interval_ns;
                    let done = issuer.issue(&q, tick, tick, skipped);
                    shift += skipped(done) * interval_ns;
                }
            }
            ArrivalProcess::Poisson { .. } | ArrivalProcess::SingleBatch => {
                for i in 0..trace.len() {
                    let q = trace.view(i, 0);
                    let t = trace.queries()[i].scheduled_issue_ns;
                    issuer.issue(&q, t, t, |_| 0);
                }
            }
        }

        let Issuer {
            records,
            first_response_ids,
            responses,
            violations,
            incomplete,
            ..
        } = issuer;
        self.sut.flush();
        self.sut.unload_samples(&loaded);

        if let Some(first) = violations.first() {
            return Err(RunError::Protocol(format!(
                "{first} ({} violation(s) in total)",
                violations.len()
            )));
        }
        if incomplete > 0 {
            return Err(RunError::Incomplete {
                issued: records.len() as u64 + incomplete,
                missing: incomplete,
            });
        }
        let result = evaluate_run(settings, &records);
        Ok(RunOutcome {
            result,
            records,
            first_response_ids,
            responses,
            trace_seed: trace.seed(),
            trace_digest: trace.digest(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ScenarioMetric;
    use crate::schedule::plan_and_build;
    use crate::settings::{ScenarioKind, SettingsSpec};
    use crate::simsut::{SimProfile, SimSut};
    use crate::{NS_PER_MS, NS_PER_SEC};

    fn harness(p: SimProfile) -> VirtualHarness<SimSut> {
        VirtualHarness::new(SimSut::new(p).unwrap())
    }

    #[test]
    fn single_stream_constant_latency_extends_to_duration() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::ConstantLatency {
            latency_ns: 5 * NS_PER_MS,
        });
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(
            out.result.metric,
            ScenarioMetric::P90LatencyNs(5 * NS_PER_MS)
        );
        assert_eq!(out.result.issued_query_count, 12_000);
        assert_eq!(out.result.duration_ns, 60 * NS_PER_SEC);
        assert!(out.result.valid, "{:?}", out.result.diagnostics);
        // closed loop: never two in flight
        for w in out.records.windows(2) {
            assert!(w[1].issue_ns() >= w[0].complete_ns());
        }
    }

    #[test]
    fn multistream_overrun_skips_every_query() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::MultiStream);
        spec.min_query_count_override = Some(2000);
        spec.unsafe_override = true;
        let s = spec.validate().unwrap();
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::ConstantLatency {
            latency_ns: 60 * NS_PER_MS,
        });
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(out.result.violation_fraction, 1.0);
        assert!(!out.result.valid);
        assert!(out.records.iter().all(|r| r.skipped_intervals() == 1));
        // grid slips by one interval per query
        assert_eq!(out.records[1].issue_ns(), 100 * NS_PER_MS);
        assert_eq!(out.records[2].issue_ns(), 200 * NS_PER_MS);
    }

    #[test]
    fn multistream_exact_fit_does_not_skip() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::MultiStream);
        spec.samples_per_query = 96;
        let s = spec.validate().unwrap();
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::BatchQueue {
            service_per_sample_ns: NS_PER_MS / 2,
            setup_ns: 2 * NS_PER_MS,
            parallelism: 1,
        });
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(out.result.violation_fraction, 0.0);
        assert!(out.result.valid, "{:?}", out.result.diagnostics);
    }

    #[test]
    fn offline_batch_throughput() {
        let s = TestSettings::defaults(ScenarioKind::Offline);
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::BatchQueue {
            service_per_sample_ns: 100_000,
            setup_ns: 0,
            parallelism: 1,
        });
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(
            out.result.metric,
            ScenarioMetric::OfflineSamplesPerSec(10_000.0)
        );
        assert!(out.result.valid);
    }

    #[test]
    fn null_single_stream_terminates() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::Null);
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(out.result.issued_query_count, 1024);
        assert!(!out.result.valid);
    }

    struct Lossy;
    impl VirtualSut for Lossy {
        fn name(&self) -> &str {
            "lossy"
        }
        fn issue(&mut self, q: &QueryRef<'_>, now: u64, sink: &mut dyn CompletionSink) {
            if q.query_id.is_multiple_of(2) {
                sink.complete(q.response_ids.start, now + 1, 0);
            }
        }
    }

    struct Doubler;
    impl VirtualSut for Doubler {
        fn name(&self) -> &str {
            "doubler"
        }
        fn issue(&mut self, q: &QueryRef<'_>, now: u64, sink: &mut dyn CompletionSink) {
            sink.complete(q.response_ids.start, now + 1, 0);
            sink.complete(q.response_ids.start, now + 2, 0);
            sink.complete(u64::MAX, now + 2, 0);
        }
    }

    #[test]
    fn missing_and_duplicate_completions_are_errors() {
        let s = TestSettings::defaults(ScenarioKind::Server);
        let (_, trace) = plan_and_build(&s).unwrap();
        let err = VirtualHarness::new(Lossy)
            .execute(&s, &trace, LoggingPolicy::Off)
            .unwrap_err();
        assert!(matches!(err, RunError::Incomplete { .. }), "{err}");
        let err = VirtualHarness::new(Doubler)
            .execute(&s, &trace, LoggingPolicy::Off)
            .unwrap_err();
        match err {
            RunError::Protocol(m) => assert!(m.contains("duplicate"), "{m}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn accuracy_mode_logs_every_sample() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::SingleStream);
        spec.mode = ModeKind::Accuracy;
        spec.loaded_sample_count = 50;
        let s = spec.validate().unwrap();
        let (_, trace) = plan_and_build(&s).unwrap();
        let mut h = harness(SimProfile::ConstantLatency { latency_ns: 1000 });
        let out = h.execute(&s, &trace, LoggingPolicy::Off).unwrap();
        assert_eq!(out.responses.len(), 50);
        assert_eq!(out.records.len(), 50);
    }
}
