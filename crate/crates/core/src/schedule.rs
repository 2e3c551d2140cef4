//! Deterministic trace generation: sample selection and arrival times.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::planner::{plan_for_scenario, QueryPlan};
use crate::query::{Query, QueryTrace, SampleSpan, TraceError};
use crate::rng::{CounterRng, Stream};
use crate::settings::{ModeKind, SampleSelection, ScenarioKind, TestSettings};
use crate::NS_PER_SEC;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArrivalProcess {
    /// Next query issued when the previous one completes.
    Sequential,
    FixedInterval {
        interval_ns: u64,
    },
    Poisson {
        lambda_qps: f64,
    },
    /// Everything in one query at time zero.
    SingleBatch,
}

impl ArrivalProcess {
    pub fn for_settings(settings: &TestSettings) -> Self {
        let s = settings.spec();
        match s.scenario {
            ScenarioKind::SingleStream => ArrivalProcess::Sequential,
            ScenarioKind::MultiStream => ArrivalProcess::FixedInterval {
                interval_ns: s.interval_ns,
            },
            ScenarioKind::Server => ArrivalProcess::Poisson {
                lambda_qps: s.target_qps,
            },
            ScenarioKind::Offline => ArrivalProcess::SingleBatch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("{requested} unique samples requested from a pool of {pool}")]
    Capacity { requested: u64, pool: u64 },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Draws `count` indices from `[0, pool)`.
///
/// With `unique` the result is a prefix of a uniformly random permutation
/// (partial Fisher-Yates); otherwise indices are independent and uniform.
pub fn draw_sample_indices(
    rng: &mut CounterRng,
    count: u64,
    pool: u64,
    unique: bool,
) -> Result<Vec<u64>, ScheduleError> {
    if pool == 0 || (unique && count > pool) {
        return Err(ScheduleError::Capacity {
            requested: count,
            pool,
        });
    }
    if !unique {
        return Ok((0..count).map(|_| rng.below(pool)).collect());
    }
    Ok(permutation_prefix(rng, count, pool))
}

fn permutation_prefix(rng: &mut CounterRng, count: u64, pool: u64) -> Vec<u64> {
    // Sparse Fisher-Yates: only displaced slots are materialized.
    let mut displaced = alloc::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let j = i + rng.below(pool - i);
        let at_j = *displaced.get(&j).unwrap_or(&j);
        let at_i = *displaced.get(&i).unwrap_or(&i);
        displaced.insert(j, at_i);
        out.push(at_j);
    }
    out
}

/// Scheduled issue times for `query_count` queries.
pub fn gen_arrivals(process: ArrivalProcess, rng: &mut CounterRng, query_count: u64) -> Vec<u64> {
    match process {
        ArrivalProcess::Sequential | ArrivalProcess::SingleBatch => vec![0; query_count as usize],
        ArrivalProcess::FixedInterval { interval_ns } => {
            (0..query_count).map(|k| k * interval_ns).collect()
        }
        ArrivalProcess::Poisson { lambda_qps } => PoissonArrivals::new(lambda_qps, rng)
            .take(query_count as usize)
            .collect(),
    }
}

/// Cumulative Exponential(lambda) inter-arrival times, drawn by inverse CDF.
struct PoissonArrivals<'a> {
    mean_gap_ns: f64,
    now_ns: f64,
    rng: &'a mut CounterRng,
}

impl<'a> PoissonArrivals<'a> {
    fn new(lambda_qps: f64, rng: &'a mut CounterRng) -> Self {
        Self {
            mean_gap_ns: NS_PER_SEC as f64 / lambda_qps,
            now_ns: 0.0,
            rng,
        }
    }
}

impl Iterator for PoissonArrivals<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let u = self.rng.next_f64();
        // -ln(1 - u) with u in [0, 1)
        self.now_ns += -libm::log1p(-u) * self.mean_gap_ns;
        Some(libm::round(self.now_ns) as u64)
    }
}

/// Builds the trace for `settings` using its own seed.
pub fn build_trace(settings: &TestSettings, plan: &QueryPlan) -> Result<QueryTrace, ScheduleError> {
    build_trace_with_seed(settings, plan, settings.spec().rng_seed)
}

/// Builds the trace for `settings` with an explicit seed (derived server runs,
/// alternate-seed tests). The trace stays bound to the settings digest.
pub fn build_trace_with_seed(
    settings: &TestSettings,
    plan: &QueryPlan,
    seed: u64,
) -> Result<QueryTrace, ScheduleError> {
    if settings.mode() == ModeKind::Accuracy {
        return build_accuracy_trace(settings, seed);
    }
    let s = settings.spec();
    let process = ArrivalProcess::for_settings(settings);
    let mut arrivals_rng = CounterRng::new(seed, Stream::Arrivals);
    let mut selector = Selector::new(seed, s.sample_selection, s.loaded_sample_count);

    let arrivals: Vec<u64> = match process {
        ArrivalProcess::SingleBatch => vec![0],
        ArrivalProcess::Sequential => {
            gen_arrivals(process, &mut arrivals_rng, plan.effective_min_queries)
        }
        ArrivalProcess::FixedInterval { interval_ns } => {
            let for_duration = s.min_duration_ns.div_ceil(interval_ns) + 1;
            gen_arrivals(
                process,
                &mut arrivals_rng,
                plan.effective_min_queries.max(for_duration),
            )
        }
        ArrivalProcess::Poisson { lambda_qps } => {
            let mut out = Vec::with_capacity(plan.effective_min_queries as usize);
            for t in PoissonArrivals::new(lambda_qps, &mut arrivals_rng) {
                out.push(t);
                if out.len() as u64 >= plan.effective_min_queries && t - out[0] >= s.min_duration_ns
                {
                    break;
                }
            }
            out
        }
    };

    let mut queries = Vec::with_capacity(arrivals.len());
    let mut arena = Vec::new();
    let mut next_response = 0u64;
    match s.scenario {
        ScenarioKind::MultiStream => {
            let n = s.samples_per_query;
            let starts = selector.block_starts(arrivals.len() as u64, n)?;
            for (k, (&t, start)) in arrivals.iter().zip(starts).enumerate() {
                queries.push(Query {
                    query_id: k as u64,
                    first_response_id: next_response,
                    scheduled_issue_ns: t,
                    span: SampleSpan::Contiguous { start, len: n },
                });
                next_response += n;
            }
        }
        ScenarioKind::Offline => {
            let budget = plan.min_sample_count;
            arena = selector.indices(budget)?;
            queries.push(Query {
                query_id: 0,
                first_response_id: 0,
                scheduled_issue_ns: 0,
                span: SampleSpan::Arena {
                    offset: 0,
                    len: budget,
                },
            });
        }
        ScenarioKind::SingleStream | ScenarioKind::Server => {
            arena = selector.indices(arrivals.len() as u64)?;
            for (k, &t) in arrivals.iter().enumerate() {
                queries.push(Query {
                    query_id: k as u64,
                    first_response_id: k as u64,
                    scheduled_issue_ns: t,
                    span: SampleSpan::Arena {
                        offset: k as u64,
                        len: 1,
                    },
                });
            }
        }
    }
    Ok(QueryTrace::from_parts(
        queries,
        arena,
        seed,
        settings.digest(),
        s.loaded_sample_count,
    )?)
}

/// Accuracy mode visits every loaded sample exactly once, in index order,
/// with no count or duration floors. The last MultiStream query may be short.
fn build_accuracy_trace(settings: &TestSettings, seed: u64) -> Result<QueryTrace, ScheduleError> {
    let s = settings.spec();
    let loaded = s.loaded_sample_count;
    let process = ArrivalProcess::for_settings(settings);
    let mut arrivals_rng = CounterRng::new(seed, Stream::Arrivals);
    let mut queries = Vec::new();
    match s.scenario {
        ScenarioKind::Offline => queries.push(Query {
            query_id: 0,
            first_response_id: 0,
            scheduled_issue_ns: 0,
            span: SampleSpan::Contiguous {
                start: 0,
                len: loaded,
            },
        }),
        _ => {
            let per_query = if s.scenario == ScenarioKind::MultiStream {
                s.samples_per_query
            } else {
                1
            };
            let count = loaded.div_ceil(per_query);
            let times = gen_arrivals(process, &mut arrivals_rng, count);
            for (k, t) in times.into_iter().enumerate() {
                let start = k as u64 * per_query;
                queries.push(Query {
                    query_id: k as u64,
                    first_response_id: start,
                    scheduled_issue_ns: t,
                    span: SampleSpan::Contiguous {
                        start,
                        len: per_query.min(loaded - start),
                    },
                });
            }
        }
    }
    Ok(QueryTrace::from_parts(
        queries,
        Vec::new(),
        seed,
        settings.digest(),
        loaded,
    )?)
}

/// Sample-index source honoring the configured [`SampleSelection`].
struct Selector {
    rng: CounterRng,
    mode: SampleSelection,
    pool: u64,
}

impl Selector {
    fn new(seed: u64, mode: SampleSelection, pool: u64) -> Self {
        Self {
            rng: CounterRng::new(seed, Stream::SampleSelection),
            mode,
            pool,
        }
    }

    fn indices(&mut self, count: u64) -> Result<Vec<u64>, ScheduleError> {
        match self.mode {
            SampleSelection::WithReplacement => {
                draw_sample_indices(&mut self.rng, count, self.pool, false)
            }
            SampleSelection::Unique => draw_sample_indices(&mut self.rng, count, self.pool, true),
            SampleSelection::Subset(k) => {
                let subset = draw_sample_indices(&mut self.rng, k.min(self.pool), self.pool, true)?;
                Ok((0..count)
                    .map(|_| subset[self.rng.below(subset.len() as u64) as usize])
                    .collect())
            }
        }
    }

    /// Start offsets of `count` contiguous blocks of `n` samples.
    fn block_starts(&mut self, count: u64, n: u64) -> Result<Vec<u64>, ScheduleError> {
        if n > self.pool {
            return Err(ScheduleError::Capacity {
                requested: n,
                pool: self.pool,
            });
        }
        match self.mode {
            SampleSelection::WithReplacement => {
                let positions = self.pool - n + 1;
                Ok((0..count).map(|_| self.rng.below(positions)).collect())
            }
            SampleSelection::Unique => {
                let slots = self.pool / n;
                let picks =
                    draw_sample_indices(&mut self.rng, count, slots, true).map_err(|_| {
                        ScheduleError::Capacity {
                            requested: count * n,
                            pool: self.pool,
                        }
                    })?;
                Ok(picks.into_iter().map(|b| b * n).collect())
            }
            SampleSelection::Subset(k) => {
                let slots = self.pool / n;
                let subset = draw_sample_indices(&mut self.rng, k.min(slots), slots, true)?;
                Ok((0..count)
                    .map(|_| subset[self.rng.below(subset.len() as u64) as usize] * n)
                    .collect())
            }
        }
    }
}

/// Convenience: plan and build in one step.
pub fn plan_and_build(settings: &TestSettings) -> Result<(QueryPlan, QueryTrace), ScheduleError> {
    let plan = plan_for_scenario(settings);
    let trace = build_trace(settings, &plan)?;
    Ok((plan, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::settings::SettingsSpec;
    use crate::NS_PER_MS;
    use std::collections::BTreeSet;

    #[test]
    fn single_element_pool() {
        let mut rng = CounterRng::new(5, Stream::SampleSelection);
        assert_eq!(
            draw_sample_indices(&mut rng, 4, 1, false).unwrap(),
            vec![0, 0, 0, 0]
        );
    }

    #[test]
    fn unique_full_draw_is_permutation() {
        let mut rng = CounterRng::new(5, Stream::SampleSelection);
        let mut v = draw_sample_indices(&mut rng, 5, 5, true).unwrap();
        v.sort_unstable();
        assert_eq!(v, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn unique_over_capacity_fails() {
        let mut rng = CounterRng::new(5, Stream::SampleSelection);
        assert_eq!(
            draw_sample_indices(&mut rng, 6, 5, true).unwrap_err(),
            ScheduleError::Capacity {
                requested: 6,
                pool: 5
            }
        );
    }

    #[test]
    fn uniform_frequencies_within_five_sigma() {
        let mut rng = CounterRng::new(42, Stream::SampleSelection);
        let draws = draw_sample_indices(&mut rng, 1_000_000, 100, false).unwrap();
        let mut counts = [0u64; 100];
        for d in draws {
            counts[d as usize] += 1;
        }
        // Binomial(10^6, 0.01): sigma = sqrt(10^6 * 0.01 * 0.99) ~ 99.5
        let sigma = libm::sqrt(1e6 * 0.01 * 0.99);
        let mut chi2 = 0.0;
        for c in counts {
            let dev = c as f64 - 10_000.0;
            assert!(dev.abs() <= 5.0 * sigma, "count {c}");
            chi2 += dev * dev / 10_000.0;
        }
        // chi-square with 99 dof: 0.1% upper critical value ~ 148.2
        assert!(chi2 < 148.2, "chi2 {chi2}");
    }

    #[test]
    fn fixed_interval_is_arithmetic() {
        let mut rng = CounterRng::new(0, Stream::Arrivals);
        let t = gen_arrivals(
            ArrivalProcess::FixedInterval {
                interval_ns: 50 * NS_PER_MS,
            },
            &mut rng,
            3,
        );
        assert_eq!(t, vec![0, 50 * NS_PER_MS, 100 * NS_PER_MS]);
    }

    #[test]
    fn poisson_mean_gap() {
        let mut rng = CounterRng::new(11, Stream::Arrivals);
        let t = gen_arrivals(
            ArrivalProcess::Poisson { lambda_qps: 100.0 },
            &mut rng,
            100_000,
        );
        let mean_gap = *t.last().unwrap() as f64 / t.len() as f64;
        assert!((mean_gap - 10.0 * NS_PER_MS as f64).abs() <= 0.01 * 10.0 * NS_PER_MS as f64);
        let mut rng2 = CounterRng::new(11, Stream::Arrivals);
        assert_eq!(
            t,
            gen_arrivals(
                ArrivalProcess::Poisson { lambda_qps: 100.0 },
                &mut rng2,
                100_000
            )
        );
    }

    #[test]
    fn offline_trace_is_one_query() {
        let s = TestSettings::defaults(ScenarioKind::Offline);
        let (_, trace) = plan_and_build(&s).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.queries()[0].sample_count(), 24_576);
        assert_eq!(trace.queries()[0].scheduled_issue_ns, 0);
    }

    #[test]
    fn server_count_covers_both_floors() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::Server);
        spec.target_qps = 2000.0;
        let (plan, trace) = plan_and_build(&spec.clone().validate().unwrap()).unwrap();
        assert_eq!(trace.len() as u64, plan.effective_min_queries);
        // 270,336 / 2,000 = 135.168 s expected span
        let last = trace.queries().last().unwrap().scheduled_issue_ns;
        assert!(last >= 60 * NS_PER_SEC);
        assert!((last as f64 / 1e9 - 135.168).abs() < 135.168 * 0.01);

        spec.target_qps = 10_000.0;
        let (_, trace) = plan_and_build(&spec.validate().unwrap()).unwrap();
        assert!(trace.len() > 270_336);
        assert!(trace.queries().last().unwrap().scheduled_issue_ns >= 60 * NS_PER_SEC);
        assert!(
            (trace.len() as f64 - 600_000.0).abs() < 6_000.0,
            "{}",
            trace.len()
        );
    }

    #[test]
    fn poisson_span_covers_min_duration_from_first_arrival() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::Server);
        spec.unsafe_override = true;
        spec.target_qps = 5.0;
        spec.min_query_count_override = Some(1);
        spec.min_duration_ns = 2 * NS_PER_SEC;
        for seed in 0..200 {
            spec.rng_seed = seed;
            let (_, trace) = plan_and_build(&spec.clone().validate().unwrap()).unwrap();
            let q = trace.queries();
            let span = q.last().unwrap().scheduled_issue_ns - q[0].scheduled_issue_ns;
            assert!(span >= 2 * NS_PER_SEC, "seed {seed}: span {span}");
        }
    }

    #[test]
    fn multistream_blocks_are_contiguous_and_in_range() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::MultiStream);
        spec.samples_per_query = 8;
        spec.loaded_sample_count = 64;
        let (plan, trace) = plan_and_build(&spec.validate().unwrap()).unwrap();
        assert_eq!(trace.len() as u64, plan.effective_min_queries);
        for q in trace.queries() {
            match q.span {
                SampleSpan::Contiguous { start, len } => assert!(len == 8 && start + len <= 64),
                SampleSpan::Arena { .. } => panic!("multi-stream must be contiguous"),
            }
        }
    }

    #[test]
    fn response_ids_unique() {
        for scenario in ScenarioKind::ALL {
            let (_, trace) = plan_and_build(&TestSettings::defaults(scenario)).unwrap();
            let mut ids = BTreeSet::new();
            for q in trace.queries() {
                for r in q.response_ids() {
                    assert!(ids.insert(r), "{scenario}: duplicate response id {r}");
                }
            }
        }
    }

    #[test]
    fn unique_selection_has_no_repeats() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::SingleStream);
        spec.sample_selection = SampleSelection::Unique;
        spec.loaded_sample_count = 1024;
        let (_, trace) = plan_and_build(&spec.clone().validate().unwrap()).unwrap();
        let set: BTreeSet<u64> = trace.arena().iter().copied().collect();
        assert_eq!(set.len(), 1024);
        spec.loaded_sample_count = 1000;
        assert!(matches!(
            plan_and_build(&spec.validate().unwrap()),
            Err(ScheduleError::Capacity { .. })
        ));
    }

    #[test]
    fn subset_selection_bounded() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::SingleStream);
        spec.sample_selection = SampleSelection::Subset(8);
        let (_, trace) = plan_and_build(&spec.validate().unwrap()).unwrap();
        let set: BTreeSet<u64> = trace.arena().iter().copied().collect();
        assert!(set.len() <= 8);
    }

    #[test]
    fn accuracy_trace_covers_every_sample_once() {
        let mut spec = SettingsSpec::defaults(ScenarioKind::MultiStream);
        spec.mode = ModeKind::Accuracy;
        spec.loaded_sample_count = 100;
        spec.samples_per_query = 8;
        let (_, trace) = plan_and_build(&spec.validate().unwrap()).unwrap();
        let all: Vec<u64> = trace
            .queries()
            .iter()
            .flat_map(|q| trace.samples(q).iter())
            .collect();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(trace.len(), 13);
    }

    #[test]
    fn different_seeds_differ() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let plan = plan_for_scenario(&s);
        let a = build_trace_with_seed(&s, &plan, 1).unwrap();
        let b = build_trace_with_seed(&s, &plan, 2).unwrap();
        assert_ne!(a.arena(), b.arena());
        assert_ne!(a.digest(), b.digest());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn identical_seed_identical_trace(seed in proptest::prelude::any::<u64>(), scenario in 0usize..4) {
            let s = TestSettings::defaults(ScenarioKind::ALL[scenario]).with_seed(seed);
            let (_, a) = plan_and_build(&s).unwrap();
            let (_, b) = plan_and_build(&s).unwrap();
            proptest::prop_assert_eq!(a.digest(), b.digest());
            proptest::prop_assert!(a == b);
        }
    }
}
