//! Scenario metrics and run validity.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::planner::plan_for_scenario;
use crate::query::LatencyRecord;
use crate::settings::{ModeKind, ScenarioKind, TestSettings};
use crate::NS_PER_SEC;

/// The figure of merit a scenario reports.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMetric {
    /// Tail-percentile latency of the query stream (the 90th by default).
    P90LatencyNs(u64),
    /// Streams (samples per query) sustained.
    MaxStreams(u64),
    /// Poisson rate achieved, queries per second.
    MaxPoissonQps(f64),
    OfflineSamplesPerSec(f64),
}

impl ScenarioMetric {
    pub fn value(&self) -> f64 {
        match *self {
            ScenarioMetric::P90LatencyNs(v) | ScenarioMetric::MaxStreams(v) => v as f64,
            ScenarioMetric::MaxPoissonQps(v) | ScenarioMetric::OfflineSamplesPerSec(v) => v,
        }
    }

    pub fn scenario(&self) -> ScenarioKind {
        match self {
            ScenarioMetric::P90LatencyNs(_) => ScenarioKind::SingleStream,
            ScenarioMetric::MaxStreams(_) => ScenarioKind::MultiStream,
            ScenarioMetric::MaxPoissonQps(_) => ScenarioKind::Server,
            ScenarioMetric::OfflineSamplesPerSec(_) => ScenarioKind::Offline,
        }
    }

    /// Whether a larger value is better.
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, ScenarioMetric::P90LatencyNs(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: ScenarioKind,
    pub metric: ScenarioMetric,
    pub valid: bool,
    pub violation_fraction: f64,
    pub duration_ns: u64,
    pub issued_query_count: u64,
    pub settings_digest: u64,
    pub diagnostics: Vec<String>,
}

impl RunResult {
    pub fn metric_value(&self) -> f64 {
        self.metric.value()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile rank outside (0, 1)")]
    Domain,
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p * n)` of the
/// ascending order.
pub fn percentile(latencies: &[u64], p: f64) -> Result<u64, MetricsError> {
    if latencies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    percentile_sorted(&sorted, p)
}

pub(crate) fn percentile_sorted(sorted: &[u64], p: f64) -> Result<u64, MetricsError> {
    if sorted.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricsError::Domain);
    }
    Ok(sorted[nearest_rank(p, sorted.len()) - 1])
}

/// `ceil(p * n)`, absorbing representation error in `p` (0.9 * 100 must give 90).
fn nearest_rank(p: f64, n: usize) -> usize {
    let x = p * n as f64;
    let rank = libm::ceil(x - x * 1e-12) as usize;
    rank.clamp(1, n)
}

fn format_pct(fraction: f64) -> String {
    let pct = libm::round(fraction * 1e6) / 1e4;
    format!("{pct}%")
}

/// Scenario metric and validity verdict for the records of one run.
///
/// Validity rules: performance runs must last at least `min_duration_ns`
/// (Offline counts as lasting the padded window the engine waits out) and
/// issue at least the planned number of queries (Offline: samples). Server
/// runs may exceed the latency bound on at most `qos_violation_budget` of
/// queries; MultiStream queries may skip ticks on at most that fraction.
pub fn evaluate_run(settings: &TestSettings, records: &[LatencyRecord]) -> RunResult {
    let s = settings.spec();
    let plan = plan_for_scenario(settings);
    let mut diagnostics = Vec::new();

    let issued = records.len() as u64;
    let first_issue = records.iter().map(|r| r.issue_ns()).min().unwrap_or(0);
    let last_issue = records.iter().map(|r| r.issue_ns()).max().unwrap_or(0);
    let last_complete = records.iter().map(|r| r.complete_ns()).max().unwrap_or(0);
    let active_window = last_complete.saturating_sub(first_issue);
    let samples: u64 = records.iter().map(|r| r.sample_count()).sum();

    let duration_ns = match s.scenario {
        ScenarioKind::Offline if s.mode == ModeKind::Performance => {
            active_window.max(s.min_duration_ns)
        }
        _ => active_window,
    };

    let mut violations = 0u64;
    let metric = match s.scenario {
        ScenarioKind::SingleStream => {
            let lat: Vec<u64> = records.iter().map(|r| r.latency_ns()).collect();
            ScenarioMetric::P90LatencyNs(percentile(&lat, s.tail_percentile).unwrap_or(0))
        }
        ScenarioKind::MultiStream => {
            violations = records
                .iter()
                .filter(|r| r.skipped_intervals() >= 1)
                .count() as u64;
            ScenarioMetric::MaxStreams(s.samples_per_query)
        }
        ScenarioKind::Server => {
            let bound = s.latency_bound_ns.unwrap_or(u64::MAX);
            violations = records.iter().filter(|r| r.latency_ns() > bound).count() as u64;
            let rate = if issued >= 2 && last_issue > first_issue {
                (issued - 1) as f64 * NS_PER_SEC as f64 / (last_issue - first_issue) as f64
            } else {
                s.target_qps
            };
            ScenarioMetric::MaxPoissonQps(rate)
        }
        ScenarioKind::Offline => {
            let rate = if active_window > 0 {
                samples as f64 * NS_PER_SEC as f64 / active_window as f64
            } else {
                0.0
            };
            ScenarioMetric::OfflineSamplesPerSec(rate)
        }
    };
    let violation_fraction = if issued > 0 {
        violations as f64 / issued as f64
    } else {
        0.0
    };

    if records.is_empty() {
        diagnostics.push("no completed queries".into());
    }
    if s.mode == ModeKind::Performance {
        if duration_ns < s.min_duration_ns {
            diagnostics.push(format!(
                "run duration {} s below the {} s minimum run duration",
                duration_ns as f64 / NS_PER_SEC as f64,
                s.min_duration_ns as f64 / NS_PER_SEC as f64
            ));
        }
        if s.scenario == ScenarioKind::Offline {
            if samples < plan.min_sample_count {
                diagnostics.push(format!(
                    "offline query carried {samples} samples, below the {} sample minimum",
                    plan.min_sample_count
                ));
            }
        } else if issued < plan.effective_min_queries {
            diagnostics.push(format!(
                "issued {issued} queries, below the {} query minimum",
                plan.effective_min_queries
            ));
        }
        let over_budget = violation_fraction > s.qos_violation_budget;
        match s.scenario {
            ScenarioKind::Server if over_budget => diagnostics.push(format!(
                "{} latency-bound rule: {} of queries exceeded {} ns",
                format_pct(s.qos_violation_budget),
                format_pct(violation_fraction),
                s.latency_bound_ns.unwrap_or(0)
            )),
            ScenarioKind::MultiStream if over_budget => diagnostics.push(format!(
                "{} skipped-interval rule: {} of queries skipped one or more intervals",
                format_pct(s.qos_violation_budget),
                format_pct(violation_fraction)
            )),
            _ => {}
        }
    }

    RunResult {
        scenario: s.scenario,
        metric,
        valid: diagnostics.is_empty(),
        violation_fraction,
        duration_ns,
        issued_query_count: issued,
        settings_digest: settings.digest(),
        diagnostics,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum AggregateError {
    #[error("no runs to aggregate")]
    Empty,
    #[error("runs belong to different settings (digests {0:#018x} and {1:#018x})")]
    MixedSettings(u64, u64),
    #[error("runs belong to different scenarios")]
    MixedScenarios,
}

/// Combines repeated server runs: the reported metric is the minimum across
/// runs, and a single invalid run invalidates the aggregate.
pub fn aggregate_server_runs(results: &[RunResult]) -> Result<RunResult, AggregateError> {
    let first = results.first().ok_or(AggregateError::Empty)?;
    for r in &results[1..] {
        if r.settings_digest != first.settings_digest {
            return Err(AggregateError::MixedSettings(
                first.settings_digest,
                r.settings_digest,
            ));
        }
        if r.scenario != first.scenario {
            return Err(AggregateError::MixedScenarios);
        }
    }
    let worst = results
        .iter()
        .min_by(|a, b| {
            let (x, y) = (a.metric_value(), b.metric_value());
            if a.metric.higher_is_better() {
                x.total_cmp(&y)
            } else {
                y.total_cmp(&x)
            }
        })
        .expect("non-empty");
    let mut diagnostics = Vec::new();
    for (i, r) in results.iter().enumerate() {
        for d in &r.diagnostics {
            diagnostics.push(format!("run {}: {d}", i + 1));
        }
    }
    Ok(RunResult {
        scenario: first.scenario,
        metric: worst.metric,
        valid: results.iter().all(|r| r.valid),
        violation_fraction: results
            .iter()
            .map(|r| r.violation_fraction)
            .fold(0.0, f64::max),
        duration_ns: results.iter().map(|r| r.duration_ns).min().unwrap_or(0),
        issued_query_count: results
            .iter()
            .map(|r| r.issued_query_count)
            .min()
            .unwrap_or(0),
        settings_digest: first.settings_digest,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::settings::SettingsSpec;
    use crate::NS_PER_MS;
    use alloc::vec;

    fn rec(id: u64, issue: u64, lat: u64) -> LatencyRecord {
        LatencyRecord::new(id, issue, issue, issue + lat, 1, 0).unwrap()
    }

    #[test]
    fn percentile_singleton() {
        assert_eq!(percentile(&[10], 0.9).unwrap(), 10);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).rev().collect();
        assert_eq!(percentile(&v, 0.90).unwrap(), 90);
        assert_eq!(percentile(&v, 0.99).unwrap(), 99);
        assert_eq!(percentile(&v, 0.97).unwrap(), 97);
        assert_eq!(percentile(&[], 0.5), Err(MetricsError::Empty));
        assert_eq!(percentile(&[1], 1.0), Err(MetricsError::Domain));
    }

    fn server_settings() -> TestSettings {
        let mut s = SettingsSpec::defaults(ScenarioKind::Server);
        s.latency_bound_ns = Some(100 * NS_PER_MS);
        s.validate().unwrap()
    }

    fn server_records(n: u64, over: u64) -> Vec<LatencyRecord> {
        // 1 ms apart so the run lasts ~270 s; `over` queries take 150 ms.
        (0..n)
            .map(|i| rec(i, i * NS_PER_MS, if i < over { 150 } else { 5 } * NS_PER_MS))
            .collect()
    }

    #[test]
    fn server_budget_edges() {
        let s = server_settings();
        let ok = evaluate_run(&s, &server_records(270_336, 2_700));
        assert!(ok.valid, "{:?}", ok.diagnostics);
        let bad = evaluate_run(&s, &server_records(270_336, 2_704));
        assert!(!bad.valid);
        assert!(
            bad.diagnostics
                .iter()
                .any(|d| d.contains("1% latency-bound")),
            "{:?}",
            bad.diagnostics
        );
    }

    #[test]
    fn exactly_at_budget_passes() {
        let s = server_settings();
        let r = evaluate_run(&s, &server_records(300_000, 3_000));
        assert_eq!(r.violation_fraction, 0.01);
        assert!(r.valid);
        let r = evaluate_run(&s, &server_records(300_000, 3_001));
        assert!(!r.valid);
    }

    #[test]
    fn offline_throughput() {
        let s = TestSettings::defaults(ScenarioKind::Offline);
        let r = LatencyRecord::new(0, 0, 0, 2_457_600_000, 24_576, 0).unwrap();
        let res = evaluate_run(&s, &[r]);
        assert_eq!(res.metric, ScenarioMetric::OfflineSamplesPerSec(10_000.0));
        assert_eq!(res.duration_ns, 60 * NS_PER_SEC);
        assert!(res.valid, "{:?}", res.diagnostics);
    }

    #[test]
    fn short_run_cites_duration_floor() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let records: Vec<_> = (0..2000)
            .map(|i| rec(i, i * 29_500_000, 29_500_000))
            .collect();
        let r = evaluate_run(&s, &records);
        assert_eq!(r.duration_ns, 59 * NS_PER_SEC);
        assert!(!r.valid);
        assert!(
            r.diagnostics[0].contains("60 s minimum"),
            "{:?}",
            r.diagnostics
        );
    }

    fn result(metric: f64, valid: bool, digest: u64) -> RunResult {
        RunResult {
            scenario: ScenarioKind::Server,
            metric: ScenarioMetric::MaxPoissonQps(metric),
            valid,
            violation_fraction: 0.0,
            duration_ns: 60 * NS_PER_SEC,
            issued_query_count: 270_336,
            settings_digest: digest,
            diagnostics: if valid { vec![] } else { vec!["bad".into()] },
        }
    }

    #[test]
    fn aggregate_takes_minimum() {
        let runs: Vec<_> = [2011.0, 1998.0, 2005.0, 2003.0, 2007.0]
            .iter()
            .map(|&m| result(m, true, 7))
            .collect();
        let agg = aggregate_server_runs(&runs).unwrap();
        assert_eq!(agg.metric_value(), 1998.0);
        assert!(agg.valid);
    }

    #[test]
    fn aggregate_invalid_member() {
        let mut runs: Vec<_> = (0..5).map(|_| result(2000.0, true, 7)).collect();
        assert_eq!(aggregate_server_runs(&runs).unwrap().metric_value(), 2000.0);
        runs[3].valid = false;
        assert!(!aggregate_server_runs(&runs).unwrap().valid);
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate_server_runs(&[]), Err(AggregateError::Empty));
        let runs = vec![result(1.0, true, 1), result(1.0, true, 2)];
        assert!(matches!(
            aggregate_server_runs(&runs),
            Err(AggregateError::MixedSettings(1, 2))
        ));
    }

    proptest::proptest! {
        #[test]
        fn percentile_permutation_invariant(mut v in proptest::collection::vec(0u64..1000, 1..200), p in 0.01f64..0.99, seed in 0u64..1000) {
            let a = percentile(&v, p).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            proptest::prop_assert_eq!(a, percentile(&v, p).unwrap());
        }

        #[test]
        fn percentile_monotone_in_p(v in proptest::collection::vec(0u64..1000, 1..200), p in 0.01f64..0.98, dp in 0.0f64..0.01) {
            proptest::prop_assert!(percentile(&v, p).unwrap() <= percentile(&v, p + dp).unwrap());
        }

        #[test]
        fn adding_violation_never_lowers_fraction(n in 10u64..500, over in 0u64..10) {
            let s = server_settings();
            let mut recs = server_records(n, over.min(n));
            let before = evaluate_run(&s, &recs).violation_fraction;
            recs.push(rec(n, n * NS_PER_MS, 200 * NS_PER_MS));
            proptest::prop_assert!(evaluate_run(&s, &recs).violation_fraction >= before);
        }
    }
}
