//! The three audit tests: accuracy spot check, caching probe and seed
//! variants.
//!
//! Every verdict carries the measurements it was decided on, and `pass` is
//! always recomputed from them by [`Evidence::passes`], so a stored verdict
//! can be re-checked without rerunning anything.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::harness::{run_performance, AccuracyLog, Harness, LoggingPolicy, RunError};
use crate::metrics::percentile;
use crate::planner::plan_for_scenario;
use crate::query::{LatencyRecord, LoggedResponse};
use crate::rng::derive_seed;
use crate::schedule::build_trace_with_seed;
use crate::settings::{ModeKind, SampleSelection, ScenarioKind, TestSettings};
use crate::NS_PER_SEC;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplianceConfig {
    /// Probability that a performance-mode response is logged for the spot check.
    pub log_probability: f64,
    /// Relative speed-up on duplicated samples that flags caching.
    pub caching_threshold: f64,
    /// Largest tolerated max/min metric ratio across seeds, minus one.
    pub seed_threshold: f64,
    /// Size of the sample subset the duplicate run draws from.
    pub duplicate_subset: u64,
    /// Fewer logged responses than this fails the spot check.
    pub min_logged: u64,
    pub alternate_seeds: Vec<u64>,
}

impl Default for ComplianceConfig {
    fn default() -> Self {
        Self {
            log_probability: 0.10,
            caching_threshold: 0.10,
            seed_threshold: 0.10,
            duplicate_subset: 8,
            min_logged: 32,
            alternate_seeds: default_alternate_seeds(2),
        }
    }
}

/// `n` alternate seeds, fixed so audits are reproducible.
pub fn default_alternate_seeds(n: u64) -> Vec<u64> {
    (0..n)
        .map(|i| derive_seed(crate::settings::OFFICIAL_SEED, 0xa17e_0000 + i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComplianceTest {
    AccuracySpotCheck,
    CachingProbe,
    SeedVariants,
}

impl ComplianceTest {
    pub const ALL: [ComplianceTest; 3] = [
        ComplianceTest::AccuracySpotCheck,
        ComplianceTest::CachingProbe,
        ComplianceTest::SeedVariants,
    ];

    /// Stable file stem used in result bundles.
    pub fn file_stem(self) -> &'static str {
        match self {
            ComplianceTest::AccuracySpotCheck => "accuracy_spot_check",
            ComplianceTest::CachingProbe => "caching_probe",
            ComplianceTest::SeedVariants => "seed_variants",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub response_id: u64,
    pub sample_index: u64,
    pub expected_digest: u64,
    pub actual_digest: u64,
}

/// Latency and throughput of one caching-probe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub selection: SampleSelection,
    pub queries: u64,
    pub samples: u64,
    pub p90_latency_ns: u64,
    /// Samples per second over the first-issue to last-completion window.
    pub throughput: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub official: bool,
    pub metric: f64,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    SpotCheck {
        log_probability: f64,
        logged: u64,
        min_logged: u64,
        mismatches: u64,
        mismatch_fraction: f64,
        first_mismatch: Option<Mismatch>,
    },
    Caching {
        threshold: f64,
        unique: ProbeRun,
        duplicate: ProbeRun,
    },
    Seeds {
        threshold: f64,
        runs: Vec<SeedRun>,
    },
}

impl Evidence {
    pub fn test(&self) -> ComplianceTest {
        match self {
            Evidence::SpotCheck { .. } => ComplianceTest::AccuracySpotCheck,
            Evidence::Caching { .. } => ComplianceTest::CachingProbe,
            Evidence::Seeds { .. } => ComplianceTest::SeedVariants,
        }
    }

    /// The pass rule of each test.
    pub fn passes(&self) -> bool {
        match self {
            Evidence::SpotCheck {
                logged,
                min_logged,
                mismatches,
                ..
            } => *mismatches == 0 && logged >= min_logged,
            Evidence::Caching {
                threshold,
                unique,
                duplicate,
            } => {
                let faster = duplicate.throughput > unique.throughput * (1.0 + threshold);
                let quicker = (duplicate.p90_latency_ns as f64)
                    < unique.p90_latency_ns as f64 * (1.0 - threshold);
                !(faster || quicker)
            }
            Evidence::Seeds { threshold, runs } => {
                if runs.is_empty() || !runs.iter().all(|r| r.valid) {
                    return false;
                }
                let max = runs
                    .iter()
                    .map(|r| r.metric)
                    .fold(f64::NEG_INFINITY, f64::max);
                let min = runs.iter().map(|r| r.metric).fold(f64::INFINITY, f64::min);
                if max <= 0.0 {
                    return max == min;
                }
                min > 0.0 && max <= min * (1.0 + threshold)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceVerdict {
    pub test: ComplianceTest,
    pub pass: bool,
    pub evidence: Evidence,
}

impl ComplianceVerdict {
    pub fn from_evidence(evidence: Evidence) -> Self {
        Self {
            test: evidence.test(),
            pass: evidence.passes(),
            evidence,
        }
    }

    /// Whether the stored `test` and `pass` agree with the evidence.
    pub fn is_consistent(&self) -> bool {
        self.test == self.evidence.test() && self.pass == self.evidence.passes()
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ComplianceError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("accuracy log has no entry for sample {sample_index}")]
    Incomparable { sample_index: u64 },
    #[error("caching probe needs {needed} loaded samples, have {loaded}")]
    Capacity { needed: u64, loaded: u64 },
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Spot-check verdict over responses already logged from a performance run.
pub fn spot_check_responses(
    responses: &[LoggedResponse],
    accuracy_log: &AccuracyLog,
    config: &ComplianceConfig,
) -> Result<ComplianceVerdict, ComplianceError> {
    let mut mismatches = 0u64;
    let mut first_mismatch = None;
    for r in responses {
        let expected = *accuracy_log
            .get(&r.sample_index)
            .ok_or(ComplianceError::Incomparable {
                sample_index: r.sample_index,
            })?;
        if expected != r.payload_digest {
            mismatches += 1;
            first_mismatch.get_or_insert(Mismatch {
                response_id: r.response_id,
                sample_index: r.sample_index,
                expected_digest: expected,
                actual_digest: r.payload_digest,
            });
        }
    }
    let logged = responses.len() as u64;
    Ok(ComplianceVerdict::from_evidence(Evidence::SpotCheck {
        log_probability: config.log_probability,
        logged,
        min_logged: config.min_logged,
        mismatches,
        mismatch_fraction: if logged == 0 {
            0.0
        } else {
            mismatches as f64 / logged as f64
        },
        first_mismatch,
    }))
}

/// Sampled logging policy the spot check uses for `settings`.
pub fn spot_check_policy(settings: &TestSettings, config: &ComplianceConfig) -> LoggingPolicy {
    LoggingPolicy::Sampled {
        probability: config.log_probability,
        seed: settings.spec().rng_seed,
    }
}

/// Runs the performance protocol with sampled logging and compares every
/// logged digest against `accuracy_log`.
pub fn accuracy_spot_check<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    accuracy_log: &AccuracyLog,
    config: &ComplianceConfig,
) -> Result<ComplianceVerdict, ComplianceError> {
    if !(config.log_probability > 0.0 && config.log_probability <= 1.0) {
        return Err(ComplianceError::Precondition(format!(
            "log probability {} outside (0, 1]",
            config.log_probability
        )));
    }
    let runs = run_performance(harness, settings, spot_check_policy(settings, config))?;
    let responses: Vec<LoggedResponse> = runs.runs.into_iter().flat_map(|r| r.responses).collect();
    spot_check_responses(&responses, accuracy_log, config)
}

/// Settings of one caching-probe run: a single pass over the loaded set,
/// bounded by count rather than duration.
pub fn probe_settings(
    settings: &TestSettings,
    selection: SampleSelection,
) -> Result<TestSettings, ComplianceError> {
    let mut spec = settings.to_spec();
    spec.mode = ModeKind::Performance;
    spec.unsafe_override = true;
    spec.min_duration_ns = 0;
    spec.sample_selection = selection;
    if spec.scenario == ScenarioKind::Offline {
        spec.samples_per_query = spec.loaded_sample_count;
    }
    if spec.loaded_sample_count < spec.samples_per_query {
        return Err(ComplianceError::Capacity {
            needed: spec.samples_per_query,
            loaded: spec.loaded_sample_count,
        });
    }
    spec.min_query_count_override = Some(spec.loaded_sample_count / spec.samples_per_query);
    spec.validate()
        .map_err(|e| ComplianceError::Precondition(format!("{e}")))
}

fn probe_run(records: &[LatencyRecord], selection: SampleSelection) -> ProbeRun {
    let latencies: Vec<u64> = records.iter().map(|r| r.latency_ns()).collect();
    let samples: u64 = records.iter().map(|r| r.sample_count()).sum();
    let first = records.iter().map(|r| r.issue_ns()).min().unwrap_or(0);
    let last = records.iter().map(|r| r.complete_ns()).max().unwrap_or(0);
    let window = last.saturating_sub(first);
    ProbeRun {
        selection,
        queries: records.len() as u64,
        samples,
        p90_latency_ns: percentile(&latencies, 0.90).unwrap_or(0),
        throughput: if window == 0 {
            f64::INFINITY
        } else {
            samples as f64 * NS_PER_SEC as f64 / window as f64
        },
    }
}

/// Runs the loaded set once with unique indices and once drawing from a
/// small subset; flags the SUT if the duplicate run is markedly faster.
pub fn caching_probe<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    config: &ComplianceConfig,
) -> Result<ComplianceVerdict, ComplianceError> {
    let k = config
        .duplicate_subset
        .min(settings.spec().loaded_sample_count)
        .max(1);
    let mut run = |selection| -> Result<ProbeRun, ComplianceError> {
        let s = probe_settings(settings, selection)?;
        let plan = plan_for_scenario(&s);
        let trace = build_trace_with_seed(&s, &plan, s.spec().rng_seed).map_err(RunError::from)?;
        let out = harness.execute(&s, &trace, LoggingPolicy::Off)?;
        Ok(probe_run(&out.records, selection))
    };
    let unique = run(SampleSelection::Unique)?;
    let duplicate = run(SampleSelection::Subset(k))?;
    Ok(ComplianceVerdict::from_evidence(Evidence::Caching {
        threshold: config.caching_threshold,
        unique,
        duplicate,
    }))
}

/// Repeats the performance protocol under the official seed and each
/// alternate; the SUT must stay valid and the metric must not move by more
/// than the threshold.
pub fn seed_variants<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    alternate_seeds: &[u64],
    config: &ComplianceConfig,
) -> Result<ComplianceVerdict, ComplianceError> {
    if alternate_seeds.len() < 2 {
        return Err(ComplianceError::Precondition(format!(
            "seed variants needs at least 2 alternate seeds, got {}",
            alternate_seeds.len()
        )));
    }
    let official = settings.spec().rng_seed;
    let mut runs = Vec::with_capacity(alternate_seeds.len() + 1);
    for (i, &seed) in core::iter::once(&official)
        .chain(alternate_seeds)
        .enumerate()
    {
        let s = settings.with_seed(seed);
        let out = run_performance(harness, &s, LoggingPolicy::Off)?;
        runs.push(SeedRun {
            seed,
            official: i == 0,
            metric: out.aggregate.metric.value(),
            valid: out.aggregate.valid,
        });
    }
    Ok(ComplianceVerdict::from_evidence(Evidence::Seeds {
        threshold: config.seed_threshold,
        runs,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::run_accuracy;
    use crate::sim_engine::VirtualHarness;
    use crate::simsut::{SimProfile, SimSut};
    use crate::NS_PER_MS;

    fn probe(p90: u64, thr: f64) -> ProbeRun {
        ProbeRun {
            selection: SampleSelection::Unique,
            queries: 1,
            samples: 1,
            p90_latency_ns: p90,
            throughput: thr,
        }
    }

    #[test]
    fn caching_threshold_boundary() {
        let ev = |thr_b: f64, p90_b: u64| Evidence::Caching {
            threshold: 0.10,
            unique: probe(1000, 100.0),
            duplicate: probe(p90_b, thr_b),
        };
        assert!(ev(105.0, 1000).passes());
        assert!(ev(110.0, 900).passes());
        assert!(!ev(110.5, 1000).passes());
        assert!(!ev(100.0, 899).passes());
    }

    #[test]
    fn seed_rule() {
        let run = |metric, valid| SeedRun {
            seed: 0,
            official: false,
            metric,
            valid,
        };
        let ev = |runs| Evidence::Seeds {
            threshold: 0.10,
            runs,
        };
        assert!(ev(alloc::vec![
            run(100.0, true),
            run(110.0, true),
            run(105.0, true)
        ])
        .passes());
        assert!(!ev(alloc::vec![
            run(100.0, true),
            run(111.0, true),
            run(105.0, true)
        ])
        .passes());
        assert!(!ev(alloc::vec![
            run(100.0, true),
            run(100.0, false),
            run(100.0, true)
        ])
        .passes());
    }

    #[test]
    fn verdict_consistency() {
        let mut v = ComplianceVerdict::from_evidence(Evidence::Seeds {
            threshold: 0.1,
            runs: Vec::new(),
        });
        assert!(v.is_consistent() && !v.pass);
        v.pass = true;
        assert!(!v.is_consistent());
    }

    #[test]
    fn spot_check_catches_mode_cheat() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let cfg = ComplianceConfig::default();
        let mut h = VirtualHarness::new(
            SimSut::new(SimProfile::ModeCheat {
                latency_ns: 5 * NS_PER_MS,
                digest_salt: 1,
                cheat_in_performance: true,
            })
            .unwrap(),
        );
        let (_, log) = run_accuracy(&mut h, &s).unwrap();
        let v = accuracy_spot_check(&mut h, &s, &log, &cfg).unwrap();
        assert!(!v.pass);
        match v.evidence {
            Evidence::SpotCheck {
                mismatches, logged, ..
            } => {
                assert!(mismatches >= 1);
                assert_eq!(mismatches, logged);
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn incomparable_log_is_an_error() {
        let r = LoggedResponse {
            response_id: 0,
            query_id: 0,
            sample_index: 5,
            payload_digest: 0,
            payload: None,
        };
        let err = spot_check_responses(&[r], &AccuracyLog::new(), &ComplianceConfig::default())
            .unwrap_err();
        assert_eq!(err, ComplianceError::Incomparable { sample_index: 5 });
    }

    #[test]
    fn single_alternate_seed_rejected() {
        let s = TestSettings::defaults(ScenarioKind::SingleStream);
        let mut h = VirtualHarness::new(SimSut::new(SimProfile::Null).unwrap());
        let err = seed_variants(&mut h, &s, &[1], &ComplianceConfig::default()).unwrap_err();
        assert!(matches!(err, ComplianceError::Precondition(_)));
    }

    #[test]
    fn caching_probe_capacity() {
        let mut spec = crate::SettingsSpec::defaults(ScenarioKind::MultiStream);
        spec.samples_per_query = 64;
        spec.loaded_sample_count = 32;
        spec.unsafe_override = true;
        assert!(spec.clone().validate().is_err());
        let s = TestSettings::defaults(ScenarioKind::MultiStream);
        assert!(probe_settings(&s, SampleSelection::Unique).is_ok());
    }
}
