//! Test settings for one run and their validation.
//!
//! [`SettingsSpec`] is the plain, serializable form. [`TestSettings`] can only
//! be obtained through [`SettingsSpec::validate`], so every `TestSettings` in
//! the program satisfies the invariants checked there.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::Fnv1a64;
use crate::{NS_PER_MS, NS_PER_SEC};

/// Seed used when nothing else is configured.
pub const OFFICIAL_SEED: u64 = 0x0c0f_fee0_5eed_2019;

pub const MULTI_STREAM_INTERVAL_RANGE_NS: (u64, u64) = (50 * NS_PER_MS, 100 * NS_PER_MS);
pub const SERVER_LATENCY_BOUND_RANGE_NS: (u64, u64) = (15 * NS_PER_MS, 250 * NS_PER_MS);
pub const MIN_DURATION_NS: u64 = 60 * NS_PER_SEC;
pub const SERVER_RUN_COUNT: u32 = 5;
pub const DEFAULT_QOS_BUDGET: f64 = 0.01;
/// Violation budget for translation-class workloads.
pub const TRANSLATION_QOS_BUDGET: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SingleStream,
    MultiStream,
    Server,
    Offline,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::SingleStream,
        ScenarioKind::MultiStream,
        ScenarioKind::Server,
        ScenarioKind::Offline,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::SingleStream => "single_stream",
            ScenarioKind::MultiStream => "multi_stream",
            ScenarioKind::Server => "server",
            ScenarioKind::Offline => "offline",
        }
    }

    const fn tag(self) -> u8 {
        match self {
            ScenarioKind::SingleStream => 0,
            ScenarioKind::MultiStream => 1,
            ScenarioKind::Server => 2,
            ScenarioKind::Offline => 3,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("unknown {what} `{value}`")]
pub struct ParseKindError {
    what: &'static str,
    value: String,
}

impl FromStr for ScenarioKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_'))
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "singlestream" => Ok(ScenarioKind::SingleStream),
            "multistream" => Ok(ScenarioKind::MultiStream),
            "server" => Ok(ScenarioKind::Server),
            "offline" => Ok(ScenarioKind::Offline),
            _ => Err(ParseKindError {
                what: "scenario",
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Accuracy,
    Performance,
}

impl ModeKind {
    pub const fn as_str(self) -> &'static str {
        match self {
            ModeKind::Accuracy => "accuracy",
            ModeKind::Performance => "performance",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModeKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" => Ok(ModeKind::Accuracy),
            "performance" => Ok(ModeKind::Performance),
            _ => Err(ParseKindError {
                what: "mode",
                value: s.into(),
            }),
        }
    }
}

/// How sample indices are chosen for performance-mode queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSelection {
    /// Uniform with replacement over the loaded samples.
    #[default]
    WithReplacement,
    /// Every sample index in the trace is distinct.
    Unique,
    /// With replacement from a fixed random subset of `k` loaded samples.
    Subset(u64),
}

/// Plain form of the run settings. Validate with [`SettingsSpec::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsSpec {
    pub scenario: ScenarioKind,
    pub mode: ModeKind,
    pub tail_percentile: f64,
    pub confidence: f64,
    /// Server only.
    pub latency_bound_ns: Option<u64>,
    /// Server Poisson rate, queries per second.
    pub target_qps: f64,
    /// MultiStream arrival interval.
    pub interval_ns: u64,
    /// Samples per query; the total sample count for Offline.
    pub samples_per_query: u64,
    pub qos_violation_budget: f64,
    pub min_duration_ns: u64,
    pub min_query_count_override: Option<u64>,
    pub rng_seed: u64,
    pub loaded_sample_count: u64,
    pub server_run_count: u32,
    pub sample_selection: SampleSelection,
    /// Permits values outside the standard scenario ranges.
    pub unsafe_override: bool,
}

impl SettingsSpec {
    /// Standard settings for `scenario` in performance mode.
    pub fn defaults(scenario: ScenarioKind) -> Self {
        let (tail, bound, spq) = match scenario {
            ScenarioKind::SingleStream => (0.90, None, 1),
            ScenarioKind::MultiStream => (0.99, None, 8),
            ScenarioKind::Server => (0.99, Some(100 * NS_PER_MS), 1),
            ScenarioKind::Offline => (0.99, None, crate::planner::OFFLINE_MIN_SAMPLES),
        };
        Self {
            scenario,
            mode: ModeKind::Performance,
            tail_percentile: tail,
            confidence: 0.99,
            latency_bound_ns: bound,
            target_qps: 100.0,
            interval_ns: 50 * NS_PER_MS,
            samples_per_query: spq,
            qos_violation_budget: DEFAULT_QOS_BUDGET,
            min_duration_ns: MIN_DURATION_NS,
            min_query_count_override: None,
            rng_seed: OFFICIAL_SEED,
            loaded_sample_count: 1024,
            server_run_count: SERVER_RUN_COUNT,
            sample_selection: SampleSelection::WithReplacement,
            unsafe_override: false,
        }
    }

    /// Every violated invariant, empty when the settings are valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.tail_percentile) {
            v.push(format!(
                "tail_percentile {} must lie in (0, 1)",
                self.tail_percentile
            ));
        }
        if !open_unit(self.confidence) {
            v.push(format!("confidence {} must lie in (0, 1)", self.confidence));
        }
        if !(self.qos_violation_budget >= 0.0 && self.qos_violation_budget < 1.0) {
            v.push(format!(
                "qos_violation_budget {} must lie in [0, 1)",
                self.qos_violation_budget
            ));
        }
        if self.samples_per_query == 0 {
            v.push("samples_per_query must be at least 1".into());
        }
        if self.loaded_sample_count == 0 {
            v.push("loaded_sample_count must be at least 1".into());
        }
        if self.server_run_count == 0 {
            v.push("server_run_count must be at least 1".into());
        }
        if let SampleSelection::Subset(0) = self.sample_selection {
            v.push("sample subset size must be at least 1".into());
        }
        match self.scenario {
            ScenarioKind::SingleStream | ScenarioKind::Server if self.samples_per_query != 1 => {
                v.push(format!(
                    "{} queries carry exactly one sample, got samples_per_query {}",
                    self.scenario, self.samples_per_query
                ));
            }
            ScenarioKind::MultiStream => {
                if self.interval_ns == 0 {
                    v.push("interval_ns must be positive".into());
                }
                if self.samples_per_query > self.loaded_sample_count {
                    v.push(format!(
                        "multi_stream samples_per_query {} exceeds loaded_sample_count {}; query samples must be contiguous",
                        self.samples_per_query, self.loaded_sample_count
                    ));
                }
            }
            _ => {}
        }
        if self.scenario == ScenarioKind::Server {
            if !(self.target_qps.is_finite() && self.target_qps > 0.0) {
                v.push(format!(
                    "target_qps {} must be positive and finite",
                    self.target_qps
                ));
            }
            match self.latency_bound_ns {
                None => v.push("server scenario requires latency_bound_ns".into()),
                Some(0) => v.push("latency_bound_ns must be positive".into()),
                Some(_) => {}
            }
        }

        if !self.unsafe_override {
            let (lo, hi) = MULTI_STREAM_INTERVAL_RANGE_NS;
            if self.scenario == ScenarioKind::MultiStream && !(lo..=hi).contains(&self.interval_ns)
            {
                v.push(format!(
                    "multi_stream interval {} ms outside the 50-100 ms range (requires unsafe_override)",
                    ns_as_ms(self.interval_ns)
                ));
            }
            let (lo, hi) = SERVER_LATENCY_BOUND_RANGE_NS;
            if let (ScenarioKind::Server, Some(b)) = (self.scenario, self.latency_bound_ns) {
                if !(lo..=hi).contains(&b) {
                    v.push(format!(
                        "server latency bound {} ms outside the 15-250 ms range (requires unsafe_override)",
                        ns_as_ms(b)
                    ));
                }
            }
            if self.min_duration_ns < MIN_DURATION_NS {
                v.push(format!(
                    "min_duration {} s below the 60 s minimum (requires unsafe_override)",
                    ns_as_secs(self.min_duration_ns)
                ));
            }
            if self.scenario == ScenarioKind::Server && self.server_run_count < SERVER_RUN_COUNT {
                v.push(format!(
                    "server_run_count {} below the required {} (requires unsafe_override)",
                    self.server_run_count, SERVER_RUN_COUNT
                ));
            }
        }
        v
    }

    pub fn validate(self) -> Result<TestSettings, SettingsError> {
        let violations = self.violations();
        if violations.is_empty() {
            let digest = digest_spec(&self);
            Ok(TestSettings { spec: self, digest })
        } else {
            Err(SettingsError { violations })
        }
    }
}

fn ns_as_ms(ns: u64) -> f64 {
    ns as f64 / NS_PER_MS as f64
}

fn ns_as_secs(ns: u64) -> f64 {
    ns as f64 / NS_PER_SEC as f64
}

/// Settings that violate one or more invariants.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid settings: {}", .violations.join("; "))]
pub struct SettingsError {
    pub violations: Vec<String>,
}

/// Validated, immutable run settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SettingsSpec", into = "SettingsSpec")]
pub struct TestSettings {
    spec: SettingsSpec,
    digest: u64,
}

impl TryFrom<SettingsSpec> for TestSettings {
    type Error = SettingsError;

    fn try_from(spec: SettingsSpec) -> Result<Self, Self::Error> {
        spec.validate()
    }
}

impl From<TestSettings> for SettingsSpec {
    fn from(s: TestSettings) -> Self {
        s.spec
    }
}

impl TestSettings {
    /// Standard settings for `scenario`; always valid.
    pub fn defaults(scenario: ScenarioKind) -> Self {
        SettingsSpec::defaults(scenario)
            .validate()
            .expect("default settings are valid")
    }

    pub fn spec(&self) -> &SettingsSpec {
        &self.spec
    }

    pub fn to_spec(&self) -> SettingsSpec {
        self.spec.clone()
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn scenario(&self) -> ScenarioKind {
        self.spec.scenario
    }

    pub fn mode(&self) -> ModeKind {
        self.spec.mode
    }

    /// Same settings in another mode.
    pub fn with_mode(&self, mode: ModeKind) -> Self {
        let mut spec = self.spec.clone();
        spec.mode = mode;
        spec.validate().expect("mode does not affect validity")
    }

    /// Same settings with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut spec = self.spec.clone();
        spec.rng_seed = seed;
        spec.validate().expect("seed does not affect validity")
    }
}

/// Digest binding traces and logs to one set of settings.
pub fn settings_digest(spec: &SettingsSpec) -> Result<u64, SettingsError> {
    spec.clone().validate().map(|s| s.digest)
}

fn digest_spec(s: &SettingsSpec) -> u64 {
    let mut h = Fnv1a64::new();
    h.write(b"loadgen.settings.v1");
    h.write_u8(s.scenario.tag());
    h.write_u8(match s.mode {
        ModeKind::Accuracy => 0,
        ModeKind::Performance => 1,
    });
    h.write_f64(s.tail_percentile);
    h.write_f64(s.confidence);
    match s.latency_bound_ns {
        Some(b) => {
            h.write_u8(1);
            h.write_u64(b);
        }
        None => h.write_u8(0),
    }
    h.write_f64(s.target_qps);
    h.write_u64(s.interval_ns);
    h.write_u64(s.samples_per_query);
    h.write_f64(s.qos_violation_budget);
    h.write_u64(s.min_duration_ns);
    match s.min_query_count_override {
        Some(c) => {
            h.write_u8(1);
            h.write_u64(c);
        }
        None => h.write_u8(0),
    }
    h.write_u64(s.rng_seed);
    h.write_u64(s.loaded_sample_count);
    h.write_u64(u64::from(s.server_run_count));
    match s.sample_selection {
        SampleSelection::WithReplacement => h.write_u8(0),
        SampleSelection::Unique => h.write_u8(1),
        SampleSelection::Subset(k) => {
            h.write_u8(2);
            h.write_u64(k);
        }
    }
    h.write_u8(u8::from(s.unsafe_override));
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_for_every_scenario() {
        for s in ScenarioKind::ALL {
            assert!(SettingsSpec::defaults(s).violations().is_empty(), "{s}");
        }
    }

    #[test]
    fn identical_settings_identical_digest() {
        let a = SettingsSpec::defaults(ScenarioKind::Server);
        assert_eq!(
            settings_digest(&a).unwrap(),
            settings_digest(&a.clone()).unwrap()
        );
    }

    #[test]
    fn seed_changes_digest() {
        let mut a = SettingsSpec::defaults(ScenarioKind::Server);
        let mut b = a.clone();
        a.rng_seed = 1;
        b.rng_seed = 2;
        let (da, db) = (settings_digest(&a).unwrap(), settings_digest(&b).unwrap());
        assert_ne!(da, db);
    }

    #[test]
    fn every_field_feeds_the_digest() {
        let base = SettingsSpec::defaults(ScenarioKind::Server);
        let d0 = settings_digest(&base).unwrap();
        let mut variants: Vec<SettingsSpec> = Vec::new();
        let mut push = |f: &dyn Fn(&mut SettingsSpec)| {
            let mut s = base.clone();
            f(&mut s);
            variants.push(s);
        };
        push(&|s| s.mode = ModeKind::Accuracy);
        push(&|s| s.tail_percentile = 0.97);
        push(&|s| s.confidence = 0.95);
        push(&|s| s.latency_bound_ns = Some(20 * NS_PER_MS));
        push(&|s| s.target_qps = 101.0);
        push(&|s| s.interval_ns += 1);
        push(&|s| s.qos_violation_budget = 0.03);
        push(&|s| s.min_duration_ns += 1);
        push(&|s| s.min_query_count_override = Some(5));
        push(&|s| s.loaded_sample_count += 1);
        push(&|s| s.server_run_count += 1);
        push(&|s| s.sample_selection = SampleSelection::Unique);
        push(&|s| s.unsafe_override = true);
        for v in variants {
            assert_ne!(settings_digest(&v).unwrap(), d0, "{v:?}");
        }
    }

    #[test]
    fn multistream_interval_outside_range_rejected() {
        let mut s = SettingsSpec::defaults(ScenarioKind::MultiStream);
        s.interval_ns = 10 * NS_PER_MS;
        let err = settings_digest(&s).unwrap_err();
        assert_eq!(err.violations.len(), 1);
        assert!(err.violations[0].contains("50-100 ms"), "{err}");
        s.unsafe_override = true;
        assert!(settings_digest(&s).is_ok());
    }

    #[test]
    fn server_bound_outside_range_rejected() {
        let mut s = SettingsSpec::defaults(ScenarioKind::Server);
        s.latency_bound_ns = Some(300 * NS_PER_MS);
        assert!(s.clone().validate().is_err());
        s.latency_bound_ns = Some(15 * NS_PER_MS);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn lists_every_violation() {
        let mut s = SettingsSpec::defaults(ScenarioKind::Server);
        s.tail_percentile = 1.0;
        s.confidence = 0.0;
        s.loaded_sample_count = 0;
        s.min_duration_ns = 1;
        let err = s.validate().unwrap_err();
        assert_eq!(err.violations.len(), 4, "{err}");
    }

    #[test]
    fn scenario_names_parse() {
        assert_eq!(
            "single-stream".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::SingleStream
        );
        assert_eq!(
            "MultiStream".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::MultiStream
        );
        assert_eq!(
            "server".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::Server
        );
        assert!("burst".parse::<ScenarioKind>().is_err());
    }
}
