//! Submission checker.
//!
//! Audits a bundle directory written by [`crate::bundle::write_bundle`] and
//! lists every violated rule. Metrics are recomputed from the issued and
//! completed records and must match the recorded ones bit for bit; traces are
//! regenerated from the settings and seeds and compared query by query; the
//! accuracy spot check is re-derived from the logged responses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use loadgen_core::harness::{required_runs, run_seed};
use loadgen_core::metrics::{aggregate_server_runs, evaluate_run, RunResult};
use loadgen_core::schedule::build_trace_with_seed;
use loadgen_core::{
    plan_for_scenario, ArrivalProcess, ComplianceConfig, ComplianceTest, ComplianceVerdict,
    Evidence, LoggingPolicy, ModeKind, QueryTrace, SettingsSpec, TestSettings,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    bundle_files, compliance_file, run_log_name, BundleSummary, FileDigest, Manifest, ACCURACY_LOG,
    MANIFEST_FILE, SETTINGS_FILE, SUMMARY_FILE,
};
use crate::logio::{IssuedPayload, RunKind, RunLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    MissingFile,
    ManifestMismatch,
    MalformedFile,
    SettingsOutOfRange,
    SettingsDigestMismatch,
    TraceMismatch,
    LogStructure,
    MetricMismatch,
    RunInvalid,
    AccuracyLogIncomplete,
    ComplianceMissing,
    ComplianceFailed,
    ComplianceInconsistent,
}

impl Rule {
    pub const fn as_str(self) -> &'static str {
        match self {
            Rule::MissingFile => "missing_file",
            Rule::ManifestMismatch => "manifest_mismatch",
            Rule::MalformedFile => "malformed_file",
            Rule::SettingsOutOfRange => "settings_out_of_range",
            Rule::SettingsDigestMismatch => "settings_digest_mismatch",
            Rule::TraceMismatch => "trace_mismatch",
            Rule::LogStructure => "log_structure",
            Rule::MetricMismatch => "metric_mismatch",
            Rule::RunInvalid => "run_invalid",
            Rule::AccuracyLogIncomplete => "accuracy_log_incomplete",
            Rule::ComplianceMissing => "compliance_missing",
            Rule::ComplianceFailed => "compliance_failed",
            Rule::ComplianceInconsistent => "compliance_inconsistent",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub file: Option<String>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.file {
            Some(file) => write!(f, "[{}] {file}: {}", self.rule, self.detail),
            None => write!(f, "[{}] {}", self.rule, self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub bundle: String,
    pub files_checked: u64,
    pub violations: Vec<Violation>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn rules(&self) -> BTreeSet<Rule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    /// 0 when the bundle passes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            1
        }
    }

    fn add(&mut self, rule: Rule, file: Option<&str>, detail: impl Into<String>) {
        self.violations.push(Violation {
            rule,
            file: file.map(str::to_owned),
            detail: detail.into(),
        });
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("cannot read bundle {path}: {reason}")]
    Unreadable { path: String, reason: String },
}

/// Audits the bundle at `dir`. Only an unreadable bundle is an error; every
/// other problem is reported as a violation.
pub fn check_submission(dir: &Path) -> Result<CheckReport, CheckError> {
    let unreadable = |reason: String| CheckError::Unreadable {
        path: dir.display().to_string(),
        reason,
    };
    if !dir.is_dir() {
        return Err(unreadable("not a directory".into()));
    }
    let present = bundle_files(dir).map_err(|e| unreadable(e.to_string()))?;
    let mut c = Checker {
        dir,
        report: CheckReport {
            bundle: dir.display().to_string(),
            ..Default::default()
        },
        present: present.iter().cloned().collect(),
    };
    c.run();
    Ok(c.report)
}

struct Checker<'a> {
    dir: &'a Path,
    report: CheckReport,
    present: BTreeSet<String>,
}

/// What the run logs contribute to the spot-check audit.
#[derive(Default)]
struct SpotTally {
    logged: u64,
    mismatches: u64,
    probability: Option<f64>,
}

impl Checker<'_> {
    fn run(&mut self) {
        self.check_manifest();
        let settings = self.load_settings();
        let summary: Option<BundleSummary> = self.load_json(SUMMARY_FILE);
        let Some(settings) = settings else {
            // Without settings nothing else can be recomputed.
            return;
        };
        if let Some(s) = &summary {
            if s.settings_digest != settings.digest() {
                self.report.add(
                    Rule::SettingsDigestMismatch,
                    Some(SUMMARY_FILE),
                    format!(
                        "summary binds settings {:#018x}, settings file digests to {:#018x}",
                        s.settings_digest,
                        settings.digest()
                    ),
                );
            }
            if s.scenario != settings.scenario() || s.runs.len() as u32 != required_runs(&settings)
            {
                self.report.add(
                    Rule::MetricMismatch,
                    Some(SUMMARY_FILE),
                    format!("summary lists {} {} run(s)", s.runs.len(), s.scenario),
                );
            }
        }

        let accuracy = self.check_accuracy_log(&settings, summary.as_ref());
        let mut tally = SpotTally::default();
        let mut results = Vec::new();
        for i in 0..required_runs(&settings) {
            let file = run_log_name(i);
            match self.check_run_log(&file, i, &settings, accuracy.as_ref(), &mut tally) {
                Some(r) => {
                    if let Some(s) = &summary {
                        if s.runs.get(i as usize) != Some(&r) {
                            self.report.add(
                                Rule::MetricMismatch,
                                Some(SUMMARY_FILE),
                                format!("runs[{i}] differs from the result recomputed from {file}"),
                            );
                        }
                    }
                    results.push(r);
                }
                None => results.clear(),
            }
        }
        let complete = results.len() as u32 == required_runs(&settings);
        if complete {
            match aggregate_server_runs(&results) {
                Ok(agg) => {
                    if let Some(s) = &summary {
                        if s.aggregate != agg {
                            self.report.add(
                                Rule::MetricMismatch,
                                Some(SUMMARY_FILE),
                                format!(
                                    "aggregate metric {} does not match recomputed {}",
                                    metric_text(&s.aggregate),
                                    metric_text(&agg)
                                ),
                            );
                        }
                    }
                }
                Err(e) => self.report.add(Rule::MetricMismatch, None, e.to_string()),
            }
        }

        let verdicts =
            self.check_compliance(accuracy.is_some() && complete, &tally, summary.as_ref());
        // Unreadable verdicts are already reported.
        if let Some(s) = summary
            .as_ref()
            .filter(|_| verdicts.len() == ComplianceTest::ALL.len())
        {
            let all_pass = verdicts.values().all(|&p| p);
            let expected = s.aggregate.valid && all_pass;
            if s.valid != expected {
                self.report.add(
                    Rule::MetricMismatch,
                    Some(SUMMARY_FILE),
                    format!(
                        "summary valid = {}, but the recorded results give {expected}",
                        s.valid
                    ),
                );
            }
        }
    }

    fn check_manifest(&mut self) {
        if !self.dir.join(MANIFEST_FILE).is_file() {
            self.report.add(
                Rule::MissingFile,
                Some(MANIFEST_FILE),
                "required file is missing",
            );
            return;
        }
        self.report.files_checked += 1;
        let parsed = fs::read(self.dir.join(MANIFEST_FILE))
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).map_err(|e| e.to_string()));
        let manifest = match parsed {
            Ok(m) => m,
            Err(e) => {
                self.report.add(Rule::MalformedFile, Some(MANIFEST_FILE), e);
                return;
            }
        };
        for (rel, want) in &manifest.files {
            if !self.present.contains(rel) {
                // Reported as a missing file by the owning check, or here if
                // nothing else requires it.
                continue;
            }
            match fs::read(self.dir.join(rel)) {
                Ok(bytes) => {
                    let got = FileDigest::of(&bytes);
                    if &got != want {
                        self.report.add(
                            Rule::ManifestMismatch,
                            Some(rel),
                            format!(
                                "content digest {:#018x} ({} bytes), manifest records {:#018x} ({} bytes)",
                                got.fnv1a64, got.len, want.fnv1a64, want.len
                            ),
                        );
                    }
                }
                Err(e) => self
                    .report
                    .add(Rule::MalformedFile, Some(rel), e.to_string()),
            }
        }
        for rel in &self.present {
            if !manifest.files.contains_key(rel) {
                self.report.add(
                    Rule::ManifestMismatch,
                    Some(rel),
                    "file is not listed in the manifest",
                );
            }
        }
        let required = |rel: &str| {
            rel == SETTINGS_FILE
                || rel == SUMMARY_FILE
                || rel == ACCURACY_LOG
                || rel.starts_with("run_")
                || rel.starts_with("compliance/")
        };
        for rel in manifest.files.keys() {
            if !self.present.contains(rel) && !required(rel) {
                self.report.add(
                    Rule::MissingFile,
                    Some(rel),
                    "file listed in the manifest is missing",
                );
            }
        }
    }

    fn require(&mut self, rel: &str) -> bool {
        if self.present.contains(rel) {
            self.report.files_checked += 1;
            true
        } else {
            self.report
                .add(Rule::MissingFile, Some(rel), "required file is missing");
            false
        }
    }

    fn load_json<T: DeserializeOwned>(&mut self, rel: &str) -> Option<T> {
        if !self.require(rel) {
            return None;
        }
        let parsed = fs::read(self.dir.join(rel))
            .map_err(|e| e.to_string())
            .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()));
        match parsed {
            Ok(v) => Some(v),
            Err(e) => {
                self.report.add(Rule::MalformedFile, Some(rel), e);
                None
            }
        }
    }

    fn load_settings(&mut self) -> Option<TestSettings> {
        let spec: SettingsSpec = self.load_json(SETTINGS_FILE)?;
        if spec.mode != ModeKind::Performance {
            self.report.add(
                Rule::SettingsOutOfRange,
                Some(SETTINGS_FILE),
                "submission settings must be in performance mode",
            );
        }
        match spec.validate() {
            Ok(s) => Some(s),
            Err(e) => {
                for v in e.violations {
                    self.report
                        .add(Rule::SettingsOutOfRange, Some(SETTINGS_FILE), v);
                }
                None
            }
        }
    }

    fn read_log(&mut self, rel: &str) -> Option<RunLog> {
        if !self.require(rel) {
            return None;
        }
        match RunLog::read(&self.dir.join(rel)) {
            Ok(log) => Some(log),
            Err(e) => {
                self.report
                    .add(Rule::LogStructure, Some(rel), e.to_string());
                None
            }
        }
    }

    /// Checks the settings and trace binding shared by every log. Returns
    /// the regenerated trace.
    fn check_binding(
        &mut self,
        rel: &str,
        log: &RunLog,
        settings: &TestSettings,
        kind: RunKind,
        index: u32,
        seed: u64,
    ) -> Option<QueryTrace> {
        let h = &log.header;
        if h.run_kind != kind || h.run_index != index || h.scenario != settings.scenario() {
            self.report.add(
                Rule::LogStructure,
                Some(rel),
                format!(
                    "header says {:?} run {} of {}, expected {kind:?} run {index} of {}",
                    h.run_kind,
                    h.run_index,
                    h.scenario,
                    settings.scenario()
                ),
            );
        }
        if log.settings.settings != *settings.spec()
            || log.settings.settings_digest != settings.digest()
        {
            self.report.add(
                Rule::SettingsDigestMismatch,
                Some(rel),
                "log settings differ from the bundle settings",
            );
            return None;
        }
        if log.summary.settings_digest != settings.digest()
            || log.summary.result.settings_digest != settings.digest()
        {
            self.report.add(
                Rule::SettingsDigestMismatch,
                Some(rel),
                "summary is bound to other settings",
            );
        }
        let plan = plan_for_scenario(settings);
        if log.trace_ref.plan != plan {
            self.report.add(
                Rule::TraceMismatch,
                Some(rel),
                "recorded query plan differs from the settings",
            );
        }
        if log.trace_ref.trace_seed != seed || log.summary.trace_seed != seed {
            self.report.add(
                Rule::TraceMismatch,
                Some(rel),
                format!(
                    "trace seed {:#018x}, expected {seed:#018x}",
                    log.trace_ref.trace_seed
                ),
            );
            return None;
        }
        let trace = match build_trace_with_seed(settings, &plan, seed) {
            Ok(t) => t,
            Err(e) => {
                self.report
                    .add(Rule::TraceMismatch, Some(rel), e.to_string());
                return None;
            }
        };
        if trace.digest() != log.trace_ref.trace_digest {
            self.report.add(
                Rule::TraceMismatch,
                Some(rel),
                format!(
                    "trace digest {:#018x}, regenerated {:#018x}",
                    log.trace_ref.trace_digest,
                    trace.digest()
                ),
            );
            return None;
        }
        Some(trace)
    }

    /// Matches every issued query against the regenerated trace and returns
    /// the sample index of each issued response id.
    fn check_issued(
        &mut self,
        rel: &str,
        settings: &TestSettings,
        trace: &QueryTrace,
        issued: &[IssuedPayload],
    ) -> Option<HashMap<u64, u64>> {
        let process = ArrivalProcess::for_settings(settings);
        let cyclic = process == ArrivalProcess::Sequential;
        let qend = trace.query_id_end().max(1);
        let mut samples = HashMap::with_capacity(issued.len());
        let mut bad = 0u64;
        let mut first_bad = None;
        for q in issued {
            let (i, cycle) = if cyclic {
                (q.query_id % qend, q.query_id / qend)
            } else {
                (q.query_id, 0)
            };
            let ok = (i as usize) < trace.len() && {
                let base = &trace.queries()[i as usize];
                let view = trace.view(i as usize, cycle);
                let scheduled_ok = match process {
                    ArrivalProcess::Sequential => q.scheduled_ns <= q.issue_ns,
                    ArrivalProcess::FixedInterval { .. } => {
                        q.scheduled_ns >= base.scheduled_issue_ns
                    }
                    _ => q.scheduled_ns == base.scheduled_issue_ns,
                };
                let ok = view.query_id == q.query_id
                    && view.response_ids.start == q.first_response_id
                    && view.samples.len() as u64 == q.sample_count
                    && scheduled_ok;
                if ok {
                    for (k, s) in view.samples.iter().enumerate() {
                        samples.insert(q.first_response_id + k as u64, s);
                    }
                }
                ok
            };
            if !ok {
                bad += 1;
                first_bad.get_or_insert(q.query_id);
            }
        }
        if !cyclic && issued.len() != trace.len() {
            self.report.add(
                Rule::TraceMismatch,
                Some(rel),
                format!("{} queries issued, trace has {}", issued.len(), trace.len()),
            );
        }
        if bad > 0 {
            self.report.add(
                Rule::TraceMismatch,
                Some(rel),
                format!(
                    "{bad} issued queries do not match the regenerated trace (first: query {})",
                    first_bad.unwrap_or_default()
                ),
            );
            return None;
        }
        Some(samples)
    }

    /// Recomputes the run result from the log's records and compares it with
    /// the log's own summary.
    fn recompute(&mut self, rel: &str, log: &RunLog, settings: &TestSettings) -> Option<RunResult> {
        let records = match log.latency_records() {
            Ok(r) => r,
            Err(e) => {
                self.report
                    .add(Rule::LogStructure, Some(rel), e.to_string());
                return None;
            }
        };
        let result = evaluate_run(settings, &records);
        if result != log.summary.result {
            self.report.add(
                Rule::MetricMismatch,
                Some(rel),
                format!(
                    "summary reports {} (valid {}), records give {} (valid {})",
                    metric_text(&log.summary.result),
                    log.summary.result.valid,
                    metric_text(&result),
                    result.valid
                ),
            );
        }
        let n = records.len() as u64;
        if log.summary.issued_queries != n || log.summary.completed_queries != n {
            self.report.add(
                Rule::MetricMismatch,
                Some(rel),
                format!(
                    "summary counts {} issued / {} completed, log holds {n}",
                    log.summary.issued_queries, log.summary.completed_queries
                ),
            );
        }
        if log.summary.min_duration_ns != settings.spec().min_duration_ns {
            self.report.add(
                Rule::MetricMismatch,
                Some(rel),
                "summary minimum duration differs from settings",
            );
        }
        Some(result)
    }

    fn check_accuracy_log(
        &mut self,
        settings: &TestSettings,
        summary: Option<&BundleSummary>,
    ) -> Option<BTreeMap<u64, u64>> {
        let rel = ACCURACY_LOG;
        let log = self.read_log(rel)?;
        let acc = settings.with_mode(ModeKind::Accuracy);
        let trace =
            self.check_binding(rel, &log, &acc, RunKind::Accuracy, 0, acc.spec().rng_seed)?;
        let issued = log
            .issued()
            .map_err(|e| {
                self.report
                    .add(Rule::LogStructure, Some(rel), e.to_string())
            })
            .ok()?;
        let samples = self.check_issued(rel, &acc, &trace, &issued)?;
        self.recompute(rel, &log, &acc)?;
        let responses = log
            .accuracy()
            .map_err(|e| {
                self.report
                    .add(Rule::LogStructure, Some(rel), e.to_string())
            })
            .ok()?;

        let mut digests = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for r in &responses {
            if samples.get(&r.response_id) != Some(&r.sample_index) || !seen.insert(r.response_id) {
                self.report.add(
                    Rule::AccuracyLogIncomplete,
                    Some(rel),
                    format!(
                        "response {} does not belong to the accuracy trace",
                        r.response_id
                    ),
                );
                return None;
            }
            if let Some(prev) = digests.insert(r.sample_index, r.payload_digest) {
                if prev != r.payload_digest {
                    self.report.add(
                        Rule::AccuracyLogIncomplete,
                        Some(rel),
                        format!(
                            "sample {} answered with two different digests",
                            r.sample_index
                        ),
                    );
                }
            }
        }
        if seen.len() != samples.len() {
            self.report.add(
                Rule::AccuracyLogIncomplete,
                Some(rel),
                format!("{} of {} responses logged", seen.len(), samples.len()),
            );
        }
        let loaded = acc.spec().loaded_sample_count;
        if digests.len() as u64 != loaded {
            self.report.add(
                Rule::AccuracyLogIncomplete,
                Some(rel),
                format!("{} of {loaded} loaded samples covered", digests.len()),
            );
        }
        if let Some(s) = summary {
            if s.accuracy_samples != responses.len() as u64 {
                self.report.add(
                    Rule::MetricMismatch,
                    Some(SUMMARY_FILE),
                    format!(
                        "accuracy_samples {} but the accuracy log holds {}",
                        s.accuracy_samples,
                        responses.len()
                    ),
                );
            }
        }
        Some(digests)
    }

    fn check_run_log(
        &mut self,
        rel: &str,
        index: u32,
        settings: &TestSettings,
        accuracy: Option<&BTreeMap<u64, u64>>,
        tally: &mut SpotTally,
    ) -> Option<RunResult> {
        let log = self.read_log(rel)?;
        let seed = run_seed(settings, index);
        let trace = self.check_binding(rel, &log, settings, RunKind::Performance, index, seed);
        let result = self.recompute(rel, &log, settings)?;
        if !result.valid {
            let why = if result.diagnostics.is_empty() {
                "run is invalid".to_owned()
            } else {
                result.diagnostics.join("; ")
            };
            self.report.add(Rule::RunInvalid, Some(rel), why);
        }

        let issued = log.issued().ok()?;
        let samples = trace.and_then(|t| self.check_issued(rel, settings, &t, &issued));
        let responses = match log.accuracy() {
            Ok(r) => r,
            Err(e) => {
                self.report
                    .add(Rule::LogStructure, Some(rel), e.to_string());
                return Some(result);
            }
        };
        if log.summary.logged_responses != responses.len() as u64 {
            self.report.add(
                Rule::MetricMismatch,
                Some(rel),
                "summary logged_responses differs from the log",
            );
        }
        let Some(LoggingPolicy::Sampled { probability, seed }) = log.logging else {
            self.report.add(
                Rule::ComplianceInconsistent,
                Some(rel),
                format!(
                    "performance run logged with policy {:?}, expected sampled",
                    log.logging
                ),
            );
            return Some(result);
        };
        let policy = LoggingPolicy::Sampled { probability, seed };
        if tally.probability.is_some_and(|p| p != probability) {
            self.report.add(
                Rule::ComplianceInconsistent,
                Some(rel),
                "runs use different log probabilities",
            );
        }
        tally.probability = Some(probability);
        if seed != settings.spec().rng_seed {
            self.report.add(
                Rule::ComplianceInconsistent,
                Some(rel),
                "sampling seed differs from the settings seed",
            );
        }

        let expected: BTreeSet<u64> = issued
            .iter()
            .flat_map(|q| q.first_response_id..q.first_response_id + q.sample_count)
            .filter(|&rid| policy.should_log(rid))
            .collect();
        let logged: BTreeSet<u64> = responses.iter().map(|r| r.response_id).collect();
        if logged != expected || logged.len() != responses.len() {
            self.report.add(
                Rule::ComplianceInconsistent,
                Some(rel),
                format!(
                    "{} responses logged, the sampling policy selects {}",
                    responses.len(),
                    expected.len()
                ),
            );
        }
        tally.logged += responses.len() as u64;
        if let Some(samples) = &samples {
            if responses
                .iter()
                .any(|r| samples.get(&r.response_id) != Some(&r.sample_index))
            {
                self.report.add(
                    Rule::TraceMismatch,
                    Some(rel),
                    "logged response sample differs from the trace",
                );
            }
        }
        if let Some(acc) = accuracy {
            tally.mismatches += responses
                .iter()
                .filter(|r| acc.get(&r.sample_index) != Some(&r.payload_digest))
                .count() as u64;
        }
        Some(result)
    }

    fn check_compliance(
        &mut self,
        recomputable: bool,
        tally: &SpotTally,
        summary: Option<&BundleSummary>,
    ) -> BTreeMap<ComplianceTest, bool> {
        let defaults = ComplianceConfig::default();
        let mut out = BTreeMap::new();
        for test in ComplianceTest::ALL {
            let rel = compliance_file(test);
            if let Some(s) = summary {
                if !s.compliance.contains_key(test.file_stem()) {
                    self.report.add(
                        Rule::ComplianceMissing,
                        Some(SUMMARY_FILE),
                        format!("no {} verdict recorded", test.file_stem()),
                    );
                }
            }
            let Some(v): Option<ComplianceVerdict> = self.load_json(&rel) else {
                continue;
            };
            if v.test != test || !v.is_consistent() {
                self.report.add(
                    Rule::ComplianceInconsistent,
                    Some(&rel),
                    "verdict does not follow from its evidence",
                );
                continue;
            }
            match &v.evidence {
                Evidence::SpotCheck {
                    log_probability,
                    logged,
                    min_logged,
                    mismatches,
                    ..
                } => {
                    if *min_logged < defaults.min_logged {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            "minimum logged count lowered",
                        );
                    }
                    if tally.probability.is_some_and(|p| p != *log_probability) {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            "log probability differs from the run logs",
                        );
                    }
                    if recomputable && (*logged != tally.logged || *mismatches != tally.mismatches)
                    {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            format!(
                                "evidence reports {mismatches} mismatches in {logged} responses, logs give {} in {}",
                                tally.mismatches, tally.logged
                            ),
                        );
                    }
                }
                Evidence::Caching { threshold, .. } => {
                    if *threshold > defaults.caching_threshold {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            "threshold loosened",
                        );
                    }
                }
                Evidence::Seeds { threshold, runs } => {
                    if *threshold > defaults.seed_threshold {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            "threshold loosened",
                        );
                    }
                    if runs.iter().filter(|r| !r.official).count() < 2 {
                        self.report.add(
                            Rule::ComplianceInconsistent,
                            Some(&rel),
                            "fewer than two alternate seeds",
                        );
                    }
                }
            }
            if !v.pass {
                self.report
                    .add(Rule::ComplianceFailed, Some(&rel), "compliance test failed");
            }
            if let Some(s) = summary {
                if s.compliance
                    .get(test.file_stem())
                    .is_some_and(|&p| p != v.pass)
                {
                    self.report.add(
                        Rule::ComplianceInconsistent,
                        Some(SUMMARY_FILE),
                        format!(
                            "summary verdict for {} differs from {rel}",
                            test.file_stem()
                        ),
                    );
                }
            }
            out.insert(test, v.pass);
        }
        out
    }
}

fn metric_text(r: &RunResult) -> String {
    serde_json::to_string(&r.metric).unwrap_or_default()
}
