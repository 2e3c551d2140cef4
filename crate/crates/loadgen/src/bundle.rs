//! Result bundles: the directory a submission consists of.
//!
//! ```text
//! <out>/<sut>/<scenario>/
//!     settings.json
//!     run_0.log .. run_{n-1}.log
//!     accuracy.log
//!     compliance/{accuracy_spot_check,caching_probe,seed_variants}.json
//!     summary.json
//!     manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use loadgen_core::compliance::{
    caching_probe, seed_variants, spot_check_policy, spot_check_responses, ComplianceConfig,
    ComplianceError,
};
use loadgen_core::harness::{run_accuracy, run_performance, RunOutcome, ScenarioRuns};
use loadgen_core::metrics::RunResult;
use loadgen_core::{
    fnv1a64, plan_for_scenario, ComplianceTest, ComplianceVerdict, Harness, LoggingPolicy,
    ModeKind, RunError, ScenarioKind, TestSettings,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::logio::{hex64, run_records, write_log, LogError, RunHeader, RunKind, LAYOUT_VERSION};

pub const BUNDLE_FORMAT: &str = "loadgen.bundle.v1";
pub const SETTINGS_FILE: &str = "settings.json";
pub const ACCURACY_LOG: &str = "accuracy.log";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const COMPLIANCE_DIR: &str = "compliance";

pub fn run_log_name(i: u32) -> String {
    format!("run_{i}.log")
}

pub fn compliance_file(test: ComplianceTest) -> String {
    format!("{COMPLIANCE_DIR}/{}.json", test.file_stem())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleSummary {
    pub format: String,
    pub layout_version: u32,
    pub sut: String,
    pub scenario: ScenarioKind,
    #[serde(with = "hex64")]
    pub settings_digest: u64,
    pub runs: Vec<RunResult>,
    pub aggregate: RunResult,
    pub accuracy_samples: u64,
    /// Verdict per compliance test, keyed by file stem.
    pub compliance: BTreeMap<String, bool>,
    /// Aggregate valid and every compliance test passed.
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    #[serde(with = "hex64")]
    pub fnv1a64: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub files: BTreeMap<String, FileDigest>,
}

impl FileDigest {
    pub fn of(bytes: &[u8]) -> Self {
        Self {
            fnv1a64: fnv1a64(bytes),
            len: bytes.len() as u64,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
}

/// Everything that goes into a bundle.
pub struct Submission {
    pub sut: String,
    pub settings: TestSettings,
    pub config: Value,
    pub performance: ScenarioRuns,
    pub spot_check_logging: LoggingPolicy,
    pub accuracy: RunOutcome,
    pub compliance: Vec<ComplianceVerdict>,
}

impl Submission {
    pub fn summary(&self) -> BundleSummary {
        let compliance: BTreeMap<String, bool> = self
            .compliance
            .iter()
            .map(|v| (v.test.file_stem().to_owned(), v.pass))
            .collect();
        let all_tests = ComplianceTest::ALL
            .iter()
            .all(|t| compliance.get(t.file_stem()).copied().unwrap_or(false));
        BundleSummary {
            format: BUNDLE_FORMAT.into(),
            layout_version: LAYOUT_VERSION,
            sut: self.sut.clone(),
            scenario: self.settings.scenario(),
            settings_digest: self.settings.digest(),
            runs: self
                .performance
                .runs
                .iter()
                .map(|r| r.result.clone())
                .collect(),
            aggregate: self.performance.aggregate.clone(),
            accuracy_samples: self.accuracy.responses.len() as u64,
            valid: self.performance.aggregate.valid && all_tests,
            compliance,
        }
    }
}

/// Runs everything a submission needs: the accuracy pass, the performance
/// protocol with sampled response logging, and the three compliance tests.
/// With `compliance` set to `None` the tests are skipped and the bundle will
/// not pass the checker.
pub fn run_submission<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    config: Value,
    compliance: Option<&ComplianceConfig>,
) -> Result<Submission, BundleError> {
    let settings = settings.with_mode(ModeKind::Performance);
    let default_cfg = ComplianceConfig::default();
    let cfg = compliance.unwrap_or(&default_cfg);
    let (accuracy, accuracy_log) = run_accuracy(harness, &settings)?;
    let logging = spot_check_policy(&settings, cfg);
    let performance = run_performance(harness, &settings, logging)?;
    let mut verdicts = Vec::new();
    if compliance.is_some() {
        let responses: Vec<_> = performance
            .runs
            .iter()
            .flat_map(|r| r.responses.iter().cloned())
            .collect();
        verdicts.push(spot_check_responses(&responses, &accuracy_log, cfg)?);
        verdicts.push(caching_probe(harness, &settings, cfg)?);
        verdicts.push(seed_variants(
            harness,
            &settings,
            &cfg.alternate_seeds,
            cfg,
        )?);
    }
    Ok(Submission {
        sut: harness.sut_name().to_owned(),
        settings,
        config,
        performance,
        spot_check_logging: logging,
        accuracy,
        compliance: verdicts,
    })
}

/// Directory-safe form of a SUT name.
pub fn sanitize(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() {
        "sut".into()
    } else {
        s
    }
}

pub fn bundle_dir(out: &Path, sut: &str, scenario: ScenarioKind) -> PathBuf {
    out.join(sanitize(sut)).join(scenario.as_str())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), BundleError> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes `sub` under `out` and returns the bundle directory.
pub fn write_bundle(
    out: &Path,
    sub: &Submission,
    wall_clock_unix_ms: u64,
) -> Result<PathBuf, BundleError> {
    let dir = bundle_dir(out, &sub.sut, sub.settings.scenario());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(dir.join(COMPLIANCE_DIR))?;

    write_json(&dir.join(SETTINGS_FILE), &sub.settings.to_spec())?;
    let plan = sub.performance.plan;
    for (i, run) in sub.performance.runs.iter().enumerate() {
        let header = RunHeader {
            sut: sub.sut.clone(),
            run_kind: RunKind::Performance,
            run_index: i as u32,
            wall_clock_unix_ms,
            config: sub.config.clone(),
        };
        let records = run_records(
            &header,
            &sub.settings,
            &plan,
            run,
            Some(sub.spot_check_logging),
        );
        write_log(&dir.join(run_log_name(i as u32)), records)?;
    }
    let acc_settings = sub.settings.with_mode(ModeKind::Accuracy);
    let header = RunHeader {
        sut: sub.sut.clone(),
        run_kind: RunKind::Accuracy,
        run_index: 0,
        wall_clock_unix_ms,
        config: sub.config.clone(),
    };
    let records = run_records(
        &header,
        &acc_settings,
        &plan_for_scenario(&acc_settings),
        &sub.accuracy,
        Some(LoggingPolicy::All),
    );
    write_log(&dir.join(ACCURACY_LOG), records)?;
    for v in &sub.compliance {
        write_json(&dir.join(compliance_file(v.test)), v)?;
    }
    write_json(&dir.join(SUMMARY_FILE), &sub.summary())?;
    write_manifest(&dir)?;
    Ok(dir)
}

/// Files under `dir` other than the manifest, as sorted relative paths.
pub fn bundle_files(dir: &Path) -> std::io::Result<Vec<String>> {
    fn walk(base: &Path, d: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for e in fs::read_dir(d)? {
            let p = e?.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                let rel = p.strip_prefix(base).expect("under base");
                let rel: Vec<_> = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect();
                out.push(rel.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.retain(|f| f != MANIFEST_FILE);
    out.sort();
    Ok(out)
}

/// Digests every file of the bundle into `manifest.json`.
pub fn write_manifest(dir: &Path) -> Result<Manifest, BundleError> {
    let mut files = BTreeMap::new();
    for rel in bundle_files(dir)? {
        files.insert(rel.clone(), FileDigest::of(&fs::read(dir.join(&rel))?));
    }
    let m = Manifest {
        format: BUNDLE_FORMAT.into(),
        files,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

pub fn unix_ms_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
