//! Run configuration: a JSON file overlaid on scenario defaults, then on
//! command-line flags.
//!
//! ```json
//! {
//!   "scenario": "server",
//!   "settings": { "target_qps": 250.0, "latency_bound_ns": 50000000 },
//!   "sut": "sim:constant:5ms",
//!   "virtual_time": true,
//!   "compliance": { "log_probability": 0.1 }
//! }
//! ```
//!
//! Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use loadgen_core::{
    build_trace, plan_for_scenario, ComplianceConfig, ScenarioKind, SettingsError, SettingsSpec,
    SimProfile, TestSettings,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Settings(#[from] SettingsError),
    #[error("sut: {0}")]
    Sut(String),
    #[error("{0}")]
    Invalid(String),
}

/// How the SUT is reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SutSpec {
    Sim(SimProfile),
    /// `host:port` of a SUT speaking the line protocol.
    Tcp(String),
}

impl SutSpec {
    pub fn name(&self) -> String {
        match self {
            SutSpec::Sim(p) => p.label().to_owned(),
            SutSpec::Tcp(addr) => format!("tcp-{addr}"),
        }
    }
}

/// Parses `5ms`, `250us`, `1.5s`, `800ns` into nanoseconds.
pub fn parse_duration_ns(s: &str) -> Result<u64, ConfigError> {
    let s = s.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| {
            ConfigError::Invalid(format!("duration `{s}` needs a unit (ns, us, ms, s)"))
        })?;
    let (num, unit) = s.split_at(split);
    let scale = match unit {
        "ns" => 1.0,
        "us" | "µs" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        _ => {
            return Err(ConfigError::Invalid(format!(
                "unknown duration unit in `{s}`"
            )))
        }
    };
    let v: f64 = num
        .parse()
        .map_err(|_| ConfigError::Invalid(format!("bad duration `{s}`")))?;
    let ns = (v * scale).round();
    if !(ns.is_finite() && ns >= 0.0 && ns <= u64::MAX as f64) {
        return Err(ConfigError::Invalid(format!("duration `{s}` out of range")));
    }
    Ok(ns as u64)
}

/// A SUT given on the command line, before settings-dependent fields are
/// filled in.
#[derive(Clone, Debug, PartialEq)]
pub enum SutArg {
    Profile(SimProfile),
    /// Seed-cheating profile; its official digest comes from the settings.
    SeedCheat {
        fast_ns: u64,
        slow_factor: u64,
    },
    Tcp(String),
}

impl FromStr for SutArg {
    type Err = ConfigError;

    /// ```text
    /// sim:null
    /// sim:constant:LAT
    /// sim:lognormal:MEDIAN,SIGMA[,SEED]
    /// sim:batch:PER_SAMPLE,SETUP[,PARALLELISM]
    /// sim:caching:COLD,WARM,CACHE_SIZE
    /// sim:modecheat:LAT[,honest]
    /// sim:seedcheat:FAST[,SLOW_FACTOR]
    /// tcp:HOST:PORT
    /// ```
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| ConfigError::Sut(format!("`{s}`: {why}"));
        if let Some(addr) = s.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(bad("expected tcp:HOST:PORT"));
            }
            return Ok(SutArg::Tcp(addr.to_owned()));
        }
        let rest = s
            .strip_prefix("sim:")
            .ok_or_else(|| bad("expected sim:... or tcp:..."))?;
        let (kind, args) = rest.split_once(':').unwrap_or((rest, ""));
        let args: Vec<&str> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',').collect()
        };
        let arity = |lo: usize, hi: usize| {
            if (lo..=hi).contains(&args.len()) {
                Ok(())
            } else {
                Err(bad(&format!("{kind} takes {lo}..={hi} arguments")))
            }
        };
        let int = |a: &str| {
            a.trim()
                .parse::<u64>()
                .map_err(|_| bad(&format!("`{a}` is not an integer")))
        };
        let profile = match kind {
            "null" => {
                arity(0, 0)?;
                SimProfile::Null
            }
            "constant" => {
                arity(1, 1)?;
                SimProfile::ConstantLatency {
                    latency_ns: parse_duration_ns(args[0])?,
                }
            }
            "lognormal" => {
                arity(2, 3)?;
                let median = parse_duration_ns(args[0])?;
                let sigma: f64 = args[1]
                    .trim()
                    .parse()
                    .map_err(|_| bad("sigma is not a number"))?;
                SimProfile::LognormalLatency {
                    mu: (median.max(1) as f64).ln(),
                    sigma,
                    seed: args.get(2).map(|a| int(a)).transpose()?.unwrap_or(1),
                }
            }
            "batch" => {
                arity(2, 3)?;
                SimProfile::BatchQueue {
                    service_per_sample_ns: parse_duration_ns(args[0])?,
                    setup_ns: parse_duration_ns(args[1])?,
                    parallelism: args
                        .get(2)
                        .map(|a| int(a))
                        .transpose()?
                        .unwrap_or(1)
                        .try_into()
                        .map_err(|_| bad("parallelism out of range"))?,
                }
            }
            "caching" => {
                arity(3, 3)?;
                SimProfile::CachingSut {
                    cold_ns: parse_duration_ns(args[0])?,
                    warm_ns: parse_duration_ns(args[1])?,
                    cache_size: int(args[2])?,
                }
            }
            "modecheat" => {
                arity(1, 2)?;
                let honest = match args.get(1).map(|a| a.trim()) {
                    None => false,
                    Some("honest") => true,
                    Some(other) => return Err(bad(&format!("unknown modecheat option `{other}`"))),
                };
                SimProfile::ModeCheat {
                    latency_ns: parse_duration_ns(args[0])?,
                    digest_salt: 0,
                    cheat_in_performance: !honest,
                }
            }
            "seedcheat" => {
                arity(1, 2)?;
                return Ok(SutArg::SeedCheat {
                    fast_ns: parse_duration_ns(args[0])?,
                    slow_factor: args.get(1).map(|a| int(a)).transpose()?.unwrap_or(3),
                });
            }
            _ => return Err(bad("unknown simulated profile")),
        };
        profile.validate().map_err(|e| bad(&e.0))?;
        Ok(SutArg::Profile(profile))
    }
}

impl SutArg {
    pub fn resolve(&self, settings: &TestSettings) -> Result<SutSpec, ConfigError> {
        Ok(match self {
            SutArg::Profile(p) => SutSpec::Sim(p.clone()),
            SutArg::Tcp(a) => SutSpec::Tcp(a.clone()),
            &SutArg::SeedCheat {
                fast_ns,
                slow_factor,
            } => {
                let trace = build_trace(settings, &plan_for_scenario(settings))
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                let p = SimProfile::SeedCheat {
                    official_trace_digest: trace.digest(),
                    fast_ns,
                    slow_factor,
                };
                p.validate().map_err(|e| ConfigError::Sut(e.0))?;
                SutSpec::Sim(p)
            }
        })
    }
}

/// `sut` in a config file: a spec string or a structured [`SutSpec`].
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum SutField {
    Spec(String),
    Structured(SutSpec),
}

/// Contents of a config file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: Option<ScenarioKind>,
    /// Settings fields overriding the scenario defaults.
    #[serde(default)]
    pub settings: Map<String, Value>,
    #[serde(default)]
    pub sut: Option<SutField>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub virtual_time: Option<bool>,
    /// Timer or worker threads for simulated SUTs on the wall clock.
    #[serde(default)]
    pub sut_threads: Option<usize>,
    /// Compliance fields overriding the defaults, or `false` to skip the tests.
    #[serde(default)]
    pub compliance: Option<Value>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Overlays `patch` onto the JSON form of `base`.
pub fn overlay<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    patch: &Map<String, Value>,
) -> Result<T, ConfigError> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("struct serializes to an object");
    for (k, val) in patch {
        obj.insert(k.clone(), val.clone());
    }
    Ok(serde_json::from_value(v)?)
}

/// Fully resolved configuration; serialized into every log header.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub settings: SettingsSpec,
    pub sut: SutSpec,
    pub virtual_time: bool,
    pub sut_threads: usize,
    pub compliance: Option<ComplianceConfig>,
    #[serde(skip)]
    pub out: PathBuf,
}

impl Resolved {
    pub fn test_settings(&self) -> Result<TestSettings, ConfigError> {
        Ok(self.settings.clone().validate()?)
    }

    pub fn header_config(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

impl fmt::Display for SutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Resolves compliance settings from the config file value.
pub fn resolve_compliance(v: Option<&Value>) -> Result<Option<ComplianceConfig>, ConfigError> {
    match v {
        None | Some(Value::Bool(true)) => Ok(Some(ComplianceConfig::default())),
        Some(Value::Bool(false)) => Ok(None),
        Some(Value::Object(m)) => Ok(Some(overlay(&ComplianceConfig::default(), m)?)),
        Some(other) => Err(ConfigError::Invalid(format!(
            "compliance must be a boolean or an object, got {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use loadgen_core::NS_PER_MS;

    #[test]
    fn durations() {
        assert_eq!(parse_duration_ns("5ms").unwrap(), 5 * NS_PER_MS);
        assert_eq!(parse_duration_ns("1.5s").unwrap(), 1_500_000_000);
        assert_eq!(parse_duration_ns("250us").unwrap(), 250_000);
        assert_eq!(parse_duration_ns("7ns").unwrap(), 7);
        assert!(parse_duration_ns("5").is_err());
        assert!(parse_duration_ns("5min").is_err());
    }

    #[test]
    fn sut_specs() {
        assert_eq!(
            "sim:null".parse::<SutArg>().unwrap(),
            SutArg::Profile(SimProfile::Null)
        );
        assert_eq!(
            "sim:constant:5ms".parse::<SutArg>().unwrap(),
            SutArg::Profile(SimProfile::ConstantLatency {
                latency_ns: 5 * NS_PER_MS
            })
        );
        assert_eq!(
            "sim:batch:0.5ms,2ms".parse::<SutArg>().unwrap(),
            SutArg::Profile(SimProfile::BatchQueue {
                service_per_sample_ns: 500_000,
                setup_ns: 2 * NS_PER_MS,
                parallelism: 1
            })
        );
        assert_eq!(
            "tcp:127.0.0.1:9000".parse::<SutArg>().unwrap(),
            SutArg::Tcp("127.0.0.1:9000".into())
        );
        assert!("sim:constant:0ms".parse::<SutArg>().is_err());
        assert!("sim:warp:1ms".parse::<SutArg>().is_err());
        assert!("tcp:nohost".parse::<SutArg>().is_err());
        assert!(matches!(
            "sim:seedcheat:5ms".parse::<SutArg>().unwrap(),
            SutArg::SeedCheat { slow_factor: 3, .. }
        ));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"scenaro": "server"}"#).is_err());
        let cfg: RunConfig =
            serde_json::from_str(r#"{"settings": {"target_qps_typo": 1}}"#).unwrap();
        let base = SettingsSpec::defaults(ScenarioKind::Server);
        assert!(overlay(&base, &cfg.settings).is_err());
    }

    #[test]
    fn overlay_keeps_defaults() {
        let mut patch = Map::new();
        patch.insert("target_qps".into(), Value::from(250.0));
        let s = overlay(&SettingsSpec::defaults(ScenarioKind::Server), &patch).unwrap();
        assert_eq!(s.target_qps, 250.0);
        assert_eq!(s.latency_bound_ns, Some(100 * NS_PER_MS));
    }

    #[test]
    fn compliance_toggle() {
        assert!(resolve_compliance(Some(&Value::Bool(false)))
            .unwrap()
            .is_none());
        let m = serde_json::json!({"min_logged": 64});
        assert_eq!(
            resolve_compliance(Some(&m)).unwrap().unwrap().min_logged,
            64
        );
        assert!(resolve_compliance(Some(&serde_json::json!({"nope": 1}))).is_err());
    }
}
