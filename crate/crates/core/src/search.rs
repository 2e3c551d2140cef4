//! Bisection drivers for the maximum sustainable load.
//!
//! Both drivers assume pass/fail is monotone in the searched parameter. Each
//! probe runs the full performance protocol (five runs for Server) and is
//! kept in the outcome.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::harness::{run_performance, Harness, LoggingPolicy, RunError};
use crate::settings::{ScenarioKind, TestSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe<T> {
    pub value: T,
    pub valid: bool,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome<T> {
    /// Largest passing value, `None` if even the lowest fails.
    pub value: Option<T>,
    /// The upper bound passed, so the true maximum may be higher.
    pub saturated: bool,
    /// A pass was observed above a failure.
    pub anomaly: bool,
    pub probes: Vec<Probe<T>>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search bounds: {0}")]
    Bounds(alloc::string::String),
    #[error("settings for probe rejected: {0}")]
    Settings(#[from] crate::settings::SettingsError),
    #[error(transparent)]
    Run(#[from] RunError),
}

/// Bisection over grid indices `0..=top`; `probe(k)` reports validity.
fn bisect<T: Copy>(
    top: u64,
    value_at: impl Fn(u64) -> T,
    mut probe: impl FnMut(T) -> Result<Probe<T>, SearchError>,
) -> Result<SearchOutcome<T>, SearchError> {
    let mut probes = Vec::new();
    let mut run = |k: u64, probes: &mut Vec<Probe<T>>| -> Result<bool, SearchError> {
        let p = probe(value_at(k))?;
        let ok = p.valid;
        probes.push(p);
        Ok(ok)
    };

    if run(top, &mut probes)? {
        return Ok(SearchOutcome {
            value: Some(value_at(top)),
            saturated: true,
            anomaly: false,
            probes,
        });
    }
    if top == 0 || !run(0, &mut probes)? {
        return Ok(SearchOutcome {
            value: None,
            saturated: false,
            anomaly: false,
            probes,
        });
    }
    let (mut good, mut bad) = (0u64, top);
    while bad - good > 1 {
        let mid = good + (bad - good) / 2;
        if run(mid, &mut probes)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    // One confirmation probe past the boundary catches the common
    // non-monotone shape (a narrow failing band).
    let mut anomaly = false;
    if bad + 1 < top && run(bad + 1, &mut probes)? {
        anomaly = true;
    }
    Ok(SearchOutcome {
        value: Some(value_at(good)),
        saturated: false,
        anomaly,
        probes,
    })
}

/// Largest Poisson rate on the grid `lo, lo + resolution, ..., <= hi` whose
/// performance protocol is valid.
pub fn search_max_qps<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    lo_qps: f64,
    hi_qps: f64,
    resolution: f64,
) -> Result<SearchOutcome<f64>, SearchError> {
    if settings.scenario() != ScenarioKind::Server {
        return Err(SearchError::Bounds(
            "qps search needs the server scenario".into(),
        ));
    }
    if !(lo_qps > 0.0
        && hi_qps >= lo_qps
        && resolution > 0.0
        && lo_qps.is_finite()
        && hi_qps.is_finite())
    {
        return Err(SearchError::Bounds(alloc::format!(
            "need 0 < lo <= hi and resolution > 0, got lo={lo_qps} hi={hi_qps} resolution={resolution}"
        )));
    }
    let top = libm::floor((hi_qps - lo_qps) / resolution + 1e-9) as u64;
    bisect(
        top,
        |k| lo_qps + k as f64 * resolution,
        |qps| {
            let mut spec = settings.to_spec();
            spec.target_qps = qps;
            let s = spec.validate()?;
            let runs = run_performance(harness, &s, LoggingPolicy::Off)?;
            Ok(Probe {
                value: qps,
                valid: runs.aggregate.valid,
                metric: runs.aggregate.metric.value(),
            })
        },
    )
}

/// Largest stream count `N <= hi_n` for which a MultiStream run is valid.
pub fn search_max_streams<H: Harness + ?Sized>(
    harness: &mut H,
    settings: &TestSettings,
    hi_n: u64,
) -> Result<SearchOutcome<u64>, SearchError> {
    if settings.scenario() != ScenarioKind::MultiStream {
        return Err(SearchError::Bounds(
            "stream search needs the multistream scenario".into(),
        ));
    }
    if hi_n == 0 {
        return Err(SearchError::Bounds("hi_n must be at least 1".into()));
    }
    bisect(
        hi_n - 1,
        |k| k + 1,
        |n| {
            let mut spec = settings.to_spec();
            spec.samples_per_query = n;
            let s = spec.validate()?;
            let runs = run_performance(harness, &s, LoggingPolicy::Off)?;
            Ok(Probe {
                value: n,
                valid: runs.aggregate.valid,
                metric: runs.aggregate.metric.value(),
            })
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(pass: impl Fn(u64) -> bool, top: u64) -> SearchOutcome<u64> {
        bisect(
            top,
            |k| k,
            |v| {
                Ok(Probe {
                    value: v,
                    valid: pass(v),
                    metric: 0.0,
                })
            },
        )
        .unwrap()
    }

    #[test]
    fn monotone_threshold_found() {
        for t in 0..40u64 {
            let o = outcome(|v| v <= t, 40);
            assert_eq!(o.value, Some(t));
            assert!(!o.anomaly);
        }
    }

    #[test]
    fn saturation_and_none() {
        let o = outcome(|_| true, 10);
        assert!(o.saturated);
        assert_eq!(o.value, Some(10));
        assert_eq!(outcome(|_| false, 10).value, None);
    }

    #[test]
    fn failing_band_flags_anomaly() {
        let o = outcome(|v| v != 20 && v <= 30, 40);
        assert_eq!(o.value, Some(19));
        assert!(o.anomaly);
    }
}
