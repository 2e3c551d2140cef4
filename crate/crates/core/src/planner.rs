//! Statistical query planning.
//!
//! The number of queries needed so that a measured tail-latency percentile
//! holds at the requested confidence is
//!
//! ```text
//! margin      = (1 - tail) / 20
//! num_queries = z((1 - confidence) / 2)^2 * tail * (1 - tail) / margin^2
//! ```
//!
//! where `z` is the standard normal quantile. The count is rounded up to an
//! integer and then to the next multiple of 2^13.

use serde::{Deserialize, Serialize};

use crate::settings::{ScenarioKind, TestSettings};

/// Query counts are rounded up to a multiple of this.
pub const QUERY_COUNT_GRANULE: u64 = 1 << 13;
pub const SINGLE_STREAM_MIN_QUERIES: u64 = 1024;
pub const OFFLINE_MIN_SAMPLES: u64 = 24_576;

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
#[error("probability {0} outside the open interval (0, 1)")]
pub struct DomainError(pub f64);

/// Standard normal quantile: returns `z` with `Phi(z) = p`.
///
/// Acklam's rational approximation followed by one Newton step against the
/// complementary error function. Exactly antisymmetric: the upper half is
/// computed from the lower one through `1 - p`, which is exact for `p >= 0.5`.
pub fn norm_inv(p: f64) -> Result<f64, DomainError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DomainError(p));
    }
    Ok(if p < 0.5 {
        lower_quantile(p)
    } else if p > 0.5 {
        -lower_quantile(1.0 - p)
    } else {
        0.0
    })
}

/// Standard normal CDF via `erfc`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

// q in (0, 0.5)
fn lower_quantile(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if q < P_LOW {
        let t = libm::sqrt(-2.0 * libm::log(q));
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let u = q - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    x - (norm_cdf(x) - q) / norm_pdf(x)
}

/// Query requirements for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    /// Ceiling of the statistical count.
    pub raw_query_count: u64,
    /// `raw_query_count` rounded up to a multiple of 2^13.
    pub rounded_query_count: u64,
    /// Scenario floor: queries for SingleStream, samples for Offline, else 0.
    pub scenario_min: u64,
    /// Minimum number of queries the run must issue.
    pub effective_min_queries: u64,
    /// Offline sample budget; 0 for other scenarios.
    pub min_sample_count: u64,
    pub margin: f64,
}

/// Statistical query count for a tail percentile at a confidence level.
pub fn required_query_count(
    tail_percentile: f64,
    confidence: f64,
) -> Result<QueryPlan, DomainError> {
    if !(tail_percentile > 0.0 && tail_percentile < 1.0) {
        return Err(DomainError(tail_percentile));
    }
    let z = norm_inv((1.0 - confidence) / 2.0)?;
    let margin = (1.0 - tail_percentile) / 20.0;
    let raw =
        libm::ceil(z * z * tail_percentile * (1.0 - tail_percentile) / (margin * margin)) as u64;
    let rounded = raw.div_ceil(QUERY_COUNT_GRANULE) * QUERY_COUNT_GRANULE;
    Ok(QueryPlan {
        raw_query_count: raw,
        rounded_query_count: rounded,
        scenario_min: 0,
        effective_min_queries: rounded,
        min_sample_count: 0,
        margin,
    })
}

/// Query plan for the scenario in `settings`.
///
/// `min_query_count_override` raises the floor; with `unsafe_override` it
/// replaces it outright.
pub fn plan_for_scenario(settings: &TestSettings) -> QueryPlan {
    let s = settings.spec();
    let mut plan = required_query_count(s.tail_percentile, s.confidence)
        .expect("validated settings are in range");
    let apply_override = |floor: u64| match (s.min_query_count_override, s.unsafe_override) {
        (Some(o), true) => o.max(1),
        (Some(o), false) => floor.max(o),
        (None, _) => floor,
    };
    match s.scenario {
        ScenarioKind::SingleStream => {
            plan.scenario_min = SINGLE_STREAM_MIN_QUERIES;
            plan.effective_min_queries = apply_override(SINGLE_STREAM_MIN_QUERIES);
        }
        ScenarioKind::MultiStream | ScenarioKind::Server => {
            plan.effective_min_queries = apply_override(plan.rounded_query_count);
        }
        ScenarioKind::Offline => {
            plan.scenario_min = OFFLINE_MIN_SAMPLES;
            plan.effective_min_queries = 1;
            plan.min_sample_count = if s.unsafe_override {
                s.samples_per_query
            } else {
                OFFLINE_MIN_SAMPLES.max(s.samples_per_query)
            };
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::settings::SettingsSpec;

    #[test]
    fn median_is_zero() {
        assert_eq!(norm_inv(0.5).unwrap(), 0.0);
    }

    #[test]
    fn known_quantiles() {
        // Values from a 30-digit reference evaluation.
        assert!((norm_inv(0.005).unwrap() - -2.575_829_303_548_9).abs() < 1e-12);
        assert!((norm_inv(0.975).unwrap() - 1.959_963_984_540_054_2).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(norm_inv(p).is_err(), "{p}");
        }
    }

    #[test]
    fn ninety_ninth_percentile_counts() {
        let plan = required_query_count(0.99, 0.99).unwrap();
        assert_eq!(plan.raw_query_count, 262_742);
        assert_eq!(plan.rounded_query_count, 270_336);
        assert_eq!(plan.rounded_query_count, 33 * QUERY_COUNT_GRANULE);
    }

    #[test]
    fn ninety_seventh_and_ninetieth() {
        let p97 = required_query_count(0.97, 0.99).unwrap();
        assert_eq!(p97.raw_query_count, 85_812);
        assert_eq!(p97.rounded_query_count, 90_112);
        let p90 = required_query_count(0.90, 0.99).unwrap();
        assert_eq!(p90.raw_query_count, 23_886);
        assert_eq!(p90.rounded_query_count, 24_576);
    }

    #[test]
    fn margin_is_one_twentieth() {
        let plan = required_query_count(0.9, 0.99).unwrap();
        assert_eq!(plan.margin, (1.0 - 0.9) / 20.0);
    }

    #[test]
    fn scenario_floors() {
        let ss = plan_for_scenario(&TestSettings::defaults(ScenarioKind::SingleStream));
        assert_eq!(ss.effective_min_queries, 1024);
        let off = plan_for_scenario(&TestSettings::defaults(ScenarioKind::Offline));
        assert_eq!(off.effective_min_queries, 1);
        assert_eq!(off.min_sample_count, 24_576);
        let srv = plan_for_scenario(&TestSettings::defaults(ScenarioKind::Server));
        assert_eq!(srv.effective_min_queries, 270_336);
        let ms = plan_for_scenario(&TestSettings::defaults(ScenarioKind::MultiStream));
        assert_eq!(ms.effective_min_queries, 270_336);
    }

    #[test]
    fn override_raises_floor_and_unsafe_replaces_it() {
        let mut s = SettingsSpec::defaults(ScenarioKind::SingleStream);
        s.min_query_count_override = Some(2000);
        assert_eq!(
            plan_for_scenario(&s.clone().validate().unwrap()).effective_min_queries,
            2000
        );
        s.min_query_count_override = Some(10);
        assert_eq!(
            plan_for_scenario(&s.clone().validate().unwrap()).effective_min_queries,
            1024
        );
        s.unsafe_override = true;
        assert_eq!(
            plan_for_scenario(&s.validate().unwrap()).effective_min_queries,
            10
        );
    }

    proptest::proptest! {
        #[test]
        fn rounding_is_least_multiple(tail in 0.5f64..0.999, conf in 0.5f64..0.999) {
            let plan = required_query_count(tail, conf).unwrap();
            let k = plan.rounded_query_count / QUERY_COUNT_GRANULE;
            proptest::prop_assert_eq!(plan.rounded_query_count % QUERY_COUNT_GRANULE, 0);
            proptest::prop_assert!(k * QUERY_COUNT_GRANULE >= plan.raw_query_count);
            proptest::prop_assert!((k - 1) * QUERY_COUNT_GRANULE < plan.raw_query_count);
        }

        #[test]
        fn raw_count_grows_with_tail(tail in 0.5f64..0.99, step in 0.001f64..0.009, conf in 0.8f64..0.999) {
            let a = required_query_count(tail, conf).unwrap().raw_query_count;
            let b = required_query_count(tail + step, conf).unwrap().raw_query_count;
            proptest::prop_assert!(b > a);
        }

        #[test]
        fn antisymmetric(p in 0.5f64..1.0) {
            // 1 - p is exact on [0.5, 1].
            let sum = norm_inv(p).unwrap() + norm_inv(1.0 - p).unwrap();
            proptest::prop_assert!(sum.abs() <= 1e-9);
        }
    }
}
