//! Statistical and analytic oracles, computed independently of the crate.

use std::time::Instant;

use loadgen_core::harness::{run_once, LoggingPolicy};
use loadgen_core::schedule::plan_and_build;
use loadgen_core::{
    norm_inv, CounterRng, ScenarioKind, SettingsSpec, SimProfile, SimSut, Stream, VirtualHarness,
    NS_PER_MS, NS_PER_SEC,
};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Lower tail Phi(x) for x <= 0. Taylor series of the erf kind near the
/// centre, Laplace continued fraction in the tail.
fn lower_tail(x: f64) -> f64 {
    assert!(x <= 0.0);
    if x > -3.0 {
        // Phi(x) = 1/2 + phi(x) * sum x^(2n+1) / (2n+1)!!
        let (mut term, mut sum, mut n) = (x, x, 0u32);
        while term.abs() > 1e-20 * sum.abs() {
            n += 1;
            term *= x * x / f64::from(2 * n + 1);
            sum += term;
        }
        0.5 + pdf(x) * sum
    } else {
        let z = -x;
        let mut frac = z;
        for k in (1..=400u32).rev() {
            frac = z + f64::from(k) / frac;
        }
        pdf(z) / frac
    }
}

/// Root of lower_tail(x) = q for q <= 1/2, by bisection to the last ulp.
fn solve_lower(q: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if lower_tail(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn oracle(p: f64) -> f64 {
    if p <= 0.5 {
        solve_lower(p)
    } else {
        // exact for p >= 1/2
        -solve_lower(1.0 - p)
    }
}

#[test]
fn oracle_sanity() {
    assert!((oracle(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
    assert!((oracle(0.005) + 2.575_829_303_548_901).abs() < 1e-12);
    assert!((lower_tail(-3.0 + 1e-12) - lower_tail(-3.0)).abs() < 1e-14);
}

#[test]
fn norm_inv_matches_oracle() {
    let mut rng = CounterRng::new(20_191_006, Stream::Simulation);
    let (lo, hi) = (1e-9f64.ln(), 0.5f64.ln());
    let ps: Vec<f64> = (0..1000)
        .map(|i| {
            let q = (lo + rng.next_f64() * (hi - lo)).exp();
            if i % 2 == 0 {
                q
            } else {
                1.0 - q
            }
        })
        .collect();
    let expected: Vec<f64> = ps.iter().map(|&p| oracle(p)).collect();
    let start = Instant::now();
    let got: Vec<f64> = ps.iter().map(|&p| norm_inv(p).unwrap()).collect();
    let elapsed = start.elapsed();
    for ((p, e), g) in ps.iter().zip(&expected).zip(&got) {
        assert!((e - g).abs() <= 1e-9, "p={p:e}: oracle {e} norm_inv {g}");
    }
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
}

#[test]
fn poisson_arrivals_pass_ks() {
    let mut spec = SettingsSpec::defaults(ScenarioKind::Server);
    spec.target_qps = 1000.0;
    let s = spec.validate().unwrap();
    let (_, trace) = plan_and_build(&s).unwrap();
    let t: Vec<u64> = trace
        .queries()
        .iter()
        .map(|q| q.scheduled_issue_ns)
        .collect();
    assert!(t.len() >= 100_000);
    let mut gaps: Vec<f64> = t
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / NS_PER_SEC as f64)
        .collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let d = gaps
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let cdf = 1.0 - (-1000.0 * g).exp();
            (cdf - i as f64 / n)
                .abs()
                .max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS D = {d}");
    let rate = (t.len() - 1) as f64 * NS_PER_SEC as f64 / (t[t.len() - 1] - t[0]) as f64;
    assert!((rate - 1000.0).abs() <= 10.0, "rate {rate}");
}

#[test]
fn md1_mean_wait_matches_pollaczek_khinchine() {
    // rho = lambda * s = 500/s * 1 ms = 0.5; Wq = s * rho / (2 (1 - rho)) = 0.5 ms
    let s_ns = NS_PER_MS;
    let mut spec = SettingsSpec::defaults(ScenarioKind::Server);
    spec.target_qps = 500.0;
    spec.unsafe_override = true;
    spec.min_duration_ns = 0;
    spec.min_query_count_override = Some(100_000);
    let settings = spec.validate().unwrap();
    let mut h = VirtualHarness::new(
        SimSut::new(SimProfile::BatchQueue {
            service_per_sample_ns: s_ns,
            setup_ns: 0,
            parallelism: 1,
        })
        .unwrap(),
    );
    let out = run_once(&mut h, &settings, 42, LoggingPolicy::Off).unwrap();
    assert_eq!(out.records.len(), 100_000);
    let mean_wait = out
        .records
        .iter()
        .map(|r| (r.latency_ns() - s_ns) as f64)
        .sum::<f64>()
        / 100_000.0;
    let pk = s_ns as f64 * 0.5 / (2.0 * 0.5);
    assert!(
        (mean_wait - pk).abs() <= 0.05 * pk,
        "mean wait {mean_wait} ns vs {pk} ns"
    );
}

#[test]
fn constant_latency_percentiles_are_exact() {
    let mut h = VirtualHarness::new(
        SimSut::new(SimProfile::ConstantLatency {
            latency_ns: 5 * NS_PER_MS,
        })
        .unwrap(),
    );
    let s = SettingsSpec::defaults(ScenarioKind::SingleStream)
        .validate()
        .unwrap();
    let out = run_once(&mut h, &s, 1, LoggingPolicy::Off).unwrap();
    let lat: Vec<u64> = out.records.iter().map(|r| r.latency_ns()).collect();
    for p in [0.01, 0.5, 0.9, 0.99, 0.999, 0.9999] {
        assert_eq!(
            loadgen_core::metrics::percentile(&lat, p).unwrap(),
            5 * NS_PER_MS
        );
    }
}
