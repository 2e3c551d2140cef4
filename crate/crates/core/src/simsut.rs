//! Simulated systems under test.
//!
//! Each profile computes completion times analytically from the issue time,
//! which makes them usable both on the virtual clock and, through a timer
//! adapter, on the wall clock. Honest profiles return a payload that depends
//! only on the sample index; the adversarial profiles exist so the
//! compliance tests have known-guilty subjects.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::digest::fnv1a64;
use crate::harness::RunContext;
use crate::planner::norm_inv;
use crate::query::QueryRef;
use crate::rng::{mix64, CounterRng, Stream};
use crate::settings::ModeKind;
use crate::sim_engine::{CompletionSink, VirtualSut};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimProfile {
    /// Completes every query the instant it is issued.
    Null,
    /// Fixed latency, unlimited parallelism.
    ConstantLatency { latency_ns: u64 },
    /// Latency `exp(mu + sigma * Z)` ns, drawn per query id from `seed`.
    LognormalLatency { mu: f64, sigma: f64, seed: u64 },
    /// FIFO queue in front of `parallelism` identical servers; a query of N
    /// samples takes `setup_ns + N * service_per_sample_ns`.
    BatchQueue {
        service_per_sample_ns: u64,
        setup_ns: u64,
        parallelism: u32,
    },
    /// Single FIFO server; each sample costs `cold_ns`, or `warm_ns` when its
    /// index is among the `cache_size` most recently used.
    CachingSut {
        cold_ns: u64,
        warm_ns: u64,
        cache_size: u64,
    },
    /// Constant latency; answers differ from the honest ones in performance
    /// mode when `cheat_in_performance` is set. `digest_salt` selects the
    /// honest answer function.
    ModeCheat {
        latency_ns: u64,
        digest_salt: u64,
        cheat_in_performance: bool,
    },
    /// Fast only on the trace whose digest is `official_trace_digest`.
    SeedCheat {
        official_trace_digest: u64,
        fast_ns: u64,
        slow_factor: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid simulated profile: {0}")]
pub struct ProfileError(pub String);

impl SimProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let positive = |v: u64, what: &str| {
            if v == 0 {
                Err(ProfileError(alloc::format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            SimProfile::Null => Ok(()),
            SimProfile::ConstantLatency { latency_ns } => positive(latency_ns, "latency"),
            SimProfile::LognormalLatency { mu, sigma, .. } => {
                if mu.is_finite() && sigma.is_finite() && sigma >= 0.0 {
                    Ok(())
                } else {
                    Err(ProfileError(
                        "lognormal parameters must be finite, sigma >= 0".into(),
                    ))
                }
            }
            SimProfile::BatchQueue {
                service_per_sample_ns,
                setup_ns,
                parallelism,
            } => {
                positive(service_per_sample_ns + setup_ns, "service time")?;
                positive(u64::from(parallelism), "parallelism")
            }
            SimProfile::CachingSut {
                cold_ns,
                warm_ns,
                cache_size,
            } => {
                positive(cold_ns, "cold latency")?;
                positive(warm_ns, "warm latency")?;
                positive(cache_size, "cache size")
            }
            SimProfile::ModeCheat { latency_ns, .. } => positive(latency_ns, "latency"),
            SimProfile::SeedCheat {
                fast_ns,
                slow_factor,
                ..
            } => {
                positive(fast_ns, "latency")?;
                positive(slow_factor, "slow factor")
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SimProfile::Null => "sim-null",
            SimProfile::ConstantLatency { .. } => "sim-constant",
            SimProfile::LognormalLatency { .. } => "sim-lognormal",
            SimProfile::BatchQueue { .. } => "sim-batch",
            SimProfile::CachingSut { .. } => "sim-caching",
            SimProfile::ModeCheat { .. } => "sim-modecheat",
            SimProfile::SeedCheat { .. } => "sim-seedcheat",
        }
    }
}

/// Honest response bytes for a sample.
pub fn honest_payload(sample_index: u64, salt: u64) -> [u8; 8] {
    mix64(sample_index ^ salt ^ 0x6865_6c6c_6f5f_7375).to_le_bytes()
}

pub fn honest_digest(sample_index: u64, salt: u64) -> u64 {
    fnv1a64(&honest_payload(sample_index, salt))
}

fn degraded_digest(sample_index: u64, salt: u64) -> u64 {
    let mut p = honest_payload(sample_index, salt);
    p[0] ^= 0xff;
    fnv1a64(&p)
}

/// A simulated SUT instance: profile plus queue and cache state.
#[derive(Clone, Debug)]
pub struct SimSut {
    profile: SimProfile,
    name: String,
    ctx: Option<RunContext>,
    server_free_ns: Vec<u64>,
    cache: VecDeque<u64>,
}

/// Completion times of the samples of one query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SimCompletion {
    Uniform { at_ns: u64 },
    PerSample(Vec<u64>),
}

impl SimCompletion {
    pub fn query_complete_ns(&self) -> u64 {
        match self {
            SimCompletion::Uniform { at_ns } => *at_ns,
            SimCompletion::PerSample(v) => v.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn sample_ns(&self, i: usize) -> u64 {
        match self {
            SimCompletion::Uniform { at_ns } => *at_ns,
            SimCompletion::PerSample(v) => v[i],
        }
    }
}

impl SimSut {
    pub fn new(profile: SimProfile) -> Result<Self, ProfileError> {
        profile.validate()?;
        let name = profile.label().into();
        let servers = match profile {
            SimProfile::BatchQueue { parallelism, .. } => parallelism as usize,
            _ => 1,
        };
        Ok(Self {
            profile,
            name,
            ctx: None,
            server_free_ns: alloc::vec![0; servers],
            cache: VecDeque::new(),
        })
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    /// Resets queue and cache state and records the run context.
    pub fn reset(&mut self, ctx: Option<RunContext>) {
        self.ctx = ctx;
        self.server_free_ns.iter_mut().for_each(|t| *t = 0);
        self.cache.clear();
    }

    /// Completion times for `query` issued at `now_ns`. Calls must arrive in
    /// non-decreasing issue time for the queueing profiles to be meaningful.
    pub fn simulate(&mut self, query: &QueryRef<'_>, now_ns: u64) -> SimCompletion {
        let n = query.samples.len();
        let all_at = |t: u64| SimCompletion::Uniform { at_ns: t };
        match self.profile {
            SimProfile::Null => all_at(now_ns),
            SimProfile::ConstantLatency { latency_ns }
            | SimProfile::ModeCheat { latency_ns, .. } => all_at(now_ns + latency_ns),
            SimProfile::LognormalLatency { mu, sigma, seed } => {
                let key = CounterRng::stream_key(seed, Stream::Simulation);
                let bits = CounterRng::at(key, query.query_id);
                let u = ((bits >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
                let z = norm_inv(u).unwrap_or(0.0);
                let lat = libm::round(libm::exp(mu + sigma * z)).max(1.0) as u64;
                all_at(now_ns + lat)
            }
            SimProfile::BatchQueue {
                service_per_sample_ns,
                setup_ns,
                ..
            } => {
                let (slot, free) = self
                    .server_free_ns
                    .iter()
                    .copied()
                    .enumerate()
                    .min_by_key(|&(i, t)| (t, i))
                    .expect("at least one server");
                let start = free.max(now_ns);
                let done = start + setup_ns + service_per_sample_ns * n as u64;
                self.server_free_ns[slot] = done;
                all_at(done)
            }
            SimProfile::CachingSut {
                cold_ns,
                warm_ns,
                cache_size,
            } => {
                let mut t = self.server_free_ns[0].max(now_ns);
                let mut out = Vec::with_capacity(n);
                for s in query.samples.iter() {
                    if let Some(pos) = self.cache.iter().position(|&c| c == s) {
                        self.cache.remove(pos);
                        t += warm_ns;
                    } else {
                        if self.cache.len() as u64 >= cache_size {
                            self.cache.pop_front();
                        }
                        t += cold_ns;
                    }
                    self.cache.push_back(s);
                    out.push(t);
                }
                self.server_free_ns[0] = t;
                SimCompletion::PerSample(out)
            }
            SimProfile::SeedCheat {
                official_trace_digest,
                fast_ns,
                slow_factor,
            } => {
                let official = self
                    .ctx
                    .is_some_and(|c| c.trace_digest == official_trace_digest);
                all_at(
                    now_ns
                        + if official {
                            fast_ns
                        } else {
                            fast_ns * slow_factor
                        },
                )
            }
        }
    }

    /// Digest of the answer this SUT returns for `sample_index`.
    pub fn response_digest(&self, sample_index: u64) -> u64 {
        match self.profile {
            SimProfile::ModeCheat {
                digest_salt,
                cheat_in_performance,
                ..
            } => {
                let perf = self.ctx.is_some_and(|c| c.mode == ModeKind::Performance);
                if cheat_in_performance && perf {
                    degraded_digest(sample_index, digest_salt)
                } else {
                    honest_digest(sample_index, digest_salt)
                }
            }
            _ => honest_digest(sample_index, 0),
        }
    }

    /// Response bytes matching [`SimSut::response_digest`].
    pub fn response_payload(&self, sample_index: u64) -> [u8; 8] {
        match self.profile {
            SimProfile::ModeCheat {
                digest_salt,
                cheat_in_performance,
                ..
            } => {
                let mut p = honest_payload(sample_index, digest_salt);
                if cheat_in_performance && self.ctx.is_some_and(|c| c.mode == ModeKind::Performance)
                {
                    p[0] ^= 0xff;
                }
                p
            }
            _ => honest_payload(sample_index, 0),
        }
    }
}

impl VirtualSut for SimSut {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin_run(&mut self, ctx: &RunContext) {
        self.reset(Some(*ctx));
    }

    fn issue(&mut self, query: &QueryRef<'_>, now_ns: u64, sink: &mut dyn CompletionSink) {
        let done = self.simulate(query, now_ns);
        for (i, rid) in query.response_ids.clone().enumerate() {
            let digest = if sink.logs(rid) {
                self.response_digest(query.samples.get(i).unwrap_or_default())
            } else {
                0
            };
            sink.complete(rid, done.sample_ns(i), digest);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::SampleSlice;
    use crate::NS_PER_MS;

    fn query(id: u64, samples: &[u64]) -> QueryRef<'_> {
        QueryRef {
            query_id: id,
            response_ids: id * 1000..id * 1000 + samples.len() as u64,
            samples: SampleSlice::Indices(samples),
        }
    }

    #[test]
    fn constant_latency() {
        let mut s = SimSut::new(SimProfile::ConstantLatency {
            latency_ns: 5 * NS_PER_MS,
        })
        .unwrap();
        let c = s.simulate(&query(1, &[3]), 1234);
        assert_eq!(c.query_complete_ns(), 1234 + 5 * NS_PER_MS);
    }

    #[test]
    fn batch_queue_service_time() {
        let mut s = SimSut::new(SimProfile::BatchQueue {
            service_per_sample_ns: NS_PER_MS / 2,
            setup_ns: 2 * NS_PER_MS,
            parallelism: 1,
        })
        .unwrap();
        let q = QueryRef {
            query_id: 0,
            response_ids: 0..96,
            samples: SampleSlice::Contiguous { start: 0, len: 96 },
        };
        assert_eq!(s.simulate(&q, 0).query_complete_ns(), 50 * NS_PER_MS);
        // Second query issued at 10 ms waits for the server.
        assert_eq!(
            s.simulate(&q, 10 * NS_PER_MS).query_complete_ns(),
            100 * NS_PER_MS
        );
    }

    #[test]
    fn batch_queue_parallel_servers() {
        let mut s = SimSut::new(SimProfile::BatchQueue {
            service_per_sample_ns: NS_PER_MS,
            setup_ns: 0,
            parallelism: 2,
        })
        .unwrap();
        let idx = [0u64];
        assert_eq!(
            s.simulate(&query(0, &idx), 0).query_complete_ns(),
            NS_PER_MS
        );
        assert_eq!(
            s.simulate(&query(1, &idx), 0).query_complete_ns(),
            NS_PER_MS
        );
        assert_eq!(
            s.simulate(&query(2, &idx), 0).query_complete_ns(),
            2 * NS_PER_MS
        );
    }

    #[test]
    fn caching_second_pass_is_warm() {
        let mut s = SimSut::new(SimProfile::CachingSut {
            cold_ns: 10 * NS_PER_MS,
            warm_ns: NS_PER_MS,
            cache_size: 8,
        })
        .unwrap();
        let mut t = 0;
        for pass in 0..2 {
            for i in 0..8u64 {
                let idx = [i];
                let c = s.simulate(&query(i, &idx), t).query_complete_ns();
                let expect = if pass == 0 { 10 } else { 1 } * NS_PER_MS;
                assert_eq!(c - t, expect);
                t = c;
            }
        }
    }

    #[test]
    fn lognormal_is_deterministic_and_positive() {
        let p = SimProfile::LognormalLatency {
            mu: libm::log(5e6),
            sigma: 0.3,
            seed: 9,
        };
        let mut a = SimSut::new(p.clone()).unwrap();
        let mut b = SimSut::new(p).unwrap();
        for i in 0..100 {
            let idx = [0u64];
            let x = a.simulate(&query(i, &idx), 0).query_complete_ns();
            assert_eq!(x, b.simulate(&query(i, &idx), 0).query_complete_ns());
            assert!(x > 0);
        }
    }

    #[test]
    fn invalid_profiles_rejected() {
        assert!(SimSut::new(SimProfile::ConstantLatency { latency_ns: 0 }).is_err());
        assert!(SimSut::new(SimProfile::BatchQueue {
            service_per_sample_ns: 1,
            setup_ns: 0,
            parallelism: 0
        })
        .is_err());
    }

    #[test]
    fn mode_cheat_changes_digest_only_in_performance() {
        let mut s = SimSut::new(SimProfile::ModeCheat {
            latency_ns: 1,
            digest_salt: 0,
            cheat_in_performance: true,
        })
        .unwrap();
        let mut ctx = RunContext {
            scenario: crate::ScenarioKind::SingleStream,
            mode: ModeKind::Accuracy,
            settings_digest: 0,
            trace_seed: 0,
            trace_digest: 0,
            loaded_sample_count: 8,
        };
        s.reset(Some(ctx));
        assert_eq!(s.response_digest(3), honest_digest(3, 0));
        ctx.mode = ModeKind::Performance;
        s.reset(Some(ctx));
        assert_ne!(s.response_digest(3), honest_digest(3, 0));
        assert_eq!(s.response_digest(3), fnv1a64(&s.response_payload(3)));
    }
}
