//! Completion recording for wall-clock runs.
//!
//! Slots are preallocated in segments indexed by response id and query
//! sequence number. The issue loop initializes segments before it hands a
//! query to the SUT, so [`RunRecorder::complete`] only performs atomic
//! operations on memory that already exists: no locks, no allocation (unless
//! payload bytes are being retained) and no system calls.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use loadgen_core::{fnv1a64, LoggedResponse, LoggingPolicy};

const SEG_BITS: u32 = 16;
const SEG_LEN: usize = 1 << SEG_BITS;
const NONE: u64 = 0;
const IN_FLIGHT: u64 = 1;

/// Monotonic clock shared by the issue loop and every completion context.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    origin: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    #[inline]
    pub fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }
}

#[derive(Default)]
struct ResponseSlot {
    /// NONE, IN_FLIGHT, or completion time + 2.
    state: AtomicU64,
    query_seq: AtomicU64,
    sample: AtomicU64,
    digest: AtomicU64,
    payload: OnceLock<Vec<u8>>,
}

#[derive(Default)]
struct QuerySlot {
    remaining: AtomicU64,
    complete_ns: AtomicU64,
}

struct Segments<T> {
    segs: Box<[OnceLock<Box<[T]>>]>,
}

impl<T: Default> Segments<T> {
    fn new(capacity: u64) -> Self {
        let n = (capacity as usize).div_ceil(SEG_LEN).max(1);
        Self {
            segs: (0..n).map(|_| OnceLock::new()).collect(),
        }
    }

    /// Issuer side: allocates the segment on first use.
    fn ensure(&self, i: u64) -> Option<&T> {
        let seg = self.segs.get((i >> SEG_BITS) as usize)?;
        let seg = seg.get_or_init(|| (0..SEG_LEN).map(|_| T::default()).collect());
        Some(&seg[(i as usize) & (SEG_LEN - 1)])
    }

    /// Completion side: never allocates.
    #[inline]
    fn get(&self, i: u64) -> Option<&T> {
        let seg = self.segs.get((i >> SEG_BITS) as usize)?.get()?;
        Some(&seg[(i as usize) & (SEG_LEN - 1)])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CompletionError {
    #[error("response id {0} does not belong to an in-flight query")]
    Unknown(u64),
    #[error("response id {0} was already completed")]
    Duplicate(u64),
}

/// Per-run store of issue and completion state.
pub struct RunRecorder {
    clock: Clock,
    logging: LoggingPolicy,
    responses: Segments<ResponseSlot>,
    queries: Segments<QuerySlot>,
    outstanding: AtomicU64,
    completed: AtomicU64,
    unknown: AtomicU64,
    duplicate: AtomicU64,
}

impl RunRecorder {
    /// `response_capacity` bounds the response ids and `query_capacity` the
    /// number of queries this run may issue.
    pub fn new(
        clock: Clock,
        logging: LoggingPolicy,
        response_capacity: u64,
        query_capacity: u64,
    ) -> Self {
        Self {
            clock,
            logging,
            responses: Segments::new(response_capacity),
            queries: Segments::new(query_capacity),
            outstanding: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            unknown: AtomicU64::new(0),
            duplicate: AtomicU64::new(0),
        }
    }

    /// Builds the segments for the first `responses` response ids and
    /// `queries` query slots up front, so the issue loop does not allocate.
    pub fn preallocate(&self, responses: u64, queries: u64) {
        for i in (0..responses).step_by(SEG_LEN) {
            self.responses.ensure(i);
        }
        for i in (0..queries).step_by(SEG_LEN) {
            self.queries.ensure(i);
        }
    }

    /// Restarts the clock; only meaningful before any query is registered.
    pub fn restart_clock(&mut self) {
        self.clock = Clock::start();
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn logging(&self) -> LoggingPolicy {
        self.logging
    }

    /// Marks the responses of query `seq` in flight. Must precede the issue.
    /// Returns false if the ids exceed the preallocated capacity.
    pub fn register(
        &self,
        seq: u64,
        first_response_id: u64,
        samples: impl ExactSizeIterator<Item = u64>,
    ) -> bool {
        let Some(q) = self.queries.ensure(seq) else {
            return false;
        };
        q.remaining.store(samples.len() as u64, Ordering::Relaxed);
        q.complete_ns.store(0, Ordering::Relaxed);
        for (i, sample) in samples.enumerate() {
            let Some(slot) = self.responses.ensure(first_response_id + i as u64) else {
                return false;
            };
            slot.query_seq.store(seq, Ordering::Relaxed);
            slot.sample.store(sample, Ordering::Relaxed);
            slot.state.store(IN_FLIGHT, Ordering::Release);
        }
        self.outstanding.fetch_add(1, Ordering::AcqRel);
        true
    }

    /// Records one sample completion, timestamped now.
    #[inline]
    pub fn complete(
        &self,
        response_id: u64,
        payload_digest: u64,
        payload: Option<&[u8]>,
    ) -> Result<(), CompletionError> {
        let now = self.clock.now_ns();
        let Some(slot) = self.responses.get(response_id) else {
            self.unknown.fetch_add(1, Ordering::Relaxed);
            return Err(CompletionError::Unknown(response_id));
        };
        match slot
            .state
            .compare_exchange(IN_FLIGHT, now + 2, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => {}
            Err(NONE) => {
                self.unknown.fetch_add(1, Ordering::Relaxed);
                return Err(CompletionError::Unknown(response_id));
            }
            Err(_) => {
                self.duplicate.fetch_add(1, Ordering::Relaxed);
                return Err(CompletionError::Duplicate(response_id));
            }
        }
        slot.digest.store(payload_digest, Ordering::Relaxed);
        if let Some(bytes) = payload {
            if self.logging.retains_payloads() {
                let _ = slot.payload.set(bytes.to_vec());
            }
        }
        let seq = slot.query_seq.load(Ordering::Relaxed);
        let q = self.queries.get(seq).expect("registered query");
        q.complete_ns.fetch_max(now, Ordering::Relaxed);
        if q.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.outstanding.fetch_sub(1, Ordering::AcqRel);
        }
        self.completed.fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Convenience for SUTs that hand over raw bytes.
    pub fn complete_bytes(&self, response_id: u64, payload: &[u8]) -> Result<(), CompletionError> {
        self.complete(response_id, fnv1a64(payload), Some(payload))
    }

    /// Completion time of query `seq`, once all of its samples are done.
    pub fn query_done(&self, seq: u64) -> Option<u64> {
        let q = self.queries.get(seq)?;
        (q.remaining.load(Ordering::Acquire) == 0).then(|| q.complete_ns.load(Ordering::Relaxed))
    }

    /// Queries issued but not fully completed.
    pub fn outstanding(&self) -> u64 {
        self.outstanding.load(Ordering::Acquire)
    }

    pub fn completed_samples(&self) -> u64 {
        self.completed.load(Ordering::Acquire)
    }

    pub fn unknown_completions(&self) -> u64 {
        self.unknown.load(Ordering::Relaxed)
    }

    pub fn duplicate_completions(&self) -> u64 {
        self.duplicate.load(Ordering::Relaxed)
    }

    /// Logged responses in `[first, first + count)`, per the logging policy.
    /// Call only once the run is quiescent.
    pub fn logged_responses(
        &self,
        first: u64,
        count: u64,
        query_id: u64,
        out: &mut Vec<LoggedResponse>,
    ) {
        for rid in first..first + count {
            if !self.logging.should_log(rid) {
                continue;
            }
            let Some(slot) = self.responses.get(rid) else {
                continue;
            };
            if slot.state.load(Ordering::Acquire) < 2 {
                continue;
            }
            out.push(LoggedResponse {
                response_id: rid,
                query_id,
                sample_index: slot.sample.load(Ordering::Relaxed),
                payload_digest: slot.digest.load(Ordering::Relaxed),
                payload: slot.payload.get().cloned(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn out_of_order_and_duplicate() {
        let r = RunRecorder::new(Clock::start(), LoggingPolicy::All, 16, 4);
        assert!(r.register(0, 0, [5u64, 6, 7].into_iter()));
        for rid in [2, 1, 0] {
            r.complete(rid, rid, None).unwrap();
        }
        assert_eq!(r.complete(1, 99, None), Err(CompletionError::Duplicate(1)));
        assert_eq!(r.complete(9, 0, None), Err(CompletionError::Unknown(9)));
        assert!(r.query_done(0).is_some());
        let mut out = Vec::new();
        r.logged_responses(0, 3, 0, &mut out);
        assert_eq!(out[1].payload_digest, 1, "first completion retained");
        assert_eq!(out[2].sample_index, 7);
        assert_eq!(r.outstanding(), 0);
    }

    #[test]
    fn unregistered_segment_is_unknown() {
        let r = RunRecorder::new(Clock::start(), LoggingPolicy::Off, 1 << 20, 4);
        assert_eq!(
            r.complete(500_000, 0, None),
            Err(CompletionError::Unknown(500_000))
        );
        assert_eq!(
            r.complete(u64::MAX, 0, None),
            Err(CompletionError::Unknown(u64::MAX))
        );
    }

    #[test]
    fn concurrent_completions_none_lost() {
        let n = 1_000_000u64;
        let r = Arc::new(RunRecorder::new(
            Clock::start(),
            LoggingPolicy::Off,
            n,
            n / 4,
        ));
        for q in 0..n / 4 {
            r.register(q, q * 4, (0..4).map(|_| 0));
        }
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let r = Arc::clone(&r);
                std::thread::spawn(move || {
                    let mut rid = t;
                    while rid < n {
                        r.complete(rid, 0, None).unwrap();
                        rid += 8;
                    }
                })
            })
            .collect();
        threads.into_iter().for_each(|t| t.join().unwrap());
        assert_eq!(r.completed_samples(), n);
        assert_eq!(r.outstanding(), 0);
        assert_eq!(r.duplicate_completions() + r.unknown_completions(), 0);
    }
}
