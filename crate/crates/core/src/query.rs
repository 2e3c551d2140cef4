//! Queries, traces and per-query measurements.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::digest::{fnv1a64, Fnv1a64};

/// Where a query's sample indices live.
///
/// MultiStream queries address a contiguous block of the loaded-sample arena,
/// so only the block start is stored. All other queries point into the
/// trace's shared index arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSpan {
    Contiguous { start: u64, len: u64 },
    Arena { offset: u64, len: u64 },
}

impl SampleSpan {
    pub const fn len(&self) -> u64 {
        match *self {
            SampleSpan::Contiguous { len, .. } | SampleSpan::Arena { len, .. } => len,
        }
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One query of a trace. Response ids of a query are consecutive, starting at
/// `first_response_id`, one per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub first_response_id: u64,
    pub scheduled_issue_ns: u64,
    pub span: SampleSpan,
}

impl Query {
    pub const fn sample_count(&self) -> u64 {
        self.span.len()
    }

    pub const fn response_ids(&self) -> Range<u64> {
        self.first_response_id..self.first_response_id + self.span.len()
    }
}

/// Borrowed view of a query's sample indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSlice<'a> {
    Contiguous { start: u64, len: u64 },
    Indices(&'a [u64]),
}

impl<'a> SampleSlice<'a> {
    pub fn len(&self) -> usize {
        match *self {
            SampleSlice::Contiguous { len, .. } => len as usize,
            SampleSlice::Indices(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Option<u64> {
        match *self {
            SampleSlice::Contiguous { start, len } => (i < len as usize).then(|| start + i as u64),
            SampleSlice::Indices(s) => s.get(i).copied(),
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = u64> + 'a {
        let this = *self;
        (0..this.len()).map(move |i| this.get(i).unwrap_or_default())
    }

    pub fn to_vec(&self) -> Vec<u64> {
        self.iter().collect()
    }
}

/// A query as handed to a SUT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryRef<'a> {
    pub query_id: u64,
    pub response_ids: Range<u64>,
    pub samples: SampleSlice<'a>,
}

impl QueryRef<'_> {
    /// Sample index for `response_id`, if it belongs to this query.
    pub fn sample_for(&self, response_id: u64) -> Option<u64> {
        if self.response_ids.contains(&response_id) {
            self.samples
                .get((response_id - self.response_ids.start) as usize)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("queries not sorted by (scheduled time, query id) at position {0}")]
    Unsorted(usize),
    #[error("duplicate query id {0}")]
    DuplicateQuery(u64),
    #[error("response ids of query {0} overlap an earlier query")]
    ResponseOverlap(u64),
    #[error("query {0} references samples outside the loaded range or index arena")]
    SampleOutOfRange(u64),
    #[error("query {0} carries no samples")]
    EmptyQuery(u64),
}

/// Pre-generated, immutable query sequence for one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTrace {
    queries: Vec<Query>,
    arena: Vec<u64>,
    seed: u64,
    settings_digest: u64,
    loaded_sample_count: u64,
    total_samples: u64,
    response_end: u64,
    query_id_end: u64,
    digest: u64,
}

impl QueryTrace {
    /// Assembles a trace, checking ordering, id uniqueness and index bounds.
    pub fn from_parts(
        queries: Vec<Query>,
        arena: Vec<u64>,
        seed: u64,
        settings_digest: u64,
        loaded_sample_count: u64,
    ) -> Result<Self, TraceError> {
        let mut total = 0u64;
        let mut seen_ids = alloc::collections::BTreeSet::new();
        let mut response_ranges: Vec<(Range<u64>, u64)> = Vec::with_capacity(queries.len());
        for (pos, q) in queries.iter().enumerate() {
            if pos > 0 {
                let p = &queries[pos - 1];
                if (p.scheduled_issue_ns, p.query_id) > (q.scheduled_issue_ns, q.query_id) {
                    return Err(TraceError::Unsorted(pos));
                }
            }
            if !seen_ids.insert(q.query_id) {
                return Err(TraceError::DuplicateQuery(q.query_id));
            }
            if q.span.is_empty() {
                return Err(TraceError::EmptyQuery(q.query_id));
            }
            match q.span {
                SampleSpan::Contiguous { start, len } => {
                    if start
                        .checked_add(len)
                        .is_none_or(|end| end > loaded_sample_count)
                    {
                        return Err(TraceError::SampleOutOfRange(q.query_id));
                    }
                }
                SampleSpan::Arena { offset, len } => {
                    let end = offset.saturating_add(len);
                    if end > arena.len() as u64
                        || arena[offset as usize..end as usize]
                            .iter()
                            .any(|&i| i >= loaded_sample_count)
                    {
                        return Err(TraceError::SampleOutOfRange(q.query_id));
                    }
                }
            }
            response_ranges.push((q.response_ids(), q.query_id));
            total += q.sample_count();
        }
        response_ranges.sort_by_key(|(r, _)| r.start);
        for w in response_ranges.windows(2) {
            if w[1].0.start < w[0].0.end {
                return Err(TraceError::ResponseOverlap(w[1].1));
            }
        }
        let response_end = response_ranges.last().map_or(0, |(r, _)| r.end);
        let query_id_end = seen_ids.last().map_or(0, |&id| id + 1);
        let mut trace = Self {
            queries,
            arena,
            seed,
            settings_digest,
            loaded_sample_count,
            total_samples: total,
            response_end,
            query_id_end,
            digest: 0,
        };
        trace.digest = trace.compute_digest();
        Ok(trace)
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn arena(&self) -> &[u64] {
        &self.arena
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn settings_digest(&self) -> u64 {
        self.settings_digest
    }

    pub fn loaded_sample_count(&self) -> u64 {
        self.loaded_sample_count
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples
    }

    /// One past the largest query id in the trace.
    pub fn query_id_end(&self) -> u64 {
        self.query_id_end
    }

    /// One past the largest response id in the trace.
    pub fn response_id_end(&self) -> u64 {
        self.response_end
    }

    pub fn samples(&self, q: &Query) -> SampleSlice<'_> {
        match q.span {
            SampleSpan::Contiguous { start, len } => SampleSlice::Contiguous { start, len },
            SampleSpan::Arena { offset, len } => {
                SampleSlice::Indices(&self.arena[offset as usize..(offset + len) as usize])
            }
        }
    }

    /// View of query `i`, with ids shifted for the `cycle`-th re-issue of the trace.
    pub fn view(&self, i: usize, cycle: u64) -> QueryRef<'_> {
        let q = &self.queries[i];
        let qid = q.query_id + cycle * self.query_id_end;
        let rid = q.first_response_id + cycle * self.response_end;
        QueryRef {
            query_id: qid,
            response_ids: rid..rid + q.sample_count(),
            samples: self.samples(q),
        }
    }

    /// Content digest over seed, settings binding and every query.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    fn compute_digest(&self) -> u64 {
        let mut h = Fnv1a64::new();
        h.write(b"loadgen.trace.v1");
        h.write_u64(self.seed);
        h.write_u64(self.settings_digest);
        h.write_u64(self.loaded_sample_count);
        for q in &self.queries {
            h.write_u64(q.query_id);
            h.write_u64(q.first_response_id);
            h.write_u64(q.scheduled_issue_ns);
            match self.samples(q) {
                SampleSlice::Contiguous { start, len } => {
                    h.write_u8(0);
                    h.write_u64(start);
                    h.write_u64(len);
                }
                SampleSlice::Indices(idx) => {
                    h.write_u8(1);
                    h.write_u64(idx.len() as u64);
                    idx.iter().for_each(|&s| h.write_u64(s));
                }
            }
        }
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("query {query_id}: completion at {complete_ns} ns precedes issue at {issue_ns} ns")]
pub struct RecordError {
    pub query_id: u64,
    pub issue_ns: u64,
    pub complete_ns: u64,
}

/// Timing of one completed query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    query_id: u64,
    scheduled_ns: u64,
    issue_ns: u64,
    complete_ns: u64,
    sample_count: u64,
    skipped_intervals: u64,
}

impl LatencyRecord {
    pub fn new(
        query_id: u64,
        scheduled_ns: u64,
        issue_ns: u64,
        complete_ns: u64,
        sample_count: u64,
        skipped_intervals: u64,
    ) -> Result<Self, RecordError> {
        if complete_ns < issue_ns {
            return Err(RecordError {
                query_id,
                issue_ns,
                complete_ns,
            });
        }
        Ok(Self {
            query_id,
            scheduled_ns,
            issue_ns,
            complete_ns,
            sample_count,
            skipped_intervals,
        })
    }

    pub fn query_id(&self) -> u64 {
        self.query_id
    }
    pub fn scheduled_ns(&self) -> u64 {
        self.scheduled_ns
    }
    pub fn issue_ns(&self) -> u64 {
        self.issue_ns
    }
    pub fn complete_ns(&self) -> u64 {
        self.complete_ns
    }
    pub fn latency_ns(&self) -> u64 {
        self.complete_ns - self.issue_ns
    }
    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }
    pub fn skipped_intervals(&self) -> u64 {
        self.skipped_intervals
    }
}

/// Response for one sample as returned by a SUT.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleResponse {
    response_id: u64,
    payload_digest: u64,
    payload: Option<Vec<u8>>,
}

impl SampleResponse {
    /// Digest is computed from `payload`; the bytes are kept only if `retain`.
    pub fn from_payload(response_id: u64, payload: Vec<u8>, retain: bool) -> Self {
        Self {
            response_id,
            payload_digest: fnv1a64(&payload),
            payload: retain.then_some(payload),
        }
    }

    /// Response whose payload was already reduced to its digest.
    pub fn from_digest(response_id: u64, payload_digest: u64) -> Self {
        Self {
            response_id,
            payload_digest,
            payload: None,
        }
    }

    pub fn response_id(&self) -> u64 {
        self.response_id
    }
    pub fn payload_digest(&self) -> u64 {
        self.payload_digest
    }
    pub fn payload(&self) -> Option<&[u8]> {
        self.payload.as_deref()
    }
    pub fn into_payload(self) -> Option<Vec<u8>> {
        self.payload
    }
}

/// A response retained by the response logger.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedResponse {
    pub response_id: u64,
    pub query_id: u64,
    pub sample_index: u64,
    pub payload_digest: u64,
    pub payload: Option<Vec<u8>>,
}
