//! Run logs: canonical JSON lines, one record per line.
//!
//! Every record is `{monotonic_ns, payload, record_type, sequence_no}` with
//! keys sorted and all times as integer nanoseconds. A file starts with one
//! `header` and ends with one `summary`; sequence numbers are gap-free.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use crossbeam_channel::{Receiver, Sender};
use loadgen_core::harness::RunOutcome;
use loadgen_core::metrics::RunResult;
use loadgen_core::{
    LatencyRecord, LoggingPolicy, ModeKind, QueryPlan, ScenarioKind, SettingsSpec, TestSettings,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LOG_FORMAT: &str = "loadgen.log.v1";
/// Version of the results directory layout.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordType {
    Header,
    Settings,
    TraceRef,
    Issued,
    Completed,
    Accuracy,
    Compliance,
    Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub record_type: RecordType,
    pub monotonic_ns: u64,
    pub payload: Value,
    pub sequence_no: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {got} out of order, expected sequence number {expected}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("first record must be the header")]
    HeaderFirst,
    #[error("log writer stopped")]
    WriterStopped,
    #[error("malformed log: {0}")]
    Structure(String),
}

/// Serde helpers for 64-bit digests and seeds as `0x`-prefixed hex strings.
pub mod hex64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_string(v: u64) -> String {
        format!("0x{v:016x}")
    }

    pub fn parse(s: &str) -> Option<u64> {
        u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
    }

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_string(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad hex digest {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Performance,
    Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeaderPayload {
    pub format: String,
    pub layout_version: u32,
    pub tool_version: String,
    pub sut: String,
    pub scenario: ScenarioKind,
    pub run_kind: RunKind,
    pub run_index: u32,
    /// The only field allowed to differ between identical runs.
    pub wall_clock_unix_ms: u64,
    /// Resolved configuration, defaults included.
    pub config: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingsPayload {
    pub settings: SettingsSpec,
    #[serde(with = "hex64")]
    pub settings_digest: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRefPayload {
    #[serde(with = "hex64")]
    pub trace_seed: u64,
    #[serde(with = "hex64")]
    pub trace_digest: u64,
    pub plan: QueryPlan,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssuedPayload {
    pub query_id: u64,
    pub first_response_id: u64,
    pub sample_count: u64,
    pub scheduled_ns: u64,
    pub issue_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletedPayload {
    pub query_id: u64,
    pub complete_ns: u64,
    pub skipped_intervals: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyPayload {
    pub response_id: u64,
    pub query_id: u64,
    pub sample_index: u64,
    #[serde(with = "hex64")]
    pub payload_digest: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
}

/// The response-logging policy in force, so auditors can re-derive which
/// responses had to be logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompliancePayload {
    pub logging: LoggingPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryPayload {
    pub result: RunResult,
    pub issued_queries: u64,
    pub completed_queries: u64,
    pub logged_responses: u64,
    #[serde(with = "hex64")]
    pub trace_seed: u64,
    #[serde(with = "hex64")]
    pub settings_digest: u64,
    /// First issue to last completion.
    pub active_window_ns: u64,
    pub min_duration_ns: u64,
}

impl LogRecord {
    pub fn new(record_type: RecordType, monotonic_ns: u64, payload: &impl Serialize) -> Self {
        Self {
            record_type,
            monotonic_ns,
            payload: serde_json::to_value(payload).expect("payloads serialize"),
            sequence_no: 0,
        }
    }

    /// One line of canonical JSON, without the newline.
    pub fn to_line(&self) -> String {
        // Value maps are ordered, so converting first sorts every key.
        let v = serde_json::to_value(self).expect("records serialize");
        serde_json::to_string(&v).expect("values serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, LogError> {
        Ok(serde_json::from_str(line)?)
    }

    pub fn parse_payload<T: DeserializeOwned>(&self) -> Result<T, LogError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| {
            LogError::Structure(format!(
                "record {} ({:?}): {e}",
                self.sequence_no, self.record_type
            ))
        })
    }
}

/// Builds the summary record for a finished run.
pub fn finalize_summary(settings: &TestSettings, outcome: &RunOutcome) -> LogRecord {
    let records = &outcome.records;
    let first = records.iter().map(|r| r.issue_ns()).min().unwrap_or(0);
    let last = records.iter().map(|r| r.complete_ns()).max().unwrap_or(0);
    let payload = SummaryPayload {
        result: outcome.result.clone(),
        issued_queries: records.len() as u64,
        completed_queries: records.len() as u64,
        logged_responses: outcome.responses.len() as u64,
        trace_seed: outcome.trace_seed,
        settings_digest: settings.digest(),
        active_window_ns: last.saturating_sub(first),
        min_duration_ns: settings.spec().min_duration_ns,
    };
    LogRecord::new(RecordType::Summary, last, &payload)
}

/// Run metadata written ahead of the events.
pub struct RunHeader {
    pub sut: String,
    pub run_kind: RunKind,
    pub run_index: u32,
    pub wall_clock_unix_ms: u64,
    pub config: Value,
}

/// All records of one run in canonical order: header, settings, trace
/// reference, optional compliance policy, then events sorted by
/// (time, kind, id), then the summary.
pub fn run_records(
    header: &RunHeader,
    settings: &TestSettings,
    plan: &QueryPlan,
    outcome: &RunOutcome,
    logging: Option<LoggingPolicy>,
) -> Vec<LogRecord> {
    let mut out = vec![
        LogRecord::new(
            RecordType::Header,
            0,
            &HeaderPayload {
                format: LOG_FORMAT.into(),
                layout_version: LAYOUT_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").into(),
                sut: header.sut.clone(),
                scenario: settings.scenario(),
                run_kind: header.run_kind,
                run_index: header.run_index,
                wall_clock_unix_ms: header.wall_clock_unix_ms,
                config: header.config.clone(),
            },
        ),
        LogRecord::new(
            RecordType::Settings,
            0,
            &SettingsPayload {
                settings: settings.to_spec(),
                settings_digest: settings.digest(),
            },
        ),
        LogRecord::new(
            RecordType::TraceRef,
            0,
            &TraceRefPayload {
                trace_seed: outcome.trace_seed,
                trace_digest: outcome.trace_digest,
                plan: *plan,
            },
        ),
    ];
    if let Some(policy) = logging {
        out.push(LogRecord::new(
            RecordType::Compliance,
            0,
            &CompliancePayload { logging: policy },
        ));
    }

    let mut events: Vec<(u64, RecordType, u64, LogRecord)> =
        Vec::with_capacity(outcome.records.len() * 2);
    let mut done_at = std::collections::HashMap::with_capacity(outcome.records.len());
    for (r, &first) in outcome.records.iter().zip(&outcome.first_response_ids) {
        done_at.insert(r.query_id(), r.complete_ns());
        events.push((
            r.issue_ns(),
            RecordType::Issued,
            r.query_id(),
            LogRecord::new(
                RecordType::Issued,
                r.issue_ns(),
                &IssuedPayload {
                    query_id: r.query_id(),
                    first_response_id: first,
                    sample_count: r.sample_count(),
                    scheduled_ns: r.scheduled_ns(),
                    issue_ns: r.issue_ns(),
                },
            ),
        ));
        events.push((
            r.complete_ns(),
            RecordType::Completed,
            r.query_id(),
            LogRecord::new(
                RecordType::Completed,
                r.complete_ns(),
                &CompletedPayload {
                    query_id: r.query_id(),
                    complete_ns: r.complete_ns(),
                    skipped_intervals: r.skipped_intervals(),
                },
            ),
        ));
    }
    for resp in &outcome.responses {
        let t = done_at.get(&resp.query_id).copied().unwrap_or(0);
        events.push((
            t,
            RecordType::Accuracy,
            resp.response_id,
            LogRecord::new(
                RecordType::Accuracy,
                t,
                &AccuracyPayload {
                    response_id: resp.response_id,
                    query_id: resp.query_id,
                    sample_index: resp.sample_index,
                    payload_digest: resp.payload_digest,
                    payload_b64: resp.payload.as_ref().map(|p| B64.encode(p)),
                },
            ),
        ));
    }
    events.sort_by_key(|(t, kind, id, _)| (*t, *kind, *id));
    out.extend(events.into_iter().map(|(_, _, _, r)| r));
    out.push(finalize_summary(settings, outcome));
    for (i, r) in out.iter_mut().enumerate() {
        r.sequence_no = i as u64;
    }
    out
}

/// Buffered hand-off to a writer thread; callers never touch the file.
pub struct LogWriter {
    tx: Option<Sender<LogRecord>>,
    handle: Option<JoinHandle<Result<u64, std::io::Error>>>,
    next_seq: u64,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, LogError> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }

    pub fn new<W: Write + Send + 'static>(mut w: W) -> Self {
        let (tx, rx): (Sender<LogRecord>, Receiver<LogRecord>) = crossbeam_channel::bounded(8192);
        let handle = std::thread::spawn(move || {
            let mut lines = 0u64;
            let result = (|| {
                for rec in rx {
                    w.write_all(rec.to_line().as_bytes())?;
                    w.write_all(b"\n")?;
                    lines += 1;
                }
                w.flush()
            })();
            if let Err(e) = result {
                let _ = w.write_all(b"{\"partial_log\":true}\n");
                let _ = w.flush();
                return Err(e);
            }
            Ok(lines)
        });
        Self {
            tx: Some(tx),
            handle: Some(handle),
            next_seq: 0,
        }
    }

    /// Queues one record; rejects gaps, reordering and a non-header start.
    pub fn write(&mut self, record: LogRecord) -> Result<(), LogError> {
        if record.sequence_no != self.next_seq {
            return Err(LogError::OutOfOrder {
                expected: self.next_seq,
                got: record.sequence_no,
            });
        }
        if (self.next_seq == 0) != (record.record_type == RecordType::Header) {
            return Err(LogError::HeaderFirst);
        }
        let tx = self.tx.as_ref().ok_or(LogError::WriterStopped)?;
        tx.send(record).map_err(|_| LogError::WriterStopped)?;
        self.next_seq += 1;
        Ok(())
    }

    /// Drains the queue and returns the number of lines written.
    pub fn finish(mut self) -> Result<u64, LogError> {
        self.tx.take();
        let handle = self.handle.take().expect("joined once");
        Ok(handle.join().map_err(|_| LogError::WriterStopped)??)
    }
}

impl Drop for LogWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Writes `records` to `path` through a [`LogWriter`].
pub fn write_log(path: &Path, records: Vec<LogRecord>) -> Result<u64, LogError> {
    let mut w = LogWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// A parsed and structurally checked run log.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub header: HeaderPayload,
    pub settings: SettingsPayload,
    pub trace_ref: TraceRefPayload,
    pub logging: Option<LoggingPolicy>,
    pub summary: SummaryPayload,
}

fn structure(msg: impl Into<String>) -> LogError {
    LogError::Structure(msg.into())
}

impl RunLog {
    pub fn read(path: &Path) -> Result<Self, LogError> {
        let f = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            records.push(
                LogRecord::from_line(&line)
                    .map_err(|e| structure(format!("line {}: {e}", i + 1)))?,
            );
        }
        Self::from_records(records)
    }

    pub fn from_records(records: Vec<LogRecord>) -> Result<Self, LogError> {
        if records.is_empty() {
            return Err(structure("empty log"));
        }
        for (i, r) in records.iter().enumerate() {
            if r.sequence_no != i as u64 {
                return Err(structure(format!(
                    "sequence number {} at position {i} (gap or reordering)",
                    r.sequence_no
                )));
            }
        }
        let count = |t: RecordType| records.iter().filter(|r| r.record_type == t).count();
        for t in [
            RecordType::Header,
            RecordType::Settings,
            RecordType::TraceRef,
            RecordType::Summary,
        ] {
            if count(t) != 1 {
                return Err(structure(format!(
                    "expected exactly one {t:?} record, found {}",
                    count(t)
                )));
            }
        }
        if count(RecordType::Compliance) > 1 {
            return Err(structure("more than one compliance record"));
        }
        if records[0].record_type != RecordType::Header {
            return Err(structure("first record is not the header"));
        }
        let last = records.last().expect("non-empty");
        if last.record_type != RecordType::Summary {
            return Err(structure("log does not end with a summary (truncated?)"));
        }
        let find = |t: RecordType| {
            records
                .iter()
                .find(|r| r.record_type == t)
                .expect("counted")
        };
        let header: HeaderPayload = find(RecordType::Header).parse_payload()?;
        if header.format != LOG_FORMAT {
            return Err(structure(format!("unknown log format {:?}", header.format)));
        }
        let settings = find(RecordType::Settings).parse_payload()?;
        let trace_ref = find(RecordType::TraceRef).parse_payload()?;
        let logging = records
            .iter()
            .find(|r| r.record_type == RecordType::Compliance)
            .map(|r| r.parse_payload::<CompliancePayload>().map(|c| c.logging))
            .transpose()?;
        let summary = last.parse_payload()?;
        Ok(Self {
            header,
            settings,
            trace_ref,
            logging,
            summary,
            records,
        })
    }

    pub fn of_type(&self, t: RecordType) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.record_type == t)
    }

    /// Issued records, keyed by query id, in issue order.
    pub fn issued(&self) -> Result<Vec<IssuedPayload>, LogError> {
        self.of_type(RecordType::Issued)
            .map(|r| r.parse_payload())
            .collect()
    }

    pub fn accuracy(&self) -> Result<Vec<AccuracyPayload>, LogError> {
        self.of_type(RecordType::Accuracy)
            .map(|r| r.parse_payload())
            .collect()
    }

    /// Rebuilds one latency record per query from the issued/completed
    /// pairs, in issue order.
    pub fn latency_records(&self) -> Result<Vec<LatencyRecord>, LogError> {
        let issued = self.issued()?;
        let mut completed = std::collections::HashMap::with_capacity(issued.len());
        for r in self.of_type(RecordType::Completed) {
            let c: CompletedPayload = r.parse_payload()?;
            if completed.insert(c.query_id, c).is_some() {
                return Err(structure(format!(
                    "query {} completed twice",
                    r.sequence_no
                )));
            }
        }
        if completed.len() != issued.len() {
            return Err(structure(format!(
                "{} issued queries but {} completed",
                issued.len(),
                completed.len()
            )));
        }
        let mut seen = std::collections::HashSet::with_capacity(issued.len());
        let mut out = Vec::with_capacity(issued.len());
        let mut ordered: Vec<&IssuedPayload> = issued.iter().collect();
        ordered.sort_by_key(|i| (i.issue_ns, i.query_id));
        for i in ordered {
            if !seen.insert(i.query_id) {
                return Err(structure(format!("query {} issued twice", i.query_id)));
            }
            let c = completed
                .get(&i.query_id)
                .ok_or_else(|| structure(format!("query {} never completed", i.query_id)))?;
            out.push(
                LatencyRecord::new(
                    i.query_id,
                    i.scheduled_ns,
                    i.issue_ns,
                    c.complete_ns,
                    i.sample_count,
                    c.skipped_intervals,
                )
                .map_err(|e| structure(e.to_string()))?,
            );
        }
        Ok(out)
    }

    pub fn mode(&self) -> ModeKind {
        self.settings.settings.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);
    impl Write for Shared {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    fn rec(t: RecordType, seq: u64) -> LogRecord {
        let mut r = LogRecord::new(t, seq, &serde_json::json!({"b": 1, "a": [2]}));
        r.sequence_no = seq;
        r
    }

    #[test]
    fn canonical_line_sorts_keys() {
        let line = rec(RecordType::Issued, 3).to_line();
        assert_eq!(
            line,
            r#"{"monotonic_ns":3,"payload":{"a":[2],"b":1},"record_type":"issued","sequence_no":3}"#
        );
        assert_eq!(
            LogRecord::from_line(&line).unwrap(),
            rec(RecordType::Issued, 3)
        );
    }

    #[test]
    fn writer_enforces_order() {
        let mut w = LogWriter::new(Shared::default());
        assert!(matches!(
            w.write(rec(RecordType::Issued, 0)),
            Err(LogError::HeaderFirst)
        ));
        w.write(rec(RecordType::Header, 0)).unwrap();
        assert!(matches!(
            w.write(rec(RecordType::Issued, 2)),
            Err(LogError::OutOfOrder {
                expected: 1,
                got: 2
            })
        ));
        w.write(rec(RecordType::Summary, 1)).unwrap();
        assert_eq!(w.finish().unwrap(), 2);
    }

    #[test]
    fn million_records_line_count() {
        let buf = Shared::default();
        let mut w = LogWriter::new(buf.clone());
        w.write(rec(RecordType::Header, 0)).unwrap();
        for i in 1..=1_000_000 {
            w.write(rec(RecordType::Issued, i)).unwrap();
        }
        w.write(rec(RecordType::Summary, 1_000_001)).unwrap();
        assert_eq!(w.finish().unwrap(), 1_000_002);
        let bytes = buf.0.lock().unwrap();
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 1_000_002);
    }

    #[test]
    fn hex_roundtrip() {
        assert_eq!(hex64::parse(&hex64::to_string(u64::MAX)), Some(u64::MAX));
        assert_eq!(hex64::parse("12"), None);
    }
}
