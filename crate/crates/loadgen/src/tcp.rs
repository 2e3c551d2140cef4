//! Out-of-process SUTs over TCP.
//!
//! Frames are newline-delimited JSON objects with a `type` of `load`,
//! `issue`, `complete` or `flush`. An `issue` frame carries the query id, the
//! first response id (the remaining ids are consecutive) and the sample
//! indices. The SUT answers with one `complete` frame per response carrying
//! `response_id` and `payload_b64`, and acknowledges `load` and `flush` by
//! echoing the frame type. All timestamps are taken on the harness side when
//! a `complete` frame is read.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use crossbeam_channel::{Receiver, Sender};
use loadgen_core::{QueryRef, SimProfile, SimSut};
use serde::{Deserialize, Serialize};

use crate::sut::{Completer, SutContract, SutError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Load,
    Issue,
    Complete,
    Flush,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "type")]
    pub kind: FrameKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_indices: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
}

impl Frame {
    pub fn ack(kind: FrameKind) -> Self {
        Self {
            kind,
            query_id: None,
            response_id: None,
            sample_indices: None,
            payload_b64: None,
        }
    }
}

fn write_frame(w: &mut impl Write, frame: &Frame) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, frame)?;
    w.write_all(b"\n")?;
    w.flush()
}

struct Shared {
    completer: Mutex<Option<Completer>>,
}

/// Harness-side client for a SUT listening on TCP.
pub struct TcpSut {
    name: String,
    writer: Mutex<BufWriter<TcpStream>>,
    shared: Arc<Shared>,
    acks: Receiver<Result<FrameKind, String>>,
    ack_timeout: Duration,
}

impl TcpSut {
    pub fn connect(addr: impl ToSocketAddrs, name: &str) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        let shared = Arc::new(Shared {
            completer: Mutex::new(None),
        });
        let (tx, rx) = crossbeam_channel::unbounded();
        let reader_shared = Arc::clone(&shared);
        std::thread::spawn(move || read_loop(reader, reader_shared, tx));
        Ok(Self {
            name: name.to_owned(),
            writer: Mutex::new(BufWriter::new(stream)),
            shared,
            acks: rx,
            ack_timeout: Duration::from_secs(60),
        })
    }

    fn send(&self, frame: &Frame) -> Result<(), SutError> {
        let mut w = self.writer.lock().unwrap();
        write_frame(&mut *w, frame).map_err(|e| SutError(format!("tcp write: {e}")))
    }

    fn await_ack(&self, kind: FrameKind) -> Result<(), SutError> {
        let deadline = Instant::now() + self.ack_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.acks.recv_timeout(left) {
                Ok(Ok(k)) if k == kind => return Ok(()),
                Ok(Ok(_)) => continue,
                Ok(Err(e)) => return Err(SutError(e)),
                Err(_) => return Err(SutError(format!("no {kind:?} acknowledgement from SUT"))),
            }
        }
    }
}

impl Drop for TcpSut {
    fn drop(&mut self) {
        if let Ok(w) = self.writer.get_mut() {
            let _ = w.flush();
            let _ = w.get_ref().shutdown(std::net::Shutdown::Both);
        }
    }
}

fn read_loop(
    reader: BufReader<TcpStream>,
    shared: Arc<Shared>,
    acks: Sender<Result<FrameKind, String>>,
) {
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = match serde_json::from_str(&line) {
            Ok(f) => f,
            Err(e) => {
                let _ = acks.send(Err(format!("malformed frame from SUT: {e}")));
                continue;
            }
        };
        match frame.kind {
            FrameKind::Complete => {
                let payload = frame
                    .payload_b64
                    .as_deref()
                    .map(|p| B64.decode(p))
                    .transpose()
                    .unwrap_or_default()
                    .unwrap_or_default();
                let completer = shared.completer.lock().unwrap().clone();
                if let (Some(c), Some(rid)) = (completer, frame.response_id) {
                    let _ = c.complete_bytes(rid, &payload);
                }
            }
            kind => {
                let _ = acks.send(Ok(kind));
            }
        }
    }
    let _ = acks.send(Err("SUT closed the connection".into()));
}

impl SutContract for TcpSut {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin_run(&self, _ctx: &loadgen_core::RunContext) -> Result<(), SutError> {
        self.shared.completer.lock().unwrap().take();
        Ok(())
    }

    fn load_samples(&self, indices: &[u64]) -> Result<(), SutError> {
        let mut f = Frame::ack(FrameKind::Load);
        f.sample_indices = Some(indices.to_vec());
        self.send(&f)?;
        self.await_ack(FrameKind::Load)
    }

    fn unload_samples(&self, _indices: &[u64]) -> Result<(), SutError> {
        Ok(())
    }

    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer) {
        {
            let mut c = self.shared.completer.lock().unwrap();
            if c.is_none() {
                *c = Some(completer.clone());
            }
        }
        let mut f = Frame::ack(FrameKind::Issue);
        f.query_id = Some(query.query_id);
        f.response_id = Some(query.response_ids.start);
        f.sample_indices = Some(query.samples.to_vec());
        // A failed write surfaces as missing completions.
        let _ = self.send(&f);
    }

    fn flush(&self) -> Result<(), SutError> {
        self.send(&Frame::ack(FrameKind::Flush))?;
        self.await_ack(FrameKind::Flush)
    }
}

/// Serves one harness connection with a simulated profile, answering each
/// query after the profile's latency. Returns when the harness disconnects.
pub fn serve_profile(listener: TcpListener, profile: SimProfile) -> std::io::Result<()> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    let writer = Arc::new(Mutex::new(BufWriter::new(stream)));
    let mut model = SimSut::new(profile).map_err(|e| std::io::Error::other(e.to_string()))?;
    let origin = Instant::now();
    let (tx, rx) = crossbeam_channel::unbounded::<(u64, Frame)>();
    let timer_writer = Arc::clone(&writer);
    let timer = std::thread::spawn(move || {
        let mut pending: std::collections::BinaryHeap<std::cmp::Reverse<(u64, u64, String)>> =
            Default::default();
        loop {
            let next_due = pending.peek().map(|std::cmp::Reverse((t, _, _))| *t);
            let now = origin.elapsed().as_nanos() as u64;
            if next_due.is_some_and(|t| t <= now) {
                let std::cmp::Reverse((_, rid, payload)) = pending.pop().expect("peeked");
                let mut f = Frame::ack(FrameKind::Complete);
                f.response_id = Some(rid);
                f.payload_b64 = Some(payload);
                let _ = write_frame(&mut *timer_writer.lock().unwrap(), &f);
                continue;
            }
            let msg = match next_due {
                Some(t) => rx
                    .recv_timeout(Duration::from_nanos(t - now))
                    .map_err(|e| e.is_disconnected()),
                None => rx.recv().map_err(|_| true),
            };
            match msg {
                Ok((due, f)) => {
                    let rid = f.response_id.unwrap_or_default();
                    pending.push(std::cmp::Reverse((
                        due,
                        rid,
                        f.payload_b64.unwrap_or_default(),
                    )));
                }
                Err(true) if pending.is_empty() => return,
                Err(_) => {}
            }
        }
    });
    for line in reader.lines() {
        let line = line?;
        let Ok(frame) = serde_json::from_str::<Frame>(&line) else {
            continue;
        };
        match frame.kind {
            FrameKind::Issue => {
                let samples = frame.sample_indices.unwrap_or_default();
                let first = frame.response_id.unwrap_or_default();
                let q = QueryRef {
                    query_id: frame.query_id.unwrap_or_default(),
                    response_ids: first..first + samples.len() as u64,
                    samples: loadgen_core::SampleSlice::Indices(&samples),
                };
                let now = origin.elapsed().as_nanos() as u64;
                let done = model.simulate(&q, now);
                for (i, &s) in samples.iter().enumerate() {
                    let mut f = Frame::ack(FrameKind::Complete);
                    f.response_id = Some(first + i as u64);
                    f.payload_b64 = Some(B64.encode(model.response_payload(s)));
                    let _ = tx.send((done.sample_ns(i), f));
                }
            }
            kind @ (FrameKind::Load | FrameKind::Flush) => {
                if kind == FrameKind::Load {
                    model.reset(None);
                }
                write_frame(&mut *writer.lock().unwrap(), &Frame::ack(kind))?;
            }
            FrameKind::Complete => {}
        }
    }
    drop(tx);
    let _ = timer.join();
    Ok(())
}
