//! Simulated SUTs on the wall clock.
//!
//! [`TimerSut`] computes completion times with the same [`SimSut`] model the
//! virtual engine uses, then delivers them from timer threads when the real
//! clock reaches them. [`NullSut`] completes immediately from a pool of
//! worker threads.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use loadgen_core::simsut::{honest_digest, ProfileError};
use loadgen_core::{QueryRef, RunContext, SimProfile, SimSut};

use crate::sut::{Completer, SutContract, SutError};

struct Pending {
    due_ns: u64,
    response_id: u64,
    payload: [u8; 8],
    completer: Completer,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.due_ns, self.response_id) == (other.due_ns, other.response_id)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due_ns, self.response_id).cmp(&(other.due_ns, other.response_id))
    }
}

#[derive(Default)]
struct TimerQueue {
    heap: Mutex<(BinaryHeap<Reverse<Pending>>, bool)>,
    wake: Condvar,
}

impl TimerQueue {
    fn push(&self, p: Pending) {
        let mut g = self.heap.lock().unwrap();
        let earliest = g.0.peek().is_none_or(|Reverse(top)| p.due_ns < top.due_ns);
        g.0.push(Reverse(p));
        if earliest {
            self.wake.notify_one();
        }
    }

    fn shutdown(&self) {
        self.heap.lock().unwrap().1 = true;
        self.wake.notify_all();
    }

    fn run(&self) {
        let mut g = self.heap.lock().unwrap();
        loop {
            if g.1 {
                return;
            }
            let Some(Reverse(top)) = g.0.peek() else {
                g = self.wake.wait(g).unwrap();
                continue;
            };
            let now = top.completer.now_ns();
            if top.due_ns > now {
                let wait = Duration::from_nanos(top.due_ns - now);
                g = self.wake.wait_timeout(g, wait).unwrap().0;
                continue;
            }
            let Reverse(p) = g.0.pop().expect("peeked");
            drop(g);
            // Protocol errors are counted by the recorder.
            let _ = p.completer.complete_bytes(p.response_id, &p.payload);
            g = self.heap.lock().unwrap();
        }
    }
}

/// A [`SimProfile`] served in real time by `threads` timer threads.
pub struct TimerSut {
    name: String,
    model: Mutex<SimSut>,
    queues: Vec<Arc<TimerQueue>>,
    next: AtomicUsize,
    threads: Vec<JoinHandle<()>>,
}

impl TimerSut {
    pub fn new(profile: SimProfile, threads: usize) -> Result<Self, ProfileError> {
        let model = SimSut::new(profile)?;
        let queues: Vec<Arc<TimerQueue>> = (0..threads.max(1)).map(|_| Arc::default()).collect();
        let handles = queues
            .iter()
            .map(|q| {
                let q = Arc::clone(q);
                std::thread::spawn(move || q.run())
            })
            .collect();
        Ok(Self {
            name: format!("{}-wallclock", model.profile().label()),
            model: Mutex::new(model),
            queues,
            next: AtomicUsize::new(0),
            threads: handles,
        })
    }
}

impl SutContract for TimerSut {
    fn name(&self) -> &str {
        &self.name
    }

    fn begin_run(&self, ctx: &RunContext) -> Result<(), SutError> {
        self.model.lock().unwrap().reset(Some(*ctx));
        Ok(())
    }

    fn load_samples(&self, _indices: &[u64]) -> Result<(), SutError> {
        Ok(())
    }

    fn unload_samples(&self, _indices: &[u64]) -> Result<(), SutError> {
        Ok(())
    }

    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer) {
        let now = completer.now_ns();
        let mut model = self.model.lock().unwrap();
        let done = model.simulate(query, now);
        for (i, rid) in query.response_ids.clone().enumerate() {
            let sample = query.samples.get(i).unwrap_or_default();
            let slot = self.next.fetch_add(1, Ordering::Relaxed) % self.queues.len();
            self.queues[slot].push(Pending {
                due_ns: done.sample_ns(i),
                response_id: rid,
                payload: model.response_payload(sample),
                completer: completer.clone(),
            });
        }
    }
}

impl Drop for TimerSut {
    fn drop(&mut self) {
        self.queues.iter().for_each(|q| q.shutdown());
        self.threads.drain(..).for_each(|t| {
            let _ = t.join();
        });
    }
}

struct Job {
    first_response_id: u64,
    samples: Vec<u64>,
    completer: Completer,
}

/// Completes every query as soon as a worker picks it up.
pub struct NullSut {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl NullSut {
    pub fn new(workers: usize) -> Self {
        let (tx, rx): (Sender<Job>, Receiver<Job>) = crossbeam_channel::unbounded();
        let workers = (0..workers.max(1))
            .map(|_| {
                let rx = rx.clone();
                std::thread::spawn(move || {
                    for job in rx {
                        for (i, &s) in job.samples.iter().enumerate() {
                            let _ = job.completer.complete_digest(
                                job.first_response_id + i as u64,
                                honest_digest(s, 0),
                            );
                        }
                    }
                })
            })
            .collect();
        Self {
            tx: Some(tx),
            workers,
        }
    }
}

impl SutContract for NullSut {
    fn name(&self) -> &str {
        "sim-null"
    }

    fn load_samples(&self, _indices: &[u64]) -> Result<(), SutError> {
        Ok(())
    }

    fn unload_samples(&self, _indices: &[u64]) -> Result<(), SutError> {
        Ok(())
    }

    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer) {
        let job = Job {
            first_response_id: query.response_ids.start,
            samples: query.samples.to_vec(),
            completer: completer.clone(),
        };
        if let Some(tx) = &self.tx {
            let _ = tx.send(job);
        }
    }
}

impl Drop for NullSut {
    fn drop(&mut self) {
        self.tx.take();
        self.workers.drain(..).for_each(|t| {
            let _ = t.join();
        });
    }
}
