//! The in-process SUT interface for wall-clock runs.

use std::sync::Arc;

use loadgen_core::{QueryRef, RunContext, SampleResponse};

use crate::recorder::{CompletionError, RunRecorder};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct SutError(pub String);

/// Handle a SUT uses to report completions. Cheap to clone and safe to use
/// from any thread; timestamps are taken harness-side at the call.
#[derive(Clone)]
pub struct Completer {
    recorder: Arc<RunRecorder>,
}

impl Completer {
    pub fn new(recorder: Arc<RunRecorder>) -> Self {
        Self { recorder }
    }

    pub fn complete(&self, response: SampleResponse) -> Result<(), CompletionError> {
        self.recorder.complete(
            response.response_id(),
            response.payload_digest(),
            response.payload(),
        )
    }

    pub fn complete_bytes(&self, response_id: u64, payload: &[u8]) -> Result<(), CompletionError> {
        self.recorder.complete_bytes(response_id, payload)
    }

    /// For SUTs that already hold the digest and never return bytes.
    pub fn complete_digest(
        &self,
        response_id: u64,
        payload_digest: u64,
    ) -> Result<(), CompletionError> {
        self.recorder.complete(response_id, payload_digest, None)
    }

    /// Harness clock, nanoseconds since run start.
    pub fn now_ns(&self) -> u64 {
        self.recorder.clock().now_ns()
    }

    /// Whether the digest for `response_id` will be kept; SUTs may skip
    /// computing it otherwise.
    pub fn logs(&self, response_id: u64) -> bool {
        self.recorder.logging().should_log(response_id)
    }
}

/// A system under test driven on the wall clock.
///
/// After `issue_query` the SUT must eventually complete every response id of
/// the query exactly once, from any thread, through the completer.
pub trait SutContract: Send + Sync {
    fn name(&self) -> &str;

    fn begin_run(&self, _ctx: &RunContext) -> Result<(), SutError> {
        Ok(())
    }

    /// Untimed.
    fn load_samples(&self, indices: &[u64]) -> Result<(), SutError>;

    fn unload_samples(&self, indices: &[u64]) -> Result<(), SutError>;

    /// Must return promptly; inference happens asynchronously.
    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer);

    fn flush(&self) -> Result<(), SutError> {
        Ok(())
    }
}

impl<S: SutContract + ?Sized> SutContract for Arc<S> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn begin_run(&self, ctx: &RunContext) -> Result<(), SutError> {
        (**self).begin_run(ctx)
    }
    fn load_samples(&self, indices: &[u64]) -> Result<(), SutError> {
        (**self).load_samples(indices)
    }
    fn unload_samples(&self, indices: &[u64]) -> Result<(), SutError> {
        (**self).unload_samples(indices)
    }
    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer) {
        (**self).issue_query(query, completer)
    }
    fn flush(&self) -> Result<(), SutError> {
        (**self).flush()
    }
}

impl<S: SutContract + ?Sized> SutContract for Box<S> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn begin_run(&self, ctx: &RunContext) -> Result<(), SutError> {
        (**self).begin_run(ctx)
    }
    fn load_samples(&self, indices: &[u64]) -> Result<(), SutError> {
        (**self).load_samples(indices)
    }
    fn unload_samples(&self, indices: &[u64]) -> Result<(), SutError> {
        (**self).unload_samples(indices)
    }
    fn issue_query(&self, query: &QueryRef<'_>, completer: &Completer) {
        (**self).issue_query(query, completer)
    }
    fn flush(&self) -> Result<(), SutError> {
        (**self).flush()
    }
}
