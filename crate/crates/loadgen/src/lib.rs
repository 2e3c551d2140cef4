//! Wall-clock side of the load generator: the real-time execution engine,
//! SUT adapters (in-process, simulated on timers, TCP), structured run logs,
//! result bundles, the submission checker and the command line.

pub mod bundle;
pub mod checker;
pub mod cli;
pub mod config;
pub mod engine;
pub mod logio;
pub mod recorder;
pub mod sut;
pub mod tcp;
pub mod timer_sut;

pub use checker::{check_submission, CheckReport, Rule};
pub use engine::{EngineConfig, WallClockHarness};
pub use sut::{Completer, SutContract, SutError};
