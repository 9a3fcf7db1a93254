//! Synthetic stores, workload traces, replay and scenarios for exercising
//! iovstore end to end.

pub mod arrival;
pub mod experiments;
pub mod gen;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod workload;

use iovstore_cachetier::ClientError;
use iovstore_core::query::ReadError;
use iovstore_core::release::ReleaseError;
use iovstore_core::store::StoreError;

pub use arrival::{fluctuation_ratio, ArrivalModel};
pub use gen::{gen_store, GeneratedStore, StorePreset, StoreReport, StoreSpec};
pub use replay::{replay, ClockMode, Metrics, ReplayOptions};
pub use report::{Check, ScenarioReport};
pub use scenario::{bundled_scenario, bundled_scenarios, run_scenario, ScenarioConfig};
pub use workload::{dedup_trace, gen_workload, QueryCase, Trace, TraceEvent, WorkloadProfile};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Release(#[from] ReleaseError),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("byte target {target} unreachable: best trace reads {achieved} bytes")]
    UnreachableByteTarget { target: u64, achieved: u64 },
    #[error("insufficient data: {bins} bins, at least {needed} needed")]
    InsufficientData { bins: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown {what} '{name}'")]
    Unknown { what: &'static str, name: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
