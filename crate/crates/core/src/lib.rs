//! Simulator and placement planner for SLO-aware KV-cache offloading in
//! long-context decode serving.

pub mod controller;
pub mod engine;
pub mod error;
pub mod latency;
pub mod planner;
pub mod policies;
pub mod suite;
pub mod types;
pub mod workload;

pub use error::CoreError;
pub use latency::{CapacityReport, LatencyBreakdown};
pub use types::{
    blocks_for_tokens, per_layer_compute, PlacementMatrix, Plan, RequestId, RequestState,
    RequestStatus, SloConfig, SystemProfile,
};
