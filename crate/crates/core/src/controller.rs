//! Re-planning triggers, online profile correction and the pause-resume
//! fallback.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::CoreError;
use crate::planner::{solve, Solution};
use crate::types::{RequestId, RequestState, RequestStatus, SloConfig, SystemProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    None,
    ReplanProfile,
    ReplanBatch,
    ReplanExpiry,
}

/// Batch change beats profile mismatch, which beats window expiry.
pub fn check_triggers(
    observed_ms: f64,
    predicted_ms: f64,
    batch_changed: bool,
    current_step: u64,
    expiry_step: u64,
    threshold: f64,
) -> Trigger {
    debug_assert!(predicted_ms > 0.0);
    if batch_changed {
        Trigger::ReplanBatch
    } else if (observed_ms - predicted_ms).abs() > threshold * predicted_ms {
        Trigger::ReplanProfile
    } else if current_step >= expiry_step {
        Trigger::ReplanExpiry
    } else {
        Trigger::None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub last_predicted_latency_ms: f64,
    /// Running per-layer compute estimate.
    pub ewma_compute_ms: f64,
    pub ewma_bandwidth_blocks_per_ms: f64,
    pub active_expiry: u64,
}

impl TriggerState {
    pub fn seeded(compute_ms: f64, bandwidth: f64) -> Self {
        Self {
            last_predicted_latency_ms: 0.0,
            ewma_compute_ms: compute_ms,
            ewma_bandwidth_blocks_per_ms: bandwidth,
            active_expiry: 0,
        }
    }
}

pub fn ewma_update(
    state: &TriggerState,
    observed_compute_ms: f64,
    observed_bandwidth: f64,
    decay: f64,
) -> TriggerState {
    debug_assert!(decay > 0.0 && decay <= 1.0);
    let blend = |prev: f64, obs: f64| decay * obs + (1.0 - decay) * prev;
    TriggerState {
        ewma_compute_ms: blend(state.ewma_compute_ms, observed_compute_ms),
        ewma_bandwidth_blocks_per_ms: blend(state.ewma_bandwidth_blocks_per_ms, observed_bandwidth),
        ..state.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no decoding request left to pause")]
pub struct ExhaustedBatch;

/// Footprint used to rank pause victims: KV blocks across all layers plus
/// deposited tokens.
pub fn victim_score(req: &RequestState, num_layers: usize) -> u64 {
    req.blocks_per_layer * num_layers as u64 + req.deposit_balance
}

pub fn select_pause_victim(
    batch: &[RequestState],
    num_layers: usize,
) -> Result<RequestId, ExhaustedBatch> {
    batch
        .iter()
        .filter(|r| r.status == RequestStatus::Decoding)
        .max_by(|a, b| {
            victim_score(a, num_layers)
                .cmp(&victim_score(b, num_layers))
                // Earlier arrival, then lower id, wins ties: reverse order.
                .then(b.arrival_ms.total_cmp(&a.arrival_ms))
                .then(b.id.cmp(&a.id))
        })
        .map(|r| r.id)
        .ok_or(ExhaustedBatch)
}

/// Victim selection rules compared in the fallback study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimRule {
    #[default]
    LargestFootprint,
    Shortest,
    Random,
}

impl VictimRule {
    pub fn name(self) -> &'static str {
        match self {
            VictimRule::LargestFootprint => "largest",
            VictimRule::Shortest => "shortest",
            VictimRule::Random => "random",
        }
    }
}

impl std::fmt::Display for VictimRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VictimRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "largest" => Ok(VictimRule::LargestFootprint),
            "shortest" => Ok(VictimRule::Shortest),
            "random" => Ok(VictimRule::Random),
            _ => Err(format!("unknown victim rule `{s}` (expected largest, shortest or random)")),
        }
    }
}

pub fn select_victim_with<R: Rng>(
    rule: VictimRule,
    batch: &[RequestState],
    num_layers: usize,
    rng: &mut R,
) -> Result<RequestId, ExhaustedBatch> {
    match rule {
        VictimRule::LargestFootprint => select_pause_victim(batch, num_layers),
        VictimRule::Shortest => batch
            .iter()
            .filter(|r| r.status == RequestStatus::Decoding)
            .min_by(|a, b| {
                victim_score(a, num_layers)
                    .cmp(&victim_score(b, num_layers))
                    .then(a.arrival_ms.total_cmp(&b.arrival_ms))
                    .then(a.id.cmp(&b.id))
            })
            .map(|r| r.id)
            .ok_or(ExhaustedBatch),
        VictimRule::Random => {
            let eligible: Vec<_> = batch
                .iter()
                .filter(|r| r.status == RequestStatus::Decoding)
                .collect();
            if eligible.is_empty() {
                return Err(ExhaustedBatch);
            }
            Ok(eligible[rng.gen_range(0..eligible.len())].id)
        }
    }
}

/// First paused request (in pause order) whose return still admits a
/// feasible plan.
pub fn try_resume(
    paused: &[RequestState],
    batch: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
    current_step: u64,
) -> Result<Option<RequestId>, CoreError> {
    for (i, cand) in paused.iter().enumerate() {
        let mut trial: Vec<RequestState> = batch.to_vec();
        let mut resumed = cand.clone();
        resumed.status = RequestStatus::Decoding;
        trial.push(resumed);
        let others: Vec<RequestState> = paused
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.clone())
            .collect();
        if let Solution::Feasible(_) = solve(&trial, &others, profile, slo, current_step)? {
            return Ok(Some(cand.id));
        }
    }
    Ok(None)
}
