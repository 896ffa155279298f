//! Placement disciplines for the adaptive policy and the uniform baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::CoreError;
use crate::latency::{capacity_check_for, decode_latency_for, CapacityReport, LatencyBreakdown};
use crate::planner::{enumerate_distances, placement_from_distances, DistanceChoice};
use crate::types::{per_layer_compute, PlacementMatrix, RequestState, SloConfig, SystemProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Per-request solver, adaptive re-planning, token deposit, pause-resume.
    Orbit,
    /// Everything offloaded; each layer streams through the prefetch buffer.
    DeepspeedLike,
    /// One uniform stride chosen offline for the worst case, never changed.
    FlexgenLike,
    /// Best uniform stride, re-selected whenever the batch changes.
    FlexgenPlus,
    /// Most-offloading uniform stride that still meets the TBT target.
    SloAwareUniform,
    /// Per-request greedy that offloads as few layers as memory allows.
    DynamicHeuristic,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Orbit,
        PolicyKind::DeepspeedLike,
        PolicyKind::FlexgenLike,
        PolicyKind::FlexgenPlus,
        PolicyKind::SloAwareUniform,
        PolicyKind::DynamicHeuristic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Orbit => "orbit",
            PolicyKind::DeepspeedLike => "deepspeed_like",
            PolicyKind::FlexgenLike => "flexgen_like",
            PolicyKind::FlexgenPlus => "flexgen_plus",
            PolicyKind::SloAwareUniform => "slo_aware_uniform",
            PolicyKind::DynamicHeuristic => "dynamic_heuristic",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != PolicyKind::Orbit
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown policy `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("no placement fits: minimum demand {demand} blocks exceeds budget {budget}")]
    OverBudget { demand: u64, budget: u64 },
    #[error(transparent)]
    Core(#[from] CoreError),
}

fn blocks(batch: &[RequestState]) -> Vec<u64> {
    batch.iter().map(|r| r.blocks_per_layer).collect()
}

fn comp(batch: &[RequestState], profile: &SystemProfile) -> f64 {
    per_layer_compute(profile, batch.iter().map(RequestState::context_tokens).sum())
}

pub fn uniform_placement(rows: usize, num_layers: usize, choice: DistanceChoice) -> PlacementMatrix {
    placement_from_distances(&vec![choice; rows], num_layers)
}

/// Full offload. The prefetch buffer must hold the whole batch's KV for one
/// layer.
pub fn plan_deepspeed(
    batch: &[RequestState],
    profile: &SystemProfile,
) -> Result<PlacementMatrix, PolicyError> {
    let m = uniform_placement(batch.len(), profile.num_layers, DistanceChoice::Stride(1));
    let rep = capacity_check_for(&m, &blocks(batch), profile.gpu_block_budget)?;
    if !rep.feasible {
        return Err(PolicyError::OverBudget {
            demand: rep.total(),
            budget: profile.gpu_block_budget,
        });
    }
    Ok(m)
}

/// Fixed stride for every request; strides past the model depth keep
/// everything resident.
pub fn plan_uniform_static(
    batch: &[RequestState],
    profile: &SystemProfile,
    stride: u32,
) -> Result<PlacementMatrix, PolicyError> {
    let choice = DistanceChoice::from_stride(stride, profile.num_layers);
    let m = uniform_placement(batch.len(), profile.num_layers, choice);
    let rep = capacity_check_for(&m, &blocks(batch), profile.gpu_block_budget)?;
    if !rep.feasible {
        return Err(PolicyError::OverBudget {
            demand: rep.total(),
            budget: profile.gpu_block_budget,
        });
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformOption {
    pub choice: DistanceChoice,
    pub placement: PlacementMatrix,
    pub capacity: CapacityReport,
    pub latency: LatencyBreakdown,
}

/// Every uniform stride in the pruned alphabet that fits in memory.
pub fn feasible_uniform_options(
    block_counts: &[u64],
    comp_ms: f64,
    profile: &SystemProfile,
) -> Result<Vec<UniformOption>, CoreError> {
    let mut out = Vec::new();
    for choice in enumerate_distances(profile.num_layers) {
        let placement = uniform_placement(block_counts.len(), profile.num_layers, choice);
        let capacity = capacity_check_for(&placement, block_counts, profile.gpu_block_budget)?;
        if !capacity.feasible {
            continue;
        }
        let latency =
            decode_latency_for(&placement, block_counts, comp_ms, profile.bandwidth_blocks_per_ms)?;
        out.push(UniformOption {
            choice,
            placement,
            capacity,
            latency,
        });
    }
    Ok(out)
}

fn fastest(options: Vec<UniformOption>) -> Option<UniformOption> {
    options.into_iter().min_by(|a, b| {
        a.latency
            .total_latency_ms
            .total_cmp(&b.latency.total_latency_ms)
            .then(a.latency.blocks_fetched.cmp(&b.latency.blocks_fetched))
            .then(a.choice.cmp(&b.choice))
    })
}

fn over_budget(block_counts: &[u64], profile: &SystemProfile) -> PolicyError {
    PolicyError::OverBudget {
        demand: block_counts.iter().sum(),
        budget: profile.gpu_block_budget,
    }
}

/// Offline stride choice: the fastest uniform stride for a worst-case batch
/// of `max_batch` requests holding `max_tokens` tokens each. Falls back to
/// full offload when nothing fits.
pub fn select_offline_stride(
    profile: &SystemProfile,
    max_batch: usize,
    max_tokens: u64,
) -> Result<DistanceChoice, CoreError> {
    let b = crate::types::blocks_for_tokens(max_tokens, profile.block_size);
    let counts = vec![b; max_batch.max(1)];
    let comp = per_layer_compute(profile, max_tokens * max_batch.max(1) as u64);
    Ok(fastest(feasible_uniform_options(&counts, comp, profile)?)
        .map_or(DistanceChoice::Stride(1), |o| o.choice))
}

pub fn plan_flexgen_plus(
    batch: &[RequestState],
    profile: &SystemProfile,
) -> Result<(DistanceChoice, PlacementMatrix), PolicyError> {
    let counts = blocks(batch);
    let best = fastest(feasible_uniform_options(&counts, comp(batch, profile), profile)?)
        .ok_or_else(|| over_budget(&counts, profile))?;
    Ok((best.choice, best.placement))
}

pub fn plan_slo_aware_uniform(
    batch: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
) -> Result<(DistanceChoice, PlacementMatrix), PolicyError> {
    let counts = blocks(batch);
    let options = feasible_uniform_options(&counts, comp(batch, profile), profile)?;
    let meeting = options
        .iter()
        .filter(|o| o.latency.total_latency_ms <= slo.tbt_target_ms)
        .min_by(|a, b| {
            a.capacity
                .total()
                .cmp(&b.capacity.total())
                .then(a.latency.total_latency_ms.total_cmp(&b.latency.total_latency_ms))
                .then(a.choice.cmp(&b.choice))
        })
        .cloned();
    let pick = match meeting {
        Some(o) => o,
        None => fastest(options).ok_or_else(|| over_budget(&counts, profile))?,
    };
    Ok((pick.choice, pick.placement))
}

/// Greedy: requests by descending blocks (then id) take the choice with the
/// fewest offloaded layers that still fits, with not-yet-assigned requests
/// assumed fully offloaded.
pub fn plan_dynamic_heuristic(
    batch: &[RequestState],
    profile: &SystemProfile,
) -> Result<PlacementMatrix, PolicyError> {
    let counts = blocks(batch);
    let layers = profile.num_layers;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(batch[a].id.cmp(&batch[b].id)));
    let mut choices = vec![DistanceChoice::Stride(1); batch.len()];
    if !capacity_check_for(
        &placement_from_distances(&choices, layers),
        &counts,
        profile.gpu_block_budget,
    )?
    .feasible
    {
        return Err(over_budget(&counts, profile));
    }
    // Fewest offloaded layers first.
    let mut alphabet = enumerate_distances(layers);
    alphabet.sort_by_key(|c| (c.offload_count(layers), *c));
    for &r in &order {
        for &c in &alphabet {
            choices[r] = c;
            let m = placement_from_distances(&choices, layers);
            if capacity_check_for(&m, &counts, profile.gpu_block_budget)?.feasible {
                break;
            }
        }
    }
    Ok(placement_from_distances(&choices, layers))
}
