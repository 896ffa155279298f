//! Decode-iteration latency under a KV placement, plus the memory accounting
//! that decides whether a placement fits on the GPU.
//!
//! Transfers follow a per-request single-stream discipline: a request has at
//! most one layer's KV in flight. At the boundary before layer `l` a request
//! with an idle stream launches the fetch for its next offloaded layer when
//! either layer `l` is GPU-resident for it (a prefetch) or that next layer is
//! `l` itself (a demand fetch into the prefetch buffer). Active streams share
//! the bandwidth equally and a finished stream's share goes back to the rest.
//! Layer `l` starts once the previous layer finished and every transfer
//! destined for `l` completed; the gap is the stall charged to `l`.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::types::{per_layer_compute, PlacementMatrix, RequestState, SystemProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub total_latency_ms: f64,
    pub total_compute_ms: f64,
    pub total_stall_ms: f64,
    pub per_layer_stall_ms: Vec<f64>,
    pub blocks_fetched: u64,
    /// Total stall in block-transfer times, before conversion to ms.
    pub stall_block_units: f64,
}

impl LatencyBreakdown {
    pub fn stall_in_block_units(&self) -> f64 {
        self.stall_block_units
    }
}

/// One in-flight or pending KV fetch. `request` is the batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTask {
    pub request: usize,
    pub dest_layer: usize,
    pub size: u64,
    pub remaining: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub resident_blocks: u64,
    pub prefetch_buffer: u64,
    pub budget: u64,
    pub feasible: bool,
}

impl CapacityReport {
    pub fn total(&self) -> u64 {
        self.resident_blocks + self.prefetch_buffer
    }
}

/// Per-layer start times together with the breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTimeline {
    pub layer_start_ms: Vec<f64>,
    pub breakdown: LatencyBreakdown,
}

pub fn block_counts(batch: &[RequestState]) -> Vec<u64> {
    batch.iter().map(|r| r.blocks_per_layer).collect()
}

pub fn batch_tokens(batch: &[RequestState]) -> u64 {
    batch.iter().map(RequestState::context_tokens).sum()
}

fn check_dims(placement: &PlacementMatrix, blocks: &[u64]) -> Result<(), CoreError> {
    placement.ensure_shape(blocks.len(), placement.layers())?;
    Ok(())
}

pub fn blocks_to_fetch(
    placement: &PlacementMatrix,
    batch: &[RequestState],
) -> Result<u64, CoreError> {
    blocks_to_fetch_for(placement, &block_counts(batch))
}

pub fn blocks_to_fetch_for(placement: &PlacementMatrix, blocks: &[u64]) -> Result<u64, CoreError> {
    check_dims(placement, blocks)?;
    Ok(blocks
        .iter()
        .enumerate()
        .map(|(r, &b)| b * placement.offloaded_layers(r) as u64)
        .sum())
}

pub fn prefetch_buffer_requirement(
    placement: &PlacementMatrix,
    batch: &[RequestState],
) -> Result<u64, CoreError> {
    prefetch_buffer_for(placement, &block_counts(batch))
}

pub fn prefetch_buffer_for(placement: &PlacementMatrix, blocks: &[u64]) -> Result<u64, CoreError> {
    check_dims(placement, blocks)?;
    Ok((0..placement.layers())
        .map(|l| {
            blocks
                .iter()
                .enumerate()
                .filter(|&(r, _)| !placement.is_resident(r, l))
                .map(|(_, &b)| b)
                .sum::<u64>()
        })
        .max()
        .unwrap_or(0))
}

pub fn capacity_check(
    placement: &PlacementMatrix,
    batch: &[RequestState],
    budget: u64,
) -> Result<CapacityReport, CoreError> {
    capacity_check_for(placement, &block_counts(batch), budget)
}

pub fn capacity_check_for(
    placement: &PlacementMatrix,
    blocks: &[u64],
    budget: u64,
) -> Result<CapacityReport, CoreError> {
    check_dims(placement, blocks)?;
    let resident_blocks = blocks
        .iter()
        .enumerate()
        .map(|(r, &b)| b * (placement.layers() - placement.offloaded_layers(r)) as u64)
        .sum();
    let prefetch_buffer = prefetch_buffer_for(placement, blocks)?;
    Ok(CapacityReport {
        resident_blocks,
        prefetch_buffer,
        budget,
        feasible: resident_blocks + prefetch_buffer <= budget,
    })
}

pub fn batch_decode_latency(
    placement: &PlacementMatrix,
    batch: &[RequestState],
    profile: &SystemProfile,
) -> Result<LatencyBreakdown, CoreError> {
    Ok(decode_timeline(placement, batch, profile)?.breakdown)
}

pub fn decode_timeline(
    placement: &PlacementMatrix,
    batch: &[RequestState],
    profile: &SystemProfile,
) -> Result<DecodeTimeline, CoreError> {
    if batch.is_empty() {
        placement.ensure_shape(0, 0)?;
    } else {
        placement.ensure_shape(batch.len(), profile.num_layers)?;
    }
    let comp = per_layer_compute(profile, batch_tokens(batch));
    let layers = if batch.is_empty() {
        profile.num_layers
    } else {
        placement.layers()
    };
    simulate_decode(
        placement,
        &block_counts(batch),
        layers,
        comp,
        profile.bandwidth_blocks_per_ms,
    )
}

/// Latency for explicit block counts and a fixed per-layer compute time.
pub fn decode_latency_for(
    placement: &PlacementMatrix,
    blocks: &[u64],
    comp_ms: f64,
    bandwidth_blocks_per_ms: f64,
) -> Result<LatencyBreakdown, CoreError> {
    check_dims(placement, blocks)?;
    Ok(simulate_decode(
        placement,
        blocks,
        placement.layers(),
        comp_ms,
        bandwidth_blocks_per_ms,
    )?
    .breakdown)
}

/// Equal-share bandwidth among active streams. The clock counts
/// block-transfer times, so one block moves per unit when a single stream
/// is active.
struct Streams {
    active: Vec<TransferTask>,
    clock: f64,
}

impl Streams {
    /// Processes completions up to `until` and leaves the clock there.
    fn advance_to(&mut self, until: f64) {
        while !self.active.is_empty() {
            let (min_rem, dt) = self.next_completion();
            if self.clock + dt > until {
                let moved = (until - self.clock) / self.active.len() as f64;
                for t in &mut self.active {
                    t.remaining -= moved;
                }
                break;
            }
            self.clock += dt;
            self.drain(min_rem);
        }
        self.clock = self.clock.max(until);
    }

    /// Runs until no active transfer is destined for `layer`.
    fn finish_layer(&mut self, layer: usize) {
        while self.active.iter().any(|t| t.dest_layer == layer) {
            let (min_rem, dt) = self.next_completion();
            self.clock += dt;
            self.drain(min_rem);
        }
    }

    fn next_completion(&self) -> (f64, f64) {
        let min_rem = self
            .active
            .iter()
            .map(|t| t.remaining)
            .fold(f64::INFINITY, f64::min);
        (min_rem, min_rem * self.active.len() as f64)
    }

    fn drain(&mut self, amount: f64) {
        for t in &mut self.active {
            t.remaining -= amount;
        }
        // Streams within rounding of the minimum finish together.
        self.active
            .retain(|t| t.remaining > 1e-9 * (t.size as f64).max(1.0));
    }
}

fn simulate_decode(
    placement: &PlacementMatrix,
    blocks: &[u64],
    layers: usize,
    comp: f64,
    bandwidth: f64,
) -> Result<DecodeTimeline, CoreError> {
    if !(bandwidth > 0.0) {
        return Err(CoreError::NonPositiveBandwidth(bandwidth));
    }
    let rows = blocks.len();
    // Offloaded layers per request in ascending order, consumed front to back.
    let pending: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            (0..layers)
                .filter(|&l| !placement.is_resident(r, l) && blocks[r] > 0)
                .collect()
        })
        .collect();
    let mut next_pending = vec![0usize; rows];
    let mut streams = Streams {
        active: Vec::with_capacity(rows),
        clock: 0.0,
    };
    let comp_units = comp * bandwidth;
    let mut per_layer_stall = vec![0.0; layers];
    let mut layer_start = vec![0.0; layers];
    let mut boundary = 0.0;
    let mut blocks_fetched = 0u64;

    for l in 0..layers {
        streams.advance_to(boundary);
        for r in 0..rows {
            if streams.active.iter().any(|t| t.request == r) {
                continue;
            }
            let Some(&dest) = pending[r].get(next_pending[r]) else {
                continue;
            };
            if dest == l || placement.is_resident(r, l) {
                next_pending[r] += 1;
                blocks_fetched += blocks[r];
                streams.active.push(TransferTask {
                    request: r,
                    dest_layer: dest,
                    size: blocks[r],
                    remaining: blocks[r] as f64,
                });
            }
        }
        streams
            .active
            .sort_by(|a, b| (a.size, a.dest_layer, a.request).cmp(&(b.size, b.dest_layer, b.request)));
        streams.finish_layer(l);
        let start = streams.clock.max(boundary);
        per_layer_stall[l] = start - boundary;
        layer_start[l] = start;
        boundary = start + comp_units;
    }

    let total_compute = comp * layers as f64;
    let stall_units: f64 = per_layer_stall.iter().sum();
    let total_stall = stall_units / bandwidth;
    Ok(DecodeTimeline {
        layer_start_ms: layer_start.iter().map(|t| t / bandwidth).collect(),
        breakdown: LatencyBreakdown {
            total_latency_ms: total_compute + total_stall,
            total_compute_ms: total_compute,
            total_stall_ms: total_stall,
            per_layer_stall_ms: per_layer_stall.iter().map(|t| t / bandwidth).collect(),
            blocks_fetched,
            stall_block_units: stall_units,
        },
    })
}

/// Blocks that must move when switching from `old` to `new`:
/// `(host_to_gpu, gpu_to_host)`, each flip weighted by the request's blocks.
pub fn reconfiguration_delta(
    old: &PlacementMatrix,
    new: &PlacementMatrix,
    batch: &[RequestState],
) -> Result<(u64, u64), CoreError> {
    reconfiguration_delta_for(old, new, &block_counts(batch))
}

pub fn reconfiguration_delta_for(
    old: &PlacementMatrix,
    new: &PlacementMatrix,
    blocks: &[u64],
) -> Result<(u64, u64), CoreError> {
    check_dims(old, blocks)?;
    new.ensure_shape(old.rows(), old.layers())?;
    let mut up = 0;
    let mut down = 0;
    for (r, &b) in blocks.iter().enumerate() {
        for l in 0..old.layers() {
            match (old.is_resident(r, l), new.is_resident(r, l)) {
                (false, true) => up += b,
                (true, false) => down += b,
                _ => {}
            }
        }
    }
    Ok((up, down))
}
