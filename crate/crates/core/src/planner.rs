//! Per-request offload-distance search.
//!
//! Each request picks one [`DistanceChoice`]; the planner enumerates the
//! product of those choices, drops candidates that do not fit in GPU memory,
//! and keeps the fastest one whose forecast SLO failures stay under the cap
//! for at least `window_min` steps. The decode window is then stretched while
//! the windowed average still holds.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::CoreError;
use crate::latency::{
    capacity_check_for, decode_latency_for, LatencyBreakdown,
};
use crate::types::{
    blocks_for_tokens, per_layer_compute, PlacementMatrix, Plan, RequestState, RequestStatus,
    SloConfig, SystemProfile,
};

/// Offload pattern for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistanceChoice {
    /// Offload every `k`-th layer (1-indexed `k, 2k, ...`).
    Stride(u32),
    /// Keep every layer on the GPU.
    Resident,
}

impl DistanceChoice {
    /// Whether 0-indexed `layer` is offloaded under this choice.
    pub fn offloads(self, layer: usize) -> bool {
        match self {
            DistanceChoice::Stride(k) => (layer + 1) % k as usize == 0,
            DistanceChoice::Resident => false,
        }
    }

    pub fn offload_count(self, num_layers: usize) -> usize {
        match self {
            DistanceChoice::Stride(k) => num_layers / k as usize,
            DistanceChoice::Resident => 0,
        }
    }

    /// Residency flags for one placement row.
    pub fn row(self, num_layers: usize) -> Vec<bool> {
        (0..num_layers).map(|l| !self.offloads(l)).collect()
    }

    /// Normalises strides beyond the model depth to `Resident`.
    pub fn from_stride(k: u32, num_layers: usize) -> Self {
        if k as usize > num_layers {
            DistanceChoice::Resident
        } else {
            DistanceChoice::Stride(k.max(1))
        }
    }
}

/// Distinct offload counts `{floor(L/k) : k = 2..=L}`.
pub fn offload_counts(num_layers: usize) -> BTreeSet<usize> {
    (2..=num_layers).map(|k| num_layers / k).collect()
}

/// One stride per distinct offload count (the smallest stride reaching it),
/// ordered by increasing offload count.
pub fn non_endpoint_distances(num_layers: usize) -> Vec<DistanceChoice> {
    let mut seen = BTreeSet::new();
    let mut reps = Vec::new();
    for k in 2..=num_layers {
        if seen.insert(num_layers / k) {
            reps.push(DistanceChoice::Stride(k as u32));
        }
    }
    reps.reverse();
    reps
}

/// Pruned per-request alphabet: `Resident`, the stride representatives, and
/// the all-offload stride 1.
pub fn enumerate_distances(num_layers: usize) -> Vec<DistanceChoice> {
    let mut out = vec![DistanceChoice::Resident];
    out.extend(non_endpoint_distances(num_layers));
    out.push(DistanceChoice::Stride(1));
    out
}

pub fn placement_from_distances(distances: &[DistanceChoice], num_layers: usize) -> PlacementMatrix {
    PlacementMatrix::from_bool_rows(
        distances.iter().map(|d| d.row(num_layers)).collect(),
        num_layers,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub distances: Vec<DistanceChoice>,
    pub placement: PlacementMatrix,
}

/// Cartesian product of per-request choices.
#[derive(Debug, Clone)]
pub struct CandidateSpace {
    choices: Vec<DistanceChoice>,
    rows: usize,
    num_layers: usize,
    counter: Vec<usize>,
    done: bool,
}

impl CandidateSpace {
    pub fn new(choices: Vec<DistanceChoice>, rows: usize, num_layers: usize) -> Self {
        let done = choices.is_empty();
        Self {
            choices,
            rows,
            num_layers,
            counter: vec![0; rows],
            done,
        }
    }

    pub fn cardinality(&self) -> u128 {
        (self.choices.len() as u128).pow(self.rows as u32)
    }
}

impl Iterator for CandidateSpace {
    type Item = Candidate;

    fn next(&mut self) -> Option<Candidate> {
        if self.done {
            return None;
        }
        let distances: Vec<_> = self.counter.iter().map(|&i| self.choices[i]).collect();
        let placement = placement_from_distances(&distances, self.num_layers);
        // Odometer increment, last row fastest.
        self.done = true;
        for digit in self.counter.iter_mut().rev() {
            *digit += 1;
            if *digit < self.choices.len() {
                self.done = false;
                break;
            }
            *digit = 0;
        }
        Some(Candidate {
            distances,
            placement,
        })
    }
}

pub fn candidate_space(batch: &[RequestState], num_layers: usize) -> CandidateSpace {
    CandidateSpace::new(enumerate_distances(num_layers), batch.len(), num_layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationForecast {
    /// Sum of per-request SLO failures for each forecast step.
    pub per_step_failures: Vec<u32>,
    pub per_step_latency_ms: Vec<f64>,
    pub window: usize,
    /// Step at which the placement stopped fitting in memory, if it did.
    pub truncated_at: Option<usize>,
}

impl ViolationForecast {
    /// Mean failures per step over the first `delta` steps, if the forecast
    /// covers that many.
    pub fn window_average(&self, delta: usize) -> Option<f64> {
        if delta == 0 || delta > self.per_step_failures.len() {
            return None;
        }
        let sum: u32 = self.per_step_failures[..delta].iter().sum();
        Some(f64::from(sum) / delta as f64)
    }
}

/// Token-level failure forecast for a fixed placement.
///
/// Each step every decoding request grows by one token; the deposit gains
/// `1 - latency/tbt` tokens (negative when the step overshoots). A step fails
/// for a request when the overshoot cannot be paid from its deposit. Paused
/// requests only drain, failing every step once their deposit runs dry.
pub fn forecast_violations(
    placement: &PlacementMatrix,
    batch: &[RequestState],
    paused: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
    horizon: usize,
) -> Result<ViolationForecast, CoreError> {
    placement.ensure_shape(batch.len(), profile.num_layers)?;
    let bs = profile.block_size;
    let mut deposits: Vec<f64> = batch.iter().map(|r| r.deposit_balance as f64).collect();
    let mut paused_deposits: Vec<f64> = paused.iter().map(|r| r.deposit_balance as f64).collect();
    let mut per_step_failures = Vec::with_capacity(horizon);
    let mut per_step_latency_ms = Vec::with_capacity(horizon);
    let mut truncated_at = None;
    let mut blocks = vec![0u64; batch.len()];

    for t in 0..horizon as u64 {
        let mut tokens = 0;
        for (r, req) in batch.iter().enumerate() {
            let extra = t.min(req.remaining_output());
            let ctx = req.context_tokens() + extra;
            tokens += ctx;
            blocks[r] = blocks_for_tokens(ctx, bs);
        }
        if !capacity_check_for(placement, &blocks, profile.gpu_block_budget)?.feasible {
            truncated_at = Some(t as usize);
            break;
        }
        let comp = per_layer_compute(profile, tokens);
        let lat = decode_latency_for(placement, &blocks, comp, profile.bandwidth_blocks_per_ms)?
            .total_latency_ms;
        let ratio = lat / slo.tbt_target_ms;
        let mut fails = 0u32;
        for (r, req) in batch.iter().enumerate() {
            if t >= req.remaining_output() {
                continue;
            }
            if !settle(&mut deposits[r], 1.0 - ratio) {
                fails += 1;
            }
        }
        for d in &mut paused_deposits {
            if !settle(d, -ratio) {
                fails += 1;
            }
        }
        per_step_failures.push(fails);
        per_step_latency_ms.push(lat);
    }
    Ok(ViolationForecast {
        per_step_failures,
        per_step_latency_ms,
        window: horizon,
        truncated_at,
    })
}

/// Failure count of the forecast if every step took `latency_ms`.
fn constant_latency_failures(
    latency_ms: f64,
    batch: &[RequestState],
    paused: &[RequestState],
    slo: &SloConfig,
    horizon: usize,
) -> u32 {
    let ratio = latency_ms / slo.tbt_target_ms;
    let mut fails = 0;
    for req in batch {
        let mut d = req.deposit_balance as f64;
        let steps = (horizon as u64).min(req.remaining_output());
        fails += (0..steps).filter(|_| !settle(&mut d, 1.0 - ratio)).count() as u32;
    }
    for req in paused {
        let mut d = req.deposit_balance as f64;
        fails += (0..horizon).filter(|_| !settle(&mut d, -ratio)).count() as u32;
    }
    fails
}

/// Applies a deposit change; returns false when a debit could not be covered.
fn settle(balance: &mut f64, delta: f64) -> bool {
    if delta >= 0.0 || *balance + delta >= 0.0 {
        *balance += delta;
        true
    } else {
        *balance = 0.0;
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Feasible(Plan),
    Infeasible,
}

impl Solution {
    pub fn plan(&self) -> Option<&Plan> {
        match self {
            Solution::Feasible(p) => Some(p),
            Solution::Infeasible => None,
        }
    }

    pub fn into_plan(self) -> Option<Plan> {
        match self {
            Solution::Feasible(p) => Some(p),
            Solution::Infeasible => None,
        }
    }
}

struct Scored {
    distances: Vec<DistanceChoice>,
    placement: PlacementMatrix,
    latency: LatencyBreakdown,
    fetched: u64,
}

fn objective_order(a: &Scored, b: &Scored) -> Ordering {
    a.latency
        .total_latency_ms
        .total_cmp(&b.latency.total_latency_ms)
        .then(a.fetched.cmp(&b.fetched))
        .then_with(|| a.distances.cmp(&b.distances))
}

struct MinScored(Scored);

impl PartialEq for MinScored {
    fn eq(&self, other: &Self) -> bool {
        objective_order(&self.0, &other.0) == Ordering::Equal
    }
}

impl Eq for MinScored {}

impl PartialOrd for MinScored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MinScored {
    fn cmp(&self, other: &Self) -> Ordering {
        objective_order(&other.0, &self.0)
    }
}

/// Capacity-feasible candidates in (latency, blocks fetched, distance tuple)
/// order, evaluated lazily.
///
/// Every candidate gets a cheap latency floor: all fetched blocks must cross
/// the link before the last offloaded layer starts, and every layer from
/// there on still computes. Candidates are scored exactly only once the
/// floor reaches the best exact score seen so far.
struct RankedCandidates<'a> {
    choices: Vec<DistanceChoice>,
    blocks: Vec<u64>,
    comp: f64,
    profile: &'a SystemProfile,
    /// (floor, choice indices), sorted so the smallest floor is last.
    pending: Vec<(f64, Vec<usize>)>,
    ready: BinaryHeap<MinScored>,
}

const FLOOR_SLACK_MS: f64 = 1e-9;

impl<'a> RankedCandidates<'a> {
    fn new(batch: &[RequestState], profile: &'a SystemProfile) -> Self {
        let layers = profile.num_layers;
        let choices = enumerate_distances(layers);
        let blocks: Vec<u64> = batch.iter().map(|r| r.blocks_per_layer).collect();
        let tokens: u64 = batch.iter().map(RequestState::context_tokens).sum();
        let comp = per_layer_compute(profile, tokens);
        let last_offloaded: Vec<usize> = choices
            .iter()
            .map(|c| match *c {
                DistanceChoice::Stride(k) => k as usize * c.offload_count(layers),
                DistanceChoice::Resident => 0,
            })
            .collect();
        let counts: Vec<u64> = choices.iter().map(|c| c.offload_count(layers) as u64).collect();

        let mut pending = Vec::new();
        let mut idx = vec![0usize; blocks.len()];
        let mut layer_demand = vec![0u64; layers];
        loop {
            let mut fetched = 0u64;
            let mut resident = 0u64;
            let mut last = 0usize;
            layer_demand.iter_mut().for_each(|d| *d = 0);
            for (r, &i) in idx.iter().enumerate() {
                fetched += counts[i] * blocks[r];
                resident += (layers as u64 - counts[i]) * blocks[r];
                last = last.max(last_offloaded[i]);
                if let DistanceChoice::Stride(k) = choices[i] {
                    for l in (k as usize - 1..layers).step_by(k as usize) {
                        layer_demand[l] += blocks[r];
                    }
                }
            }
            let buffer = layer_demand.iter().copied().max().unwrap_or(0);
            let fits = resident + buffer <= profile.gpu_block_budget;
            let floor = if last == 0 {
                layers as f64 * comp
            } else {
                (layers as f64 * comp).max(
                    fetched as f64 / profile.bandwidth_blocks_per_ms
                        + (layers - last + 1) as f64 * comp,
                )
            };
            if fits {
                pending.push((floor - FLOOR_SLACK_MS, idx.clone()));
            }
            let mut carry = true;
            for digit in idx.iter_mut().rev() {
                *digit += 1;
                if *digit < choices.len() {
                    carry = false;
                    break;
                }
                *digit = 0;
            }
            if carry || blocks.is_empty() {
                break;
            }
        }
        pending.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| b.1.cmp(&a.1)));
        Self {
            choices,
            blocks,
            comp,
            profile,
            pending,
            ready: BinaryHeap::new(),
        }
    }

    fn evaluate(&mut self, idx: &[usize]) -> Result<(), CoreError> {
        let distances: Vec<DistanceChoice> = idx.iter().map(|&i| self.choices[i]).collect();
        let placement = placement_from_distances(&distances, self.profile.num_layers);
        if !capacity_check_for(&placement, &self.blocks, self.profile.gpu_block_budget)?.feasible {
            return Ok(());
        }
        let latency = decode_latency_for(
            &placement,
            &self.blocks,
            self.comp,
            self.profile.bandwidth_blocks_per_ms,
        )?;
        let fetched = latency.blocks_fetched;
        self.ready.push(MinScored(Scored {
            distances,
            placement,
            latency,
            fetched,
        }));
        Ok(())
    }

    fn next_candidate(&mut self) -> Result<Option<Scored>, CoreError> {
        loop {
            let floor = self.pending.last().map(|p| p.0);
            match (self.ready.peek(), floor) {
                (Some(top), Some(f)) if top.0.latency.total_latency_ms < f => {
                    return Ok(self.ready.pop().map(|m| m.0));
                }
                (Some(_), None) => return Ok(self.ready.pop().map(|m| m.0)),
                (None, None) => return Ok(None),
                _ => {
                    let (_, idx) = self.pending.pop().expect("floor came from pending");
                    self.evaluate(&idx)?;
                }
            }
        }
    }
}

/// Latency-minimal feasible plan under the capacity bound and the windowed
/// SLO cap, or `Infeasible`.
pub fn solve(
    batch: &[RequestState],
    paused: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
    current_step: u64,
) -> Result<Solution, CoreError> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let mut ranked = RankedCandidates::new(batch, profile);
    while let Some(cand) = ranked.next_candidate()? {
        // Later candidates are no faster at step 0, and future steps are no
        // faster than step 0, so this bound failing rules out the rest.
        let floor = constant_latency_failures(
            cand.latency.total_latency_ms,
            batch,
            paused,
            slo,
            slo.window_min,
        );
        if f64::from(floor) / slo.window_min as f64 > slo.violation_cap {
            break;
        }
        let short = forecast_violations(
            &cand.placement,
            batch,
            paused,
            profile,
            slo,
            slo.window_min,
        )?;
        if !short
            .window_average(slo.window_min)
            .is_some_and(|avg| avg <= slo.violation_cap)
        {
            continue;
        }
        let long = forecast_violations(
            &cand.placement,
            batch,
            paused,
            profile,
            slo,
            slo.window_max,
        )?;
        let mut delta = slo.window_min;
        while delta < slo.window_max
            && long
                .window_average(delta + 1)
                .is_some_and(|avg| avg <= slo.violation_cap)
        {
            delta += 1;
        }
        return Ok(Solution::Feasible(Plan {
            placement: cand.placement,
            request_ids: batch.iter().map(|r| r.id).collect(),
            predicted_latency: cand.latency,
            decode_window: delta,
            creation_step: current_step,
            expiry_step: current_step + delta as u64,
            feasible: true,
        }));
    }
    Ok(Solution::Infeasible)
}

/// The distance tuple `solve` would pick, exposed for diagnostics.
pub fn solve_distances(
    batch: &[RequestState],
    paused: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
) -> Result<Option<Vec<DistanceChoice>>, CoreError> {
    let Solution::Feasible(plan) = solve(batch, paused, profile, slo, 0)? else {
        return Ok(None);
    };
    let layers = profile.num_layers;
    Ok(Some(
        (0..plan.placement.rows())
            .map(|r| {
                enumerate_distances(layers)
                    .into_iter()
                    .find(|d| d.row(layers) == plan.placement.row(r))
                    .expect("plan rows come from the distance alphabet")
            })
            .collect(),
    ))
}

/// `solve` on a copy of the batch advanced by one token, so the plan is
/// ready when the next step starts.
pub fn solve_one_step_ahead(
    batch: &[RequestState],
    paused: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
    current_step: u64,
) -> Result<Solution, CoreError> {
    let advanced = advance_one_token(batch, profile.block_size);
    solve(&advanced, paused, profile, slo, current_step + 1)
}

pub fn advance_one_token(batch: &[RequestState], block_size: u32) -> Vec<RequestState> {
    batch
        .iter()
        .cloned()
        .map(|mut r| {
            if r.status == RequestStatus::Decoding && !r.is_complete() {
                r.record_token(block_size);
            }
            r
        })
        .collect()
}

/// Fastest placement that fits in memory, ignoring the SLO cap. Used when a
/// lone request cannot meet the cap and there is nothing left to pause.
pub fn best_effort_plan(
    batch: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
    current_step: u64,
) -> Result<Option<Plan>, CoreError> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let Some(best) = RankedCandidates::new(batch, profile).next_candidate()? else {
        return Ok(None);
    };
    let horizon = forecast_violations(&best.placement, batch, &[], profile, slo, slo.window_min)?;
    let delta = horizon.per_step_failures.len().max(1);
    Ok(Some(Plan {
        placement: best.placement,
        request_ids: batch.iter().map(|r| r.id).collect(),
        predicted_latency: best.latency,
        decode_window: delta,
        creation_step: current_step,
        expiry_step: current_step + delta as u64,
        feasible: false,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_alphabet() {
        assert_eq!(offload_counts(32).len(), 9);
        assert_eq!(offload_counts(4), BTreeSet::from([1, 2]));
        assert_eq!(
            enumerate_distances(1),
            vec![DistanceChoice::Resident, DistanceChoice::Stride(1)]
        );
        assert_eq!(enumerate_distances(4).len(), 4);
        assert_eq!(
            non_endpoint_distances(9),
            vec![
                DistanceChoice::Stride(5),
                DistanceChoice::Stride(4),
                DistanceChoice::Stride(3),
                DistanceChoice::Stride(2)
            ]
        );
    }

    #[test]
    fn stride_rows() {
        let row = DistanceChoice::Stride(3).row(9);
        let offloaded: Vec<usize> = (0..9).filter(|&l| !row[l]).map(|l| l + 1).collect();
        assert_eq!(offloaded, vec![3, 6, 9]);
        assert_eq!(DistanceChoice::Stride(3).offload_count(9), 3);
        assert_eq!(DistanceChoice::from_stride(10, 9), DistanceChoice::Resident);
        assert!(DistanceChoice::Resident.row(9).iter().all(|&x| x));
    }

    #[test]
    fn candidate_counts() {
        let batch = vec![RequestState::decoding(1, 10, 16)];
        assert_eq!(candidate_space(&batch, 4).count(), 4);
        assert_eq!(candidate_space(&batch, 1).count(), 2);
        let four: Vec<_> = (0..4).map(|i| RequestState::decoding(i, 10, 16)).collect();
        let space = CandidateSpace::new(non_endpoint_distances(32), four.len(), 32);
        assert_eq!(space.cardinality(), 6561);
        assert_eq!(space.count(), 6561);
    }

    #[test]
    fn forecast_all_clear_below_target() {
        let profile = SystemProfile::default();
        let slo = SloConfig::new(1000.0, 1000.0);
        let batch = vec![RequestState::decoding(1, 100, 16)];
        let m = PlacementMatrix::resident(1, profile.num_layers);
        let f = forecast_violations(&m, &batch, &[], &profile, &slo, 10).unwrap();
        assert_eq!(f.per_step_failures, vec![0; 10]);
        assert_eq!(f.truncated_at, None);
    }

    #[test]
    fn paused_request_fails_once_dry() {
        let profile = SystemProfile::default();
        let slo = SloConfig::new(1000.0, 1000.0);
        let batch = vec![RequestState::decoding(1, 100, 16)];
        let mut paused = RequestState::decoding(2, 100, 16);
        paused.status = RequestStatus::Paused;
        let m = PlacementMatrix::resident(1, profile.num_layers);
        let f = forecast_violations(&m, &batch, &[paused], &profile, &slo, 5).unwrap();
        assert_eq!(f.per_step_failures, vec![1; 5]);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = SystemProfile::default();
        let s = SloConfig::new(10.0, 10.0);
        assert_eq!(solve(&[], &[], &p, &s, 0), Err(CoreError::EmptyBatch));
    }

    #[test]
    fn slack_budget_keeps_everything_resident() {
        let profile = SystemProfile {
            gpu_block_budget: 1_000_000,
            ..SystemProfile::default()
        };
        let slo = SloConfig::new(1000.0, 1000.0);
        let batch: Vec<_> = (0..3).map(|i| RequestState::decoding(i, 500, 16)).collect();
        let plan = solve(&batch, &[], &profile, &slo, 7).unwrap().into_plan().unwrap();
        assert_eq!(plan.placement.total_offloaded_layers(), 0);
        assert_eq!(plan.predicted_latency.total_stall_ms, 0.0);
        assert_eq!(plan.expiry_step, 7 + plan.decode_window as u64);
        assert_eq!(plan.decode_window, slo.window_max);
    }

    #[test]
    fn one_step_ahead_crosses_block_boundary() {
        let profile = SystemProfile::default();
        let batch = vec![RequestState::decoding(1, 64, 16)];
        let advanced = advance_one_token(&batch, 16);
        assert_eq!(advanced[0].blocks_per_layer, batch[0].blocks_per_layer + 1);
        let mid = vec![RequestState::decoding(1, 70, 16)];
        let slo = SloConfig::new(1000.0, 1000.0);
        let a = solve(&mid, &[], &profile, &slo, 3).unwrap().into_plan().unwrap();
        let b = solve_one_step_ahead(&mid, &[], &profile, &slo, 3)
            .unwrap()
            .into_plan()
            .unwrap();
        assert_eq!(a.placement, b.placement);
        assert_eq!(b.creation_step, 4);
    }
}
