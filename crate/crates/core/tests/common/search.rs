//! An enumerator over the pruned placement space, written without the
//! solver's ranking or pruning shortcuts.

use std::fmt;

use kvplace_core::latency::{capacity_check, decode_latency_for};
use kvplace_core::planner::{forecast_violations, solve, Solution};
use kvplace_core::{PlacementMatrix, RequestState, SloConfig, SystemProfile};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn alphabet(layers: usize) -> Vec<Option<usize>> {
    // None = resident, Some(k) = stride k.
    let mut out = vec![None, Some(1)];
    let mut seen = std::collections::HashSet::new();
    for k in 2..=layers {
        if seen.insert(layers / k) {
            out.push(Some(k));
        }
    }
    out
}

pub fn row_for(choice: Option<usize>, layers: usize) -> Vec<bool> {
    (1..=layers)
        .map(|l| match choice {
            None => true,
            Some(k) => l % k != 0,
        })
        .collect()
}

pub fn fits(rows: &[Vec<bool>], blocks: &[u64], budget: u64) -> bool {
    let layers = rows[0].len();
    let mut resident = 0;
    let mut buf = 0;
    for l in 0..layers {
        let mut off = 0;
        for (r, row) in rows.iter().enumerate() {
            if row[l] {
                resident += blocks[r];
            } else {
                off += blocks[r];
            }
        }
        buf = buf.max(off);
    }
    resident + buf <= budget
}


pub fn enumerate(
    depth: usize,
    acc: &mut Vec<Vec<bool>>,
    alpha: &[Option<usize>],
    check: &mut dyn FnMut(&[Vec<bool>]),
    layers: usize,
    n: usize,
) {
    if depth == n {
        check(acc);
        return;
    }
    for &c in alpha {
        acc.push(row_for(c, layers));
        enumerate(depth + 1, acc, alpha, check, layers, n);
        acc.pop();
    }
}

pub fn satisfies_slo(
    rows: &[Vec<bool>],
    batch: &[RequestState],
    profile: &SystemProfile,
    slo: &SloConfig,
) -> bool {
    let m = PlacementMatrix::from_bool_rows(rows.to_vec(), profile.num_layers);
    let f = forecast_violations(&m, batch, &[], profile, slo, slo.window_min).unwrap();
    f.per_step_failures.len() == slo.window_min
        && f.per_step_failures.iter().sum::<u32>() as f64 / slo.window_min as f64
            <= slo.violation_cap
}

pub struct Instance {
    pub batch: Vec<RequestState>,
    pub profile: SystemProfile,
    pub slo: SloConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_layers: usize, max_batch: usize, max_tokens: u64) -> Instance {
    let layers = rng.gen_range(2..=max_layers);
    let n = rng.gen_range(1..=max_batch);
    let batch: Vec<_> = (0..n)
        .map(|i| {
            let mut r = RequestState::decoding(i as u64, rng.gen_range(1..=max_tokens), 16);
            r.deposit_balance = rng.gen_range(0..3);
            r.generated_tokens = r.deposit_balance;
            r.prompt_tokens -= r.deposit_balance.min(r.prompt_tokens);
            r.blocks_per_layer = kvplace_core::blocks_for_tokens(r.context_tokens(), 16);
            r
        })
        .collect();
    let total: u64 = batch.iter().map(|r| r.blocks_per_layer).sum::<u64>() * layers as u64;
    let min_need: u64 = batch.iter().map(|r| r.blocks_per_layer).sum();
    let budget = rng.gen_range(min_need.max(1)..=total.max(min_need) + 8);
    let profile = SystemProfile {
        num_layers: layers,
        compute_base_ms: rng.gen_range(0.2..2.0),
        compute_per_token_ms: rng.gen_range(0.0..0.001),
        bandwidth_blocks_per_ms: rng.gen_range(0.5..8.0),
        gpu_block_budget: budget,
        ..SystemProfile::default()
    };
    let resident_latency = profile.num_layers as f64
        * kvplace_core::per_layer_compute(
            &profile,
            batch.iter().map(RequestState::context_tokens).sum(),
        );
    let mut slo = SloConfig::new(
        resident_latency * rng.gen_range(0.8..2.5),
        resident_latency * 2.0,
    );
    slo.window_min = rng.gen_range(1..=4);
    slo.window_max = slo.window_min + rng.gen_range(0..=20);
    slo.violation_cap = f64::from(rng.gen_range(0..=1));
    Instance { batch, profile, slo }
}


fn batch_comp(batch: &[RequestState], profile: &SystemProfile) -> f64 {
    kvplace_core::per_layer_compute(profile, batch.iter().map(RequestState::context_tokens).sum())
}

fn latency_of(rows: &[Vec<bool>], blocks: &[u64], comp: f64, profile: &SystemProfile) -> f64 {
    let m = PlacementMatrix::from_bool_rows(rows.to_vec(), profile.num_layers);
    decode_latency_for(&m, blocks, comp, profile.bandwidth_blocks_per_ms)
        .unwrap()
        .total_latency_ms
}

/// Lowest latency among feasible placements of the pruned alphabet.
pub fn enumerator_best(inst: &Instance) -> Option<f64> {
    let (batch, profile, slo) = (&inst.batch, &inst.profile, &inst.slo);
    let blocks: Vec<u64> = batch.iter().map(|r| r.blocks_per_layer).collect();
    let comp = batch_comp(batch, profile);
    let mut best: Option<f64> = None;
    let alpha = alphabet(profile.num_layers);
    let mut check = |rows: &[Vec<bool>]| {
        if !fits(rows, &blocks, profile.gpu_block_budget) || !satisfies_slo(rows, batch, profile, slo) {
            return;
        }
        let lat = latency_of(rows, &blocks, comp, profile);
        if best.map_or(true, |b| lat < b) {
            best = Some(lat);
        }
    };
    enumerate(0, &mut Vec::new(), &alpha, &mut check, profile.num_layers, batch.len());
    best
}

/// Runs the solver on `inst` and checks it against the enumerator. Returns
/// whether the instance was feasible.
pub fn check_solver_case(inst: &Instance) -> Result<bool, String> {
    let (batch, profile, slo) = (&inst.batch, &inst.profile, &inst.slo);
    let best = enumerator_best(inst);
    match (solve(batch, &[], profile, slo, 0).map_err(|e| e.to_string())?, best) {
        (Solution::Infeasible, None) => Ok(false),
        (Solution::Feasible(plan), Some(b)) => {
            let cap = capacity_check(&plan.placement, batch, profile.gpu_block_budget).unwrap();
            if !cap.feasible {
                return Err("plan exceeds the block budget".into());
            }
            let f = forecast_violations(&plan.placement, batch, &[], profile, slo, plan.decode_window).unwrap();
            if f.per_step_failures.len() != plan.decode_window {
                return Err("forecast shorter than the decode window".into());
            }
            if f.window_average(plan.decode_window).unwrap() > slo.violation_cap {
                return Err("window average above the cap".into());
            }
            if plan.decode_window < slo.window_min || plan.decode_window > slo.window_max {
                return Err(format!("window {} out of range", plan.decode_window));
            }
            if plan.predicted_latency.total_latency_ms != b {
                return Err(format!(
                    "solver latency {} but enumerator found {b}",
                    plan.predicted_latency.total_latency_ms
                ));
            }
            Ok(true)
        }
        (got, want) => Err(format!("solver {got:?} vs enumerator best {want:?}")),
    }
}

pub struct GapSummary {
    pub compared: usize,
    pub full_better: usize,
    pub median_gap_when_better: f64,
}

impl fmt::Display for GapSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "full-space vs pruned: {} instances, full strictly better in {} ({:.1}%), median gap when better {:.2}%",
            self.compared,
            self.full_better,
            100.0 * self.full_better as f64 / self.compared.max(1) as f64,
            100.0 * self.median_gap_when_better
        )
    }
}

/// Brute force over every 0/1 placement on tiny instances (L <= 6, two
/// requests) against the solver's pruned optimum.
pub fn full_space_gap_study(rng: &mut ChaCha8Rng, instances: usize) -> GapSummary {
    let mut gaps = Vec::new();
    let mut compared = 0;
    for _ in 0..instances {
        let inst = random_instance(rng, 6, 2, 64);
        let (batch, profile, slo) = (&inst.batch, &inst.profile, &inst.slo);
        let Solution::Feasible(plan) = solve(batch, &[], profile, slo, 0).unwrap() else {
            continue;
        };
        compared += 1;
        let blocks: Vec<u64> = batch.iter().map(|r| r.blocks_per_layer).collect();
        let comp = batch_comp(batch, profile);
        let layers = profile.num_layers;
        let bits = layers * batch.len();
        let mut full_best = f64::INFINITY;
        for mask in 0u64..(1 << bits) {
            let rows: Vec<Vec<bool>> = (0..batch.len())
                .map(|r| (0..layers).map(|l| mask >> (r * layers + l) & 1 == 1).collect())
                .collect();
            if !fits(&rows, &blocks, profile.gpu_block_budget) || !satisfies_slo(&rows, batch, profile, slo) {
                continue;
            }
            full_best = full_best.min(latency_of(&rows, &blocks, comp, profile));
        }
        let pruned = plan.predicted_latency.total_latency_ms;
        assert!(full_best <= pruned + 1e-12);
        gaps.push((pruned - full_best) / pruned);
    }
    let mut better: Vec<f64> = gaps.into_iter().filter(|&g| g > 1e-12).collect();
    better.sort_by(f64::total_cmp);
    GapSummary {
        compared,
        full_better: better.len(),
        median_gap_when_better: better.get(better.len() / 2).copied().unwrap_or(0.0),
    }
}
