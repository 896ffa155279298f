#![allow(dead_code)]

//! Test-only oracles, written independently of the library code paths they
//! check.

use num_rational::Ratio;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod search;

pub type Q = Ratio<i128>;

pub fn q(n: i128) -> Q {
    Q::from_integer(n)
}

pub fn to_f64(v: Q) -> f64 {
    *v.numer() as f64 / *v.denom() as f64
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    /// Start of every layer, in block-transfer times.
    pub layer_starts: Vec<Q>,
    pub stalls: Vec<Q>,
    pub total_stall: Q,
    pub total: Q,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Waiting(usize),
    Computing(usize),
    Done,
}

/// Global-clock event stepper. Bandwidth is one block per quantum and every
/// layer computes for `comp` quanta. The clock never skips a quantum
/// boundary, so the run is a sequence of sub-quantum slices in which the
/// active set is constant.
pub fn oracle_decode(resident: &[Vec<bool>], blocks: &[u64], comp: i128) -> OracleRun {
    let n_req = resident.len();
    let layers = resident.first().map_or(0, Vec::len);
    let mut stream: Vec<Option<(usize, Q)>> = vec![None; n_req];
    let mut fetched = vec![vec![false; layers]; n_req];
    let mut t = q(0);
    let mut layer_starts = vec![q(0); layers];
    let mut stalls = vec![q(0); layers];
    let mut boundary_time = q(0);
    let mut compute_end = q(0);

    let launch = |l: usize, stream: &mut Vec<Option<(usize, Q)>>, fetched: &mut Vec<Vec<bool>>| {
        for r in 0..n_req {
            if stream[r].is_some() || blocks[r] == 0 {
                continue;
            }
            let next = (0..layers).find(|&j| !resident[r][j] && !fetched[r][j]);
            if let Some(j) = next {
                if j == l || resident[r][l] {
                    fetched[r][j] = true;
                    stream[r] = Some((j, q(blocks[r] as i128)));
                }
            }
        }
    };

    let mut phase = if layers == 0 { Phase::Done } else { Phase::Waiting(0) };
    if layers > 0 {
        launch(0, &mut stream, &mut fetched);
    }
    let mut guard = 0u64;
    while phase != Phase::Done {
        guard += 1;
        assert!(guard < 10_000_000, "oracle did not terminate");
        // Layer may start?
        if let Phase::Waiting(l) = phase {
            let blocked = stream.iter().flatten().any(|&(d, _)| d == l);
            if !blocked {
                layer_starts[l] = t;
                stalls[l] = t - boundary_time;
                compute_end = t + q(comp);
                phase = Phase::Computing(l);
                continue;
            }
        }
        let active = stream.iter().flatten().count() as i128;
        let mut next = t.floor() + q(1);
        if let Phase::Computing(_) = phase {
            if compute_end < next {
                next = compute_end;
            }
        }
        for (_, rem) in stream.iter().flatten() {
            let fin = t + *rem * q(active);
            if fin < next {
                next = fin;
            }
        }
        let dt = next - t;
        if active > 0 {
            let share = dt / q(active);
            for s in stream.iter_mut() {
                if let Some((_, rem)) = s {
                    *rem -= share;
                    if *rem == q(0) {
                        *s = None;
                    }
                }
            }
        }
        t = next;
        if let Phase::Computing(l) = phase {
            if t == compute_end {
                if l + 1 == layers {
                    phase = Phase::Done;
                } else {
                    boundary_time = t;
                    launch(l + 1, &mut stream, &mut fetched);
                    phase = Phase::Waiting(l + 1);
                }
            }
        }
    }
    let total_stall = stalls.iter().fold(q(0), |a, &b| a + b);
    OracleRun {
        layer_starts,
        stalls,
        total_stall,
        total: compute_end,
    }
}

/// Plain entrywise weighted diff, `(host_to_gpu, gpu_to_host)`.
pub fn matrix_diff(old: &[Vec<bool>], new: &[Vec<bool>], blocks: &[u64]) -> (u64, u64) {
    let mut up = 0;
    let mut down = 0;
    for r in 0..old.len() {
        for l in 0..old[r].len() {
            if !old[r][l] && new[r][l] {
                up += blocks[r];
            }
            if old[r][l] && !new[r][l] {
                down += blocks[r];
            }
        }
    }
    (up, down)
}

/// 1-indexed offloaded layers -> resident row of length `layers`.
pub fn row_offloading(layers: usize, offloaded: &[usize]) -> Vec<bool> {
    (1..=layers).map(|l| !offloaded.contains(&l)).collect()
}

/// Up to 12 layers, 3 requests and 8 blocks per request, with a random
/// compute time in quanta.
pub fn random_latency_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<bool>>, Vec<u64>, i128) {
    let layers = rng.gen_range(1..=12);
    let n = rng.gen_range(1..=3);
    let p_off: f64 = rng.gen_range(0.0..1.0);
    let rows = (0..n)
        .map(|_| (0..layers).map(|_| !rng.gen_bool(p_off)).collect())
        .collect();
    let blocks = (0..n).map(|_| rng.gen_range(1..=8)).collect();
    let comp = rng.gen_range(1..=10);
    (rows, blocks, comp)
}

/// The two-request, nine-layer scenario: 70-block GPU, three blocks per
/// layer-compute time.
pub mod nine_layer {
    use super::row_offloading;
    use kvplace_core::{RequestState, SloConfig, SystemProfile};

    pub const LAYERS: usize = 9;
    pub const BUDGET: u64 = 70;
    pub const STEP1_BLOCKS: [u64; 2] = [3, 6];
    pub const STEP16_BLOCKS: [u64; 2] = [4, 6];
    /// Context tokens at step 1; request 1 crosses 48 tokens at step 16.
    pub const STEP1_TOKENS: [u64; 2] = [34, 81];

    pub fn placement_a() -> Vec<Vec<bool>> {
        vec![row_offloading(LAYERS, &[3, 6, 9]), row_offloading(LAYERS, &[3, 6, 9])]
    }

    pub fn placement_b() -> Vec<Vec<bool>> {
        vec![row_offloading(LAYERS, &[]), row_offloading(LAYERS, &[3, 6, 9])]
    }

    pub fn placement_c() -> Vec<Vec<bool>> {
        vec![row_offloading(LAYERS, &[4, 8]), row_offloading(LAYERS, &[3, 6, 9])]
    }

    pub fn nine_layer_profile() -> SystemProfile {
        SystemProfile {
            num_layers: LAYERS,
            compute_base_ms: 1.0,
            compute_per_token_ms: 0.0,
            bandwidth_blocks_per_ms: 3.0,
            gpu_block_budget: BUDGET,
            ..SystemProfile::default()
        }
    }

    pub fn nine_layer_slo() -> SloConfig {
        let mut slo = SloConfig::new(100.0, 100.0);
        slo.window_min = 1;
        slo
    }

    pub fn nine_layer_batch(advance: u64) -> Vec<RequestState> {
        vec![
            RequestState::decoding(1, STEP1_TOKENS[0] + advance, 16),
            RequestState::decoding(2, STEP1_TOKENS[1] + advance, 16),
        ]
    }
}
