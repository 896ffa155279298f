//! Domain types shared by the latency model, planner, controller and engine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::latency::LatencyBreakdown;

pub type RequestId = u64;

/// Tokens per KV block.
pub const DEFAULT_BLOCK_SIZE: u32 = 16;

/// Number of fixed-size blocks needed to hold `tokens` tokens.
pub fn blocks_for_tokens(tokens: u64, block_size: u32) -> u64 {
    debug_assert!(block_size >= 1);
    tokens.div_ceil(u64::from(block_size))
}

/// Per-layer compute time for a batch holding `total_batch_tokens` tokens.
pub fn per_layer_compute(profile: &SystemProfile, total_batch_tokens: u64) -> f64 {
    profile.compute_base_ms + profile.compute_per_token_ms * total_batch_tokens as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Queued,
    Prefilling,
    Decoding,
    Paused,
    Finished,
}

impl RequestStatus {
    /// Lifecycle edges. `Decoding -> Queued` is the reactive-preemption path
    /// used by baseline policies; `Prefilling -> Queued` un-admits a request
    /// chosen as a victim before its prefill ran.
    pub fn can_transition_to(self, next: RequestStatus) -> bool {
        use RequestStatus::*;
        matches!(
            (self, next),
            (Queued, Prefilling)
                | (Prefilling, Decoding)
                | (Prefilling, Queued)
                | (Decoding, Paused)
                | (Paused, Decoding)
                | (Decoding, Finished)
                | (Decoding, Queued)
        )
    }
}

/// One serving request as seen by the planner and the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestState {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub prompt_tokens: u64,
    pub target_output_tokens: u64,
    pub generated_tokens: u64,
    /// KV blocks held per layer (`b_r`).
    pub blocks_per_layer: u64,
    /// Tokens generated but not yet delivered to the client.
    pub deposit_balance: u64,
    /// Time of the last delivered token, if any.
    pub deposit_delivery_cursor_ms: Option<f64>,
    pub status: RequestStatus,
}

impl RequestState {
    pub fn new(
        id: RequestId,
        arrival_ms: f64,
        prompt_tokens: u64,
        target_output_tokens: u64,
        block_size: u32,
    ) -> Self {
        Self {
            id,
            arrival_ms,
            prompt_tokens,
            target_output_tokens,
            generated_tokens: 0,
            blocks_per_layer: blocks_for_tokens(prompt_tokens, block_size),
            deposit_balance: 0,
            deposit_delivery_cursor_ms: None,
            status: RequestStatus::Queued,
        }
    }

    /// A request already decoding with `context_tokens` tokens of KV and
    /// plenty of output left. Handy for planner-level experiments.
    pub fn decoding(id: RequestId, context_tokens: u64, block_size: u32) -> Self {
        let mut r = Self::new(id, 0.0, context_tokens, u64::MAX / 2, block_size);
        r.status = RequestStatus::Decoding;
        r
    }

    pub fn context_tokens(&self) -> u64 {
        self.prompt_tokens + self.generated_tokens
    }

    pub fn remaining_output(&self) -> u64 {
        self.target_output_tokens - self.generated_tokens
    }

    pub fn is_complete(&self) -> bool {
        self.generated_tokens >= self.target_output_tokens
    }

    /// Appends one generated token and refreshes the block count.
    pub fn record_token(&mut self, block_size: u32) {
        debug_assert!(self.generated_tokens < self.target_output_tokens);
        self.generated_tokens += 1;
        self.blocks_per_layer = blocks_for_tokens(self.context_tokens(), block_size);
    }

    pub fn set_status(&mut self, next: RequestStatus) -> Result<(), CoreError> {
        if !self.status.can_transition_to(next) {
            return Err(CoreError::IllegalTransition {
                id: self.id,
                from: self.status,
                to: next,
            });
        }
        self.status = next;
        Ok(())
    }

    pub fn check_invariants(&self, block_size: u32) -> bool {
        self.blocks_per_layer == blocks_for_tokens(self.context_tokens(), block_size)
            && self.generated_tokens <= self.target_output_tokens
            && self.deposit_balance <= self.generated_tokens
    }
}

/// Binary KV placement: `true` keeps request `r`'s layer on the GPU.
///
/// Layers are 0-indexed here; the stride rules in the planner talk about
/// 1-indexed layer numbers and convert at the boundary.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlacementMatrix {
    rows: usize,
    layers: usize,
    entries: Vec<bool>,
}

impl PlacementMatrix {
    pub fn resident(rows: usize, layers: usize) -> Self {
        Self {
            rows,
            layers,
            entries: vec![true; rows * layers],
        }
    }

    pub fn offloaded(rows: usize, layers: usize) -> Self {
        Self {
            rows,
            layers,
            entries: vec![false; rows * layers],
        }
    }

    /// Builds a matrix from 0/1 rows, validating shape and values.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, CoreError> {
        let layers = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(rows.len() * layers);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != layers {
                return Err(CoreError::RaggedPlacement {
                    row: r,
                    got: row.len(),
                    expected: layers,
                });
            }
            for (l, &v) in row.iter().enumerate() {
                match v {
                    0 => entries.push(false),
                    1 => entries.push(true),
                    value => {
                        return Err(CoreError::NonBinaryEntry {
                            row: r,
                            layer: l,
                            value,
                        })
                    }
                }
            }
        }
        Ok(Self {
            rows: rows.len(),
            layers,
            entries,
        })
    }

    pub fn from_bool_rows(rows: Vec<Vec<bool>>, layers: usize) -> Self {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * layers);
        for row in rows {
            assert_eq!(row.len(), layers, "ragged placement row");
            entries.extend(row);
        }
        Self {
            rows: n,
            layers,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn is_resident(&self, row: usize, layer: usize) -> bool {
        self.entries[row * self.layers + layer]
    }

    pub fn set(&mut self, row: usize, layer: usize, resident: bool) {
        self.entries[row * self.layers + layer] = resident;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.entries[row * self.layers..(row + 1) * self.layers]
    }

    pub fn offloaded_layers(&self, row: usize) -> usize {
        self.row(row).iter().filter(|&&x| !x).count()
    }

    pub fn total_offloaded_layers(&self) -> usize {
        self.entries.iter().filter(|&&x| !x).count()
    }

    /// 0/1 view, one `Vec` per request.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&x| u8::from(x)).collect())
            .collect()
    }

    pub fn ensure_shape(&self, batch: usize, layers: usize) -> Result<(), CoreError> {
        if self.rows != batch || (self.layers != layers && batch > 0) {
            return Err(CoreError::DimensionMismatch {
                rows: self.rows,
                layers: self.layers,
                batch,
                expected_layers: layers,
            });
        }
        Ok(())
    }

    /// Copy with only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut entries = Vec::with_capacity(rows.len() * self.layers);
        for &r in rows {
            entries.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            layers: self.layers,
            entries,
        }
    }
}

/// Calibrated cost model for one serving instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemProfile {
    pub num_layers: usize,
    pub compute_base_ms: f64,
    pub compute_per_token_ms: f64,
    pub bandwidth_blocks_per_ms: f64,
    pub gpu_block_budget: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u32,
    pub prefill_per_token_ms: f64,
    #[serde(default = "default_ewma_decay")]
    pub ewma_decay: f64,
}

fn default_block_size() -> u32 {
    DEFAULT_BLOCK_SIZE
}

fn default_ewma_decay() -> f64 {
    0.5
}

impl Default for SystemProfile {
    /// A 32-layer model whose GPU budget holds about 8K tokens of KV with
    /// nothing offloaded. A link moving 100 blocks per ms hides a few
    /// offloaded layers of a typical four-request batch behind compute.
    fn default() -> Self {
        Self {
            num_layers: 32,
            compute_base_ms: 0.8,
            compute_per_token_ms: 0.000_1,
            bandwidth_blocks_per_ms: 100.0,
            gpu_block_budget: 16_384,
            block_size: DEFAULT_BLOCK_SIZE,
            prefill_per_token_ms: 0.02,
            ewma_decay: 0.5,
        }
    }
}

impl SystemProfile {
    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::InvalidProfile(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if !(self.compute_base_ms > 0.0) || !self.compute_base_ms.is_finite() {
            return bad("compute_base_ms must be positive");
        }
        // A zero slope is allowed: it models flat per-layer compute.
        if !(self.compute_per_token_ms >= 0.0) || !self.compute_per_token_ms.is_finite() {
            return bad("compute_per_token_ms must be non-negative");
        }
        if !(self.bandwidth_blocks_per_ms > 0.0) || !self.bandwidth_blocks_per_ms.is_finite() {
            return Err(CoreError::NonPositiveBandwidth(self.bandwidth_blocks_per_ms));
        }
        if self.gpu_block_budget == 0 {
            return bad("gpu_block_budget must be at least 1");
        }
        if self.block_size == 0 {
            return bad("block_size must be at least 1");
        }
        if !(self.prefill_per_token_ms > 0.0) || !self.prefill_per_token_ms.is_finite() {
            return bad("prefill_per_token_ms must be positive");
        }
        if !(self.ewma_decay > 0.0 && self.ewma_decay <= 1.0) {
            return bad("ewma_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// Time to move one block across the interconnect.
    pub fn block_transfer_ms(&self) -> f64 {
        1.0 / self.bandwidth_blocks_per_ms
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CoreError> {
        let profile: SystemProfile =
            toml::from_str(text).map_err(|e| CoreError::ProfileParse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::ProfileParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Latency targets and planner knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloConfig {
    pub tbt_target_ms: f64,
    pub tpot_target_ms: f64,
    /// Tolerated SLO failures per decode step, averaged over the window (`α`).
    pub violation_cap: f64,
    pub window_min: usize,
    pub window_max: usize,
    /// Relative latency error that counts as a profile mismatch (`θ`).
    pub profile_mismatch_threshold: f64,
}

impl SloConfig {
    pub fn new(tbt_target_ms: f64, tpot_target_ms: f64) -> Self {
        Self {
            tbt_target_ms,
            tpot_target_ms,
            violation_cap: 1.0,
            window_min: 4,
            window_max: 64,
            profile_mismatch_threshold: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: &str| Err(CoreError::InvalidSlo(m.to_string()));
        if !(self.tbt_target_ms > 0.0) {
            return bad("tbt_target must be positive");
        }
        if !(self.tpot_target_ms > 0.0) {
            return bad("tpot_target must be positive");
        }
        if self.window_min < 1 {
            return bad("window_min must be at least 1");
        }
        if self.window_min > self.window_max {
            return bad("window_min must not exceed window_max");
        }
        if !(self.violation_cap >= 0.0) {
            return bad("violation_cap must be non-negative");
        }
        if !(self.profile_mismatch_threshold >= 0.0) {
            return bad("profile_mismatch_threshold must be non-negative");
        }
        Ok(())
    }
}

/// A placement chosen by a planner, with its predicted cost and lifetime.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub placement: PlacementMatrix,
    /// Request ids, one per placement row.
    pub request_ids: Vec<RequestId>,
    pub predicted_latency: LatencyBreakdown,
    pub decode_window: usize,
    pub creation_step: u64,
    pub expiry_step: u64,
    /// False for best-effort plans that fit in memory but break the SLO cap.
    pub feasible: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_arithmetic() {
        assert_eq!(blocks_for_tokens(0, 16), 0);
        assert_eq!(blocks_for_tokens(48, 16), 3);
        assert_eq!(blocks_for_tokens(49, 16), 4);
        assert_eq!(blocks_for_tokens(17, 16), 2);
        assert_eq!(blocks_for_tokens(16, 16), 1);
        assert_eq!(blocks_for_tokens(5, 1), 5);
    }

    #[test]
    fn linear_compute_model() {
        let mut p = SystemProfile {
            compute_base_ms: 1.0,
            compute_per_token_ms: 0.0,
            ..SystemProfile::default()
        };
        assert_eq!(per_layer_compute(&p, 123_456), 1.0);
        p.compute_per_token_ms = 0.0005;
        assert_eq!(per_layer_compute(&p, 0), 1.0);
        p.compute_base_ms = 0.5;
        p.compute_per_token_ms = 0.001;
        assert!((per_layer_compute(&p, 2000) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn placement_validation() {
        assert!(PlacementMatrix::from_rows(&[vec![1, 0], vec![1]]).is_err());
        assert_eq!(
            PlacementMatrix::from_rows(&[vec![1, 2]]),
            Err(CoreError::NonBinaryEntry {
                row: 0,
                layer: 1,
                value: 2
            })
        );
        let m = PlacementMatrix::from_rows(&[vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.layers(), 3);
        assert!(!m.is_resident(1, 0));
        assert_eq!(m.total_offloaded_layers(), 3);
        assert_eq!(m.to_rows(), vec![vec![1, 0, 1], vec![0, 0, 1]]);
        assert!(m.ensure_shape(2, 3).is_ok());
        assert!(m.ensure_shape(3, 3).is_err());
    }

    #[test]
    fn status_lifecycle() {
        let mut r = RequestState::new(1, 0.0, 10, 5, 16);
        assert!(r.set_status(RequestStatus::Decoding).is_err());
        r.set_status(RequestStatus::Prefilling).unwrap();
        r.set_status(RequestStatus::Decoding).unwrap();
        r.set_status(RequestStatus::Paused).unwrap();
        assert!(r.set_status(RequestStatus::Finished).is_err());
        r.set_status(RequestStatus::Decoding).unwrap();
        r.set_status(RequestStatus::Finished).unwrap();
        assert!(r.set_status(RequestStatus::Decoding).is_err());
    }

    #[test]
    fn token_growth_tracks_blocks() {
        let mut r = RequestState::new(1, 0.0, 47, 10, 16);
        assert_eq!(r.blocks_per_layer, 3);
        r.record_token(16);
        assert_eq!(r.blocks_per_layer, 3);
        r.record_token(16);
        assert_eq!(r.blocks_per_layer, 4);
        assert!(r.check_invariants(16));
    }

    #[test]
    fn profile_toml_roundtrip_and_validation() {
        let p = SystemProfile::default();
        let text = p.to_toml_string();
        assert!(text.contains("bandwidth_blocks_per_ms"));
        assert_eq!(SystemProfile::from_toml_str(&text).unwrap(), p);
        let bad = text.replace("bandwidth_blocks_per_ms = 100.0", "bandwidth_blocks_per_ms = 0.0");
        assert!(SystemProfile::from_toml_str(&bad).is_err());
        assert!(SystemProfile::from_toml_str("num_layers = 3").is_err());
    }

    #[test]
    fn slo_validation() {
        assert!(SloConfig::new(50.0, 50.0).validate().is_ok());
        let mut s = SloConfig::new(50.0, 50.0);
        s.window_min = 10;
        s.window_max = 5;
        assert!(s.validate().is_err());
        assert!(SloConfig::new(0.0, 1.0).validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blocks_monotone_and_exact(t in 0u64..100_000, bs in 1u32..64) {
                prop_assert!(blocks_for_tokens(t, bs) <= blocks_for_tokens(t + 1, bs));
                let k = t / u64::from(bs);
                prop_assert_eq!(blocks_for_tokens(k * u64::from(bs), bs), k);
            }
        }
    }
}
