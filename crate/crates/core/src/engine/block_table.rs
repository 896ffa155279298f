use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{PlacementMatrix, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Gpu,
    Host,
    /// Still on the GPU but owned by a paused request; evicted on demand.
    Removable,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockTableError {
    #[error("plan needs {needed} blocks but only {budget} fit on the GPU")]
    CapacityExceeded { needed: u64, budget: u64 },
    #[error("request {0} is not in the block table")]
    Unknown(RequestId),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    blocks: u64,
    layers: Vec<Location>,
}

/// Per-request, per-layer KV locations plus the prefetch buffer reservation.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTable {
    num_layers: usize,
    budget: u64,
    buffer: u64,
    entries: BTreeMap<RequestId, Entry>,
    /// Paused requests, oldest first.
    paused: Vec<RequestId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApplyOutcome {
    /// Blocks that must move host -> GPU before the next step.
    pub fetched_blocks: u64,
    pub evicted: Vec<(RequestId, usize)>,
}

impl BlockTable {
    pub fn new(num_layers: usize, budget: u64) -> Self {
        Self {
            num_layers,
            budget,
            buffer: 0,
            entries: BTreeMap::new(),
            paused: Vec::new(),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn buffer(&self) -> u64 {
        self.buffer
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn location(&self, id: RequestId, layer: usize) -> Option<Location> {
        self.entries.get(&id).map(|e| e.layers[layer])
    }

    fn count(&self, pred: impl Fn(Location) -> bool) -> u64 {
        self.entries
            .values()
            .map(|e| e.blocks * e.layers.iter().filter(|&&l| pred(l)).count() as u64)
            .sum()
    }

    /// Blocks physically on the GPU, removable ones included.
    pub fn gpu_blocks(&self) -> u64 {
        self.count(|l| l != Location::Host)
    }

    pub fn removable_blocks(&self) -> u64 {
        self.count(|l| l == Location::Removable)
    }

    pub fn usage(&self) -> u64 {
        self.gpu_blocks() + self.buffer
    }

    pub fn within_budget(&self) -> bool {
        self.usage() <= self.budget
    }

    pub fn set_blocks(&mut self, id: RequestId, blocks: u64) -> Result<(), BlockTableError> {
        self.entries
            .get_mut(&id)
            .ok_or(BlockTableError::Unknown(id))?
            .blocks = blocks;
        Ok(())
    }

    pub fn set_buffer(&mut self, blocks: u64) {
        self.buffer = blocks;
    }

    pub fn remove(&mut self, id: RequestId) {
        self.entries.remove(&id);
        self.paused.retain(|&p| p != id);
    }

    pub fn mark_paused(&mut self, id: RequestId) -> Result<(), BlockTableError> {
        let e = self.entries.get_mut(&id).ok_or(BlockTableError::Unknown(id))?;
        for l in &mut e.layers {
            if *l == Location::Gpu {
                *l = Location::Removable;
            }
        }
        self.paused.retain(|&p| p != id);
        self.paused.push(id);
        Ok(())
    }

    /// Drops the paused mark; layers stay removable until the next plan
    /// claims or releases them.
    pub fn mark_resumed(&mut self, id: RequestId) {
        self.paused.retain(|&p| p != id);
    }

    /// Evicts removable layers, most recently paused request first and
    /// highest layer first, until `usage() <= budget` or nothing is left.
    pub fn evict_until_fits(&mut self) -> Vec<(RequestId, usize)> {
        let mut evicted = Vec::new();
        let order: Vec<RequestId> = self.paused.iter().rev().copied().collect();
        for id in order {
            for layer in (0..self.num_layers).rev() {
                if self.within_budget() {
                    return evicted;
                }
                let e = self.entries.get_mut(&id).expect("paused ids are tracked");
                if e.layers[layer] == Location::Removable {
                    e.layers[layer] = Location::Host;
                    evicted.push((id, layer));
                }
            }
        }
        evicted
    }

    /// Installs `placement` for the requests `ids` (one per row).
    ///
    /// Host -> GPU moves are counted for the reconfiguration charge; layers
    /// of requests new to the table are written in place at no charge.
    /// Paused requests' removable layers are evicted only as needed.
    pub fn apply_plan(
        &mut self,
        ids: &[RequestId],
        blocks: &[u64],
        placement: &PlacementMatrix,
        buffer: u64,
    ) -> Result<ApplyOutcome, BlockTableError> {
        debug_assert_eq!(ids.len(), placement.rows());
        let mut next = self.clone();
        let mut fetched_blocks = 0;
        for (row, (&id, &b)) in ids.iter().zip(blocks).enumerate() {
            let target: Vec<Location> = placement
                .row(row)
                .iter()
                .map(|&res| if res { Location::Gpu } else { Location::Host })
                .collect();
            match next.entries.get_mut(&id) {
                Some(e) => {
                    e.blocks = b;
                    for (cur, &want) in e.layers.iter_mut().zip(&target) {
                        if *cur == Location::Host && want == Location::Gpu {
                            fetched_blocks += b;
                        }
                        *cur = want;
                    }
                }
                None => {
                    next.entries.insert(
                        id,
                        Entry {
                            blocks: b,
                            layers: target,
                        },
                    );
                }
            }
            next.paused.retain(|&p| p != id);
        }
        next.buffer = buffer;
        let evicted = next.evict_until_fits();
        if !next.within_budget() {
            return Err(BlockTableError::CapacityExceeded {
                needed: next.usage(),
                budget: self.budget,
            });
        }
        *self = next;
        Ok(ApplyOutcome {
            fetched_blocks,
            evicted,
        })
    }
}
