//! Deterministic discrete-event serving engine.
//!
//! The GPU runs one thing at a time: a prefill or a decode step. Between
//! them, at a step boundary, the engine admits queued requests, asks the
//! active policy for a placement, applies pause/resume or preemption, and
//! starts the next unit of work. Time is integer microseconds throughout.

pub mod block_table;
pub mod deposit;
pub mod events;
pub mod metrics;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::controller::{
    check_triggers, ewma_update, select_victim_with, try_resume, Trigger, TriggerState, VictimRule,
};
use crate::error::CoreError;
use crate::latency::{capacity_check_for, decode_latency_for, prefetch_buffer_for};
use crate::planner::{best_effort_plan, solve, DistanceChoice, Solution};
use crate::policies::{
    plan_deepspeed, plan_dynamic_heuristic, plan_flexgen_plus, plan_slo_aware_uniform,
    select_offline_stride, uniform_placement, PolicyError, PolicyKind,
};
use crate::types::{
    blocks_for_tokens, per_layer_compute, PlacementMatrix, Plan, RequestId, RequestState,
    RequestStatus, SloConfig, SystemProfile,
};
use crate::workload::{Trace, WorkloadError};

pub use block_table::{ApplyOutcome, BlockTable, BlockTableError, Location};
pub use deposit::{Delivery, PendingToken, TokenDeposit};
pub use events::{Event, EventKind, EventQueue};
pub use metrics::{
    audit_deposits, collect_metrics, percentile, DepositAudit, LogRecord, MetricsReport,
    RequestMetrics, RunLog, TokenRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Fcfs,
    /// Shortest remaining output first, using the trace's true lengths.
    Srtf,
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheduler::Fcfs => "fcfs",
            Scheduler::Srtf => "srtf",
        })
    }
}

impl FromStr for Scheduler {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fcfs" => Ok(Scheduler::Fcfs),
            "srtf" => Ok(Scheduler::Srtf),
            _ => Err(format!("unknown scheduler `{s}` (expected fcfs or srtf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub policy: PolicyKind,
    pub max_batch: usize,
    /// Cap on the summed context tokens of admitted requests.
    pub token_cap: u64,
    pub scheduler: Scheduler,
    /// Pace baseline deliveries through the token deposit too.
    pub deposit_for_baselines: bool,
    pub victim_rule: VictimRule,
    pub seed: u64,
    /// Relative standard deviation of per-step compute and bandwidth noise.
    pub jitter: f64,
    /// Synthetic planner run time; at or above the previous step's length
    /// the new plan lands one step late.
    pub solver_overhead_ms: f64,
    /// Overrides the offline stride of `flexgen_like`.
    pub static_stride: Option<u32>,
    /// Per-request length of the worst case `flexgen_like` provisions for;
    /// defaults to `token_cap / max_batch`.
    pub worst_case_tokens: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Orbit,
            max_batch: 4,
            token_cap: 32_768,
            scheduler: Scheduler::Fcfs,
            deposit_for_baselines: false,
            victim_rule: VictimRule::LargestFootprint,
            seed: 0,
            jitter: 0.0,
            solver_overhead_ms: 0.0,
            static_stride: None,
            worst_case_tokens: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    BlockTable(#[from] BlockTableError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("engine stalled at {0} us with unfinished requests")]
    Stuck(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: RunLog,
}

pub fn us_from_ms(ms: f64) -> u64 {
    (ms * 1e3).round().max(0.0) as u64
}

/// Largest single request whose KV fits on the GPU with nothing offloaded.
pub fn largest_resident_tokens(profile: &SystemProfile) -> u64 {
    profile.gpu_block_budget / profile.num_layers as u64 * u64::from(profile.block_size)
}

/// Decode-step latency of the largest fully resident request.
pub fn base_slo_ms(profile: &SystemProfile) -> f64 {
    profile.num_layers as f64 * per_layer_compute(profile, largest_resident_tokens(profile))
}

/// TBT and TPOT targets at `scale` times the base latency.
pub fn slo_for_scale(profile: &SystemProfile, scale: f64) -> SloConfig {
    let t = base_slo_ms(profile) * scale;
    SloConfig::new(t, t)
}

struct Req {
    state: RequestState,
    deposit: TokenDeposit,
    admit_order: u64,
    needs_prefill: bool,
}

struct Installed {
    ids: Vec<RequestId>,
    placement: PlacementMatrix,
    expiry_step: u64,
}

struct Engine<'a> {
    profile: &'a SystemProfile,
    slo: &'a SloConfig,
    cfg: &'a EngineConfig,
    estimate: SystemProfile,
    trigger: TriggerState,
    now: u64,
    events: EventQueue,
    reqs: Vec<Req>,
    waiting: VecDeque<RequestId>,
    /// Admitted, unpaused, unfinished requests in admission order.
    batch: Vec<RequestId>,
    /// Paused requests, oldest pause first.
    paused: Vec<RequestId>,
    table: BlockTable,
    installed: Option<Installed>,
    deferred: Option<(Plan, bool)>,
    step: u64,
    busy: bool,
    batch_changed: bool,
    freed: bool,
    admissions_blocked: bool,
    pending_charge_blocks: u64,
    last_step_ms: f64,
    observed_ms: f64,
    predicted_ms: f64,
    admit_counter: u64,
    offline_stride: DistanceChoice,
    step_batch: Vec<RequestId>,
    rng: ChaCha8Rng,
    log: RunLog,
}

pub fn run(
    trace: &Trace,
    profile: &SystemProfile,
    slo: &SloConfig,
    config: &EngineConfig,
) -> Result<RunOutput, EngineError> {
    profile.validate()?;
    slo.validate()?;
    trace.validate()?;
    if config.max_batch == 0 {
        return Err(EngineError::Config("max batch size must be at least 1".into()));
    }
    if !(config.jitter >= 0.0 && config.solver_overhead_ms >= 0.0) {
        return Err(EngineError::Config("jitter and solver overhead must be >= 0".into()));
    }
    for (i, r) in trace.records.iter().enumerate() {
        let peak = blocks_for_tokens(r.prompt_tokens + r.output_tokens, profile.block_size);
        if peak > profile.gpu_block_budget {
            return Err(EngineError::Config(format!(
                "request {i} needs {peak} blocks for a single layer but the GPU budget is {}",
                profile.gpu_block_budget
            )));
        }
    }

    let offline_stride = match config.static_stride {
        Some(k) => DistanceChoice::from_stride(k, profile.num_layers),
        None => select_offline_stride(
            profile,
            config.max_batch,
            config
                .worst_case_tokens
                .unwrap_or(config.token_cap / config.max_batch as u64),
        )?,
    };
    let tbt_us = us_from_ms(slo.tbt_target_ms);
    let pacing = config.policy == PolicyKind::Orbit || config.deposit_for_baselines;
    let reqs = trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| Req {
            state: RequestState::new(
                i as RequestId,
                r.arrival_ms,
                r.prompt_tokens,
                r.output_tokens,
                profile.block_size,
            ),
            deposit: TokenDeposit::new(tbt_us, pacing),
            admit_order: 0,
            needs_prefill: true,
        })
        .collect();

    let mut eng = Engine {
        profile,
        slo,
        cfg: config,
        estimate: profile.clone(),
        trigger: TriggerState::seeded(profile.compute_base_ms, profile.bandwidth_blocks_per_ms),
        now: 0,
        events: EventQueue::new(),
        reqs,
        waiting: VecDeque::new(),
        batch: Vec::new(),
        paused: Vec::new(),
        table: BlockTable::new(profile.num_layers, profile.gpu_block_budget),
        installed: None,
        deferred: None,
        step: 0,
        busy: false,
        batch_changed: false,
        freed: false,
        admissions_blocked: false,
        pending_charge_blocks: 0,
        last_step_ms: 0.0,
        observed_ms: 0.0,
        predicted_ms: 0.0,
        admit_counter: 0,
        offline_stride,
        step_batch: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        log: RunLog::default(),
    };
    eng.log.push(
        0,
        "run_start",
        None,
        json!({
            "policy": config.policy.name(),
            "tbt_target_us": tbt_us,
            "tpot_target_us": us_from_ms(slo.tpot_target_ms),
            "gpu_block_budget": profile.gpu_block_budget,
            "num_layers": profile.num_layers,
            "requests": trace.records.len(),
            "max_batch": config.max_batch,
            "scheduler": config.scheduler.to_string(),
            "offline_stride": format!("{offline_stride:?}"),
        }),
    );
    for (i, r) in trace.records.iter().enumerate() {
        eng.events
            .push(us_from_ms(r.arrival_ms), EventKind::Arrival, Some(i as RequestId), 0);
    }
    eng.main_loop()?;
    let report = collect_metrics(&eng.log);
    Ok(RunOutput {
        report,
        log: eng.log,
    })
}

impl Engine<'_> {
    fn main_loop(&mut self) -> Result<(), EngineError> {
        loop {
            if !self.busy {
                self.boundary()?;
            }
            let Some(ev) = self.events.pop() else { break };
            self.now = ev.time_us;
            self.handle(ev)?;
            while self.events.peek_time() == Some(self.now) {
                let ev = self.events.pop().expect("peeked");
                self.handle(ev)?;
            }
        }
        let unfinished = self
            .reqs
            .iter()
            .any(|r| r.state.status != RequestStatus::Finished);
        if unfinished {
            return Err(EngineError::Stuck(self.now));
        }
        self.log.push(self.now, "run_end", None, json!({ "steps": self.step }));
        Ok(())
    }

    fn handle(&mut self, ev: Event) -> Result<(), EngineError> {
        match ev.kind {
            EventKind::Arrival => {
                let id = ev.request.expect("arrivals carry a request");
                let s = &self.reqs[id as usize].state;
                self.log.push(
                    self.now,
                    "arrival",
                    Some(id),
                    json!({ "prompt_tokens": s.prompt_tokens, "output_tokens": s.target_output_tokens }),
                );
                self.waiting.push_back(id);
            }
            EventKind::PrefillDone => {
                let id = ev.request.expect("prefills carry a request");
                self.busy = false;
                let r = &mut self.reqs[id as usize];
                r.needs_prefill = false;
                r.state.set_status(RequestStatus::Decoding)?;
                self.generate_token(id)?;
            }
            EventKind::DecodeStepDone => {
                self.busy = false;
                self.step += 1;
                for id in std::mem::take(&mut self.step_batch) {
                    self.generate_token(id)?;
                }
            }
            EventKind::PlanReady => {
                if let Some((_, ready)) = self.deferred.as_mut() {
                    *ready = true;
                }
                self.log.push(self.now, "plan_ready", None, json!({ "deferred": true }));
            }
            EventKind::TokenRelease => {
                let id = ev.request.expect("releases carry a request");
                if let Some(d) = self.reqs[id as usize].deposit.release(ev.arg, self.now) {
                    self.log_delivery(id, d);
                }
            }
        }
        Ok(())
    }

    fn log_delivery(&mut self, id: RequestId, d: Delivery) {
        self.log.push(
            d.delivered_us,
            "token",
            Some(id),
            TokenRow::payload(d.seq, d.generated_us, d.flushed),
        );
    }

    fn generate_token(&mut self, id: RequestId) -> Result<(), EngineError> {
        let bs = self.profile.block_size;
        let now = self.now;
        let r = &mut self.reqs[id as usize];
        r.state.record_token(bs);
        let tok = r.deposit.deposit_token(now);
        self.events
            .push(tok.release_us, EventKind::TokenRelease, Some(id), tok.seq);
        if r.state.is_complete() {
            self.finish(id)?;
        }
        Ok(())
    }

    fn finish(&mut self, id: RequestId) -> Result<(), EngineError> {
        let now = self.now;
        let r = &mut self.reqs[id as usize];
        r.state.set_status(RequestStatus::Finished)?;
        let burst = r.deposit.flush(now);
        for d in burst {
            self.log_delivery(id, d);
        }
        self.table.remove(id);
        self.batch.retain(|&b| b != id);
        self.batch_changed = true;
        self.freed = true;
        self.admissions_blocked = false;
        self.log.push(now, "finish", Some(id), json!({}));
        Ok(())
    }

    fn state(&self, id: RequestId) -> &RequestState {
        &self.reqs[id as usize].state
    }

    fn states(&self, ids: &[RequestId]) -> Vec<RequestState> {
        ids.iter().map(|&id| self.state(id).clone()).collect()
    }

    fn blocks(&self, ids: &[RequestId]) -> Vec<u64> {
        ids.iter().map(|&id| self.state(id).blocks_per_layer).collect()
    }

    fn refresh_table(&mut self) -> Result<(), EngineError> {
        for i in 0..self.batch.len() + self.paused.len() {
            let id = if i < self.batch.len() {
                self.batch[i]
            } else {
                self.paused[i - self.batch.len()]
            };
            if self.table.contains(id) {
                let b = self.state(id).blocks_per_layer;
                self.table.set_blocks(id, b)?;
            }
        }
        Ok(())
    }

    fn boundary(&mut self) -> Result<(), EngineError> {
        self.refresh_table()?;
        self.admit()?;
        if self.batch.is_empty() {
            if let Some(&id) = self.paused.first() {
                self.resume(id, "relaxed")?;
            } else {
                return Ok(());
            }
        }
        if self.cfg.policy == PolicyKind::Orbit {
            self.orbit_prepare()?;
        } else {
            self.baseline_prepare()?;
        }
        if let Some(&id) = self
            .batch
            .iter()
            .find(|&&id| self.reqs[id as usize].needs_prefill)
        {
            self.start_prefill(id)?;
        } else {
            self.start_decode()?;
        }
        Ok(())
    }

    // ---- admission -------------------------------------------------------

    fn next_candidate(&self) -> Option<usize> {
        match self.cfg.scheduler {
            Scheduler::Fcfs => (!self.waiting.is_empty()).then_some(0),
            Scheduler::Srtf => (0..self.waiting.len()).min_by(|&a, &b| {
                let (ra, rb) = (self.state(self.waiting[a]), self.state(self.waiting[b]));
                ra.remaining_output()
                    .cmp(&rb.remaining_output())
                    .then(ra.arrival_ms.total_cmp(&rb.arrival_ms))
                    .then(ra.id.cmp(&rb.id))
            }),
        }
    }

    fn admit(&mut self) -> Result<(), EngineError> {
        while !self.admissions_blocked {
            let occupancy = self.batch.len() + self.paused.len();
            if occupancy >= self.cfg.max_batch {
                break;
            }
            let Some(pos) = self.next_candidate() else { break };
            let id = self.waiting[pos];
            if occupancy > 0 && !self.admissible(id)? {
                break;
            }
            self.waiting.remove(pos);
            let r = &mut self.reqs[id as usize];
            r.state.set_status(RequestStatus::Prefilling)?;
            r.needs_prefill = true;
            r.admit_order = self.admit_counter;
            self.admit_counter += 1;
            self.batch.push(id);
            self.batch_changed = true;
            self.log.push(self.now, "admit", Some(id), json!({}));
        }
        Ok(())
    }

    fn admissible(&self, id: RequestId) -> Result<bool, EngineError> {
        let held: u64 = self
            .batch
            .iter()
            .chain(&self.paused)
            .map(|&b| self.state(b).context_tokens())
            .sum();
        if held + self.state(id).context_tokens() > self.cfg.token_cap {
            return Ok(false);
        }
        let mut ids = self.batch.clone();
        ids.push(id);
        if self.cfg.policy == PolicyKind::Orbit {
            // Fully offloaded the batch must at least fit in the buffer.
            let need: u64 = self.blocks(&ids).iter().sum();
            return Ok(need <= self.profile.gpu_block_budget);
        }
        let states = self.states(&ids);
        Ok(self.baseline_placement(&states)?.is_some())
    }

    // ---- adaptive policy -------------------------------------------------

    fn covers_batch(&self) -> bool {
        self.installed.as_ref().is_some_and(|p| p.ids == self.batch)
    }

    fn installed_fits(&self) -> Result<bool, EngineError> {
        let Some(p) = &self.installed else { return Ok(false) };
        Ok(capacity_check_for(&p.placement, &self.blocks(&p.ids), self.profile.gpu_block_budget)?
            .feasible)
    }

    fn orbit_prepare(&mut self) -> Result<(), EngineError> {
        if let Some((plan, true)) = &self.deferred {
            if plan.request_ids == self.batch {
                let (plan, _) = self.deferred.take().expect("checked");
                self.install(plan, "deferred")?;
            } else {
                self.deferred = None;
            }
        }
        let trigger = if !self.covers_batch() || !self.installed_fits()? {
            Trigger::ReplanBatch
        } else {
            let expiry = self.installed.as_ref().map_or(0, |p| p.expiry_step);
            let predicted = if self.predicted_ms > 0.0 { self.predicted_ms } else { 1.0 };
            check_triggers(
                self.observed_ms,
                predicted,
                self.batch_changed,
                self.step,
                expiry,
                self.slo.profile_mismatch_threshold,
            )
        };
        if trigger == Trigger::None {
            return Ok(());
        }
        if !self.paused.is_empty() && (self.freed || trigger == Trigger::ReplanExpiry) {
            self.resume_feasible()?;
        }
        self.freed = false;
        self.orbit_replan(trigger)
    }

    fn resume_feasible(&mut self) -> Result<(), EngineError> {
        let paused = self.states(&self.paused);
        let batch = self.states(&self.batch);
        if batch.len() >= self.cfg.max_batch {
            return Ok(());
        }
        if let Some(id) = try_resume(&paused, &batch, &self.estimate, self.slo, self.step)? {
            self.resume(id, "feasible")?;
        }
        Ok(())
    }

    fn orbit_replan(&mut self, trigger: Trigger) -> Result<(), EngineError> {
        loop {
            let batch = self.states(&self.batch);
            let paused = self.states(&self.paused);
            match solve(&batch, &paused, &self.estimate, self.slo, self.step)? {
                Solution::Feasible(plan) => {
                    let same_rows = self.covers_batch();
                    let late = self.cfg.solver_overhead_ms > 0.0
                        && self.cfg.solver_overhead_ms >= self.last_step_ms
                        && same_rows
                        && self.installed_fits()?
                        && matches!(trigger, Trigger::ReplanExpiry | Trigger::ReplanProfile);
                    if late {
                        let at = self.now + us_from_ms(self.cfg.solver_overhead_ms);
                        self.events.push(at, EventKind::PlanReady, None, 0);
                        self.deferred = Some((plan, false));
                        if let Some(p) = self.installed.as_mut() {
                            p.expiry_step = self.step + 1;
                        }
                        self.batch_changed = false;
                        self.observed_ms = 0.0;
                        return Ok(());
                    }
                    return self.install(plan, trigger_name(trigger));
                }
                Solution::Infeasible => {
                    if self.batch.len() <= 1 {
                        let plan = match best_effort_plan(&batch, &self.estimate, self.slo, self.step)? {
                            Some(p) => p,
                            None => self.fallback_plan(&batch),
                        };
                        return self.install(plan, "best_effort");
                    }
                    self.pause_victim()?;
                }
            }
        }
    }

    fn fallback_plan(&self, batch: &[RequestState]) -> Plan {
        let placement = PlacementMatrix::offloaded(batch.len(), self.profile.num_layers);
        let blocks: Vec<u64> = batch.iter().map(|r| r.blocks_per_layer).collect();
        let tokens = batch.iter().map(RequestState::context_tokens).sum();
        let comp = per_layer_compute(&self.estimate, tokens);
        let predicted_latency = decode_latency_for(
            &placement,
            &blocks,
            comp,
            self.estimate.bandwidth_blocks_per_ms,
        )
        .expect("shapes match");
        Plan {
            placement,
            request_ids: batch.iter().map(|r| r.id).collect(),
            predicted_latency,
            decode_window: 1,
            creation_step: self.step,
            expiry_step: self.step + 1,
            feasible: false,
        }
    }

    fn pause_victim(&mut self) -> Result<(), EngineError> {
        let candidates: Vec<RequestState> = self
            .batch
            .iter()
            .map(|&id| {
                let mut s = self.state(id).clone();
                s.status = RequestStatus::Decoding;
                s
            })
            .collect();
        let victim = select_victim_with(
            self.cfg.victim_rule,
            &candidates,
            self.profile.num_layers,
            &mut self.rng,
        )
        .map_err(|e| EngineError::Config(e.to_string()))?;
        if self.reqs[victim as usize].needs_prefill {
            self.unadmit(victim)
        } else {
            self.pause(victim)
        }
    }

    fn unadmit(&mut self, id: RequestId) -> Result<(), EngineError> {
        self.reqs[id as usize].state.set_status(RequestStatus::Queued)?;
        self.batch.retain(|&b| b != id);
        self.table.remove(id);
        self.waiting.push_front(id);
        self.admissions_blocked = true;
        self.batch_changed = true;
        self.log.push(self.now, "unadmit", Some(id), json!({}));
        Ok(())
    }

    fn pause(&mut self, id: RequestId) -> Result<(), EngineError> {
        let now = self.now;
        let r = &mut self.reqs[id as usize];
        r.state.set_status(RequestStatus::Paused)?;
        let deposit = r.deposit.balance_at(now);
        self.batch.retain(|&b| b != id);
        self.paused.push(id);
        if self.table.contains(id) {
            self.table.mark_paused(id)?;
        }
        self.batch_changed = true;
        self.log.push(now, "pause", Some(id), json!({ "deposit": deposit }));
        Ok(())
    }

    fn resume(&mut self, id: RequestId, why: &str) -> Result<(), EngineError> {
        self.reqs[id as usize]
            .state
            .set_status(RequestStatus::Decoding)?;
        self.paused.retain(|&p| p != id);
        self.batch.push(id);
        self.table.mark_resumed(id);
        self.batch_changed = true;
        self.log.push(self.now, "resume", Some(id), json!({ "reason": why }));
        Ok(())
    }

    fn install(&mut self, plan: Plan, why: &str) -> Result<(), EngineError> {
        let ids = plan.request_ids.clone();
        let blocks = self.blocks(&ids);
        let buffer = prefetch_buffer_for(&plan.placement, &blocks)?;
        let out = self.table.apply_plan(&ids, &blocks, &plan.placement, buffer)?;
        self.pending_charge_blocks += out.fetched_blocks;
        for (id, layer) in out.evicted {
            self.log.push(self.now, "evict", Some(id), json!({ "layer": layer }));
        }
        self.log.push(
            self.now,
            "plan",
            None,
            json!({
                "trigger": why,
                "feasible": plan.feasible,
                "window": plan.decode_window,
                "expiry_step": plan.expiry_step,
                "predicted_ms": plan.predicted_latency.total_latency_ms,
                "ids": ids,
                "offloaded": (0..plan.placement.rows()).map(|r| plan.placement.offloaded_layers(r)).collect::<Vec<_>>(),
                "fetched_blocks": out.fetched_blocks,
            }),
        );
        self.installed = Some(Installed {
            ids,
            placement: plan.placement,
            expiry_step: plan.expiry_step,
        });
        self.batch_changed = false;
        self.observed_ms = 0.0;
        self.predicted_ms = 0.0;
        Ok(())
    }

    // ---- baselines -------------------------------------------------------

    fn baseline_placement(
        &self,
        states: &[RequestState],
    ) -> Result<Option<PlacementMatrix>, EngineError> {
        let p = self.profile;
        let res = match self.cfg.policy {
            PolicyKind::DeepspeedLike => plan_deepspeed(states, p),
            PolicyKind::FlexgenLike => {
                let m = uniform_placement(states.len(), p.num_layers, self.offline_stride);
                let blocks: Vec<u64> = states.iter().map(|r| r.blocks_per_layer).collect();
                if capacity_check_for(&m, &blocks, p.gpu_block_budget)?.feasible {
                    Ok(m)
                } else {
                    Err(PolicyError::OverBudget {
                        demand: 0,
                        budget: p.gpu_block_budget,
                    })
                }
            }
            PolicyKind::FlexgenPlus => plan_flexgen_plus(states, p).map(|x| x.1),
            PolicyKind::SloAwareUniform => plan_slo_aware_uniform(states, p, self.slo).map(|x| x.1),
            PolicyKind::DynamicHeuristic => plan_dynamic_heuristic(states, p),
            PolicyKind::Orbit => unreachable!("adaptive policy has its own planner"),
        };
        match res {
            Ok(m) => Ok(Some(m)),
            Err(PolicyError::OverBudget { .. }) => Ok(None),
            Err(PolicyError::Core(e)) => Err(e.into()),
        }
    }

    fn baseline_prepare(&mut self) -> Result<(), EngineError> {
        loop {
            let replace = !self.covers_batch()
                || self.batch_changed
                || self.cfg.policy == PolicyKind::DynamicHeuristic;
            let states = self.states(&self.batch);
            let blocks = self.blocks(&self.batch);
            let candidate = if replace {
                self.baseline_placement(&states)?
            } else {
                self.installed.as_ref().map(|p| p.placement.clone())
            };
            let fits = match &candidate {
                Some(m) => capacity_check_for(m, &blocks, self.profile.gpu_block_budget)?.feasible,
                None => false,
            };
            if fits {
                let m = candidate.expect("fits implies a placement");
                let unchanged = self
                    .installed
                    .as_ref()
                    .is_some_and(|p| p.ids == self.batch && p.placement == m);
                if unchanged {
                    let buffer = prefetch_buffer_for(&m, &blocks)?;
                    self.table.set_buffer(buffer);
                    self.batch_changed = false;
                    return Ok(());
                }
                let plan = self.static_plan(m, &states, true)?;
                return self.install(plan, "baseline");
            }
            if self.batch.len() > 1 {
                let victim = *self
                    .batch
                    .iter()
                    .max_by_key(|&&id| self.reqs[id as usize].admit_order)
                    .expect("non-empty batch");
                self.preempt(victim)?;
                continue;
            }
            let m = PlacementMatrix::offloaded(1, self.profile.num_layers);
            let plan = self.static_plan(m, &states, false)?;
            return self.install(plan, "fallback");
        }
    }

    fn static_plan(
        &self,
        placement: PlacementMatrix,
        states: &[RequestState],
        feasible: bool,
    ) -> Result<Plan, EngineError> {
        let blocks: Vec<u64> = states.iter().map(|r| r.blocks_per_layer).collect();
        let comp = per_layer_compute(self.profile, states.iter().map(RequestState::context_tokens).sum());
        let predicted_latency =
            decode_latency_for(&placement, &blocks, comp, self.profile.bandwidth_blocks_per_ms)?;
        Ok(Plan {
            placement,
            request_ids: states.iter().map(|r| r.id).collect(),
            predicted_latency,
            decode_window: 1,
            creation_step: self.step,
            expiry_step: u64::MAX,
            feasible,
        })
    }

    fn preempt(&mut self, id: RequestId) -> Result<(), EngineError> {
        let r = &mut self.reqs[id as usize];
        r.state.set_status(RequestStatus::Queued)?;
        r.needs_prefill = true;
        self.batch.retain(|&b| b != id);
        self.table.remove(id);
        self.waiting.push_front(id);
        self.batch_changed = true;
        self.log.push(self.now, "preempt", Some(id), json!({}));
        Ok(())
    }

    // ---- execution -------------------------------------------------------

    fn start_prefill(&mut self, id: RequestId) -> Result<(), EngineError> {
        let tokens = self.state(id).context_tokens();
        let dur = us_from_ms(tokens as f64 * self.profile.prefill_per_token_ms).max(1);
        self.busy = true;
        self.events
            .push(self.now + dur, EventKind::PrefillDone, Some(id), 0);
        self.log.push(
            self.now,
            "prefill",
            Some(id),
            json!({ "tokens": tokens, "duration_us": dur }),
        );
        Ok(())
    }

    fn start_decode(&mut self) -> Result<(), EngineError> {
        let ids = self.batch.clone();
        let installed = self.installed.as_ref().expect("a plan is installed before decoding");
        debug_assert_eq!(installed.ids, ids);
        let placement = installed.placement.clone();
        let blocks = self.blocks(&ids);
        let tokens: u64 = ids.iter().map(|&id| self.state(id).context_tokens()).sum();
        self.table.set_buffer(prefetch_buffer_for(&placement, &blocks)?);
        for (id, layer) in self.table.evict_until_fits() {
            self.log.push(self.now, "evict", Some(id), json!({ "layer": layer }));
        }

        let nominal = per_layer_compute(self.profile, tokens);
        let (fc, fb) = if self.cfg.jitter > 0.0 {
            let mut noise = || {
                let z: f64 = self.rng.sample(StandardNormal);
                (1.0 + self.cfg.jitter * z).clamp(0.5, 1.5)
            };
            (noise(), noise())
        } else {
            (1.0, 1.0)
        };
        let comp = nominal * fc;
        let bw = self.profile.bandwidth_blocks_per_ms * fb;
        let actual = decode_latency_for(&placement, &blocks, comp, bw)?;
        let est_comp = per_layer_compute(&self.estimate, tokens);
        let predicted =
            decode_latency_for(&placement, &blocks, est_comp, self.estimate.bandwidth_blocks_per_ms)?;
        if self.cfg.policy == PolicyKind::Orbit && self.cfg.jitter > 0.0 {
            let observed_base = comp - self.profile.compute_per_token_ms * tokens as f64;
            self.trigger = ewma_update(&self.trigger, observed_base, bw, self.profile.ewma_decay);
            self.estimate.compute_base_ms = self.trigger.ewma_compute_ms.max(1e-6);
            self.estimate.bandwidth_blocks_per_ms =
                self.trigger.ewma_bandwidth_blocks_per_ms.max(1e-6);
        }
        self.observed_ms = actual.total_latency_ms;
        self.predicted_ms = predicted.total_latency_ms;

        let charge_ms = self.pending_charge_blocks as f64 / bw;
        self.pending_charge_blocks = 0;
        let latency_us = us_from_ms(actual.total_latency_ms);
        let charge_us = us_from_ms(charge_ms);
        let dur = (latency_us + charge_us).max(1);
        self.last_step_ms = dur as f64 / 1e3;
        self.log.push(
            self.now,
            "decode_step",
            None,
            json!({
                "step": self.step,
                "duration_us": dur,
                "latency_us": latency_us,
                "charge_us": charge_us,
                "stall_us": us_from_ms(actual.total_stall_ms),
                "usage_blocks": self.table.usage(),
                "batch": ids,
            }),
        );
        self.step_batch = ids;
        self.busy = true;
        self.events
            .push(self.now + dur, EventKind::DecodeStepDone, None, 0);
        Ok(())
    }
}

fn trigger_name(t: Trigger) -> &'static str {
    match t {
        Trigger::None => "none",
        Trigger::ReplanProfile => "profile",
        Trigger::ReplanBatch => "batch",
        Trigger::ReplanExpiry => "expiry",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::TraceRecord;

    fn trace(rows: &[(f64, u64, u64)]) -> Trace {
        Trace {
            records: rows
                .iter()
                .map(|&(a, p, o)| TraceRecord {
                    arrival_ms: a,
                    prompt_tokens: p,
                    output_tokens: o,
                })
                .collect(),
            meta: Default::default(),
        }
    }

    #[test]
    fn empty_trace() {
        let p = SystemProfile::default();
        let out = run(&Trace::default(), &p, &slo_for_scale(&p, 1.5), &EngineConfig::default()).unwrap();
        assert_eq!(out.report.requests_total, 0);
        assert_eq!(out.report.visible_violations, 0);
    }

    #[test]
    fn lone_resident_request_has_flat_tbt() {
        let p = SystemProfile {
            compute_base_ms: 0.5,
            compute_per_token_ms: 0.0,
            ..SystemProfile::default()
        };
        let slo = slo_for_scale(&p, 1.5);
        // Policies that keep a lone request resident when it fits.
        for policy in [PolicyKind::Orbit, PolicyKind::FlexgenPlus, PolicyKind::DynamicHeuristic] {
            let cfg = EngineConfig { policy, ..EngineConfig::default() };
            let out = run(&trace(&[(0.0, 200, 20)]), &p, &slo, &cfg).unwrap();
            let steps: Vec<_> = out.log.of_kind("decode_step").collect();
            assert_eq!(steps.len(), 19, "{policy}");
            for s in steps {
                assert_eq!(s.payload["duration_us"].as_u64(), Some(16_000), "{policy}");
                assert_eq!(s.payload["stall_us"].as_u64(), Some(0));
            }
            assert_eq!(out.report.tbt_attainment, 1.0);
            assert_eq!(out.report.tokens_delivered, 20);
        }
        for policy in PolicyKind::ALL {
            let cfg = EngineConfig { policy, ..EngineConfig::default() };
            let out = run(&trace(&[(0.0, 200, 20)]), &p, &slo, &cfg).unwrap();
            assert_eq!(out.report.tokens_delivered, 20, "{policy}");
        }
    }

    #[test]
    fn over_budget_request_is_a_config_error() {
        let p = SystemProfile {
            gpu_block_budget: 10,
            ..SystemProfile::default()
        };
        let err = run(&trace(&[(0.0, 500, 5)]), &p, &SloConfig::new(10.0, 10.0), &EngineConfig::default());
        assert!(matches!(err, Err(EngineError::Config(_))));
    }

    #[test]
    fn base_slo_uses_largest_resident_request() {
        let p = SystemProfile::default();
        let tokens = largest_resident_tokens(&p);
        assert_eq!(tokens, p.gpu_block_budget / 32 * 16);
        assert_eq!(base_slo_ms(&p), 32.0 * per_layer_compute(&p, tokens));
    }
}
