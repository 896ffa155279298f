//! Policy × SLO-scale × seed sweeps over generated traces.

use serde::{Deserialize, Serialize};

use crate::engine::{audit_deposits, run, slo_for_scale, DepositAudit, EngineConfig, MetricsReport, RunOutput};
use crate::policies::PolicyKind;
use crate::types::SystemProfile;
use crate::workload::{generate, GenParams, LengthSpec, Trace, WorkloadError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub seeds: Vec<u64>,
    pub scales: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    /// Requests per minute.
    pub rate: f64,
    pub cv: f64,
    pub count: usize,
    pub lengths: LengthSpec,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            scales: vec![1.0, 1.5, 2.5],
            policies: PolicyKind::ALL.to_vec(),
            rate: 6.0,
            cv: 1.0,
            count: 100,
            lengths: LengthSpec::default(),
        }
    }
}

impl SuiteSpec {
    pub fn trace(&self, seed: u64) -> Result<Trace, WorkloadError> {
        generate(&GenParams {
            seed,
            rate: self.rate,
            cv: self.cv,
            count: self.count,
            lengths: self.lengths,
            long_fraction: 0.0,
            long_prompt: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub policy: PolicyKind,
    pub scale: f64,
    pub report: Option<MetricsReport>,
    pub audit: Option<DepositAudit>,
    pub error: Option<String>,
}

pub fn run_cell(
    trace: &Trace,
    profile: &SystemProfile,
    policy: PolicyKind,
    scale: f64,
    base: &EngineConfig,
) -> Result<RunOutput, crate::engine::EngineError> {
    let cfg = EngineConfig {
        policy,
        ..base.clone()
    };
    run(trace, profile, &slo_for_scale(profile, scale), &cfg)
}

/// Runs every cell; failed cells carry their error and the sweep goes on.
pub fn run_suite(
    spec: &SuiteSpec,
    profile: &SystemProfile,
    base: &EngineConfig,
) -> Result<Vec<CellResult>, WorkloadError> {
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let trace = spec.trace(seed)?;
        for &policy in &spec.policies {
            for &scale in &spec.scales {
                let cell = match run_cell(&trace, profile, policy, scale, base) {
                    Ok(run) => CellResult {
                        seed,
                        policy,
                        scale,
                        audit: Some(audit_deposits(&run.log)),
                        report: Some(run.report),
                        error: None,
                    },
                    Err(e) => CellResult {
                        seed,
                        policy,
                        scale,
                        report: None,
                        audit: None,
                        error: Some(e.to_string()),
                    },
                };
                out.push(cell);
            }
        }
    }
    Ok(out)
}
