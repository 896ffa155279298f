use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kvplace_core::controller::VictimRule;
use kvplace_core::engine::{
    base_slo_ms, collect_metrics, run, slo_for_scale, EngineConfig, MetricsReport, RunLog, Scheduler,
};
use kvplace_core::policies::PolicyKind;
use kvplace_core::workload::{generate, GenParams, LengthSpec, Trace};
use kvplace_core::SystemProfile;

#[derive(Parser)]
#[command(name = "kvplace", version, about = "KV-cache placement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic request trace.
    GenTrace(GenTraceArgs),
    /// Run one policy over a trace.
    Simulate(SimulateArgs),
    /// Run every policy x SLO-scale cell over a trace and print a table.
    Compare(CompareArgs),
    /// Rebuild a metrics report from a saved event log.
    Report(ReportArgs),
    /// Write the default system profile as TOML.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct GenTraceArgs {
    /// Requests per minute.
    #[arg(long, default_value_t = 6.0)]
    rate: f64,
    /// Coefficient of variation of inter-arrival gaps (1 = Poisson).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    cv: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Fixed prompt length instead of the default log-normal mix.
    #[arg(long, requires = "fixed_output")]
    fixed_prompt: Option<u64>,
    #[arg(long, requires = "fixed_prompt")]
    fixed_output: Option<u64>,
    /// Fraction of requests given a `--long-prompt`-token prompt.
    #[arg(long, default_value_t = 0.0)]
    long_fraction: f64,
    #[arg(long, default_value_t = 6_000)]
    long_prompt: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Trace file written by `gen-trace`.
    #[arg(long)]
    trace: PathBuf,
    /// System profile TOML; the built-in default when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_batch: usize,
    /// Cap on the summed context tokens of the running batch.
    #[arg(long, default_value_t = 32_768)]
    token_cap: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "fcfs")]
    scheduler: Scheduler,
    /// Pace baseline deliveries through the token deposit.
    #[arg(long)]
    deposit_for_baselines: bool,
    /// Pause victim rule: largest, shortest or random.
    #[arg(long, default_value = "largest")]
    victim: VictimRule,
    /// Relative noise on per-step compute and bandwidth.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Synthetic planner run time in ms.
    #[arg(long, default_value_t = 0.0)]
    solver_overhead_ms: f64,
    /// Fixed stride for flexgen_like instead of the offline choice.
    #[arg(long)]
    static_stride: Option<u32>,
    /// Per-request tokens of the worst case flexgen_like provisions for.
    #[arg(long)]
    worst_case_tokens: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "orbit")]
    policy: PolicyKind,
    /// Multiplier on the base TBT/TPOT target.
    #[arg(long, default_value_t = 1.5)]
    slo_scale: f64,
    /// Metrics report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-token delivery series (CSV).
    #[arg(long)]
    deliveries: Option<PathBuf>,
    /// Full event log (JSON lines).
    #[arg(long)]
    event_log: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated policies; all when omitted.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<PolicyKind>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.5, 2.5])]
    scales: Vec<f64>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Event log written by `simulate --event-log`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => compare(a),
        Command::Report(a) => report(a),
        Command::Profile(a) => {
            write(&a.out, &SystemProfile::default().to_toml_string())?;
            println!("wrote {}", a.out.display());
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_trace(a: GenTraceArgs) -> Result<()> {
    let mut params = GenParams::new(a.seed, a.rate, a.cv, a.count)
        .with_long_requests(a.long_fraction, a.long_prompt);
    if let (Some(prompt), Some(output)) = (a.fixed_prompt, a.fixed_output) {
        params.lengths = LengthSpec::Fixed { prompt, output };
    }
    let trace = generate(&params)?;
    trace.save(&a.out)?;
    println!(
        "wrote {}: {} requests, mean prompt {:.1} tokens, mean output {:.1} tokens, realized rate {:.3}/min",
        a.out.display(),
        trace.len(),
        trace.mean_prompt(),
        trace.mean_output(),
        trace.realized_rate()
    );
    Ok(())
}

struct Loaded {
    trace: Trace,
    profile: SystemProfile,
    config: EngineConfig,
}

fn load(a: &RunArgs) -> Result<Loaded> {
    let trace = Trace::load(&a.trace).with_context(|| format!("reading trace {}", a.trace.display()))?;
    let profile = match &a.profile {
        Some(p) => SystemProfile::load(p).with_context(|| format!("reading profile {}", p.display()))?,
        None => SystemProfile::default(),
    };
    let config = EngineConfig {
        max_batch: a.max_batch,
        token_cap: a.token_cap,
        scheduler: a.scheduler,
        deposit_for_baselines: a.deposit_for_baselines,
        victim_rule: a.victim,
        seed: a.seed,
        jitter: a.jitter,
        solver_overhead_ms: a.solver_overhead_ms,
        static_stride: a.static_stride,
        worst_case_tokens: a.worst_case_tokens,
        ..EngineConfig::default()
    };
    Ok(Loaded { trace, profile, config })
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        bail!("SLO scale must be > 0, got {scale}");
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    check_scale(a.slo_scale)?;
    let l = load(&a.run)?;
    let slo = slo_for_scale(&l.profile, a.slo_scale);
    let cfg = EngineConfig {
        policy: a.policy,
        ..l.config
    };
    let out = run(&l.trace, &l.profile, &slo, &cfg)?;
    let json = out.report.to_json();
    match &a.report {
        Some(p) => write(p, &json)?,
        None => print!("{json}"),
    }
    if let Some(p) = &a.deliveries {
        write(p, &out.log.delivery_csv())?;
    }
    if let Some(p) = &a.event_log {
        write(p, &out.log.to_jsonl())?;
    }
    if a.report.is_some() {
        println!("{}", summary_line(&out.report));
    }
    Ok(())
}

fn summary_line(r: &MetricsReport) -> String {
    format!(
        "{}: TBT attainment {:.4}, TPOT attainment {:.4}, P99 TBT {:.1} ms, throughput {:.2}/min, mean GPU utilization {:.3}",
        r.policy, r.tbt_attainment, r.tpot_attainment, r.tbt_p99_ms, r.throughput_rpm, r.mean_gpu_utilization
    )
}

const TABLE_HEADER: &str = "policy,slo_scale,tbt_attainment,tpot_attainment,tbt_p95_ms,tbt_p99_ms,throughput_rpm,e2e_mean_ms,mean_gpu_utilization,pauses,preemptions,error";

fn compare(a: CompareArgs) -> Result<()> {
    for &s in &a.scales {
        check_scale(s)?;
    }
    let l = load(&a.run)?;
    let policies = if a.policies.is_empty() {
        PolicyKind::ALL.to_vec()
    } else {
        a.policies.clone()
    };
    println!("base SLO {:.3} ms", base_slo_ms(&l.profile));
    println!(
        "{:<18} {:>5} {:>8} {:>8} {:>9} {:>9} {:>7} {:>10} {:>6}",
        "policy", "scale", "tbt_att", "tpot_att", "p95_ms", "p99_ms", "rpm", "e2e_ms", "util"
    );
    let mut csv = format!("{TABLE_HEADER}\n");
    for &policy in &policies {
        for &scale in &a.scales {
            let cfg = EngineConfig {
                policy,
                ..l.config.clone()
            };
            match run(&l.trace, &l.profile, &slo_for_scale(&l.profile, scale), &cfg) {
                Ok(out) => {
                    let r = &out.report;
                    println!(
                        "{:<18} {:>5.2} {:>8.4} {:>8.4} {:>9.1} {:>9.1} {:>7.2} {:>10.1} {:>6.3}",
                        policy.name(),
                        scale,
                        r.tbt_attainment,
                        r.tpot_attainment,
                        r.tbt_p95_ms,
                        r.tbt_p99_ms,
                        r.throughput_rpm,
                        r.e2e_mean_ms,
                        r.mean_gpu_utilization
                    );
                    writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{},{},{},{},",
                        policy.name(),
                        scale,
                        r.tbt_attainment,
                        r.tpot_attainment,
                        r.tbt_p95_ms,
                        r.tbt_p99_ms,
                        r.throughput_rpm,
                        r.e2e_mean_ms,
                        r.mean_gpu_utilization,
                        r.pauses,
                        r.preemptions
                    )?;
                }
                Err(e) => {
                    println!("{:<18} {:>5.2} FAILED: {e}", policy.name(), scale);
                    let msg = e.to_string().replace([',', '\n'], ";");
                    writeln!(csv, "{},{},,,,,,,,,,{msg}", policy.name(), scale)?;
                }
            }
        }
    }
    if let Some(p) = &a.out {
        write(p, &csv)?;
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let log = RunLog::from_jsonl(&text).map_err(anyhow::Error::msg)?;
    let json = collect_metrics(&log).to_json();
    match &a.out {
        Some(p) => write(p, &json),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}
